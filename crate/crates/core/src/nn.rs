//! Minimal dense parameter storage, initialisation and the momentum optimizer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Named row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn normal<R: Rng + ?Sized>(name: &str, shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(name, shape);
        if std != 0.0 {
            for v in &mut t.data {
                let z: f64 = StandardNormal.sample(rng);
                *v = T::from_f64_lossy(z * std);
            }
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// `self · x` for a 2-D tensor.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(self.cols(), x.len());
        (0..self.rows()).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y` for a 2-D tensor.
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(self.rows(), y.len());
        let mut out = vec![T::zero(); self.cols()];
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// Accumulates the outer product `y ⊗ x` into a 2-D tensor.
    pub fn add_outer(&mut self, y: &[T], x: &[T]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for (w, &xc) in self.row_mut(r).iter_mut().zip(x) {
                *w += yr * xc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Ordered collection of tensors making up one model component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(&t.name, &t.shape))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (ti, t) in self.tensors.iter().enumerate() {
            if index < t.data.len() {
                return (ti, index);
            }
            index -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Reads one coordinate through a flat view over all tensors.
    pub fn get_flat(&self, index: usize) -> T {
        let (t, i) = self.locate(index);
        self.tensors[t].data[i]
    }

    pub fn set_flat(&mut self, index: usize, value: T) {
        let (t, i) = self.locate(index);
        self.tensors[t].data[i] = value;
    }

    pub fn name_of_flat(&self, index: usize) -> &str {
        &self.tensors[self.locate(index).0].name
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            axpy(T::one(), &b.data, &mut a.data);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Optimizer hyperparameters shared by both training loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty coefficient `λ`; the step uses `g + λ·θ`.
    #[serde(default)]
    pub weight_decay: f64,
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    learning_rate: T,
    momentum: T,
    weight_decay: T,
    velocity: ParamSet<T>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(cfg: SgdConfig, shape_of: &ParamSet<T>) -> Self {
        Self {
            learning_rate: T::from_f64_lossy(cfg.learning_rate),
            momentum: T::from_f64_lossy(cfg.momentum),
            weight_decay: T::from_f64_lossy(cfg.weight_decay),
            velocity: shape_of.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        let lr = self.learning_rate;
        let mu = self.momentum;
        let wd = self.weight_decay;
        for ((p, g), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.velocity.tensors)
        {
            for ((pi, &gi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParamSet<f64> {
        ParamSet::new(vec![
            Tensor {
                name: "w".into(),
                shape: vec![2, 2],
                data: vec![1.0, 2.0, 3.0, 4.0],
            },
            Tensor {
                name: "b".into(),
                shape: vec![2],
                data: vec![5.0, 6.0],
            },
        ])
    }

    #[test]
    fn flat_view_spans_tensors() {
        let mut p = toy();
        assert_eq!(p.len(), 6);
        assert_eq!(p.get_flat(4), 5.0);
        assert_eq!(p.name_of_flat(3), "w");
        p.set_flat(5, -1.0);
        assert_eq!(p.tensors[1].data, vec![5.0, -1.0]);
    }

    #[test]
    fn matvec_and_transpose() {
        let w = &toy().tensors[0];
        assert_eq!(w.matvec(&[1.0, 1.0]), vec![3.0, 7.0]);
        assert_eq!(w.matvec_t(&[1.0, 1.0]), vec![4.0, 6.0]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = toy();
        let mut g = p.zeros_like();
        g.tensors[1].data = vec![1.0, 0.0];
        let mut opt = SgdMomentum::new(
            SgdConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            &p,
        );
        opt.step(&mut p, &g);
        assert!((p.tensors[1].data[0] - 4.9).abs() < 1e-12);
        opt.step(&mut p, &g);
        // second step moves by lr * (0.9 * 1 + 1)
        assert!((p.tensors[1].data[0] - (4.9 - 0.19)).abs() < 1e-12);
        assert_eq!(p.tensors[0].data, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
