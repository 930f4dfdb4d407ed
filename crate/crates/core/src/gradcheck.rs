//! Central finite-difference checks for hand-written gradients.

use rand::seq::index;
use rand::Rng;

use crate::nn::ParamSet;
use crate::scalar::Scalar;

/// Gradients smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.rel_error)
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.coordinates.extend(other.coordinates);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Up to `per_tensor` distinct flat indices from every tensor.
pub fn sample_coordinates<T: Scalar, R: Rng + ?Sized>(params: &ParamSet<T>, per_tensor: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for t in &params.tensors {
        let n = t.data.len();
        let mut picked: Vec<usize> = index::sample(rng, n, per_tensor.min(n)).into_iter().collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| offset + i));
        offset += n;
    }
    out
}

/// Compares `analytic` with `(L(θ+h) − L(θ−h)) / 2h` at each coordinate.
/// `params` is restored after every probe.
pub fn check_gradient<T: Scalar>(
    params: &mut ParamSet<T>,
    analytic: &ParamSet<T>,
    coords: &[usize],
    step: f64,
    mut loss: impl FnMut(&ParamSet<T>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for &i in coords {
        let original = params.get_flat(i);
        let x = original.to_f64_lossy();
        params.set_flat(i, T::from_f64_lossy(x + step));
        let up = loss(params);
        params.set_flat(i, T::from_f64_lossy(x - step));
        let down = loss(params);
        params.set_flat(i, original);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.get_flat(i).to_f64_lossy();
        report.coordinates.push(CoordinateCheck {
            index: i,
            tensor: params.name_of_flat(i).to_string(),
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut p = ParamSet::new(vec![Tensor {
            name: "w".into(),
            shape: vec![3],
            data: vec![1.0f64, -2.0, 0.5],
        }]);
        let loss = |p: &ParamSet<f64>| p.tensors[0].data.iter().map(|w| w * w * w).sum::<f64>();
        let good = ParamSet::new(vec![Tensor {
            name: "w".into(),
            shape: vec![3],
            data: vec![3.0, 12.0, 0.75],
        }]);
        let r = check_gradient(&mut p, &good, &[0, 1, 2], 1e-5, loss);
        assert!(r.max_rel_error() < 1e-8, "{r:?}");
        let mut bad = good.clone();
        bad.tensors[0].data[1] = 11.0;
        let r = check_gradient(&mut p, &bad, &[0, 1, 2], 1e-5, loss);
        assert_eq!(r.worst().unwrap().index, 1);
        assert_eq!(p.tensors[0].data, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn sampling_covers_every_tensor() {
        let p = ParamSet::new(vec![Tensor::<f64>::zeros("a", &[10]), Tensor::zeros("b", &[2])]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let c = sample_coordinates(&p, 4, &mut rng);
        assert_eq!(c.len(), 6);
        assert_eq!(c.iter().filter(|&&i| i >= 10).count(), 2);
    }
}
