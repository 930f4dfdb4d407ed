//! Question–knowledge retrieval with a trainable cross-encoder scorer.
//!
//! The scorer reads a question block (question plus its four candidate
//! answers) together with one knowledge sentence and emits a similarity in
//! `[0, 1]`. Each side is mean-pooled over token embeddings and projected
//! through a shared `tanh` layer; the pair feature `[p; q; p ⊙ q]` feeds a
//! logistic head. Training minimises binary cross-entropy over matching and
//! sampled non-matching pairs with momentum SGD.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::corpus::QuestionInstance;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::nn::{dot, ParamSet, SgdConfig, SgdMomentum, Tensor};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::text::{tokenize, Vocab, ANSWERS, SEP};

pub const CHECKPOINT_KIND: &str = "scorer";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerInput {
    pub question_block: String,
    pub knowledge_text: String,
}

/// `question [A1] c1 [SEP] c2 [SEP] c3 [SEP] c4`
pub fn question_block(q: &QuestionInstance) -> String {
    let answers = q.candidates.join(&format!(" {SEP} "));
    format!("{} {ANSWERS} {answers}", q.question)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredKnowledge {
    pub kb_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            negatives_per_positive: 4,
            epochs: 500,
            batch_size: 16,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            embed_dim: 32,
            hidden_dim: 32,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("retrieval: {m}")));
        if self.top_k == 0 {
            return fail("top_k must be at least 1");
        }
        if self.negatives_per_positive == 0 {
            return fail("negatives_per_positive must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return fail("embedding and hidden dimensions must be positive");
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// A scored training example: one question block paired with one knowledge
/// sentence, labelled 1 for the question's own knowledge and 0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub question_id: String,
    pub kb_id: usize,
    pub input: ScorerInput,
    pub label: bool,
}

fn require_knowledge<'a>(
    questions: &[&'a QuestionInstance],
    kb: &KnowledgeBase,
) -> Result<Vec<(&'a QuestionInstance, usize)>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(questions.len());
    for q in questions {
        match kb.find(&q.knowledge_text) {
            Some(id) => out.push((*q, id)),
            None => missing.push(q.id.clone()),
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(Error::MissingKnowledge(missing))
    }
}

/// One positive and up to `negatives_per_positive` negatives per question.
/// Negatives are drawn without replacement from the rest of the knowledge
/// base with a generator seeded by `cfg.seed`.
pub fn make_training_pairs(
    questions: &[&QuestionInstance],
    kb: &KnowledgeBase,
    cfg: &RetrievalConfig,
) -> Result<Vec<LabeledPair>> {
    let resolved = require_knowledge(questions, kb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = kb.len();
    let n_neg = cfg.negatives_per_positive.min(n - 1);
    let mut pairs = Vec::with_capacity(resolved.len() * (1 + n_neg));
    for (q, own) in resolved {
        let block = question_block(q);
        let pair = |kb_id: usize, label: bool| LabeledPair {
            question_id: q.id.clone(),
            kb_id,
            input: ScorerInput {
                question_block: block.clone(),
                knowledge_text: kb.lookup(kb_id).expect("id in range").text.clone(),
            },
            label,
        };
        pairs.push(pair(own, true));
        // sample from the n-1 other ids, mapping past the own id
        for slot in index::sample(&mut rng, n - 1, n_neg).into_iter() {
            let kb_id = if slot + 1 >= own { slot + 2 } else { slot + 1 };
            pairs.push(pair(kb_id, false));
        }
    }
    Ok(pairs)
}

/// Anything that can score a (question block, knowledge sentence) pair.
pub trait PairScorer {
    fn score_pair(&self, input: &ScorerInput) -> f64;

    /// Scores one question block against many knowledge sentences.
    fn score_against(&self, question_block: &str, knowledge: &[&str]) -> Vec<f64> {
        knowledge
            .iter()
            .map(|k| {
                self.score_pair(&ScorerInput {
                    question_block: question_block.to_string(),
                    knowledge_text: (*k).to_string(),
                })
            })
            .collect()
    }
}

const SCORER_TENSORS: [&str; 5] = ["embedding", "proj_w", "proj_b", "head_w", "head_b"];
const EMB: usize = 0;
const PROJ_W: usize = 1;
const PROJ_B: usize = 2;
const HEAD_W: usize = 3;
const HEAD_B: usize = 4;

/// Token ids of both sides of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub question: Vec<usize>,
    pub knowledge: Vec<usize>,
}

struct SideCache<T> {
    pooled: Vec<T>,
    hidden: Vec<T>,
}

struct Forward<T> {
    q: SideCache<T>,
    k: SideCache<T>,
    features: Vec<T>,
    logit: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoder<T> {
    vocab: Vocab,
    embed_dim: usize,
    hidden_dim: usize,
    params: ParamSet<T>,
}

impl<T: Scalar> CrossEncoder<T> {
    /// Random embeddings and projection, zero head.
    pub fn init(vocab: Vocab, embed_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let params = ParamSet::new(vec![
            Tensor::normal(SCORER_TENSORS[EMB], &[v, embed_dim], 1.0, &mut rng),
            Tensor::normal(
                SCORER_TENSORS[PROJ_W],
                &[hidden_dim, embed_dim],
                1.0 / (embed_dim as f64).sqrt(),
                &mut rng,
            ),
            Tensor::zeros(SCORER_TENSORS[PROJ_B], &[hidden_dim]),
            Tensor::zeros(SCORER_TENSORS[HEAD_W], &[3 * hidden_dim]),
            Tensor::zeros(SCORER_TENSORS[HEAD_B], &[1]),
        ]);
        Self {
            vocab,
            embed_dim,
            hidden_dim,
            params,
        }
    }

    /// Builds a model from explicit parameters; shapes are checked.
    pub fn from_params(vocab: Vocab, params: ParamSet<T>) -> Result<Self> {
        let shape_err = |what: &str| Error::Checkpoint(format!("scorer parameter shapes: {what}"));
        if params.tensors.len() != SCORER_TENSORS.len() {
            return Err(shape_err("wrong tensor count"));
        }
        let emb = &params.tensors[EMB].shape;
        let proj = &params.tensors[PROJ_W].shape;
        if emb.len() != 2 || emb[0] != vocab.len() || proj.len() != 2 || proj[1] != emb[1] {
            return Err(shape_err("embedding/projection"));
        }
        let (embed_dim, hidden_dim) = (emb[1], proj[0]);
        if params.tensors[PROJ_B].shape != [hidden_dim]
            || params.tensors[HEAD_W].shape != [3 * hidden_dim]
            || params.tensors[HEAD_B].shape != [1]
        {
            return Err(shape_err("bias/head"));
        }
        Ok(Self {
            vocab,
            embed_dim,
            hidden_dim,
            params,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn encode_ids(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(&tokenize(text))
    }

    pub fn encode_pair(&self, input: &ScorerInput) -> EncodedPair {
        EncodedPair {
            question: self.encode_ids(&input.question_block),
            knowledge: self.encode_ids(&input.knowledge_text),
        }
    }

    fn side(&self, ids: &[usize]) -> SideCache<T> {
        let emb = &self.params.tensors[EMB];
        let mut pooled = vec![T::zero(); self.embed_dim];
        if !ids.is_empty() {
            for &id in ids {
                for (p, &e) in pooled.iter_mut().zip(emb.row(id)) {
                    *p += e;
                }
            }
            let n = T::from_count(ids.len());
            pooled.iter_mut().for_each(|p| *p /= n);
        }
        let pre = self.params.tensors[PROJ_W].matvec(&pooled);
        let hidden = pre
            .iter()
            .zip(&self.params.tensors[PROJ_B].data)
            .map(|(&a, &b)| (a + b).tanh())
            .collect();
        SideCache { pooled, hidden }
    }

    fn forward(&self, pair: &EncodedPair) -> Forward<T> {
        let q = self.side(&pair.question);
        let k = self.side(&pair.knowledge);
        let (features, logit) = self.head(&q.hidden, &k.hidden);
        Forward {
            q,
            k,
            features,
            logit,
        }
    }

    fn head(&self, p: &[T], q: &[T]) -> (Vec<T>, T) {
        let mut features = Vec::with_capacity(3 * self.hidden_dim);
        features.extend_from_slice(p);
        features.extend_from_slice(q);
        features.extend(p.iter().zip(q).map(|(&a, &b)| a * b));
        let logit = dot(&self.params.tensors[HEAD_W].data, &features) + self.params.tensors[HEAD_B].data[0];
        (features, logit)
    }

    /// Pair feature vector `[p; q; p ⊙ q]` fed to the head.
    pub fn encode(&self, pair: &EncodedPair) -> Vec<T> {
        self.forward(pair).features
    }

    pub fn score_encoded(&self, pair: &EncodedPair) -> T {
        sigmoid(self.forward(pair).logit)
    }

    /// `sigmoid(head · encode(input) + bias)`.
    pub fn score(&self, input: &ScorerInput) -> T {
        self.score_encoded(&self.encode_pair(input))
    }

    /// Mean binary cross-entropy over a batch.
    pub fn loss(&self, batch: &[(EncodedPair, bool)]) -> T {
        let total: T = batch
            .iter()
            .map(|(pair, label)| bce_from_logit(self.forward(pair).logit, *label))
            .sum();
        total / T::from_count(batch.len().max(1))
    }

    /// Mean binary cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[(EncodedPair, bool)]) -> (T, ParamSet<T>) {
        let mut grads = self.params.zeros_like();
        let mut total = T::zero();
        let scale = T::one() / T::from_count(batch.len().max(1));
        for (pair, label) in batch {
            let fwd = self.forward(pair);
            total += bce_from_logit(fwd.logit, *label);
            let y = if *label { T::one() } else { T::zero() };
            let dz = (sigmoid(fwd.logit) - y) * scale;
            self.backward(pair, &fwd, dz, &mut grads);
        }
        (total * scale, grads)
    }

    fn backward(&self, pair: &EncodedPair, fwd: &Forward<T>, dz: T, grads: &mut ParamSet<T>) {
        let h = self.hidden_dim;
        let head = &self.params.tensors[HEAD_W].data;
        for (g, &f) in grads.tensors[HEAD_W].data.iter_mut().zip(&fwd.features) {
            *g += dz * f;
        }
        grads.tensors[HEAD_B].data[0] += dz;

        let (p, q) = (&fwd.q.hidden, &fwd.k.hidden);
        let mut d_pre_q = vec![T::zero(); h];
        let mut d_pre_k = vec![T::zero(); h];
        for i in 0..h {
            let dp = dz * (head[i] + head[2 * h + i] * q[i]);
            let dq = dz * (head[h + i] + head[2 * h + i] * p[i]);
            d_pre_q[i] = dp * (T::one() - p[i] * p[i]);
            d_pre_k[i] = dq * (T::one() - q[i] * q[i]);
        }
        for (side, d_pre, ids) in [
            (&fwd.q, &d_pre_q, &pair.question),
            (&fwd.k, &d_pre_k, &pair.knowledge),
        ] {
            grads.tensors[PROJ_W].add_outer(d_pre, &side.pooled);
            for (g, &d) in grads.tensors[PROJ_B].data.iter_mut().zip(d_pre.iter()) {
                *g += d;
            }
            if ids.is_empty() {
                continue;
            }
            let d_pooled = self.params.tensors[PROJ_W].matvec_t(d_pre);
            let inv = T::one() / T::from_count(ids.len());
            let emb_grad = &mut grads.tensors[EMB];
            for &id in ids {
                for (g, &d) in emb_grad.row_mut(id).iter_mut().zip(&d_pooled) {
                    *g += d * inv;
                }
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({
                "embed_dim": self.embed_dim,
                "hidden_dim": self.hidden_dim,
            }),
            vocab: self.vocab.tokens().to_vec(),
            tensors: checkpoint::params_to_f64(&self.params).collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let embed_dim = checkpoint::meta_usize(&ck.meta, "embed_dim")?;
        let hidden_dim = checkpoint::meta_usize(&ck.meta, "hidden_dim")?;
        let vocab = Vocab::from_tokens(ck.vocab);
        let mut tensors = ck.tensors.into_iter();
        let params = Checkpoint::take_params(&mut tensors, &SCORER_TENSORS)?;
        let model = Self::from_params(vocab, params)?;
        if model.embed_dim != embed_dim || model.hidden_dim != hidden_dim {
            return Err(Error::Checkpoint("scorer header dimensions disagree with tensors".into()));
        }
        Ok(model)
    }
}

fn bce_from_logit<T: Scalar>(logit: T, label: bool) -> T {
    // -[y ln σ(z) + (1-y) ln(1-σ(z))] = softplus(z) - y z
    if label {
        softplus(logit) - logit
    } else {
        softplus(logit)
    }
}

impl<T: Scalar> PairScorer for CrossEncoder<T> {
    fn score_pair(&self, input: &ScorerInput) -> f64 {
        self.score(input).to_f64_lossy()
    }

    fn score_against(&self, question_block: &str, knowledge: &[&str]) -> Vec<f64> {
        let q_ids = self.encode_ids(question_block);
        // the question side is shared; the head matches `score` bit for bit
        let q = self.side(&q_ids);
        knowledge
            .iter()
            .map(|text| {
                let k = self.side(&self.encode_ids(text));
                sigmoid(self.head(&q.hidden, &k.hidden).1).to_f64_lossy()
            })
            .collect()
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
}

impl TrainingLog {
    /// One `epoch,mean_loss` line per epoch, epochs counted from 1.
    pub fn to_text(&self) -> String {
        self.epoch_losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{},{l:?}\n", i + 1))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Vocabulary over every question block and knowledge sentence in the pairs.
pub fn pair_vocab(pairs: &[LabeledPair]) -> Vocab {
    Vocab::build(
        pairs
            .iter()
            .flat_map(|p| [p.input.question_block.as_str(), p.input.knowledge_text.as_str()]),
    )
}

/// Trains a fresh scorer on `pairs`. The vocabulary is fixed from the pairs
/// before the first update; every random draw derives from `cfg.seed`.
pub fn train_scorer<T: Scalar>(
    pairs: &[LabeledPair],
    cfg: &RetrievalConfig,
) -> Result<(CrossEncoder<T>, TrainingLog)> {
    cfg.validate()?;
    let positives = pairs.iter().filter(|p| p.label).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::DegenerateData(format!(
            "{positives} positive and {} negative pairs; both labels are required",
            pairs.len() - positives
        )));
    }
    let vocab = pair_vocab(pairs);
    let mut model = CrossEncoder::<T>::init(vocab, cfg.embed_dim, cfg.hidden_dim, cfg.seed);
    let encoded: Vec<(EncodedPair, bool)> = pairs
        .iter()
        .map(|p| (model.encode_pair(&p.input), p.label))
        .collect();
    let mut opt = SgdMomentum::new(cfg.sgd(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c0e_5eed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(EncodedPair, bool)> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let (loss, grads) = model.loss_and_grad(&batch);
            epoch_loss += loss.to_f64_lossy() * chunk.len() as f64;
            opt.step(model.params_mut(), &grads);
        }
        let mean = epoch_loss / encoded.len() as f64;
        debug!("scorer epoch {} mean bce {mean:.6}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    if let Some(last) = log.last() {
        info!("scorer trained for {} epochs, final mean bce {last:.6}", cfg.epochs);
    }
    if !model.params().is_finite() {
        return Err(Error::DegenerateData("scorer parameters diverged to non-finite values".into()));
    }
    Ok((model, log))
}

/// Scores every knowledge entry and keeps the best `min(k, N)`, ordered by
/// score descending with ties broken by ascending id.
pub fn retrieve_topk<S: PairScorer + ?Sized>(
    scorer: &S,
    question: &QuestionInstance,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<Vec<ScoredKnowledge>> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("top-k must be at least 1".into()));
    }
    let texts: Vec<&str> = kb.entries().iter().map(|e| e.text.as_str()).collect();
    let scores = scorer.score_against(&question_block(question), &texts);
    let mut ranked: Vec<ScoredKnowledge> = scores
        .into_iter()
        .enumerate()
        .map(|(i, score)| ScoredKnowledge { kb_id: i + 1, score })
        .collect();
    let k = k.min(ranked.len());
    let cmp = |a: &ScoredKnowledge, b: &ScoredKnowledge| {
        b.score.total_cmp(&a.score).then(a.kb_id.cmp(&b.kb_id))
    };
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, cmp);
        ranked.truncate(k);
    }
    ranked.sort_by(cmp);
    Ok(ranked)
}

/// Fraction of `questions` whose own knowledge entry is among the top `k`.
pub fn recall_at_k<S: PairScorer + ?Sized>(
    scorer: &S,
    questions: &[&QuestionInstance],
    kb: &KnowledgeBase,
    k: usize,
) -> Result<f64> {
    let resolved = require_knowledge(questions, kb)?;
    if resolved.is_empty() {
        return Err(Error::EmptySplit("recall evaluation".into()));
    }
    let mut hits = 0usize;
    for (q, gold) in &resolved {
        if retrieve_topk(scorer, q, kb, k)?.iter().any(|s| s.kb_id == *gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / resolved.len() as f64)
}
