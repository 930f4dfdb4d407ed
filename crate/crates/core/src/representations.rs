//! Visual and language representations consumed by the reasoner.
//!
//! Visual signals come precomputed with each clip: frame feature vectors
//! (Image), detected object/attribute labels (Concepts), recognised
//! characters (Facial) and frame captions (Caption, consumed as text). The
//! language side assembles captions, subtitles, question, one candidate and
//! the retrieved knowledge into one separator-delimited token sequence and
//! encodes it to a fixed-width vector.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ClipAssets;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};
use crate::scalar::Scalar;
use crate::text::{self, tokenize, Vocab};

pub const CAPTION_SEPARATOR: &str = ". ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Image,
    Concepts,
    Facial,
    CaptionText,
    Language,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload<T> {
    Vector(Vec<T>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Representation<T> {
    pub role: Role,
    pub payload: Payload<T>,
}

impl<T: Scalar> Representation<T> {
    fn vector(role: Role, v: Vec<T>) -> Self {
        Self {
            role,
            payload: Payload::Vector(v),
        }
    }

    /// Vector length; zero for the text-valued caption role.
    pub fn dim(&self) -> usize {
        match &self.payload {
            Payload::Vector(v) => v.len(),
            Payload::Text(_) => 0,
        }
    }

    pub fn as_vector(&self) -> Option<&[T]> {
        match &self.payload {
            Payload::Vector(v) => Some(v),
            Payload::Text(_) => None,
        }
    }

    pub fn into_vector(self) -> Option<Vec<T>> {
        match self.payload {
            Payload::Vector(v) => Some(v),
            Payload::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.payload {
            Payload::Text(t) => Some(t),
            Payload::Vector(_) => None,
        }
    }
}

/// Frame indices for uniform subsampling: `floor(i·(F−1)/(n−1))` when the
/// clip has at least `n` frames, otherwise every frame followed by repeats
/// of the last one.
pub fn frame_indices(n_available: usize, n_frames: usize) -> Vec<usize> {
    assert!(n_available > 0 && n_frames > 0);
    if n_frames == 1 {
        return vec![0];
    }
    if n_available >= n_frames {
        (0..n_frames)
            .map(|i| i * (n_available - 1) / (n_frames - 1))
            .collect()
    } else {
        (0..n_frames).map(|i| i.min(n_available - 1)).collect()
    }
}

/// Concatenated feature vectors of `n_frames` subsampled frames.
pub fn repr_image<T: Scalar>(clip: &ClipAssets, n_frames: usize) -> Result<Representation<T>> {
    if clip.frames.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: 0,
            context: format!("clip {} has no frames", clip.clip_id),
        });
    }
    if n_frames == 0 {
        return Err(Error::InvalidConfig("n_frames must be at least 1".into()));
    }
    let v = frame_indices(clip.frames.len(), n_frames)
        .into_iter()
        .flat_map(|i| clip.frames[i].feature_vector.iter().map(|&x| T::from_f64_lossy(x)))
        .collect();
    Ok(Representation::vector(Role::Image, v))
}

fn vocab_index(vocab: &[String]) -> HashMap<&str, usize> {
    vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect()
}

/// Bag of concept labels over all frames; labels outside `vocab` are ignored.
pub fn repr_concepts<T: Scalar>(clip: &ClipAssets, vocab: &[String]) -> Representation<T> {
    let index = vocab_index(vocab);
    let mut counts = vec![T::zero(); vocab.len()];
    for label in clip.frames.iter().flat_map(|f| &f.concept_labels) {
        if let Some(&i) = index.get(label.as_str()) {
            counts[i] += T::one();
        }
    }
    Representation::vector(Role::Concepts, counts)
}

/// Multi-hot vector of the characters seen in any frame.
pub fn repr_facial<T: Scalar>(clip: &ClipAssets, vocab: &[String]) -> Representation<T> {
    let index = vocab_index(vocab);
    let mut hot = vec![T::zero(); vocab.len()];
    for name in clip.frames.iter().flat_map(|f| &f.characters_present) {
        if let Some(&i) = index.get(name.as_str()) {
            hot[i] = T::one();
        }
    }
    Representation::vector(Role::Facial, hot)
}

/// Frame captions joined in frame order.
pub fn repr_captions<T: Scalar>(clip: &ClipAssets) -> Representation<T> {
    let text = clip
        .frames
        .iter()
        .map(|f| f.caption.as_str())
        .collect::<Vec<_>>()
        .join(CAPTION_SEPARATOR);
    Representation {
        role: Role::CaptionText,
        payload: Payload::Text(text),
    }
}

/// Builds the language input for one candidate:
///
/// `[CAP] captions [SUB] subtitles [Q] question [ANS] candidate ([KN] knowledge)*`
///
/// with one `[KN]` segment per knowledge sentence in rank order. When the
/// sequence exceeds `l_max`, tokens are removed from the front of the
/// captions, then from the front of the subtitles, then from the end of the
/// knowledge (lowest rank first, dropping a `[KN]` marker once its segment
/// is empty). Question and candidate tokens are never removed.
pub fn assemble_language_input<K: AsRef<str>>(
    captions: &str,
    subtitles: &[String],
    question: &str,
    candidate: &str,
    knowledge: &[K],
    l_max: usize,
) -> Result<Vec<String>> {
    let q = tokenize(question);
    let c = tokenize(candidate);
    if q.is_empty() || c.is_empty() {
        return Err(Error::InvalidConfig(
            "question and candidate must contain at least one token".into(),
        ));
    }
    let fixed = q.len() + c.len() + 4;
    if fixed > l_max {
        return Err(Error::SequenceOverflow {
            needed: fixed,
            limit: l_max,
        });
    }
    let mut caps = tokenize(captions);
    let mut subs: Vec<String> = subtitles.iter().flat_map(|s| tokenize(s)).collect();
    let mut kn: Vec<Vec<String>> = knowledge.iter().map(|k| tokenize(k.as_ref())).collect();

    let total = |caps: &[String], subs: &[String], kn: &[Vec<String>]| {
        fixed + caps.len() + subs.len() + kn.iter().map(|k| k.len() + 1).sum::<usize>()
    };
    let mut excess = total(&caps, &subs, &kn).saturating_sub(l_max);
    let cut = excess.min(caps.len());
    caps.drain(..cut);
    excess -= cut;
    let cut = excess.min(subs.len());
    subs.drain(..cut);
    excess -= cut;
    while excess > 0 {
        let last = kn.last_mut().expect("fixed part fits, so knowledge covers the excess");
        if last.pop().is_none() {
            kn.pop();
        }
        excess -= 1;
    }
    // a knowledge segment emptied exactly at the budget boundary keeps its marker
    debug_assert!(total(&caps, &subs, &kn) <= l_max);

    let mut out = Vec::with_capacity(l_max);
    out.push(text::CAPTIONS.to_string());
    out.extend(caps);
    out.push(text::SUBTITLES.to_string());
    out.extend(subs);
    out.push(text::QUESTION.to_string());
    out.extend(q);
    out.push(text::CANDIDATE.to_string());
    out.extend(c);
    for k in kn {
        out.push(text::KNOWLEDGE.to_string());
        out.extend(k);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// language encoder

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub d_lang: usize,
    pub l_max: usize,
    /// Knowledge segments with their own projection block; later segments
    /// share the last block.
    pub knowledge_slots: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            d_lang: 64,
            l_max: 512,
            knowledge_slots: 5,
        }
    }
}

/// Token ids routed to pooling slots: captions, subtitles, question, one slot
/// per knowledge rank, and the candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    pub context: Vec<Vec<usize>>,
    pub candidate: Vec<usize>,
}

pub(crate) struct EncoderCache<T> {
    context_pooled: Vec<T>,
    candidate_pooled: Vec<T>,
    gate: Vec<T>,
    cand: Vec<T>,
    pub(crate) output: Vec<T>,
}

const ENCODER_TENSORS: [&str; 5] = ["embedding", "context_w", "context_b", "candidate_w", "candidate_b"];
const EMB: usize = 0;
const CTX_W: usize = 1;
const CTX_B: usize = 2;
const CAND_W: usize = 3;
const CAND_B: usize = 4;

const SLOT_CAPTIONS: usize = 0;
const SLOT_SUBTITLES: usize = 1;
const SLOT_QUESTION: usize = 2;
const SLOT_KNOWLEDGE: usize = 3;

/// Segment-pooled text encoder. Every context segment is mean-pooled over
/// token embeddings and the concatenation passes through one `tanh` layer;
/// the candidate segment passes through another. The output is their
/// elementwise product, so each output unit responds to a
/// (context, candidate) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoder<T> {
    config: EncoderConfig,
    vocab: Vocab,
    params: ParamSet<T>,
}

impl<T: Scalar> LanguageEncoder<T> {
    pub fn context_slots(config: &EncoderConfig) -> usize {
        SLOT_KNOWLEDGE + config.knowledge_slots
    }

    pub fn init(vocab: Vocab, config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed_dim;
        let ctx_in = Self::context_slots(&config) * e;
        let params = ParamSet::new(vec![
            Tensor::normal(ENCODER_TENSORS[EMB], &[vocab.len(), e], 1.0, &mut rng),
            Tensor::normal(ENCODER_TENSORS[CTX_W], &[config.d_lang, ctx_in], 1.0 / (e as f64).sqrt(), &mut rng),
            Tensor::zeros(ENCODER_TENSORS[CTX_B], &[config.d_lang]),
            Tensor::normal(ENCODER_TENSORS[CAND_W], &[config.d_lang, e], 1.0 / (e as f64).sqrt(), &mut rng),
            Tensor::zeros(ENCODER_TENSORS[CAND_B], &[config.d_lang]),
        ]);
        Self { config, vocab, params }
    }

    pub fn from_params(vocab: Vocab, config: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        let e = config.embed_dim;
        let expected: [Vec<usize>; 5] = [
            vec![vocab.len(), e],
            vec![config.d_lang, Self::context_slots(&config) * e],
            vec![config.d_lang],
            vec![config.d_lang, e],
            vec![config.d_lang],
        ];
        if params.tensors.len() != 5 || params.tensors.iter().zip(&expected).any(|(t, s)| &t.shape != s) {
            return Err(Error::Checkpoint("language encoder parameter shapes disagree with its config".into()));
        }
        Ok(Self { config, vocab, params })
    }

    pub(crate) const TENSOR_NAMES: [&'static str; 5] = ENCODER_TENSORS;

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn d_lang(&self) -> usize {
        self.config.d_lang
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Routes a token sequence into pooling slots by its separator markers.
    /// Tokens before the first marker count as question tokens.
    pub fn segments(&self, tokens: &[String]) -> Segments {
        let n_slots = Self::context_slots(&self.config);
        let mut context = vec![Vec::new(); n_slots];
        let mut candidate = Vec::new();
        let mut knowledge_seen = 0usize;
        enum Target {
            Slot(usize),
            Candidate,
        }
        let mut target = Target::Slot(SLOT_QUESTION);
        for tok in tokens {
            match tok.as_str() {
                text::CAPTIONS => target = Target::Slot(SLOT_CAPTIONS),
                text::SUBTITLES => target = Target::Slot(SLOT_SUBTITLES),
                text::QUESTION => target = Target::Slot(SLOT_QUESTION),
                text::CANDIDATE => target = Target::Candidate,
                text::KNOWLEDGE => {
                    let rank = knowledge_seen.min(self.config.knowledge_slots - 1);
                    knowledge_seen += 1;
                    target = Target::Slot(SLOT_KNOWLEDGE + rank);
                }
                word => {
                    let id = self.vocab.id(word);
                    match target {
                        Target::Slot(s) => context[s].push(id),
                        Target::Candidate => candidate.push(id),
                    }
                }
            }
        }
        Segments { context, candidate }
    }

    fn pool_into(&self, ids: &[usize], out: &mut [T]) {
        if ids.is_empty() {
            return;
        }
        let emb = &self.params.tensors[EMB];
        for &id in ids {
            for (o, &e) in out.iter_mut().zip(emb.row(id)) {
                *o += e;
            }
        }
        let n = T::from_count(ids.len());
        out.iter_mut().for_each(|o| *o /= n);
    }

    pub(crate) fn forward(&self, seg: &Segments) -> EncoderCache<T> {
        let e = self.config.embed_dim;
        let mut context_pooled = vec![T::zero(); seg.context.len() * e];
        for (slot, ids) in seg.context.iter().enumerate() {
            self.pool_into(ids, &mut context_pooled[slot * e..(slot + 1) * e]);
        }
        let mut candidate_pooled = vec![T::zero(); e];
        self.pool_into(&seg.candidate, &mut candidate_pooled);

        let gate: Vec<T> = self.params.tensors[CTX_W]
            .matvec(&context_pooled)
            .into_iter()
            .zip(&self.params.tensors[CTX_B].data)
            .map(|(a, &b)| (a + b).tanh())
            .collect();
        let cand: Vec<T> = self.params.tensors[CAND_W]
            .matvec(&candidate_pooled)
            .into_iter()
            .zip(&self.params.tensors[CAND_B].data)
            .map(|(a, &b)| (a + b).tanh())
            .collect();
        let output = gate.iter().zip(&cand).map(|(&g, &c)| g * c).collect();
        EncoderCache {
            context_pooled,
            candidate_pooled,
            gate,
            cand,
            output,
        }
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the encoder output is `d_out`.
    pub(crate) fn backward(&self, seg: &Segments, cache: &EncoderCache<T>, d_out: &[T], grads: &mut ParamSet<T>) {
        let e = self.config.embed_dim;
        let d = self.config.d_lang;
        let mut d_gate_pre = vec![T::zero(); d];
        let mut d_cand_pre = vec![T::zero(); d];
        for i in 0..d {
            let g = cache.gate[i];
            let c = cache.cand[i];
            d_gate_pre[i] = d_out[i] * c * (T::one() - g * g);
            d_cand_pre[i] = d_out[i] * g * (T::one() - c * c);
        }
        grads.tensors[CTX_W].add_outer(&d_gate_pre, &cache.context_pooled);
        grads.tensors[CAND_W].add_outer(&d_cand_pre, &cache.candidate_pooled);
        for (gb, &v) in grads.tensors[CTX_B].data.iter_mut().zip(&d_gate_pre) {
            *gb += v;
        }
        for (gb, &v) in grads.tensors[CAND_B].data.iter_mut().zip(&d_cand_pre) {
            *gb += v;
        }

        let d_context = self.params.tensors[CTX_W].matvec_t(&d_gate_pre);
        let d_candidate = self.params.tensors[CAND_W].matvec_t(&d_cand_pre);
        let emb_grad = &mut grads.tensors[EMB];
        let mut scatter = |ids: &[usize], d_pooled: &[T]| {
            if ids.is_empty() {
                return;
            }
            let inv = T::one() / T::from_count(ids.len());
            for &id in ids {
                for (g, &dv) in emb_grad.row_mut(id).iter_mut().zip(d_pooled) {
                    *g += dv * inv;
                }
            }
        };
        for (slot, ids) in seg.context.iter().enumerate() {
            scatter(ids, &d_context[slot * e..(slot + 1) * e]);
        }
        scatter(&seg.candidate, &d_candidate);
    }

    pub fn encode_segments(&self, seg: &Segments) -> Vec<T> {
        self.forward(seg).output
    }
}

/// Encodes an assembled token sequence to a `d_lang`-wide language representation.
pub fn encode_language<T: Scalar>(encoder: &LanguageEncoder<T>, tokens: &[String]) -> Representation<T> {
    let seg = encoder.segments(tokens);
    Representation::vector(Role::Language, encoder.encode_segments(&seg))
}
