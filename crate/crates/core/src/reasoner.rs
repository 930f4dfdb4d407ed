//! Answer prediction: visual and language representations are concatenated
//! per candidate and scored by one shared linear head; training minimises
//! the 4-way cross-entropy of the gold candidate.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::corpus::{ClipAssets, Corpus, QuestionInstance, Split, SplitAssignment, NUM_CANDIDATES};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::nn::{dot, ParamSet, SgdConfig, SgdMomentum, Tensor};
use crate::representations::{
    assemble_language_input, repr_captions, repr_concepts, repr_facial, repr_image, EncoderConfig,
    LanguageEncoder, Segments,
};
use crate::retrieval::{retrieve_topk, PairScorer, TrainingLog};
use crate::scalar::{argmax, log_sum_exp, softmax, Scalar};
use crate::text::Vocab;

pub const CHECKPOINT_KIND: &str = "reasoner";

/// Which visual representation joins the language representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualVariant {
    Image,
    Concepts,
    Facial,
    /// Frame captions enter the language input; no visual vector.
    Caption,
    /// No visual vector; captions still enter the language input.
    None,
}

impl VisualVariant {
    pub const ALL: [VisualVariant; 5] = [
        VisualVariant::Image,
        VisualVariant::Concepts,
        VisualVariant::Facial,
        VisualVariant::Caption,
        VisualVariant::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VisualVariant::Image => "image",
            VisualVariant::Concepts => "concepts",
            VisualVariant::Facial => "facial",
            VisualVariant::Caption => "caption",
            VisualVariant::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn uses_captions(self) -> bool {
        matches!(self, VisualVariant::Caption | VisualVariant::None)
    }

    /// Display label for result tables.
    pub fn label(self) -> &'static str {
        match self {
            VisualVariant::Image => "Image",
            VisualVariant::Concepts => "Concepts",
            VisualVariant::Facial => "Facial",
            VisualVariant::Caption => "Caption",
            VisualVariant::None => "None",
        }
    }
}

impl fmt::Display for VisualVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Vocabularies and frame count the visual representations are computed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualSpec {
    pub variant: VisualVariant,
    pub n_frames: usize,
    pub feature_dim: usize,
    pub concept_vocab: Vec<String>,
    pub character_vocab: Vec<String>,
}

impl VisualSpec {
    pub fn for_corpus(corpus: &Corpus, variant: VisualVariant, n_frames: usize) -> Self {
        Self {
            variant,
            n_frames,
            feature_dim: corpus.feature_dim(),
            concept_vocab: corpus.concept_vocab.clone(),
            character_vocab: corpus.character_vocab.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self.variant {
            VisualVariant::Image => self.n_frames * self.feature_dim,
            VisualVariant::Concepts => self.concept_vocab.len(),
            VisualVariant::Facial => self.character_vocab.len(),
            VisualVariant::Caption | VisualVariant::None => 0,
        }
    }

    pub fn vector<T: Scalar>(&self, clip: &ClipAssets) -> Result<Vec<T>> {
        let v = match self.variant {
            VisualVariant::Image => repr_image(clip, self.n_frames)?.into_vector(),
            VisualVariant::Concepts => repr_concepts(clip, &self.concept_vocab).into_vector(),
            VisualVariant::Facial => repr_facial(clip, &self.character_vocab).into_vector(),
            VisualVariant::Caption | VisualVariant::None => Some(Vec::new()),
        }
        .unwrap_or_default();
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: v.len(),
                context: format!("{} representation of clip {}", self.variant, clip.clip_id),
            });
        }
        Ok(v)
    }

    pub fn captions(&self, clip: &ClipAssets) -> String {
        if self.variant.uses_captions() {
            repr_captions::<f64>(clip).as_text().unwrap_or_default().to_string()
        } else {
            String::new()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub candidate_scores: Vec<f64>,
    pub predicted_index: usize,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    /// Argmax with lowest-index tie-break, softmax probabilities.
    pub fn from_scores(instance_id: impl Into<String>, candidate_scores: Vec<f64>) -> Self {
        Self {
            instance_id: instance_id.into(),
            predicted_index: argmax(&candidate_scores),
            probabilities: softmax(&candidate_scores),
            candidate_scores,
        }
    }
}

pub fn write_predictions(path: impl AsRef<Path>, predictions: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut buf, p).expect("prediction serializes");
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                file: path.display().to_string(),
                line: i + 1,
                field: "<record>".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Where the knowledge segment of the language input comes from.
pub enum KnowledgeSource<'a> {
    /// The instance's own annotated knowledge sentence.
    Gold,
    /// The top `k` entries ranked by a trained scorer.
    Retrieved {
        scorer: &'a dyn PairScorer,
        kb: &'a KnowledgeBase,
        k: usize,
    },
    /// No knowledge segment.
    Ablated,
}

impl KnowledgeSource<'_> {
    pub fn knowledge_for(&self, q: &QuestionInstance) -> Result<Vec<String>> {
        match self {
            KnowledgeSource::Gold => Ok(if q.knowledge_text.trim().is_empty() {
                Vec::new()
            } else {
                vec![q.knowledge_text.clone()]
            }),
            KnowledgeSource::Retrieved { scorer, kb, k } => Ok(retrieve_topk(*scorer, q, kb, *k)?
                .into_iter()
                .map(|s| kb.lookup(s.kb_id).expect("retrieved id in range").text.clone())
                .collect()),
            KnowledgeSource::Ablated => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub variant: VisualVariant,
    pub n_frames: usize,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    /// Standard deviation of the initial head weights.
    pub head_init_std: f64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            variant: VisualVariant::Image,
            n_frames: 4,
            encoder: EncoderConfig::default(),
            epochs: 300,
            batch_size: 16,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            head_init_std: 0.01,
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("reasoner: {m}")));
        if self.n_frames == 0 {
            return fail("n_frames must be at least 1");
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
        let e = &self.encoder;
        if e.embed_dim == 0 || e.d_lang == 0 || e.knowledge_slots == 0 || e.l_max == 0 {
            return fail("encoder dimensions, knowledge slots and l_max must be positive");
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

/// One question ready for the model: visual vector plus routed tokens of
/// each candidate's language input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance<T> {
    pub instance_id: String,
    pub visual: Vec<T>,
    pub candidates: Vec<Segments>,
    pub gold_index: usize,
}

const HEAD_TENSORS: [&str; 2] = ["head_w", "head_b"];

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads<T> {
    pub encoder: ParamSet<T>,
    pub head: ParamSet<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T> {
    visual: VisualSpec,
    encoder: LanguageEncoder<T>,
    head: ParamSet<T>,
    seed: u64,
}

impl<T: Scalar> FusionModel<T> {
    pub fn init(visual: VisualSpec, encoder: LanguageEncoder<T>, head_init_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
        let width = visual.dim() + encoder.d_lang();
        let head = ParamSet::new(vec![
            Tensor::normal(HEAD_TENSORS[0], &[width], head_init_std, &mut rng),
            Tensor::zeros(HEAD_TENSORS[1], &[1]),
        ]);
        Self {
            visual,
            encoder,
            head,
            seed,
        }
    }

    pub fn from_parts(visual: VisualSpec, encoder: LanguageEncoder<T>, head: ParamSet<T>, seed: u64) -> Result<Self> {
        let width = visual.dim() + encoder.d_lang();
        if head.tensors.len() != 2 || head.tensors[1].shape != [1] {
            return Err(Error::Checkpoint("head must hold a weight vector and a scalar bias".into()));
        }
        if head.tensors[0].shape != [width] {
            return Err(Error::DimensionMismatch {
                expected: width,
                actual: head.tensors[0].data.len(),
                context: "head width vs visual + language dimensions".into(),
            });
        }
        Ok(Self {
            visual,
            encoder,
            head,
            seed,
        })
    }

    pub fn visual(&self) -> &VisualSpec {
        &self.visual
    }

    pub fn variant(&self) -> VisualVariant {
        self.visual.variant
    }

    pub fn encoder(&self) -> &LanguageEncoder<T> {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut LanguageEncoder<T> {
        &mut self.encoder
    }

    pub fn head(&self) -> &ParamSet<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Builds the visual vector and per-candidate language segments.
    pub fn prepare<K: AsRef<str>>(
        &self,
        instance: &QuestionInstance,
        clip: &ClipAssets,
        knowledge: &[K],
    ) -> Result<PreparedInstance<T>> {
        let visual = self.visual.vector(clip)?;
        let captions = self.visual.captions(clip);
        let candidates = instance
            .candidates
            .iter()
            .map(|cand| {
                let tokens = assemble_language_input(
                    &captions,
                    &clip.subtitles,
                    &instance.question,
                    cand,
                    knowledge,
                    self.encoder.config().l_max,
                )?;
                Ok(self.encoder.segments(&tokens))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedInstance {
            instance_id: instance.id.clone(),
            visual,
            candidates,
            gold_index: instance.gold_index,
        })
    }

    fn check_width(&self, visual: &[T]) -> Result<()> {
        let expected = self.head.tensors[0].data.len();
        let actual = visual.len() + self.encoder.d_lang();
        if expected != actual {
            return Err(Error::DimensionMismatch {
                expected,
                actual,
                context: "head width vs concatenated representation".into(),
            });
        }
        Ok(())
    }

    fn visual_score(&self, visual: &[T]) -> T {
        dot(&self.head.tensors[0].data[..visual.len()], visual) + self.head.tensors[1].data[0]
    }

    fn language_weights(&self) -> &[T] {
        let w = &self.head.tensors[0].data;
        &w[w.len() - self.encoder.d_lang()..]
    }

    pub fn scores(&self, prepared: &PreparedInstance<T>) -> Result<Vec<T>> {
        self.check_width(&prepared.visual)?;
        let base = self.visual_score(&prepared.visual);
        Ok(prepared
            .candidates
            .iter()
            .map(|seg| base + dot(self.language_weights(), &self.encoder.encode_segments(seg)))
            .collect())
    }

    pub fn predict(&self, prepared: &PreparedInstance<T>) -> Result<Prediction> {
        let scores = self.scores(prepared)?;
        Ok(Prediction::from_scores(
            prepared.instance_id.clone(),
            scores.into_iter().map(Scalar::to_f64_lossy).collect(),
        ))
    }

    /// Mean 4-way cross-entropy of the gold candidates.
    pub fn loss(&self, batch: &[&PreparedInstance<T>]) -> Result<T> {
        let mut total = T::zero();
        for p in batch {
            let s = self.scores(p)?;
            total += log_sum_exp(&s) - s[p.gold_index];
        }
        Ok(total / T::from_count(batch.len().max(1)))
    }

    /// Mean cross-entropy and its gradient with respect to the head and
    /// every language-encoder parameter.
    pub fn loss_and_grad(&self, batch: &[&PreparedInstance<T>]) -> Result<(T, FusionGrads<T>)> {
        let mut grads = FusionGrads {
            encoder: self.encoder.params().zeros_like(),
            head: self.head.zeros_like(),
        };
        let scale = T::one() / T::from_count(batch.len().max(1));
        let d_lang = self.encoder.d_lang();
        let mut total = T::zero();
        for p in batch {
            self.check_width(&p.visual)?;
            let base = self.visual_score(&p.visual);
            let caches: Vec<_> = p.candidates.iter().map(|seg| self.encoder.forward(seg)).collect();
            let scores: Vec<T> = caches
                .iter()
                .map(|c| base + dot(self.language_weights(), &c.output))
                .collect();
            total += log_sum_exp(&scores) - scores[p.gold_index];
            let probs = softmax(&scores);
            let width = self.head.tensors[0].data.len();
            let lang_w = self.language_weights().to_vec();
            for (c, (cache, seg)) in caches.iter().zip(&p.candidates).enumerate() {
                let y = if c == p.gold_index { T::one() } else { T::zero() };
                let ds = (probs[c] - y) * scale;
                let hw = &mut grads.head.tensors[0].data;
                for (g, &v) in hw[..p.visual.len()].iter_mut().zip(&p.visual) {
                    *g += ds * v;
                }
                for (g, &v) in hw[width - d_lang..].iter_mut().zip(&cache.output) {
                    *g += ds * v;
                }
                grads.head.tensors[1].data[0] += ds;
                let d_out: Vec<T> = lang_w.iter().map(|&w| w * ds).collect();
                self.encoder.backward(seg, cache, &d_out, &mut grads.encoder);
            }
        }
        Ok((total * scale, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({
                "visual": self.visual,
                "encoder": self.encoder.config(),
                "seed": self.seed,
            }),
            vocab: self.encoder.vocab().tokens().to_vec(),
            tensors: checkpoint::params_to_f64(self.encoder.params())
                .chain(checkpoint::params_to_f64(&self.head))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header meta lacks `{k}`")))
        };
        let visual: VisualSpec = serde_json::from_value(field("visual")?)
            .map_err(|e| Error::Checkpoint(format!("visual spec: {e}")))?;
        let config: EncoderConfig = serde_json::from_value(field("encoder")?)
            .map_err(|e| Error::Checkpoint(format!("encoder config: {e}")))?;
        let seed = field("seed")?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("seed must be an integer".into()))?;
        let vocab = Vocab::from_tokens(ck.vocab);
        let mut tensors = ck.tensors.into_iter();
        let enc_params = Checkpoint::take_params(&mut tensors, &LanguageEncoder::<T>::TENSOR_NAMES)?;
        let head = Checkpoint::take_params(&mut tensors, &HEAD_TENSORS)?;
        if tensors.next().is_some() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        let encoder = LanguageEncoder::from_params(vocab, config, enc_params)?;
        Self::from_parts(visual, encoder, head, seed)
    }
}

/// Scores the four candidates of one instance.
pub fn score_candidates<T: Scalar, K: AsRef<str>>(
    model: &FusionModel<T>,
    instance: &QuestionInstance,
    clip: &ClipAssets,
    knowledge: &[K],
) -> Result<Prediction> {
    model.predict(&model.prepare(instance, clip, knowledge)?)
}

fn clip_of<'a>(corpus: &'a Corpus, q: &QuestionInstance) -> Result<&'a ClipAssets> {
    corpus
        .clip(&q.clip_id)
        .ok_or_else(|| Error::DanglingClips(vec![q.clip_id.clone()]))
}

/// Trains a fusion model on the training split. The language vocabulary is
/// fixed from the training split's assembled inputs before the first update.
pub fn train_reasoner<T: Scalar>(
    corpus: &Corpus,
    split: &SplitAssignment,
    knowledge: &KnowledgeSource<'_>,
    cfg: &ReasonerConfig,
) -> Result<(FusionModel<T>, TrainingLog)> {
    cfg.validate()?;
    let train: Vec<&QuestionInstance> = corpus.instances_in(split, &[Split::Train]).collect();
    if train.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    for q in &train {
        if q.candidates.len() != NUM_CANDIDATES || q.gold_index >= NUM_CANDIDATES {
            return Err(Error::InvalidConfig(format!("instance {} violates the corpus schema", q.id)));
        }
    }
    let visual = VisualSpec::for_corpus(corpus, cfg.variant, cfg.n_frames);

    // assemble every training input once; the vocabulary comes from these
    let mut raw = Vec::with_capacity(train.len());
    for q in &train {
        let clip = clip_of(corpus, q)?;
        let kn = knowledge.knowledge_for(q).map_err(|e| e.for_instance(&q.id))?;
        raw.push((q, clip, kn));
    }
    let mut texts: Vec<String> = Vec::new();
    for (q, clip, kn) in &raw {
        texts.push(visual.captions(clip));
        texts.extend(clip.subtitles.iter().cloned());
        texts.push(q.question.clone());
        texts.extend(q.candidates.iter().cloned());
        texts.extend(kn.iter().cloned());
    }
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let encoder = LanguageEncoder::<T>::init(vocab, cfg.encoder, cfg.seed);
    let mut model = FusionModel::init(visual, encoder, cfg.head_init_std, cfg.seed);

    let prepared: Vec<PreparedInstance<T>> = raw
        .iter()
        .map(|(q, clip, kn)| model.prepare(q, clip, kn).map_err(|e| e.for_instance(&q.id)))
        .collect::<Result<_>>()?;

    let mut enc_opt = SgdMomentum::new(cfg.sgd(), model.encoder.params());
    let mut head_opt = SgdMomentum::new(cfg.sgd(), &model.head);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ea5_0e00);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedInstance<T>> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, grads) = model.loss_and_grad(&batch)?;
            epoch_loss += loss.to_f64_lossy() * chunk.len() as f64;
            enc_opt.step(model.encoder.params_mut(), &grads.encoder);
            head_opt.step(&mut model.head, &grads.head);
        }
        let mean = epoch_loss / prepared.len() as f64;
        debug!("reasoner epoch {} mean cross-entropy {mean:.6}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    if let Some(last) = log.last() {
        info!("reasoner trained for {} epochs, final mean cross-entropy {last:.6}", cfg.epochs);
    }
    if !(model.encoder.params().is_finite() && model.head.is_finite()) {
        return Err(Error::DegenerateData("reasoner parameters diverged to non-finite values".into()));
    }
    Ok((model, log))
}

/// One prediction per instance of `which`, in corpus order.
pub fn predict_split<T: Scalar>(
    model: &FusionModel<T>,
    corpus: &Corpus,
    split: &SplitAssignment,
    which: Split,
    knowledge: &KnowledgeSource<'_>,
) -> Result<Vec<Prediction>> {
    corpus
        .instances_in(split, &[which])
        .map(|q| {
            let clip = clip_of(corpus, q)?;
            let kn = knowledge.knowledge_for(q)?;
            score_candidates(model, q, clip, &kn)
        }
        .map_err(|e| e.for_instance(&q.id)))
        .collect()
}
