//! Knowledge-based multi-choice question answering over video clips.
//!
//! The pipeline has three trainable stages: a knowledge base of annotated
//! sentences, a cross-encoder that ranks those sentences against a question
//! and its candidates, and a reasoner that scores each candidate from a
//! visual vector and an encoded language input carrying the top-ranked
//! knowledge. Models are generic over the float type; the aliases below fix
//! it to `f64` (or `f32`).

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod kb;
pub mod nn;
pub mod reasoner;
pub mod representations;
pub mod retrieval;
pub mod scalar;
pub mod synthgen;
pub mod text;

pub use checkpoint::Checkpoint;
pub use corpus::{
    load_corpus, save_corpus, split_by_episode, validate_corpus, ClipAssets, Corpus, Frame,
    QuestionInstance, QuestionType, Split, SplitAssignment, Violation,
};
pub use error::{Error, Result};
pub use evaluation::{compare_knowledge_gain, emit_csv, emit_table, evaluate, parse_table, EvalReport};
pub use kb::{KnowledgeBase, KnowledgeInstance};
pub use reasoner::{
    predict_split, score_candidates, train_reasoner, FusionModel, KnowledgeSource, Prediction,
    ReasonerConfig, VisualSpec, VisualVariant,
};
pub use representations::{
    assemble_language_input, encode_language, repr_captions, repr_concepts, repr_facial, repr_image,
    EncoderConfig, LanguageEncoder, Representation, Role,
};
pub use retrieval::{
    make_training_pairs, recall_at_k, retrieve_topk, train_scorer, CrossEncoder, PairScorer,
    RetrievalConfig, ScoredKnowledge, TrainingLog,
};
pub use scalar::Scalar;
pub use synthgen::{generate, oracle_answer, Ledger, LedgerEntry, SynthSpec};

pub type Scorer = CrossEncoder<f64>;
pub type Reasoner = FusionModel<f64>;
pub type Encoder = LanguageEncoder<f64>;
pub type ScorerF32 = CrossEncoder<f32>;
pub type ReasonerF32 = FusionModel<f32>;
pub type EncoderF32 = LanguageEncoder<f32>;
