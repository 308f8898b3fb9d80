//! Importance-aware data augmentation for document-level translation: a
//! small autodiff engine and transformer, token-importance scoring, the
//! perturbation pipeline and three-term objective, plus the synthetic
//! corpus, trainer and evaluation harnesses built around them.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod importance;
pub mod model;
pub mod objective;
pub mod pair;
pub mod tensor;
pub mod trainer;

pub use augment::{AugmentConfig, PerturbedView, Strategy};
pub use autodiff::{Gradients, Graph, Var};
pub use checkpoint::Checkpoint;
pub use corpus::{Corpus, CorpusRecord, CorrRule, GeneratorConfig, Splits};
pub use error::{CheckpointError, CorpusError, EvalError, ImportanceError, ModelError, TensorError, TrainError};
pub use eval::{EvalReport, Metrics, NoisyReport, Protocol};
pub use importance::{Direction, ImportanceTrace, Measure, Schedule, Side};
pub use model::{ForwardTrace, Model, ModelConfig, ParamStore, Tape, Translation};
pub use objective::{LossBreakdown, LossTerms, PerturbTargets, Reduction};
pub use pair::{DocumentPair, TokenId};
pub use tensor::Tensor;
pub use trainer::{OptimizerConfig, ScoreRefresh, StopReason, TrainConfig, TrainOutcome};
