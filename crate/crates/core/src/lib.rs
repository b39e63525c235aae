//! Nested text embeddings: a hashed n-gram encoder trained so that every
//! prefix of its output is itself a usable embedding, plus prefix-truncated
//! retrieval, ranking metrics and training schedules.
//!
//! All arithmetic is `f64`; vectors and parameters are stored as `f32`.

// `!(x > eps)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod losses;
pub mod metrics;
pub mod nested;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use data::{parse_records, split_judgments, write_records, RecordFormat, RelevanceRecord};
pub use encoder::{EncoderConfig, EncoderModel};
pub use error::{Error, ErrorKind, Result};
pub use eval::{sequential_evaluate, EvalConfig, MetricsReport};
pub use index::{Document, PrefixIndex, SearchHit};
pub use losses::{mrl_compose, multitask_step_loss, LossOutput, MrlConfig, PairBatch, TripletBatch};
pub use metrics::Gain;
pub use nested::{cosine, cosine_prefix, truncate, DimSet, NestedEmbedding};
pub use synth::{gen_synthetic, SynthSpec, SyntheticDataset};
pub use trainer::{run_ablation, train, AblationReport, Schedule, TrainConfig, TrainHistory};
