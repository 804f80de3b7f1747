//! Class-incremental learning on top of a frozen label-embedding space.
//!
//! Text embeddings of class labels are treated as fixed classifier heads. They
//! drive two extra training signals on top of the image/text contrastive loss:
//!
//! - soft within-task targets built from label-to-label similarity
//!   ([`semantic::soft_labels`], [`losses::sg_rl_loss`]);
//! - distillation targets that tie each new class to semantically related old
//!   classes ([`semantic::distill_targets`], [`losses::sg_kd_loss`]).
//!
//! The vision side is a small pluggable encoder ([`encoder`]) with a trainable
//! tail, trained task by task ([`trainer`]) with herding-based exemplar replay
//! ([`memory`]) and evaluated over all classes seen so far ([`evaluator`]).
//! [`protocol`] builds task streams and the synthetic desk-scale benchmark.

pub mod cli;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod math;
pub mod memory;
pub mod protocol;
pub mod semantic;
pub mod trainer;

pub use embedding::{embed_labels, load_table, EmbeddingTable, LabelEmbedding};
pub use encoder::{Encoder, EncoderKind, EncoderSnapshot, EncoderSpec};
pub use error::{Error, Result};
pub use evaluator::{evaluate, predict, EvalResult, RunReport};
pub use losses::{KlDirection, LogitMatrix, LossOutput, LossWeights};
pub use memory::{herding_select, ExemplarStore};
pub use protocol::{build_fewshot_stream, build_stream, Dataset, SynthConfig, TaskSpec, TaskStream};
pub use semantic::{DistillTargetMatrix, SoftLabelMatrix};
pub use trainer::{run_stream, Mode, RunConfig, TrainConfig, Trainer};
