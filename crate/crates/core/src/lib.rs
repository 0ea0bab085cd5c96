//! Transformer NMT toolkit with explicit source-reordering embeddings.
//!
//! The crate covers the whole pipeline at desk scale: a reverse-mode
//! autodiff engine over `f64` matrices, Pharaoh-alignment pre-ordering,
//! the sinusoid table with Gaussian-window reordering embeddings, baseline /
//! `exgre` / `refsr` encoder variants, the joint training objective,
//! greedy and beam decoding, BLEU and the reordering-similarity diagnostic,
//! plus synthetic word-order tasks.

pub mod align;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod positional;
pub mod synth;
pub mod tensor;
pub mod train;

pub use align::{derive_reordered_positions, parse_alignment_line, reorder_tokens, AlignmentSet, PositionSequence};
pub use autodiff::{Tape, Var, WindowGradient};
pub use config::{RunConfig, TrainConfig};
pub use corpus::{Corpus, SentencePairRecord, Vocab};
pub use error::{Error, Result};
pub use model::{ForwardOptions, Model, ModelConfig, SourceBatch, Variant};
pub use params::{ParamId, ParamStore};
pub use positional::{PositionalTable, WindowConfig};
pub use tensor::Tensor;
