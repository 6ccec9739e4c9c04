//! Deep bidirectional LSTMP acoustic models with layer normalization and
//! dynamic layer normalization (DLN).
//!
//! In a DLN model every layer and direction summarizes its input sequence
//! into a short vector and generates the LN scale and shift vectors of its
//! gates from that summary, so the network adapts to each utterance
//! without speaker labels or adaptation data.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`graph`]), on which the recurrent stack ([`recurrent`]), the adaptive
//! normalization ([`adapt`]) and training ([`train`]) are built.

pub mod adapt;
mod blob;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod norm;
pub mod params;
pub mod recurrent;
pub mod tensor;
pub mod train;

pub use blob::round_f32;
pub use config::{StackConfig, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use recurrent::StackModel;
pub use tensor::Tensor;
