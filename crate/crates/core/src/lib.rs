//! Recurrent language modeling on the CPU.
//!
//! LSTM and QRNN stacks with DropConnect, variational and embedding dropout,
//! a weight-tied adaptive softmax, randomized truncated BPTT, and the
//! analysis tooling that goes with them: confusion-by-position curves,
//! LSTM/QRNN throughput, and random-forest hyperparameter importance.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod hpo;
pub mod model;
pub mod par;
pub mod param;
pub mod rng;
pub mod rnn;
pub mod softmax;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use par::Parallelism;
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
