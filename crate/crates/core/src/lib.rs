//! Fully test-time adaptation with dynamic activation sparsity.
//!
//! A small CPU deep-learning stack (tensors, a layer-granular autograd tape, CNN
//! layers) plus the pieces needed to adapt a pretrained model online on a
//! corrupted stream while pruning the activations cached for backpropagation.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod importance;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use autograd::{forward, infer, CacheMode, CachePolicy, GradientSet, LayerGrads, ParamScope, Tape};
pub use error::{Error, Result};
pub use layers::{LayerKind, LayerSpec};
pub use model::{build_model, Arch, BnMode, Model};
pub use rng::Rng;
pub use sparsity::{ActivationRecord, Bitset, PruningSchedule, SparseActivation};
pub use tensor::{Scalar, Tensor};
