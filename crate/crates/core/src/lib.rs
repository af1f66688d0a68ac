//! CondenseNet: densely connected networks with learned group convolutions.
//!
//! Training-form models prune input channels of their 1×1 convolutions
//! during training ([`lgc`]) and are converted into an efficient test form
//! of index layers and standard group convolutions ([`convert`]).

pub mod arch;
pub mod autograd;
pub mod convert;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lgc;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
