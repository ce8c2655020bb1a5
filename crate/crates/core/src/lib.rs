//! Layer-wise relevance propagation for feed-forward convolutional networks.
//!
//! The crate covers the whole path from a serialized model to evaluation
//! numbers: [`model_io`] loads networks and images, [`model`] runs the forward
//! pass, [`relevance`] propagates relevance back to the input under LRP-0,
//! LRP-ε, LRP-γ, LRP-αβ or relative LRP, [`oracle`] re-derives the same maps
//! edge by edge on small networks, and [`eval`] turns maps into masks and
//! scores them.

pub mod error;
pub mod eval;
pub mod model;
pub mod model_io;
pub mod oracle;
pub mod relevance;
pub mod tensor;
pub mod verify;

pub use error::{Error, ErrorClass, Result};
pub use model::{Conv2D, Dense, ForwardTrace, LayerSpec, Network, Pool2D, Preprocessing, ResidualBlock, Skip};
pub use relevance::{attribute, ContributionMap, MethodConfig, Rule};
pub use tensor::{Padding, RankOrder, Tensor};
