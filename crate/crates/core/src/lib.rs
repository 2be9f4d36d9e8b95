//! Min-Max normalized networks with polynomial activations.
//!
//! Train a small convolutional network whose activations are preceded by a
//! Min-Max range normalization, replace the activations with low-degree
//! Chebyshev fits, fold the normalization into the preceding weights and
//! rewrite average pooling as sum pooling. What is left uses only additions
//! and multiplications, and [`circuit::depth_report`] measures its
//! multiplicative depth.

pub mod approx;
pub mod circuit;
pub mod cli;
pub mod data;
pub mod error;
pub mod fold;
pub mod layers;
pub mod train;
pub mod tensor;

pub use approx::{fit_chebyshev, ActivationKind, ChebyshevSeries};
pub use circuit::{depth_report, CircuitReport};
pub use error::{Error, Result};
pub use fold::{divfree_rewrite, fold_minmax, swap_activations, SwapPlan};
pub use layers::{AxisPolicy, Layer, MinMaxState, Mode, Network, NetworkConfig};
pub use tensor::Tensor;
