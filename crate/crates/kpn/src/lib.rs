//! Teacher-student network training with learned knowledge projection.
//!
//! A frozen, pre-trained teacher network guides the training of a thinner
//! student on a small labeled dataset. A learned 1x1 convolution (the
//! projection layer) maps a hidden teacher feature map onto a student
//! feature map; a relaxed-L1 loss on that pairing regularizes training.
//! Candidate (teacher layer, student layer) routes are enumerated under
//! spatial and receptive-field constraints and raced against each other,
//! pruning the weakest by validation loss until one survives. The final
//! student exports as a plain standalone network.

pub mod data;
pub mod error;
pub mod graph;
pub mod net;
pub mod projection;
pub mod route;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
