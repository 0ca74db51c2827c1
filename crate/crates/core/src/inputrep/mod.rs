//! Input representation: data-derived variable correlation, multiscale
//! calendar embedding and their convolutional fusion.

mod correlation;
mod embed;
mod fusion;

pub use correlation::{multivariate_correlation, CorrelationWeights};
pub use embed::MultiscaleEmbed;
pub use fusion::{fuse_input, FusionParams, InputVariant};
