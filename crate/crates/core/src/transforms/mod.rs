//! Latent transform networks: analysis/synthesis with SPADE residual
//! blocks, the hyperprior transforms, and the semantic encoder that turns
//! class rasters into conditioning features.

pub mod layers;
mod networks;
mod semantic;
mod spade;

pub use layers::{BasicBlock, BatchNorm, Conv2d, Linear, ResBlock, BN_EPS, LRELU_SLOPE};
pub use networks::{Analysis, HyperAnalysis, HyperSynthesis, Synthesis, TransformBlock, TransformConfig};
pub use semantic::SemanticEncoder;
pub use spade::{SpadeBlock, SpadeResBlock};
