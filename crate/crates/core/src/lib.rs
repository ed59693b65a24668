//! Graph convolution over triangle meshes with learnable adjacency, a U-shaped
//! multi-resolution encoder/decoder and masked shape-completion pretraining.

pub mod ablation;
pub mod autodiff;
pub mod cli;
pub mod coarsen;
pub mod completion;
pub mod data;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod mesh;
pub mod network;
pub mod train;
pub mod verify;
