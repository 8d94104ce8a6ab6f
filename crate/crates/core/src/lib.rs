//! Self-supervised video representation learning by pace prediction.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic moving-shape
//! corpus ([`corpus`]), pace-controlled clip sampling ([`pacer`]), clip
//! augmentation ([`augment`]), a small differentiable 3D CNN ([`tensornet`]),
//! the pace-classification and contrastive objectives ([`losses`]), the
//! pretraining loop ([`trainer`]) and downstream evaluation ([`evalsuite`]).

pub mod augment;
pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod pacer;
pub mod par;
pub mod rng;
pub mod tensornet;
pub mod trainer;

pub use error::{Error, Result};
