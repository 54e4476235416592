//! Desk-scale pipeline for representation learning on a synthetic
//! vegetable-slicing task.
//!
//! A procedural simulator generates observation data of vegetables being
//! cut into slices; an embedding network is trained on thickness
//! classification; a latent forward model with a STOP embedding learns the
//! cut dynamics under a multi-step curriculum; a planner searches action
//! sequences in latent space; a DMP module realizes the parameterized
//! cutting trajectory per joint.

pub mod analysis;
pub mod dmp;
pub mod embedding;
pub mod error;
pub mod forward;
pub mod model_io;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
