//! Feature-level neural-mesh render-and-compare pose estimation with
//! source-free selective vertex adaptation (SVA).
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: rotations, poses, cuboid meshes, projection and rasterization.
//! - [`vmf`]: von Mises-Fisher densities, concentration estimation, sampling.
//! - [`meshmodel`]: neural mesh, clutter model, feature maps, likelihood and losses.
//! - [`inference`]: pose bank, multi-pose initialization, finite-difference refinement.
//! - [`training`]: source model fitting, the linear feature-extractor surrogate, metrics.
//! - [`adaptation`]: selective vertex adaptation and the backbone contrastive loss.
//! - [`partition`]: vertex partitions, kδ-subsets and the elicited-domain construction.
//! - [`synth`]: seeded synthetic source/target domains with occlusion.
//! - [`config`], [`io`], [`cli`]: run configuration, on-disk formats, command front end.

pub mod adaptation;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod meshmodel;
pub mod partition;
pub mod seed;
pub mod synth;
pub mod training;
pub mod vmf;

pub use error::{Error, Result};
