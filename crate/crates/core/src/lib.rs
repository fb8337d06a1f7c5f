//! Neural signed-distance surfaces on sparse voxel grids.
//!
//! The crate has two halves that share the geometry layer:
//!
//! * a representation pipeline — triangle meshes are turned into per-voxel
//!   SDF samples, fit by a small decoder MLP conditioned on per-voxel latent
//!   codes and *learnable local coordinate frames*, and extracted back to
//!   meshes with marching cubes ([`mesh`], [`sdf`], [`field`], [`mlp`],
//!   [`train`], [`extract`]);
//! * an analytic lab — quadrature-exact studies of how well the local
//!   quadratic SDF approximation behaves and of the optimization landscape of
//!   frame fitting ([`geom`], [`lab`]).

mod binio;

pub mod error;
pub mod extract;
pub mod field;
pub mod geom;
pub mod lab;
pub mod linalg;
pub mod mesh;
pub mod mlp;
pub mod rng;
pub mod sdf;
pub mod train;

pub use error::{Error, Result};
