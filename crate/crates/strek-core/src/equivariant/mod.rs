//! Cyclic-group rotation-equivariant convolutions: steerable filter bases
//! and the lifting / regular / projection layer kinds built on them.

mod basis;
mod layer;

pub use basis::{build_basis, rotate_grid_90, rotate_image_90k, AtomLabel, Harmonic, SteerableBasis};
pub use layer::{LayerKind, ReConvLayer};
