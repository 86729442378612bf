//! Small object detectors trained on synthetic shape scenes, their inversion
//! by alternating pixel/pseudo-target optimization, and the introspection
//! experiments built on top of it.

pub mod analysis;
pub mod attribution;
pub mod detector;
pub mod geometry;
pub mod image;
pub mod inversion;
pub mod layout;
pub mod nn;
pub mod shapes;
pub mod train;
