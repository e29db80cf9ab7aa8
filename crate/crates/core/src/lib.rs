pub mod adaptivity;
pub mod error;
pub mod fem_fine;
pub mod fields;
pub mod harness;
pub mod indicators;
pub mod linalg;
pub mod mesh;
pub mod ms_solver;
pub mod snapshot;
pub mod spectral;
