//! Fine-scale flow simulation in fractured porous media, classic and learned
//! coarse-scale transmissibilities, and coarse solvers that use them.

pub mod coarse_solver;
pub mod dataset;
pub mod error;
pub mod fine_solver;
pub mod flow;
pub mod fv;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod physics;
pub mod pipeline;
pub mod surrogate;
pub mod upscale;

pub use error::{Error, Result};
