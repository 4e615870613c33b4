//! Free-boundary Willmore disks of small area in Riemannian domains.

pub mod barycenter;
pub mod checks;
pub mod domain;
pub mod error;
pub mod geometry;
pub mod halfsphere;
pub mod metric;
pub mod reduced;
pub mod solver;

pub use error::{Result, WillmoreError};
