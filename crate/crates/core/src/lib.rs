//! Decoupling partitions of ruled hypersurfaces generated by nondegenerate curves.

pub mod curve;
pub mod error;
pub mod exact;
pub mod geometry;
pub mod matrix;
pub mod partition;
pub mod poly;
pub mod verify;

pub use curve::{moment_curve, Curve, NondegeneracyCertificate};
pub use error::{Error, Result};
pub use exact::Q;
pub use geometry::{AffineMap, Cap, SBox, SRange, Sign};
pub use partition::{AnnulusIndex, CapFamily, IterationLedger, PartitionReport};
pub use verify::{DecouplingEstimate, SamplePlan, TestFunction};
