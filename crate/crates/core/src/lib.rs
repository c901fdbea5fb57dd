//! Semi-supervised volumetric segmentation with a mean-teacher 3D U-Net.
//!
//! Unlabeled voxels where the teacher is confident (low Monte Carlo dropout
//! entropy) are pseudo-labeled by the teacher; the remaining voxels are
//! pseudo-labeled by an ensemble of nearest-neighbor classifiers that match
//! student embeddings against teacher embeddings sampled near the object
//! surface of a labeled image.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod neighbors;
pub mod net;
pub(crate) mod ops;
pub mod phantom;
pub mod real;
pub mod rng;
pub mod trainer;
pub mod uncertainty;
pub mod volume;
pub mod vv1;

pub use error::{Error, Result};
pub use real::Real;
pub use volume::{Dims, FeatureMap, Field, Mask3D, ProbMap, Volume3D};
