//! Pulmonary vessel segmentation from chest CT.
//!
//! The crate is organized along the processing chain: [`volume`] grids and
//! MetaImage I/O, [`imageops`] filtering and morphology, [`airway`] and
//! [`lungs`] segmentation, the [`medialness`] vessel-enhancement filter,
//! [`centerline`] extraction and reconnection, [`vesselseg`] radius
//! estimation and painting, synthetic [`phantom`]s, evaluation [`metrics`]
//! and the staged [`pipeline`].

pub mod airway;
pub mod centerline;
pub mod config;
pub mod error;
pub mod imageops;
pub mod lungs;
pub mod medialness;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod shortest_path;
pub mod vesselseg;
pub mod volume;

pub use error::{Error, Result};
