//! Engine for human-AI co-construction of artifacts across abstraction levels.
//!
//! The [`graph`] module holds the explored construction space, [`utility`]
//! fits latent utilities from pairwise preferences, [`tournament`] selects a
//! finalist pair among sampled refinements, [`backends`] talks to generators
//! and judges, and [`session`] runs the human-steered iteration loop.

pub mod backends;
pub mod graph;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod session;
pub mod tournament;
pub mod utility;

pub use graph::{AbstractionLevel, Artifact, ArtifactId, ConstructionGraph, Provenance};
pub use utility::{PreferenceRecord, PreferenceSource, UtilityEstimate};
