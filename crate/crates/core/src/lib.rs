//! Streaming whole-system provenance: versioned graph generation at the
//! capture point, per-lane stream merging, and stacked vertex-centric
//! queries executed inline over the merged stream.

pub mod bench;
pub mod capture;
pub mod engine;
pub mod merge;
pub mod model;
pub mod pipeline;
pub mod queries;
