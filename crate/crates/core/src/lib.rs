//! Grounding toolkit: location-token codec, grounded-caption markup, GrIT
//! corpus construction, and grounding/referring evaluation.

pub mod geometry;
pub mod locgrid;
pub mod markup;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
