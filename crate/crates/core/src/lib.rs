//! Evacuation decision prediction from pre-disaster web search queries.
//!
//! Session-based query encoders are trained by next-query prediction,
//! ground-truth evacuation labels come from kernel-density anomaly detection
//! on GPS traces, and feature strategies are compared with a random forest.
//! A synthetic world generator provides exact ground truth for the whole
//! pipeline.

pub mod anomaly;
pub mod classify;
pub mod corpus;
pub mod encoders;
pub mod features;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod util;
