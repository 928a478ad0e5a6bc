//! Wake → dream → judge → re-wake ideation engine with sweep, analysis and review tooling.

pub mod analysis;
pub mod backends;
pub mod domain;
pub mod persistence;
pub mod pipeline;
pub mod prompts;
pub mod review;
pub mod structured;
pub mod sweep;
pub mod text;
