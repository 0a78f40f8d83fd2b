pub mod adversity;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod rng;
pub mod scaffold;
pub mod selfcheck;
