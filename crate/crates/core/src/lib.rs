//! Discrete-event simulator for swarm-based video-on-demand delivery.
//!
//! Peers join a single-file swarm, trade fixed-size blocks under a fluid
//! bandwidth model, and play the media back while an interactive session
//! model (play / stop / pause / jump) drives churn. Three peer-selection
//! policies can be swapped in behind one interface and compared on a
//! six-metric suite with replicated confidence intervals.

pub mod cli;
pub mod config;
pub mod engine;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod peer_policy;
pub mod piece_policy;
pub mod playback;
pub mod swarm;

pub use model::{build_scenario, media_geometry, Scenario};
pub use swarm::{run_scenario, RunTrace};

