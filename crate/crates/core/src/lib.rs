//! Deterministic quadrotor simulator with image-based visual servoing toward
//! fiducial tags and pseudo-depth obstacle avoidance.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod features;
pub mod link;
pub mod mission;
pub mod node;
pub mod percept;
pub mod report;
pub mod servo;
pub mod sim;
pub mod simcam;
pub mod vehicle;
pub mod world;

pub use config::RunConfig;
pub use report::{export_report, MissionReport, Outcome};
pub use sim::{run_mission, SimOptions};
