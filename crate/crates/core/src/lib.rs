//! Hierarchical bimanual dexterous manipulation: an object-centric wrist
//! planner feeding a residual finger controller, with a deterministic
//! kinematic simulator to train and evaluate both.

pub mod config;
pub mod dal;
pub mod deploy;
pub mod env;
pub mod error;
pub mod eval;
pub mod expert;
pub mod geom;
pub mod io;
pub mod net;
pub mod pipeline;
pub mod planner;
pub mod rl;
pub mod rng;
pub mod traj;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geom::{ObjectState, Pose, Rot, Vec3};
pub use traj::GoalTrajectory;
