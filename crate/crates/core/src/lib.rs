pub mod config;
pub mod controller;
pub mod evaluation;
pub mod kinematics;
pub mod planner;
pub mod protocol;
pub mod spool;
