//! Set-based task-priority inverse kinematics for robotic spray painting.
//!
//! The nozzle may deviate from the surface normal by up to a maximum angle; inside that
//! cone its orientation is left to the redundancy resolution, which shortens the
//! end-effector path compared with keeping the nozzle normal at all times.

pub mod controller;
pub mod experiment;
pub mod kinematics;
pub mod pattern;
pub mod simulator;
pub mod tasks;
