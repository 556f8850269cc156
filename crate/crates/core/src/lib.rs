pub mod analysis;
pub mod config;
pub mod contact;
pub mod error;
pub mod geom;
pub mod harness;
pub mod kinematics;
pub mod physics;
pub mod record;
pub mod sensing;
pub mod steering;
