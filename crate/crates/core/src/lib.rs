pub mod attack;
pub mod bench;
pub mod camera;
pub mod chi2;
pub mod config;
pub mod detector;
pub mod error;
pub mod estimator;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod sensor;
pub mod sim;

pub use error::{Result, SimError};
