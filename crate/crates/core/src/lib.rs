//! Closed-loop environmental control for a simulated fish tank.
//!
//! [`sim`] is the plant and its sensors, [`preprocess`] and [`pipeline`] turn
//! readings into clean feature frames, [`control`] holds the threshold rules and
//! the safety envelope, and [`ml`] the four learners plus their arbitration.
//! [`episode`] ties them together into logged closed-loop runs.

pub mod channel;
pub mod config;
pub mod control;
pub mod episode;
pub mod error;
pub mod exec;
pub mod ml;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod sim;

pub use channel::{Channel, PerChannel};
pub use config::RunConfig;
pub use control::{ControlConfig, ControlDecision, SafetyEnvelope};
pub use error::{Error, Result};
pub use exec::ExecMode;
pub use preprocess::{Dataset, FeatureFrame};
pub use sim::{ActuatorState, Device, FarmState, PlantParams, SensorConfig, SensorReading};
