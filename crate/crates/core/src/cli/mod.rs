//! Command implementations behind the `blockprec` binary.

pub mod config;
pub mod data;
pub mod plotdata;
pub mod train;
pub mod validate;

pub use config::{DatasetConfig, DatasetId, Mode, QuantConfig, RunConfig, ScheduleConfig};
pub use plotdata::cmd_plotdata;
pub use train::{cmd_train, TrainOutcome};
pub use validate::{cmd_validate, Check, Suite};
