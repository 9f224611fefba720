//! Sequential conv nets: architecture, parameters, forward/backward,
//! training and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use arch::{Architecture, LayerSpec};
pub use model::{ActivationRecord, Gradients, LayerParams, Mode, ModelSnapshot, ParamKey, ParamKind, Tape};
pub use train::{train, train_original, LrSchedule, TrainConfig, TrainLog};
