//! Model construction, splitting, execution, training and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod graph;
pub mod layer;
pub mod ops;
pub mod split;
pub mod train;

pub use arch::{build_model, ArchSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{Gradients, GraphCache, ModelGraph, SplitUnit};
pub use layer::{Layer, Mode, Param, ParamKind};
pub use split::{split, widen_input, ModelPartition, SplitPlan};
pub use train::{train_epochs, Loss, Sgd, SgdConfig, TrainReport};
