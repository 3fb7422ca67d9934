//! Grid lane representation, its loss and decoder, and the network that
//! predicts it.

mod grid;
mod model;
mod optim;

pub use grid::{decode_grid, encode_labels_to_grid, extend_to_border, finish_lanes, lane_loss, smooth_lanes, GridConfig, GridGrad, GridLaneTensor};
pub use model::{clue_raster, CorrectorModel, FeatureMap, ForwardOutput, ModelConfig, ModelInput};
pub use optim::{sgd_step, Optimizer, OptimizerKind};
