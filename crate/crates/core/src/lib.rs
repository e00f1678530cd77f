//! Slimmable networks trained jointly over width and input resolution
//! (and, for video models, frame count), with per-configuration batch-norm
//! calibration and budgeted configuration lookup at deployment.
//!
//! The pipeline is:
//!
//! 1. describe a model with [`ModelSpec`] and a sampling scheme with
//!    [`SamplingSpec`];
//! 2. train a [`SlimNetwork`] with [`train_step`], which runs the full
//!    network, the narrowest one and a few random widths per batch;
//! 3. re-estimate batch-norm statistics for every deployable
//!    configuration with [`calibrate_all`];
//! 4. evaluate the grid and compile a [`QueryTable`] mapping a FLOP budget
//!    to the most accurate configuration that fits.

pub mod archs;
pub mod calibrate;
pub mod cost;
pub mod data;
pub mod deploy;
pub mod error;
pub mod kernels;
pub mod net3d;
pub mod slim;
pub mod space;
pub mod tensor;
pub mod train;

pub use calibrate::{calibrate, calibrate_all, BnStatsBank, BnStatsEntry};
pub use cost::{
    enumerate_configs, expected_training_cost, layer_cost, layer_cost_2d, model_cost, scaled_layer_cost,
};
pub use data::Batch;
pub use deploy::{build_query_table, evaluate_grid, lookup, pareto_frontier, AccuracyTable, QueryTable};
pub use error::{Error, Result};
pub use net3d::{adaptive_fuse, fusion_input_slicing, sample_3d_configs, AdaptiveFusion, TwoBranchSpec};
pub use slim::{active_channels, BnMode, SlimNetwork};
pub use space::{ConfigKey, LayerKind, LayerSpec, ModelConfig, ModelSpec, SamplingSpec};
pub use tensor::Tensor;
pub use train::{sample_iteration_configs, train_step, IterationPlan, Sgd};
