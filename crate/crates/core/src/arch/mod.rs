//! Dense-block networks: specs, models and analysis.

pub mod analysis;
pub mod model;
pub mod spec;

pub use analysis::{count_params, count_spec_params, kernel_norm_report, receptive_field, ParamCount, ReceptiveField};
pub use model::{dense_block, mdensenet_forward, mmdensenet_forward, Forward, Model};
pub use spec::{ArchSpec, BandName, BandSpec, ConvSpec, DenseBlockSpec, MDENSENET_PRESET, MMDENSENET_PRESET};
