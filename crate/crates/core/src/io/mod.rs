//! On-disk formats: tensors, parameter archives and run configs.

pub mod config;
pub mod params;
pub mod tensor_file;

pub use config::{RunConfig, RunMode};
pub use params::{load_params, save_params};
pub use tensor_file::{read_tensor, write_atomic, write_tensor};
