//! The forecasting network: temporal embedding, positional terms, global
//! encoder, global-local decoder and a shared dense output head.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use checkpoint::{
    load_parameters, read_checkpoint, save_checkpoint, save_parameters, Checkpoint,
};
pub use config::{ModelConfig, Variant};
pub use forward::{
    build_variant, AttentionRecord, Forecast, ForecastResult, ForwardCache, Pipeline,
};
pub use params::{parameter_count, ParameterSet};
