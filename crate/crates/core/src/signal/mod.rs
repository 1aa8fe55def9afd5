//! Frequency-domain model of the asynchronous uplink channel.
//!
//! Preamble symbols are taken as unit-modulus and already divided out, so the
//! simulator works directly on `y_n[m, g]` rather than on time-domain OFDM
//! waveforms.

mod config;
pub mod io;
mod offsets;
mod paths;
mod tensor;

pub use config::{SystemConfig, SPEED_OF_LIGHT};
pub use offsets::{generate_offsets, OffsetModel, OffsetTrace};
pub use paths::{
    aoa_from_spatial_frequency, spatial_frequency, steering_vector, Path, PathSet, ScenarioSpec,
};
pub use tensor::{
    dynamic_component, offset_factor, path_term, static_component, synthesize_csi, CsiTensor,
};
