pub mod aoa;
pub mod delay;
pub mod doppler;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod pipeline;
pub mod ratio;
pub mod signal;

pub use error::{Error, Result};

// The guide's listings run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/signal-model.md")]
    mod signal_model {}
    #[doc = include_str!("../../../book/src/csi-ratio.md")]
    mod csi_ratio {}
    #[doc = include_str!("../../../book/src/doppler.md")]
    mod doppler {}
    #[doc = include_str!("../../../book/src/aoa.md")]
    mod aoa {}
    #[doc = include_str!("../../../book/src/delay.md")]
    mod delay {}
    #[doc = include_str!("../../../book/src/studies.md")]
    mod studies {}
}
