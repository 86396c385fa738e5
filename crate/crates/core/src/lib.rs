//! PET/CT lesion segmentation toolkit: NIfTI I/O, intensity preprocessing,
//! MIP-based tracer classification, the weighted Dice + cross-entropy loss,
//! connected components, challenge metrics, postprocessing sweeps and a
//! synthetic phantom generator.

pub mod cc;
pub mod classifier;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod mip;
pub mod phantom;
pub mod pipeline;
pub mod postproc;
pub mod volume;

pub use error::{Error, Result};
