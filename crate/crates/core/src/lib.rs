//! Migration of land-cover reference labels between two epochs.
//!
//! The crate covers the whole chain: raster and sample I/O, spectral
//! preprocessing, IRMAD change detection, a deterministic random forest,
//! the experiment ladder that builds t1 training sets from t0 labels, and
//! leave-location-and-time-out evaluation on synthetic benchmarks.

pub mod change;
pub mod error;
pub mod evaluation;
pub mod forest;
mod fsio;
pub mod migration;
pub mod preprocess;
pub mod raster;
pub mod reproduce;
pub mod samples;
pub mod synth;

pub use error::{Error, Result};
pub use fsio::write_atomic;
pub use raster::{
    BandSpec, ChangeMask, ClassMap, GeoTransform, Legend, MaskFlag, MaskProvenance, RasterStack,
};
pub use samples::{ChangeFlag, SamplePoint, SampleSet, Timestep};
