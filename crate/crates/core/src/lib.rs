//! Satellite-map fusion for HD map construction at desk scale.
//!
//! The crate covers the whole pipeline: fitting a coarse world→raster
//! transform from landmarks and cutting pose-oriented satellite tiles
//! ([`geo`]); a small tape-based tensor engine ([`tensor`]); feature-level
//! masked cross-attention and BEV-level warp alignment ([`fusion`]); a
//! procedural benchmark ([`synth`]), metrics ([`metrics`]) and a trainer
//! ([`train`]). The `satfuse` binary exposes the same operations on the
//! command line ([`cli`]).

pub mod cli;
pub mod config;
pub mod error;
pub mod fusion;
pub mod geo;
pub mod metrics;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
