//! Phase-based motion magnification and optical-flow deformation
//! measurement for tunnel-lining image sequences.

// `!(x > 0.0)` is how parameter checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// `is_multiple_of` is newer than the supported toolchain.
#![allow(clippy::manual_is_multiple_of)]

pub mod analysis;
pub mod error;
pub mod flow;
pub mod grid;
pub mod imageio;
pub mod ingest;
pub mod magnify;
pub mod pipeline;
pub mod pyramid;
pub mod synth;

pub use error::{Error, Result};
pub use flow::{compute_flow, flow_series, DisplacementField, FlowParams};
pub use grid::{ComplexGrid, Grid};
pub use ingest::{FrameSequence, IlluminationMode, IlluminationParams};
pub use magnify::{MagnificationParams, TemporalBand};
pub use pyramid::{ComplexPyramid, FilterBank, Provenance};
