//! Prefix-scannable sequence models.
//!
//! * [`tensor`] / [`weights`]: dense `f64` kernels and the `PSMW` weight format.
//! * [`scan`]: static Blelloch tree scan and the online binary-counter scan
//!   over any [`scan::Aggregator`], with instrumentation.
//! * [`affine`]: the affine state-update monoid and ten recurrent layer
//!   families expressed as `(E, f)` pair generators.
//! * [`tpsm`]: a forward-only Transformer-PSM whose aggregator is causal
//!   self-attention over two concatenated chunks.
//! * [`cost`]: analytic per-token cost model for streaming decode versus a
//!   KV-cache transformer.

pub mod error;
pub mod tensor;
pub mod weights;
pub mod scan;
pub mod affine;
pub mod tpsm;
pub mod cost;

pub use error::{PsmError, Result};
