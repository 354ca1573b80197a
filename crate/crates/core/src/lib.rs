//! Long-short-term context (LSTC) heads for atomic action detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense `f64` matrices, hand-written forward/backward ops,
//!   parameter containers and a central-difference gradient checker.
//! * [`short_term`]: actor-to-cell attention over a clip's dense feature map.
//! * [`long_term`]: NonLocal and second-order attention over bank context,
//!   cascaded through reader units.
//! * [`fusion`]: late fusion of both branches and the BCE loss.
//! * [`feature_bank`]: the persistent per-video actor feature store.
//! * [`eval`]: frame-mAP, multi-threshold mAP and crowd-weighted mAP.
//! * [`pipeline`]: ROI pooling, synthetic data, two-stage training,
//!   inference, checkpoints and sweeps.

mod binio;
pub mod bbox;
pub mod error;
pub mod eval;
pub mod feature_bank;
pub mod fusion;
pub mod long_term;
pub mod numerics;
pub mod pipeline;
pub mod short_term;

pub use bbox::BBox;
pub use error::{Error, Result};
