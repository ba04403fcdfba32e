//! Federated learning over heterogeneous devices with adaptive subnetworks.
//!
//! Every client trains a width-sliced subnetwork of a shared dense model.
//! Baseline strategies fix the slice per device; the adaptive scheduler picks
//! it every round from a Fisher-information signal (how much the client's
//! local training is currently moving the model) and the client's current
//! link and compute conditions. A deterministic latency model turns each
//! round into simulated wall-clock seconds, so strategies can be compared by
//! time-to-accuracy.
//!
//! Modules, bottom up:
//!
//! * [`nn`]: dense network, backprop, SGD, cost counting.
//! * [`subnet`]: masks, extraction, coverage-averaged aggregation.
//! * [`fisher`]: per-batch Fisher traces and training efficiency.
//! * [`scheduler`]: the utility → level pipeline.
//! * [`sysmodel`]: device fleet, dynamics traces, delays.
//! * [`data`]: MNIST IDX files, synthetic blobs, label-skew partitions.
//! * [`harness`]: round loop, strategies, metrics, comparisons.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod nn;
pub mod scheduler;
pub mod seed;
pub mod subnet;
pub mod sysmodel;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/subnetworks.md")]
    mod subnetworks {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/fisher.md")]
    mod fisher {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/system-model.md")]
    mod system_model {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
