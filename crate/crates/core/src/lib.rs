//! Robust multi-user downlink beamforming under Gaussian channel-estimation
//! error, with graph-network feature inference and a built-in autodiff engine.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod numerics;
pub mod channel;
pub mod beamform;
pub mod metrics;
pub mod bgnn;
pub mod training;
pub mod powermin;
