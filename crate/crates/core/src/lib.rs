//! Closed-loop simulator for latency-aware collaborative perception between
//! vehicles and roadside units.
//!
//! Agents observe a shared bird's-eye-view world, exchange sparse feature
//! messages over a modeled V2X channel, forecast their own perception to
//! offset transmission latency, fuse what they receive and drive on the result.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dpp;
pub mod drive;
pub mod fusion;
pub mod geometry;
pub mod grids;
pub mod metrics;
pub mod pragcomm;
pub mod seed;
pub mod world;
pub mod scenario;
pub mod sim;
pub mod experiment;
