//! Compression of regular-grid scalar fields as small sinusoidal neural
//! networks.
//!
//! A volume is fit by a coordinate network ([`field_net`], [`trainer`]), its
//! intermediary weights are clustered to a few bits each ([`quantizer`]), and
//! the result is written as an NVCF file ([`codec`]). Decoding is function
//! evaluation, either on a grid or directly while ray marching
//! ([`renderer`]).

pub mod codec;
pub mod error;
pub mod field_net;
pub mod metrics;
pub mod pipeline;
pub mod quantizer;
pub mod renderer;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
