//! Super-hedging prices and replication strategies for covered European
//! options when trading moves the price (generalized market impact).

// `!(a < b)` is used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod dual;
pub mod error;
pub mod experiments;
pub mod facelift;
pub mod hedge;
pub mod model;
pub mod numerics;
pub mod pde;
pub mod rng;

pub use error::{Error, Result};
