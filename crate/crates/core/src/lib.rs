#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod fusion;
pub mod io;
pub mod model;
pub mod musdl;
pub mod nn;
pub mod phq;
pub mod report;
pub mod sam;
pub mod sampling;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
