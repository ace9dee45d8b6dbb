//! File formats, the experiment driver and reporting for the trust-weighted
//! gossip simulator. The numerical core lives in `trustgossip-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod driver;
pub mod error;
pub mod exec;
pub mod manifest;
pub mod report;

pub use error::{AppError, Result};
