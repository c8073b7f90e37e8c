//! Auditing machine unlearning by activation patching on a toy transformer.

pub mod error;
pub mod hash;
pub mod corpus;
pub mod io;
pub mod metaeval;
pub mod report;
pub mod stats;
pub mod outmetrics;
pub mod pipeline;
pub mod tinylm;
pub mod udscore;
pub mod unlearners;
pub mod whitebox;

pub use error::{Error, Result};
