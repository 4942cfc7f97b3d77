//! Score-based generative models on the SDE framework, with training
//! objectives that suppress a designated subset of the training data.

pub mod cli;
pub mod error;
pub mod evalbench;
pub mod likelihood;
pub mod numcore;
pub mod sampler;
pub mod scorenet;
pub mod sde;
pub mod train;

pub use error::{MsgmError, Result};
