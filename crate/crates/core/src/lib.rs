pub mod alignerdit;
pub mod autograd;
mod binio;
pub mod embedspace;
pub mod error;
pub mod evalmetrics;
pub mod hybridpos;
pub mod rectflow;
pub mod synthworld;
pub mod trainstage;
pub mod viewsel3d;

pub use error::{Error, Result};
