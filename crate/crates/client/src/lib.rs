//! HTTP clients for the CHIPS services.

pub mod core;
pub mod dispatcher;
pub mod error;
pub mod fileio;
pub mod jobmgr;
pub mod pacs;
pub mod wire;

pub use crate::core::CoreClient;
pub use dispatcher::DispatcherClient;
pub use error::ClientError;
pub use fileio::{FileIoClient, PushFault};
pub use jobmgr::JobClient;
pub use pacs::PacsClient;
