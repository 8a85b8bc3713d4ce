//! CHIPS services: PACS simulator, job manager, file transfer, dispatcher
//! and the core API, plus the `imgstats` demo plugin.

pub mod api;
pub mod dispatcher;
pub mod fileio;
pub mod imgstats;
pub mod jobmgr;
pub mod pacs_sim;
pub mod server;
pub mod token;
