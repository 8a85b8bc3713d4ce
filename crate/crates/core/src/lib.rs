//! Domain logic for the CHIPS medical-image workflow service.

pub mod analysis;
pub mod dicom;
pub mod dispatch;
pub mod fileio;
pub mod hash;
pub mod index;
pub mod jobs;
pub mod pacs;
pub mod workflow;
