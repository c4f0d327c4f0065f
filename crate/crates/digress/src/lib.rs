//! Files, formats and the command-line front end for the immunization
//! pipeline in `digress-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod io;
pub mod jpeg;
pub mod pipeline;
pub mod report;
