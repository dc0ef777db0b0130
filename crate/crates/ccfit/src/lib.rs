//! Simulation lab, file formats and command-line interface on top of
//! `ccfit-core`.

pub mod cli;
pub mod fixtures;
pub mod io;
pub mod plot;
pub mod simlab;
