pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod model;
pub mod ssvm;
pub mod train;
