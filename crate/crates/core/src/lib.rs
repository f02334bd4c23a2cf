pub mod cli;
pub mod dcnn;
pub mod error;
pub mod fc_kernel;
pub mod finwidth;
pub mod fit;
pub mod netgraph;
pub mod nonlin;
pub mod quadrature;
pub mod spectra;

pub use error::{Error, Result};
