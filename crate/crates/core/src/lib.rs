//! Battery models, degradation accounting and optimal-control tooling for
//! wholesale price arbitrage with a grid-connected lithium-ion battery.

pub mod bench;
pub mod bucket;
pub mod chebyshev;
pub mod config;
pub mod ecm;
pub mod error;
pub mod horizon;
pub mod lp;
pub mod market;
pub mod model;
pub mod ocp;
pub mod profile;
pub mod solver;
pub mod spm;
pub mod table;

pub mod validation;

pub use error::{Error, Result};
