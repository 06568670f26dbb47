//! Numerical laboratory for two-player zero-sum stochastic differential games
//! whose cost is the backward component of a fully coupled forward-backward
//! SDE with Poisson jumps.

pub mod algebraic;
pub mod bsde;
pub mod cli;
pub mod coeffs;
pub mod config;
pub mod error;
pub mod fbsde;
pub mod game;
pub mod grid;
pub mod pde;
pub mod stochastics;
pub mod verify;

pub use error::{Error, Result, Slot};
pub use grid::{SpaceGrid, TimeGrid};
