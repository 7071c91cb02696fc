//! Transfer and Koopman operator tools for slow-fast stochastic systems.
//!
//! The pipeline: discretize the annealed transfer operator with Ulam's
//! method ([`ulam`]), take leading Koopman eigenfunctions ([`spectral`]),
//! compare full and fiber dynamics along their level sets ([`fiber`]),
//! then estimate and simulate a one-dimensional drift-diffusion model in the
//! slow coordinate ([`reduce`]) and compare switching statistics ([`stats`]).

pub mod cli;
pub mod config;
pub mod field;
pub mod fiber;
pub mod io;
pub mod models;
pub mod pipeline;
pub mod reduce;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod ulam;

pub use field::{l1_distance, GridPartition, ScalarField};
pub use models::{Distortion, Drift, Point, SystemModel};
pub use rng::RngStream;
