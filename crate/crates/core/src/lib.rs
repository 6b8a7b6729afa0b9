//! Multivariate spatial mixed effects models (MSM) and their Dirichlet-process
//! mixture extension (MSMM) for area-level survey tabulations.
//!
//! The pipeline is:
//!
//! 1. [`tabulation`] reads direct estimates and standard errors, moves them to
//!    the log scale and fills in undefined sampling variances with a
//!    generalized variance function ([`loess`]).
//! 2. [`graph`] builds the county adjacency, its multivariate Kronecker
//!    expansion and the ICAR precision.
//! 3. [`moran`] extracts the Moran's I eigenvector basis orthogonal to the
//!    fixed-effect design ([`design`]) and the induced random-effect precision.
//! 4. [`msm`], [`mixture`] and [`fay_herriot`] run the Gibbs samplers.
//! 5. [`diagnostics`] and [`simulation`] check convergence and score
//!    predictions against a known truth.
//!
//! Chains and simulation replicates run on rayon when the `parallel` feature
//! is enabled (the default) and sequentially otherwise; see [`par`].

pub mod design;
pub mod diagnostics;
pub mod error;
pub mod fay_herriot;
pub mod gaussian;
pub mod graph;
pub mod loess;
pub mod mixture;
pub mod moran;
pub mod msm;
pub mod observations;
pub mod par;
pub mod posterior;
pub mod seed;
pub mod simulation;
pub mod tabulation;

pub use error::{Error, Result};
pub use observations::Observations;
pub use posterior::{McmcSettings, PosteriorDraws};
