//! Multiple imputation for survey nonresponse with auxiliary population margins.
//!
//! The crate implements the MD-AM family of imputation methods for surveys
//! that suffer both unit and item nonresponse, together with the machinery
//! needed to run them end to end:
//!
//! * [`frame`] — data model for samples, completed datasets, and known
//!   population margins, with CSV ingestion and validation;
//! * [`regress`] — weighted logistic/linear regression kernels, approximate
//!   posterior parameter draws, and a small nonlinear system solver;
//! * [`itemimp`] — chained-equations multiple imputation of item nonresponse;
//! * [`marginimp`] — margin-constrained imputation of unit nonresponse
//!   (multiplicative adjustment, system-of-equations, and fabricated-weight
//!   variants);
//! * [`hotdeck`] — random hot deck for the remaining variables;
//! * [`estimate`] — Horvitz–Thompson estimation under Poisson sampling and
//!   Rubin's combining rules;
//! * [`simlab`] — a seeded Monte Carlo study harness comparing the methods.

mod encode;

pub mod error;
pub mod estimate;
pub mod frame;
pub mod hotdeck;
pub mod itemimp;
pub mod marginimp;
pub mod regress;
pub mod rng;
pub mod simlab;

pub use error::MdamError;
