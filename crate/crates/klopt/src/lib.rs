//! Computation and certification of KL-optimal discriminating designs.
//!
//! This crate finds approximate designs (finitely supported probability
//! measures on a compact design interval) that maximize the worst-case
//! Kullback-Leibler distance between competing nonlinear regression models,
//! optionally averaged over a prior on the data-generating parameters. It
//! provides:
//!
//! * model building blocks — mean functions, variance structures, and the
//!   normal / log-normal discrimination kernels ([`models`]);
//! * the optimality criterion, its directional derivative, and efficiency
//!   bounds ([`criterion`]);
//! * design optimization: a first-order exchange algorithm and a faster
//!   quadratic-programming refinement of the design weights ([`algorithms`],
//!   [`qp`], [`grad`]);
//! * a-posteriori certification of candidate designs via the equivalence
//!   theorem ([`verify`]);
//! * TOML scenario files describing comparison problems, with a bundled
//!   registry of worked examples ([`scenario`]).

pub mod algorithms;
pub mod criterion;
pub mod design;
pub mod expr;
pub mod grad;
pub mod models;
pub mod qp;
pub mod scenario;
pub mod verify;
