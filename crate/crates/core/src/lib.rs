//! Simulation and verification laboratory for an interval-map family with
//! stretched-exponential return times.
//!
//! The family `T(x) = x(1 + c/|log x|^beta)` on `(0, 1/2]`, `2x - 1` on
//! `(1/2, 1]` (with `beta = 1/gamma - 1`, `c = (log 2)^beta`) interpolates
//! between the doubling map (`gamma = 1`, every statistic known in closed
//! form) and maps whose return times to the base `(1/2, 1]` have tails
//! `m(R >= n) ~ exp(-c n^gamma)`. The crate computes the map's exact
//! geometry, its invariant density via an Ulam discretization, correlation
//! decay, and Monte Carlo deviation/concentration statistics of Birkhoff
//! sums, then fits the observed rate exponents against their predicted
//! values.

pub mod analysis;
pub mod error;
pub mod map;
pub mod observable;
pub mod report;
pub mod sim;
pub mod stats;
pub mod transfer;
pub mod verify;

pub use error::{Error, Result};
