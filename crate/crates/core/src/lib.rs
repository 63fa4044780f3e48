//! Simulation and analysis toolkit for initialization-free distributed
//! economic dispatch.
//!
//! A fleet of generators with convex quadratic costs and box limits must
//! jointly meet a total load at minimum cost while talking only to their
//! neighbours on a weight-balanced, strongly connected digraph. The crate
//! provides:
//!
//! - [`graph`]: weighted digraphs, Laplacians and the spectral quantities
//!   that enter the gain conditions;
//! - [`costs`]: generator costs and the exact-penalty reformulation of the
//!   box constraints;
//! - [`oracle`]: a lambda-iteration dispatch solver and a KKT certifier used
//!   as ground truth;
//! - [`dynamics`]: the centralized and distributed vector fields, the
//!   mismatch subsystem and the robustness bounds;
//! - [`simulator`]: fixed-step RK4 integration with time-varying loads and
//!   generator join/leave events;
//! - [`scenario`], [`output`] and [`plot`]: scenario files, trajectory CSV
//!   and metadata writers, and SVG figure rendering.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod costs;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod oracle;
pub mod output;
pub mod plot;
pub mod scenario;
pub mod simulator;

pub use error::{Error, Result};
