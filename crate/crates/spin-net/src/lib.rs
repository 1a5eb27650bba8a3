//! Semi-parametric inducing point networks.
//!
//! The model compresses a training set into a fixed number of inducing
//! points via cross-attention between datapoints, trains in time linear in
//! dataset size, and serves predictions from the compact encoding with
//! inference cost independent of the training set.

pub mod attention;
pub mod cli;
pub mod data;
pub mod evalbench;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod serialize;
pub mod training;
