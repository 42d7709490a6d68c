//! Closed-loop simulation and control toolkit for two-element stratified
//! electric water heaters.
//!
//! The crate provides:
//!
//! - a 20-node stratified tank simulator used as the virtual plant,
//! - grey-box one-node and three-node control models with least-squares
//!   parameter identification from logged data,
//! - a thermostatic baseline controller and model predictive controllers
//!   built on an embedded sparse convex QP solver,
//! - time-of-use price and hot-water draw scenarios with hourly-average
//!   flow forecasts,
//! - a closed-loop harness producing per-run metrics and parameter sweeps.

pub mod config;
pub mod control_models;
pub mod controllers;
pub mod harness;
pub mod param_id;
pub mod qp;
pub mod report;
pub mod scenario;
pub mod tank_sim;
pub mod units;
