//! Risk-averse capacity-investment equilibria in a stylized competitive
//! electricity market under alternative mandatory-contract regimes.
//!
//! Pipeline: build a stochastic scenario set over fuel costs, demand shifts,
//! and availability profiles; dispatch every scenario by merit order to get
//! spot prices and operating margins; evaluate contract payouts; solve the
//! CVaR-based agent subproblems; and iterate a price-adjustment /
//! capacity-update fixed point to a near-equilibrium, reporting the usual
//! market metrics.

pub mod agents;
pub mod contracts;
pub(crate) mod convex;
pub mod config;
pub mod equilibrium;
pub mod report;
pub mod dispatch;
pub mod scenario;
