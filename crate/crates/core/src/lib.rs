//! Estimation of time-varying international stock market integration.
//!
//! The crate implements a two-step procedure. Each national market is first
//! modelled jointly with the world market and two composite exchange-rate
//! indices through an asymmetric multivariate GARCH(1,1), estimated by Gaussian
//! quasi-maximum likelihood ([`garch`]). The fitted conditional covariances then
//! feed a panel nonlinear least-squares regression in which the weight placed on
//! global versus domestic risk pricing follows a logistic function of a lagged
//! candidate factor ([`panel`]). [`simulate`] runs the same model forward so that
//! both steps can be validated by parameter recovery.
//!
//! The crate is `no_std` and only needs `alloc`; file formats and the command
//! line live in the `integra` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod garch;
pub mod linalg;
mod math;
pub mod optim;
pub mod panel;
pub mod simulate;
pub mod stats;

pub use data::{CountrySeries, FactorPanel, Group, MonthIndex, ReturnPanel, Series};
pub use garch::{CovariancePanel, MGarchFit, MGarchParams};
pub use panel::{PanelFit, PanelParams};
pub use simulate::{DgpConfig, SyntheticDataset};
pub use stats::StatsSummary;
