//! Log-linear transfer link mapping reference-field window estimates into
//! the observation model's local covariance parameters:
//!
//! ```text
//! log(rho_i)    = a1 + b1 log(rho_hat_i)
//! log(sigma2_i) = a2 + b2 log(sigma2_hat_i)
//! ```
//!
//! With b1 = b2 = 0 the link ignores the reference field entirely and the
//! model collapses to a stationary one; that collapse is the "S" baseline
//! used in the comparison studies.

use serde::{Deserialize, Serialize};

use crate::covariance::LocalParams;
use crate::error::Result;
use crate::field_store::Location;
use crate::window_mle::{estimate_at, WindowEstimates, WindowGrid};

/// Tolerance below which a slope counts as zero for the stationary test.
pub const STATIONARY_TOL: f64 = 1e-8;

/// Magnitude cap on the linked log-parameters; values beyond are clamped
/// (callers treating the clamp as a rejection should check
/// [`ResolvedParams::clamped`]).
pub const LOG_CLAMP: f64 = 50.0;

/// Coefficients of the log-linear link: (a1, b1) for the spatial range,
/// (a2, b2) for the marginal variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCoefficients {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl TransferCoefficients {
    /// Identity link: parameters pass through unchanged.
    pub fn identity() -> Self {
        TransferCoefficients {
            a1: 0.0,
            b1: 1.0,
            a2: 0.0,
            b2: 1.0,
        }
    }
}

/// Local parameters produced by the link, plus whether any value hit the
/// overflow clamp.
#[derive(Clone, Debug)]
pub struct ResolvedParams {
    pub params: LocalParams,
    pub clamped: bool,
}

/// Apply the link at each location, reading `(rho_hat, sigma2_hat)` from
/// the window containing it. Outputs are positive by construction;
/// log-values beyond +-50 are clamped and flagged.
pub fn resolve_params(
    coef: &TransferCoefficients,
    estimates: &WindowEstimates,
    grid: &WindowGrid,
    locs: &[Location],
) -> Result<ResolvedParams> {
    let mut log_rho_hat = Vec::with_capacity(locs.len());
    let mut log_s2_hat = Vec::with_capacity(locs.len());
    for s in locs {
        let (r, v) = estimate_at(estimates, grid, s)?;
        log_rho_hat.push(r.ln());
        log_s2_hat.push(v.ln());
    }
    resolve_from_logs(coef, &log_rho_hat, &log_s2_hat)
}

/// Link application on precomputed log-estimates (the MCMC hot path keeps
/// these fixed across proposals).
pub fn resolve_from_logs(
    coef: &TransferCoefficients,
    log_rho_hat: &[f64],
    log_s2_hat: &[f64],
) -> Result<ResolvedParams> {
    let mut clamped = false;
    let mut link = |a: f64, b: f64, lx: f64| -> f64 {
        let mut v = a + b * lx;
        if v.abs() > LOG_CLAMP {
            clamped = true;
            v = v.clamp(-LOG_CLAMP, LOG_CLAMP);
        }
        v.exp()
    };
    let rho: Vec<f64> = log_rho_hat.iter().map(|&lx| link(coef.a1, coef.b1, lx)).collect();
    let sigma2: Vec<f64> = log_s2_hat.iter().map(|&lx| link(coef.a2, coef.b2, lx)).collect();
    if clamped {
        log::warn!("transfer link clamped log-parameters at +-{LOG_CLAMP}");
    }
    Ok(ResolvedParams {
        params: LocalParams::new(rho, sigma2)?,
        clamped,
    })
}

/// True when both slopes are numerically zero, i.e. the model ignores the
/// reference field and is stationary.
pub fn is_stationary_collapse(coef: &TransferCoefficients) -> bool {
    coef.b1.abs() < STATIONARY_TOL && coef.b2.abs() < STATIONARY_TOL
}
