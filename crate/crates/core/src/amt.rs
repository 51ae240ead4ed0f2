//! Automatic mutation tuning: a clipped, never-decreasing adjustment of the ES
//! perturbation scale driven by the gap between the best and the mean return.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Huber loss with unit threshold. Rejects non-finite inputs.
pub fn smooth_l1(x: f64, y: f64) -> Result<f64> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Numerical(format!(
            "smooth_l1 of non-finite input ({x}, {y})"
        )));
    }
    let d = (x - y).abs();
    Ok(if d < 1.0 { 0.5 * d * d } else { d - 0.5 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmtRecord {
    pub r_max: f64,
    pub r_avg: f64,
    /// Scale before the update.
    pub sigma: f64,
    pub increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationState {
    pub sigma: f64,
    pub sigma_initial: f64,
    pub zeta: f64,
    pub alpha_es: f64,
    pub population: usize,
    pub history: Vec<AmtRecord>,
}

impl MutationState {
    pub fn new(sigma: f64, zeta: f64, alpha_es: f64, population: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config("es.sigma", "must be positive and finite"));
        }
        if !(zeta >= 0.0 && zeta.is_finite()) {
            return Err(Error::config("amt.zeta", "must be finite and >= 0"));
        }
        if !(alpha_es > 0.0 && alpha_es.is_finite()) {
            return Err(Error::config("es.alpha", "must be positive and finite"));
        }
        if population == 0 {
            return Err(Error::config("es.population", "must be positive"));
        }
        Ok(MutationState {
            sigma,
            sigma_initial: sigma,
            zeta,
            alpha_es,
            population,
            history: Vec::new(),
        })
    }

    pub fn updates(&self) -> usize {
        self.history.len()
    }
}

/// Unclipped increment `alpha_es / (n sigma) * SmoothL1(r_max, r_avg)`.
fn raw_increment(sigma: f64, alpha_es: f64, n: usize, r_max: f64, r_avg: f64) -> Result<f64> {
    Ok(alpha_es / (n as f64 * sigma) * smooth_l1(r_max, r_avg)?)
}

/// `sigma += clip(alpha_es / (n sigma) * SmoothL1(r_max, r_avg), 0, zeta)`.
///
/// `r_max` is the best raw return of the generation and `r_avg` the population
/// mean. Non-finite returns leave `sigma` unchanged and record a zero increment.
pub fn amt_update(state: &mut MutationState, r_max: f64, r_avg: f64) -> f64 {
    let increment = raw_increment(state.sigma, state.alpha_es, state.population, r_max, r_avg)
        .map(|inc| {
            if inc.is_nan() {
                0.0
            } else {
                inc.clamp(0.0, state.zeta)
            }
        })
        .unwrap_or(0.0);
    state.history.push(AmtRecord {
        r_max,
        r_avg,
        sigma: state.sigma,
        increment,
    });
    state.sigma += increment;
    increment
}

/// Product `prod_t (1 + alpha_es / (n sigma_t^2) * SmoothL1(r_max_t, r_avg_t))`
/// where `sigma_t` follows the unclipped recurrence from `sigma_initial`, so that
/// the unclipped scale after the history equals `sigma_initial * multiplier`.
pub fn tuning_multiplier(
    rewards: &[(f64, f64)],
    sigma_initial: f64,
    alpha_es: f64,
    n: usize,
) -> Result<f64> {
    if !(sigma_initial > 0.0) || n == 0 {
        return Err(Error::InvalidArgument(
            "tuning multiplier needs positive sigma and population".into(),
        ));
    }
    let mut sigma = sigma_initial;
    let mut product = 1.0;
    for &(r_max, r_avg) in rewards {
        let factor = 1.0 + alpha_es / (n as f64 * sigma * sigma) * smooth_l1(r_max, r_avg)?;
        product *= factor;
        sigma *= factor;
    }
    Ok(product)
}
