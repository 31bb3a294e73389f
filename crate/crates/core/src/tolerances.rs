//! Numerical thresholds used across the pipeline.
//!
//! Every threshold has a documented default and can be overridden by name,
//! which is how the CLI's `--tol.NAME VALUE` flags are applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Smallest admissible eigenvalue of Q, R, Q_terminal.
    pub pd: f64,
    /// Allowed negative eigenvalue for covariance matrices.
    pub psd: f64,
    /// Stop the Riccati iteration when `‖M_next − M‖_∞` drops below this.
    pub riccati_conv: f64,
    pub riccati_max_iter: f64,
    /// Relative truncation threshold for the stationary environment gains.
    pub g_tail_rel: f64,
    pub g_tail_max_terms: f64,
    /// Condition-number cap on `S_k = R + β B' M B`.
    pub s_cond_cap: f64,
    /// Condition-number cap on `I − Λ_k`.
    pub lambda_cond_cap: f64,
    /// Convergence threshold on `(a_0, b_0)` when doubling the truncation.
    pub trunc_conv: f64,
    pub trunc_init: f64,
    pub trunc_max_doublings: f64,
    /// Condition-number cap on the innovation covariance.
    pub innovation_cond_cap: f64,
    pub sigma_conv: f64,
    pub sigma_max_iter: f64,
    pub divergence_trace: f64,
    /// State-norm cap in simulation.
    pub overflow_cap: f64,
    /// Eigenvalues below this are clipped when factoring covariances.
    pub factor_clip: f64,
    /// Infinite-horizon cost truncation: simulate until `β^T` drops below this.
    pub discount_tail: f64,
    // Verification thresholds.
    pub gain_identity: f64,
    pub are_residual: f64,
    pub nesting: f64,
    /// Residual of the steady-state filter covariance equation.
    pub steady_residual: f64,
    /// Residual of the mean-field stationary mean equations.
    pub meanfield_residual: f64,
    pub z_score: f64,
    pub gap_stderr: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            pd: 1e-10,
            psd: 1e-10,
            riccati_conv: 1e-12,
            riccati_max_iter: 100_000.0,
            g_tail_rel: 1e-12,
            g_tail_max_terms: 100_000.0,
            s_cond_cap: 1e12,
            lambda_cond_cap: 1e10,
            trunc_conv: 1e-8,
            trunc_init: 64.0,
            trunc_max_doublings: 10.0,
            innovation_cond_cap: 1e12,
            sigma_conv: 1e-12,
            sigma_max_iter: 1_000_000.0,
            divergence_trace: 1e12,
            overflow_cap: 1e9,
            factor_clip: 1e-12,
            discount_tail: 1e-8,
            gain_identity: 1e-10,
            are_residual: 1e-10,
            nesting: 1e-8,
            steady_residual: 1e-9,
            meanfield_residual: 1e-12,
            z_score: 4.0,
            gap_stderr: 2.0,
        }
    }
}

impl Tolerances {
    /// Overrides one named threshold; unknown names are rejected.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let mut map = match serde_json::to_value(&*self) {
            Ok(serde_json::Value::Object(map)) => map,
            _ => unreachable!("tolerances serialize to an object"),
        };
        if !map.contains_key(name) {
            return Err(Error::Usage(format!("unknown tolerance `{name}`")));
        }
        let number = serde_json::Number::from_f64(value)
            .ok_or_else(|| Error::Usage(format!("tolerance `{name}` must be finite")))?;
        map.insert(name.to_string(), serde_json::Value::Number(number));
        *self = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn names() -> Vec<String> {
        match serde_json::to_value(Tolerances::default()) {
            Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    pub(crate) fn count(value: f64) -> usize {
        value.max(0.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_by_name() {
        let mut tol = Tolerances::default();
        tol.set("lambda_cond_cap", 1e6).unwrap();
        assert_eq!(tol.lambda_cond_cap, 1e6);
        assert!(tol.set("no_such_threshold", 1.0).is_err());
        assert!(Tolerances::names().contains(&"pd".to_string()));
    }
}
