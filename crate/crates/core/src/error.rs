use std::fmt;

use thiserror::Error;

use crate::model::ValidationReport;

/// Standing assumptions a construction can fail on. Diagnostics cite these
/// so a failed run names the condition that did not hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Assumption {
    /// Independent primitives with finite second moments, well-formed data.
    Primitives,
    /// Stable environment dynamics and stabilizable player dynamics.
    StableEnvironment,
    /// Time-invariant, identically distributed noise for infinite horizon.
    IidNoise,
    /// Unique solution of every finite-horizon prediction system.
    UniqueFinitePrediction,
    /// Unique, bounded solution of the stationary prediction system.
    UniqueStationaryPrediction,
    /// Countable identical population with solvable mean equations.
    MeanField,
}

impl Assumption {
    pub fn label(self) -> &'static str {
        match self {
            Assumption::Primitives => "assumption 2.1",
            Assumption::StableEnvironment => "assumption 3.1(i)",
            Assumption::IidNoise => "assumption 3.1(iii)",
            Assumption::UniqueFinitePrediction => "assumption 3.2",
            Assumption::UniqueStationaryPrediction => "assumption 3.4",
            Assumption::MeanField => "assumption 3.5",
        }
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid game specification:\n{0}")]
    Invalid(ValidationReport),

    #[error("player {player}: S_k at stage {stage} is numerically singular (cond {cond:.3e})")]
    SingularStageHessian { player: usize, stage: usize, cond: f64 },

    #[error("player {player}: Riccati iteration did not converge after {iterations} steps (last increment {residual:.3e})")]
    RiccatiNoConvergence { player: usize, iterations: usize, residual: f64 },

    #[error("player {player}: closed loop sqrt(beta)(A+BF) has spectral radius {radius:.6} >= 1")]
    UnstableFeedback { player: usize, radius: f64 },

    #[error("player {player}: environment gain series did not decay below tolerance within {terms} terms")]
    GainTailNoDecay { player: usize, terms: usize },

    #[error("prediction system at stage {stage} is not uniquely solvable (sigma_min {sigma_min:.3e}, cond {cond:.3e}); {}", Assumption::UniqueFinitePrediction)]
    PredictionSystemSingular { stage: usize, sigma_min: f64, cond: f64 },

    #[error("stationary mean equations are singular (sigma_min {sigma_min:.3e}, cond {cond:.3e}); {}", Assumption::UniqueStationaryPrediction)]
    StationarySystemSingular { sigma_min: f64, cond: f64 },

    #[error("truncated stationary prediction system did not converge (last change {delta:.3e} at truncation {t_trunc}); {}", Assumption::UniqueStationaryPrediction)]
    StationaryNoConvergence { delta: f64, t_trunc: usize },

    #[error("mean-field equations have no unique solution (sigma_min {sigma_min:.3e}); {}", Assumption::MeanField)]
    MeanFieldSingular { sigma_min: f64 },

    #[error("innovation covariance at stage {stage} is not invertible (cond {cond:.3e})")]
    SingularInnovation { stage: usize, cond: f64 },

    #[error("estimator covariance diverged (trace {trace:.3e} after {iterations} steps); coupling too strong for a stable closed loop")]
    CovarianceDiverged { iterations: usize, trace: f64 },

    #[error("estimator covariance did not converge after {iterations} steps (last change {delta:.3e})")]
    CovarianceNoConvergence { iterations: usize, delta: f64 },

    #[error("simulation unstable: state norm {norm:.3e} at path {path}, stage {stage}")]
    Unstable { path: usize, stage: usize, norm: f64 },

    #[error("simulation requires Gaussian primitives; family is {0}")]
    NonGaussian(String),

    #[error("no equilibrium: {0}")]
    NoEquilibrium(String),

    #[error("{0}")]
    Usage(String),

    #[error("scenario: {0}")]
    Scenario(String),
}

impl Error {
    /// The assumption a failure is evidence against, if any.
    pub fn assumption(&self) -> Option<Assumption> {
        match self {
            Error::Invalid(report) => report.issues.iter().find_map(|i| i.assumption),
            Error::PredictionSystemSingular { .. } => Some(Assumption::UniqueFinitePrediction),
            Error::StationarySystemSingular { .. } | Error::StationaryNoConvergence { .. } => {
                Some(Assumption::UniqueStationaryPrediction)
            }
            Error::MeanFieldSingular { .. } => Some(Assumption::MeanField),
            Error::UnstableFeedback { .. } | Error::RiccatiNoConvergence { .. } => {
                Some(Assumption::StableEnvironment)
            }
            _ => None,
        }
    }

    /// Attributes a per-player synthesis failure to player `index`.
    pub fn for_player(self, index: usize) -> Self {
        match self {
            Error::SingularStageHessian { stage, cond, .. } => Error::SingularStageHessian { player: index, stage, cond },
            Error::RiccatiNoConvergence { iterations, residual, .. } => {
                Error::RiccatiNoConvergence { player: index, iterations, residual }
            }
            Error::UnstableFeedback { radius, .. } => Error::UnstableFeedback { player: index, radius },
            Error::GainTailNoDecay { terms, .. } => Error::GainTailNoDecay { player: index, terms },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
