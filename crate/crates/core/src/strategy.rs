//! Affine strategies `u_t = F_t x_t + G_t X̂_{t|t−1} + Ȟ_t`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregate::Gains;
use crate::error::{Error, Result};
use crate::fixed_point::EnvFixedPoint;
use crate::linalg::{Mat, Vector};
use crate::model::Horizon;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineStrategy {
    /// One entry per stage, or a single stationary entry.
    pub f: Vec<Mat>,
    pub g: Vec<Mat>,
    pub h: Vec<Vector>,
}

impl AffineStrategy {
    pub fn stage(&self, t: usize) -> (&Mat, &Mat, &Vector) {
        let k = if self.f.len() == 1 { 0 } else { t };
        (&self.f[k], &self.g[k], &self.h[k])
    }

    pub fn n_stages(&self) -> usize {
        self.f.len()
    }

    pub fn perturbed(&self, delta: &Perturbation) -> Self {
        AffineStrategy {
            f: self.f.iter().map(|f| f + &delta.f).collect(),
            g: self.g.iter().map(|g| g + &delta.g).collect(),
            h: self.h.iter().map(|h| h + &delta.h).collect(),
        }
    }

    /// `F = 0, G = 0`, offsets kept.
    pub fn zero_gains(&self) -> Self {
        AffineStrategy {
            f: self.f.iter().map(|f| Mat::zeros(f.nrows(), f.ncols())).collect(),
            g: self.g.iter().map(|g| Mat::zeros(g.nrows(), g.ncols())).collect(),
            h: self.h.clone(),
        }
    }

    /// Ignores the estimate: `G = 0` and the offset reverts to `H_t`.
    pub fn environment_blind(&self, h_raw: &[Vector]) -> Self {
        AffineStrategy {
            f: self.f.clone(),
            g: self.g.iter().map(|g| Mat::zeros(g.nrows(), g.ncols())).collect(),
            h: h_raw.to_vec(),
        }
    }
}

/// Additive change to `(F, G, Ȟ)`, applied at every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub f: Mat,
    pub g: Mat,
    pub h: Vector,
}

impl Perturbation {
    pub fn zero(strategy: &AffineStrategy) -> Self {
        let (f, g, h) = strategy.stage(0);
        Perturbation {
            f: Mat::zeros(f.nrows(), f.ncols()),
            g: Mat::zeros(g.nrows(), g.ncols()),
            h: Vector::zeros(h.len()),
        }
    }

    /// Gaussian direction with unit joint Frobenius norm, scaled by `magnitude`.
    pub fn random<R: Rng + ?Sized>(strategy: &AffineStrategy, magnitude: f64, rng: &mut R) -> Self {
        let mut p = Self::zero(strategy);
        let mut draw = |v: &mut f64| *v = StandardNormal.sample(rng);
        p.f.iter_mut().for_each(&mut draw);
        p.g.iter_mut().for_each(&mut draw);
        p.h.iter_mut().for_each(&mut draw);
        let norm = (p.f.norm_squared() + p.g.norm_squared() + p.h.norm_squared()).sqrt();
        let scale = if norm > 0.0 { magnitude / norm } else { 0.0 };
        p.f *= scale;
        p.g *= scale;
        p.h *= scale;
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyProfile {
    pub horizon: Horizon,
    pub players: Vec<AffineStrategy>,
    /// `H_t` per player before the estimate-dependent offset is folded in.
    pub h_raw: Vec<Vec<Vector>>,
}

/// `G_t = Σ_k G_{t,k} a_{k,t−1}` and `Ȟ_t = Σ_k G_{t,k} b_{k,t−1} + H_t`.
pub fn build_profile(gains: &Gains, fp: &EnvFixedPoint) -> Result<StrategyProfile> {
    match (gains, fp) {
        (Gains::Finite(schedules), EnvFixedPoint::Finite(fp)) => {
            let mut players = Vec::with_capacity(schedules.len());
            let mut h_raw = Vec::with_capacity(schedules.len());
            for s in schedules {
                let mut g_t = Vec::with_capacity(s.horizon);
                let mut h_t = Vec::with_capacity(s.horizon);
                for t in 0..s.horizon {
                    let mut g = Mat::zeros(s.f[t].nrows(), fp.a[t][0].ncols());
                    let mut h = s.h[t].clone();
                    for (l, gl) in s.g[t].iter().enumerate() {
                        g += gl * &fp.a[t][l];
                        h += gl * &fp.b[t][l];
                    }
                    g_t.push(g);
                    h_t.push(h);
                }
                players.push(AffineStrategy { f: s.f.clone(), g: g_t, h: h_t });
                h_raw.push(s.h.clone());
            }
            Ok(StrategyProfile { horizon: Horizon::Finite(fp.horizon), players, h_raw })
        }
        (Gains::Stationary(gains), EnvFixedPoint::Stationary(fp)) => {
            let mut players = Vec::with_capacity(gains.len());
            for s in gains {
                if s.g.len() > fp.a.len() {
                    return Err(Error::Usage("fixed point truncated below the gain tail".into()));
                }
                let mut g = Mat::zeros(s.f.nrows(), fp.a[0].ncols());
                let mut h = s.h.clone();
                for (n, gn) in s.g.iter().enumerate() {
                    g += gn * &fp.a[n];
                    h += gn * &fp.b[n];
                }
                players.push(AffineStrategy { f: vec![s.f.clone()], g: vec![g], h: vec![h] });
            }
            let h_raw = gains.iter().map(|s| vec![s.h.clone()]).collect();
            Ok(StrategyProfile { horizon: Horizon::Infinite, players, h_raw })
        }
        _ => Err(Error::Usage("gains do not match the fixed point".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strategy() -> AffineStrategy {
        AffineStrategy {
            f: vec![Mat::from_element(1, 2, 0.5); 3],
            g: vec![Mat::from_element(1, 3, -0.1); 3],
            h: vec![Vector::from_element(1, 0.2); 3],
        }
    }

    #[test]
    fn random_perturbation_has_requested_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Perturbation::random(&strategy(), 0.05, &mut rng);
        let norm = (p.f.norm_squared() + p.g.norm_squared() + p.h.norm_squared()).sqrt();
        assert!((norm - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let s = strategy();
        assert_eq!(s.perturbed(&Perturbation::zero(&s)), s);
    }

    #[test]
    fn structured_deviations() {
        let s = strategy();
        let z = s.zero_gains();
        assert!(z.f.iter().all(|f| f.iter().all(|v| *v == 0.0)));
        assert_eq!(z.h, s.h);
        let raw = vec![Vector::from_element(1, 9.0); 3];
        let b = s.environment_blind(&raw);
        assert_eq!(b.f, s.f);
        assert_eq!(b.h, raw);
    }
}
