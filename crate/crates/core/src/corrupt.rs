//! Corruption of audio/visual feature vectors.
//!
//! Four strategies produce the `a'` / `v'` inputs: all zeros, a Gaussian
//! replacement, a feature vector swapped in from another item, and a
//! forward-diffusion step `√ᾱ_t·x + √(1−ᾱ_t)·ε` under a linear noise schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Zeros,
    Gaussian,
    RandomSwap,
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Diffusion step, used only by [`CorruptionKind::Diffusion`].
    pub t: usize,
    /// Standard deviation, used only by [`CorruptionKind::Gaussian`].
    pub sigma: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::Diffusion,
            t: 500,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn diffusion(t: usize, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::Diffusion,
            t,
            seed,
            ..Self::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        match self.kind {
            CorruptionKind::Diffusion if self.t > schedule.steps() => Err(Error::Domain(format!(
                "diffusion step {} outside [0, {}]",
                self.t,
                schedule.steps()
            ))),
            CorruptionKind::Gaussian if !(self.sigma > 0.0 && self.sigma.is_finite()) => Err(
                Error::Config(format!("gaussian sigma must be positive, got {}", self.sigma)),
            ),
            _ => Ok(()),
        }
    }
}

/// Linear-β forward-noising schedule with precomputed `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    /// `alpha_bar[t] = Π_{s=1..t} (1 − β_s)`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 1..=steps {
            let frac = if steps > 1 {
                (s - 1) as f64 / (steps - 1) as f64
            } else {
                0.0
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self {
            beta_start,
            beta_end,
            alpha_bar,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::Domain(format!("diffusion step {t} outside [0, {}]", self.steps()))
        })
    }
}

/// Candidate replacements for [`CorruptionKind::RandomSwap`].
#[derive(Debug, Clone, Copy)]
pub struct SwapPool<'a> {
    pub members: &'a [Vec<f64>],
    /// Index of the input's own source in `members`, never drawn.
    pub own_index: Option<usize>,
}

pub fn corrupt(
    features: &[f64],
    spec: &CorruptionSpec,
    schedule: &NoiseSchedule,
    pool: Option<SwapPool<'_>>,
) -> Result<Vec<f64>> {
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("features must be finite".into()));
    }
    spec.validate(schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        CorruptionKind::Zeros => Ok(vec![0.0; features.len()]),
        CorruptionKind::Gaussian => Ok(features
            .iter()
            .map(|_| spec.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()),
        CorruptionKind::RandomSwap => {
            let pool = pool.ok_or_else(|| Error::Domain("random_swap needs a feature pool".into()))?;
            let candidates: Vec<usize> = (0..pool.members.len())
                .filter(|&i| Some(i) != pool.own_index)
                .collect();
            if candidates.is_empty() {
                return Err(Error::Domain("random_swap pool has no other member".into()));
            }
            let pick = &pool.members[candidates[rng.random_range(0..candidates.len())]];
            if pick.len() != features.len() {
                return Err(Error::Dimension {
                    what: "random_swap pool member",
                    expected: features.len(),
                    got: pick.len(),
                });
            }
            Ok(pick.clone())
        }
        CorruptionKind::Diffusion => {
            let alpha_bar = schedule.alpha_bar(spec.t)?;
            if spec.t == 0 {
                return Ok(features.to_vec());
            }
            let signal = alpha_bar.sqrt();
            let noise = (1.0 - alpha_bar).sqrt();
            Ok(features
                .iter()
                .map(|x| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    signal * x + noise * eps
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_values() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar(500).unwrap() < s.alpha_bar(50).unwrap());
        assert!(s.alpha_bar(1001).is_err());
        for t in 1..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            assert!(s.alpha_bar(t).unwrap() > 0.0);
        }
    }

    #[test]
    fn zeros_and_identity() {
        let s = NoiseSchedule::default();
        let x = vec![0.3, -1.2, 4.0];
        let z = corrupt(&x, &CorruptionSpec { kind: CorruptionKind::Zeros, ..Default::default() }, &s, None).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        let same = corrupt(&x, &CorruptionSpec::diffusion(0, 9), &s, None).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn one_step_signal_scale() {
        // With ε removed, the signal coefficient at t = 1 is √(1 − 1e-4).
        let s = NoiseSchedule::default();
        let coefficient = s.alpha_bar(1).unwrap().sqrt();
        assert!((coefficient - 0.99995).abs() < 2e-9);
        let x = vec![1.0, 2.0];
        let a = corrupt(&x, &CorruptionSpec::diffusion(1, 5), &s, None).unwrap();
        let zero = corrupt(&[0.0, 0.0], &CorruptionSpec::diffusion(1, 5), &s, None).unwrap();
        for i in 0..2 {
            assert!((a[i] - zero[i] - coefficient * x[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_replaces_input() {
        let s = NoiseSchedule::default();
        let spec = CorruptionSpec {
            kind: CorruptionKind::Gaussian,
            sigma: 2.0,
            seed: 3,
            ..Default::default()
        };
        let a = corrupt(&[100.0; 4], &spec, &s, None).unwrap();
        let b = corrupt(&[-100.0; 4], &spec, &s, None).unwrap();
        assert_eq!(a, b);
        let bad = CorruptionSpec { sigma: 0.0, ..spec };
        assert!(corrupt(&[1.0], &bad, &s, None).is_err());
    }

    #[test]
    fn random_swap_never_returns_own_item() {
        let s = NoiseSchedule::default();
        let members = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        for seed in 0..200 {
            let spec = CorruptionSpec {
                kind: CorruptionKind::RandomSwap,
                seed,
                ..Default::default()
            };
            let out = corrupt(
                &members[1],
                &spec,
                &s,
                Some(SwapPool { members: &members, own_index: Some(1) }),
            )
            .unwrap();
            assert_ne!(out, members[1]);
        }
        let spec = CorruptionSpec { kind: CorruptionKind::RandomSwap, ..Default::default() };
        assert!(corrupt(&[1.0, 1.0], &spec, &s, None).is_err());
        let lonely = vec![vec![1.0, 1.0]];
        assert!(corrupt(
            &[1.0, 1.0],
            &spec,
            &s,
            Some(SwapPool { members: &lonely, own_index: Some(0) })
        )
        .is_err());
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let s = NoiseSchedule::default();
        assert!(corrupt(&[1.0], &CorruptionSpec::diffusion(1001, 0), &s, None).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let s = NoiseSchedule::default();
        let x = vec![0.5; 8];
        let a = corrupt(&x, &CorruptionSpec::diffusion(50, 42), &s, None).unwrap();
        let b = corrupt(&x, &CorruptionSpec::diffusion(50, 42), &s, None).unwrap();
        let c = corrupt(&x, &CorruptionSpec::diffusion(50, 43), &s, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
