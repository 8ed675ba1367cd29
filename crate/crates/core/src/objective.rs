//! Closed-form mathematics of modality-decoupled preference optimization.
//!
//! The per-context objective is
//!
//! ```text
//! J(p) = Σ_y p(y) r(y) − β·KL(p‖p_ref) − β_inv·KL(p‖q_inv) + β_sens·KL(p‖q_sens)
//! ```
//!
//! where `q_inv` is the policy evaluated with the prompt-irrelevant modality
//! corrupted and `q_sens` the policy with the prompt-relevant modality
//! corrupted. Both are held fixed within an optimization step. For
//! `τ = β + β_inv − β_sens > 0` the objective is strictly concave on the
//! simplex and its maximizer is the Gibbs-style policy
//!
//! ```text
//! π*(y) ∝ exp(r(y)/τ) · p_ref(y)^{β/τ} · q_inv(y)^{β_inv/τ} · q_sens(y)^{−β_sens/τ}
//! ```
//!
//! Inverting that policy gives an implied reward whose pairwise differences
//! (the normalizer cancels) feed a Bradley-Terry likelihood. Every loss in
//! this module is `softplus(−margin)` of such a reward difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which sum defines the margin temperature τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// `β + β_inv − β_sens`, the value the stationarity derivation produces.
    #[default]
    Appendix,
    /// `β + β_inv + β_sens`, as printed next to the closed-form policy.
    Maintext,
}

/// Regularization strengths of the decoupled objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Reference-KL strength.
    pub beta: f64,
    /// Invariance strength (irrelevant modality corrupted).
    pub beta_inv: f64,
    /// Sensitivity strength (relevant modality corrupted).
    pub beta_sens: f64,
    /// Language-prior debiasing strength.
    pub gamma_lpd: f64,
    pub tau_mode: TauMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            beta_inv: 0.02,
            beta_sens: 0.05,
            gamma_lpd: 0.05,
            tau_mode: TauMode::Appendix,
        }
    }
}

impl Hyperparams {
    /// Vanilla DPO: every decoupling strength zero.
    pub fn vanilla(beta: f64) -> Self {
        Self {
            beta,
            beta_inv: 0.0,
            beta_sens: 0.0,
            gamma_lpd: 0.0,
            tau_mode: TauMode::Appendix,
        }
    }

    pub fn tau(&self) -> f64 {
        match self.tau_mode {
            TauMode::Appendix => self.beta + self.beta_inv - self.beta_sens,
            TauMode::Maintext => self.beta + self.beta_inv + self.beta_sens,
        }
    }

    /// Temperature of the joint-audiovisual objective, which has no
    /// invariance term.
    pub fn tau_av(&self) -> f64 {
        match self.tau_mode {
            TauMode::Appendix => self.beta - self.beta_sens,
            TauMode::Maintext => self.beta + self.beta_sens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("beta", self.beta),
            ("beta_inv", self.beta_inv),
            ("beta_sens", self.beta_sens),
            ("gamma_lpd", self.gamma_lpd),
        ];
        for (name, value) in named {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        let tau = self.tau();
        if tau <= 0.0 {
            return Err(Error::Config(format!(
                "temperature τ = {tau} must be positive (beta_sens too large for beta + beta_inv)"
            )));
        }
        Ok(())
    }
}

/// A strictly positive probability vector over the response vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    probs: Vec<f64>,
}

/// Entries must sum to one within this tolerance.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

impl PolicyDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty distribution".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p <= 0.0) {
            return Err(Error::Domain(format!(
                "distribution entries must be finite and strictly positive, found {bad}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Domain(format!(
                "distribution sums to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    /// Normalizes a vector of unnormalized log-weights with a max shift.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Domain("log-weights must be finite".into()));
        }
        let unnorm: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        Self::new(unnorm.into_iter().map(|u| u / z).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }
}

/// Reward values `r(a, v, x, y)` over the vocabulary. The partition
/// function is never stored; it is absorbed by normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector(Vec<f64>);

impl RewardVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|r| !r.is_finite()) {
            return Err(Error::Domain("rewards must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(vocab: usize) -> Self {
        Self(vec![0.0; vocab])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Log-probabilities of the chosen and rejected response under one model
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogProbPair {
    pub chosen: f64,
    pub rejected: f64,
}

impl LogProbPair {
    pub fn new(chosen: f64, rejected: f64) -> Self {
        Self { chosen, rejected }
    }

    /// `log X(y_w) − log X(y_l)`.
    pub fn delta(&self) -> f64 {
        self.chosen - self.rejected
    }
}

/// Every log-probability a pairwise loss can consume for one preference pair.
///
/// The `irrelevant_corrupted` and `relevant_corrupted` slots are assigned by
/// the caller from the prompt's modality tag: for a visual prompt the
/// irrelevant modality is audio, for an audio prompt it is video. Slots a
/// given loss does not read may stay at their zero default.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairLogProbs {
    /// Trained policy on the clean input.
    pub policy: LogProbPair,
    /// Reference model on the clean input.
    pub reference: LogProbPair,
    /// Policy (detached) with the prompt-irrelevant modality corrupted.
    pub irrelevant_corrupted: LogProbPair,
    /// Policy (detached) with the prompt-relevant modality corrupted.
    pub relevant_corrupted: LogProbPair,
    /// Policy (detached) with both modalities corrupted.
    pub both_corrupted: LogProbPair,
    /// Reference model on the text-only input.
    pub reference_text: LogProbPair,
}

impl PairLogProbs {
    pub fn validate(&self) -> Result<()> {
        let slots = [
            self.policy,
            self.reference,
            self.irrelevant_corrupted,
            self.relevant_corrupted,
            self.both_corrupted,
            self.reference_text,
        ];
        for slot in slots {
            for lp in [slot.chosen, slot.rejected] {
                if !lp.is_finite() || lp > 0.0 {
                    return Err(Error::Domain(format!(
                        "log-probability {lp} is not a finite value <= 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `Σ_y p(y) ln(p(y)/q(y))` on raw slices. Terms with `p(y) = 0` contribute
/// nothing; `q(y) = 0` where `p(y) > 0` is a domain error.
pub fn kl_divergence_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            what: "kl_divergence",
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::Domain(format!(
                "q has zero mass where p = {pi} (divergence is infinite)"
            )));
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative value for p ≈ q.
    Ok(total.max(0.0))
}

/// Kullback-Leibler divergence in nats.
pub fn kl_divergence(p: &PolicyDistribution, q: &PolicyDistribution) -> Result<f64> {
    kl_divergence_slices(p.probs(), q.probs())
}

fn check_vocab(expected: usize, got: usize, what: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Reference, invariance and sensitivity anchors of one context.
#[derive(Debug, Clone, Copy)]
pub struct Anchors<'a> {
    pub reference: &'a PolicyDistribution,
    pub invariance: &'a PolicyDistribution,
    pub sensitivity: &'a PolicyDistribution,
}

/// Value of the decoupled objective at `p`.
pub fn mod_objective_value(
    p: &PolicyDistribution,
    reward: &RewardVector,
    anchors: Anchors<'_>,
    hp: &Hyperparams,
) -> Result<f64> {
    check_vocab(p.len(), reward.values().len(), "mod_objective_value reward")?;
    let expected_reward: f64 = p
        .probs()
        .iter()
        .zip(reward.values())
        .map(|(pi, ri)| pi * ri)
        .sum();
    Ok(expected_reward - hp.beta * kl_divergence(p, anchors.reference)?
        - hp.beta_inv * kl_divergence(p, anchors.invariance)?
        + hp.beta_sens * kl_divergence(p, anchors.sensitivity)?)
}

/// Unnormalized log-kernel of the optimal policy,
/// `r/τ + (β/τ)·ln p_ref + (β_inv/τ)·ln q_inv − (β_sens/τ)·ln q_sens`.
pub fn closed_form_log_kernel(
    reward: &RewardVector,
    anchors: Anchors<'_>,
    hp: &Hyperparams,
) -> Result<Vec<f64>> {
    hp.validate()?;
    let vocab = reward.values().len();
    check_vocab(vocab, anchors.reference.len(), "closed_form_policy reference")?;
    check_vocab(vocab, anchors.invariance.len(), "closed_form_policy invariance")?;
    check_vocab(vocab, anchors.sensitivity.len(), "closed_form_policy sensitivity")?;
    let tau = hp.tau();
    Ok((0..vocab)
        .map(|y| {
            (reward.values()[y]
                + hp.beta * anchors.reference.probs()[y].ln()
                + hp.beta_inv * anchors.invariance.probs()[y].ln()
                - hp.beta_sens * anchors.sensitivity.probs()[y].ln())
                / tau
        })
        .collect())
}

/// The maximizer of [`mod_objective_value`] over the simplex.
pub fn closed_form_policy(
    reward: &RewardVector,
    anchors: Anchors<'_>,
    hp: &Hyperparams,
) -> Result<PolicyDistribution> {
    let kernel = closed_form_log_kernel(reward, anchors, hp)?;
    PolicyDistribution::from_log_weights(&kernel).map_err(|e| match e {
        Error::Domain(msg) => Error::Domain(format!("closed-form policy underflows: {msg}")),
        other => other,
    })
}

/// Vanilla DPO margin `β·Δlog π_θ − β·Δlog π_ref`.
pub fn dpo_margin(pl: &PairLogProbs, hp: &Hyperparams) -> f64 {
    hp.beta * pl.policy.delta() - hp.beta * pl.reference.delta()
}

/// Implied-reward difference of the decoupled objective.
pub fn mod_margin(pl: &PairLogProbs, hp: &Hyperparams) -> f64 {
    hp.tau() * pl.policy.delta()
        - hp.beta * pl.reference.delta()
        - hp.beta_inv * pl.irrelevant_corrupted.delta()
        + hp.beta_sens * pl.relevant_corrupted.delta()
}

/// Language-prior debiasing contribution `−γ·(log π_ref(y_w|x) − log π_ref(y_l|x))`
/// with the reference on text-only input standing in for the language prior.
pub fn lpd_margin(pl: &PairLogProbs, hp: &Hyperparams) -> f64 {
    -hp.gamma_lpd * pl.reference_text.delta()
}

/// Margin of the joint-audiovisual objective (invariance term dropped).
pub fn av_margin(pl: &PairLogProbs, hp: &Hyperparams) -> f64 {
    hp.tau_av() * pl.policy.delta() - hp.beta * pl.reference.delta()
        + hp.beta_sens * pl.both_corrupted.delta()
}

/// `−ln σ(margin)`, evaluated as a stable softplus of `−margin`.
pub fn pair_loss(margin: f64) -> f64 {
    let x = -margin;
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `d pair_loss / d margin = −σ(−margin)`.
pub fn pair_loss_slope(margin: f64) -> f64 {
    -sigmoid(-margin)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Where the language-prior term enters the MoD-DPO++ loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpdPlacement {
    /// Added to the reward inside the sigmoid.
    #[default]
    Inside,
    /// Added to the loss after the sigmoid; constant in the parameters.
    Outside,
}

/// MoD-DPO++ loss for one pair.
pub fn modpp_pair_loss(pl: &PairLogProbs, hp: &Hyperparams, placement: LpdPlacement) -> f64 {
    let margin = mod_margin(pl, hp);
    let lpd = lpd_margin(pl, hp);
    match placement {
        LpdPlacement::Inside => pair_loss(margin + lpd),
        LpdPlacement::Outside => pair_loss(margin) + lpd,
    }
}

/// Loss for prompts that need both modalities.
pub fn av_pair_loss(pl: &PairLogProbs, hp: &Hyperparams) -> Result<f64> {
    let tau_av = hp.tau_av();
    if tau_av <= 0.0 {
        return Err(Error::Config(format!(
            "audiovisual temperature β − β_sens = {tau_av} must be positive"
        )));
    }
    Ok(pair_loss(av_margin(pl, hp)))
}

/// Which pairwise objective a pair is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairObjective {
    Dpo,
    Mod,
    ModPlusPlus(LpdPlacement),
    Audiovisual,
}

/// Loss value together with its slope with respect to the clean-policy
/// log-ratio `Δlog π_θ`, the only trainable quantity in any margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossEval {
    pub loss: f64,
    pub margin: f64,
    pub d_loss_d_policy_delta: f64,
}

pub fn evaluate_pair(
    objective: PairObjective,
    pl: &PairLogProbs,
    hp: &Hyperparams,
) -> Result<PairLossEval> {
    let (margin, scale, outside) = match objective {
        PairObjective::Dpo => (dpo_margin(pl, hp), hp.beta, 0.0),
        PairObjective::Mod => (mod_margin(pl, hp), hp.tau(), 0.0),
        PairObjective::ModPlusPlus(LpdPlacement::Inside) => {
            (mod_margin(pl, hp) + lpd_margin(pl, hp), hp.tau(), 0.0)
        }
        PairObjective::ModPlusPlus(LpdPlacement::Outside) => {
            (mod_margin(pl, hp), hp.tau(), lpd_margin(pl, hp))
        }
        PairObjective::Audiovisual => {
            if hp.tau_av() <= 0.0 {
                return Err(Error::Config(format!(
                    "audiovisual temperature β − β_sens = {} must be positive",
                    hp.tau_av()
                )));
            }
            (av_margin(pl, hp), hp.tau_av(), 0.0)
        }
    };
    Ok(PairLossEval {
        loss: pair_loss(margin) + outside,
        margin,
        d_loss_d_policy_delta: pair_loss_slope(margin) * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> PolicyDistribution {
        PolicyDistribution::new(p.to_vec()).unwrap()
    }

    fn published_hp() -> Hyperparams {
        Hyperparams {
            beta: 0.1,
            beta_inv: 0.02,
            beta_sens: 0.05,
            gamma_lpd: 0.05,
            tau_mode: TauMode::Appendix,
        }
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_one_hot_against_uniform_approaches_ln2() {
        let p = dist(&[1.0 - 1e-12, 1e-12]);
        let q = PolicyDistribution::uniform(2);
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-9, "{kl}");
    }

    #[test]
    fn kl_hand_arithmetic() {
        // 0.5 ln 2 + 0.5 ln(2/3)
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        assert!((kl - 0.143_841_036_225_890_4).abs() < 1e-12);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(
            kl_divergence_slices(&[0.5, 0.5], &[1.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            kl_divergence_slices(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert_eq!(kl_divergence_slices(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    }

    #[test]
    fn distribution_rejects_zero_and_unnormalized() {
        assert!(PolicyDistribution::new(vec![1.0, 0.0]).is_err());
        assert!(PolicyDistribution::new(vec![0.6, 0.6]).is_err());
        assert!(PolicyDistribution::new(vec![]).is_err());
    }

    #[test]
    fn objective_vanishes_at_reference_with_zero_reward() {
        let u = PolicyDistribution::uniform(4);
        let q = dist(&[0.1, 0.2, 0.3, 0.4]);
        let hp = Hyperparams {
            beta_inv: 0.0,
            beta_sens: 0.0,
            ..published_hp()
        };
        let anchors = Anchors {
            reference: &q,
            invariance: &u,
            sensitivity: &u,
        };
        let v = mod_objective_value(&q, &RewardVector::zeros(4), anchors, &hp).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn objective_is_expected_reward_when_all_uniform() {
        let u = PolicyDistribution::uniform(3);
        let anchors = Anchors {
            reference: &u,
            invariance: &u,
            sensitivity: &u,
        };
        let r = RewardVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let v = mod_objective_value(&u, &r, anchors, &published_hp()).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_collapses_to_reference() {
        let q = dist(&[0.1, 0.2, 0.3, 0.4]);
        let u = PolicyDistribution::uniform(4);
        let hp = Hyperparams::vanilla(0.1);
        let anchors = Anchors {
            reference: &q,
            invariance: &u,
            sensitivity: &u,
        };
        let p = closed_form_policy(&RewardVector::zeros(4), anchors, &hp).unwrap();
        for (a, b) in p.probs().iter().zip(q.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_three_way_example() {
        // exp(0.1/0.07) / (exp(0.1/0.07) + 2) and 1 / (exp(0.1/0.07) + 2)
        let u = PolicyDistribution::uniform(3);
        let anchors = Anchors {
            reference: &u,
            invariance: &u,
            sensitivity: &u,
        };
        let r = RewardVector::new(vec![0.1, 0.0, 0.0]).unwrap();
        let p = closed_form_policy(&r, anchors, &published_hp()).unwrap();
        assert!((p.probs()[0] - 0.675_994_455_987_434).abs() < 1e-12);
        assert!((p.probs()[1] - 0.162_002_772_006_283).abs() < 1e-12);
    }

    #[test]
    fn closed_form_rejects_nonpositive_tau() {
        let u = PolicyDistribution::uniform(3);
        let anchors = Anchors {
            reference: &u,
            invariance: &u,
            sensitivity: &u,
        };
        let hp = Hyperparams {
            beta: 0.01,
            beta_inv: 0.0,
            beta_sens: 0.05,
            ..published_hp()
        };
        assert!(matches!(
            closed_form_policy(&RewardVector::zeros(3), anchors, &hp),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn maintext_tau_uses_plus_sign() {
        let hp = Hyperparams {
            tau_mode: TauMode::Maintext,
            ..published_hp()
        };
        assert!((hp.tau() - 0.17).abs() < 1e-15);
        assert!((published_hp().tau() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn hyperparams_reject_negative_strengths() {
        let hp = Hyperparams {
            gamma_lpd: -0.1,
            ..published_hp()
        };
        assert!(hp.validate().is_err());
        assert!(published_hp().validate().is_ok());
    }

    #[test]
    fn mod_margin_examples() {
        let zero = PairLogProbs::default();
        assert_eq!(mod_margin(&zero, &published_hp()), 0.0);

        let pl = PairLogProbs {
            policy: LogProbPair::new(-1.0, -2.0),
            reference: LogProbPair::new(-1.0, -1.5),
            irrelevant_corrupted: LogProbPair::new(-1.0, -1.2),
            relevant_corrupted: LogProbPair::new(-1.3, -1.0),
            ..Default::default()
        };
        // 0.07·1 − 0.1·0.5 − 0.02·0.2 + 0.05·(−0.3)
        assert!((mod_margin(&pl, &published_hp()) - 0.001).abs() < 1e-12);

        let vanilla = Hyperparams::vanilla(0.1);
        assert!((mod_margin(&pl, &vanilla) - 0.1 * (1.0 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn lpd_margin_examples() {
        let pl = PairLogProbs {
            reference_text: LogProbPair::new(-1.0, -2.0),
            ..Default::default()
        };
        assert!((lpd_margin(&pl, &published_hp()) + 0.05).abs() < 1e-15);
        assert_eq!(lpd_margin(&pl, &Hyperparams::vanilla(0.1)), 0.0);
        let equal = PairLogProbs {
            reference_text: LogProbPair::new(-1.5, -1.5),
            ..Default::default()
        };
        assert_eq!(lpd_margin(&equal, &published_hp()), 0.0);
    }

    #[test]
    fn pair_loss_examples() {
        assert!((pair_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(pair_loss(50.0) < 1e-21);
        assert!((pair_loss(-1.0) - 1.313_261_687_518_222_8).abs() < 1e-14);
        // no overflow far in the tails
        assert!((pair_loss(-800.0) - 800.0).abs() < 1e-12);
        assert_eq!(pair_loss(800.0), 0.0);
    }

    #[test]
    fn modpp_placements() {
        let pl = PairLogProbs {
            policy: LogProbPair::new(-0.5, -1.5),
            reference: LogProbPair::new(-1.0, -1.2),
            reference_text: LogProbPair::new(-0.7, -1.9),
            ..Default::default()
        };
        let no_lpd = Hyperparams {
            gamma_lpd: 0.0,
            ..published_hp()
        };
        let base = pair_loss(mod_margin(&pl, &no_lpd));
        assert_eq!(modpp_pair_loss(&pl, &no_lpd, LpdPlacement::Inside), base);
        assert_eq!(modpp_pair_loss(&pl, &no_lpd, LpdPlacement::Outside), base);

        let zero = PairLogProbs::default();
        for placement in [LpdPlacement::Inside, LpdPlacement::Outside] {
            let l = modpp_pair_loss(&zero, &published_hp(), placement);
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn modpp_inside_hand_value() {
        // mod margin 0.5 (policy only, τ = 0.07) and lpd −0.1 (γ = 0.05, Δ_text = 2)
        let pl = PairLogProbs {
            policy: LogProbPair::new(-1.0, -1.0 - 0.5 / 0.07),
            reference_text: LogProbPair::new(-1.0, -3.0),
            ..Default::default()
        };
        let hp = published_hp();
        assert!((mod_margin(&pl, &hp) - 0.5).abs() < 1e-12);
        assert!((lpd_margin(&pl, &hp) + 0.1).abs() < 1e-15);
        let l = modpp_pair_loss(&pl, &hp, LpdPlacement::Inside);
        assert!((l - 0.513_015_252_399_952_6).abs() < 1e-12);
    }

    #[test]
    fn av_loss_examples() {
        let hp = Hyperparams {
            beta_inv: 0.0,
            ..published_hp()
        };
        let pl = PairLogProbs {
            policy: LogProbPair::new(-1.0, -2.0),
            both_corrupted: LogProbPair::new(-1.0, -1.5),
            ..Default::default()
        };
        let l = av_pair_loss(&pl, &hp).unwrap();
        assert!((l - 0.656_350_140_826_795_1).abs() < 1e-12);

        let zero = PairLogProbs::default();
        assert!((av_pair_loss(&zero, &hp).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let no_sens = Hyperparams::vanilla(0.1);
        let dpo = pair_loss(dpo_margin(&pl, &no_sens));
        assert!((av_pair_loss(&pl, &no_sens).unwrap() - dpo).abs() < 1e-15);

        let bad = Hyperparams {
            beta: 0.04,
            beta_inv: 0.05,
            ..published_hp()
        };
        assert!(matches!(av_pair_loss(&pl, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn evaluate_pair_slope_matches_finite_difference() {
        let pl = PairLogProbs {
            policy: LogProbPair::new(-0.4, -1.7),
            reference: LogProbPair::new(-0.9, -1.1),
            irrelevant_corrupted: LogProbPair::new(-0.6, -1.4),
            relevant_corrupted: LogProbPair::new(-1.6, -0.5),
            both_corrupted: LogProbPair::new(-1.2, -0.8),
            reference_text: LogProbPair::new(-0.8, -1.3),
        };
        let hp = published_hp();
        for objective in [
            PairObjective::Dpo,
            PairObjective::Mod,
            PairObjective::ModPlusPlus(LpdPlacement::Inside),
            PairObjective::ModPlusPlus(LpdPlacement::Outside),
            PairObjective::Audiovisual,
        ] {
            let h = 1e-6;
            let mut up = pl;
            up.policy.chosen += h;
            let mut down = pl;
            down.policy.chosen -= h;
            let fd = (evaluate_pair(objective, &up, &hp).unwrap().loss
                - evaluate_pair(objective, &down, &hp).unwrap().loss)
                / (2.0 * h);
            let analytic = evaluate_pair(objective, &pl, &hp).unwrap().d_loss_d_policy_delta;
            assert!((fd - analytic).abs() < 1e-8, "{objective:?}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn pair_log_probs_validation() {
        let mut pl = PairLogProbs::default();
        assert!(pl.validate().is_ok());
        pl.reference_text.chosen = 0.5;
        assert!(pl.validate().is_err());
        pl.reference_text.chosen = f64::NAN;
        assert!(pl.validate().is_err());
    }
}
