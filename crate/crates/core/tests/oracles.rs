//! Values checked against independent derivations.

use moddpo::audit::{grid_argmax3, objective_at, OracleInstance};
use moddpo::corrupt::{corrupt, CorruptionSpec, NoiseSchedule};
use moddpo::objective::{
    closed_form_policy, kl_divergence_slices, mod_objective_value, Anchors, Hyperparams,
    PolicyDistribution, RewardVector,
};
use moddpo::policy::{backward, forward_logprobs, ModalityContext, ModalityTag, PolicyDims, PolicyParams};

fn three_way() -> OracleInstance {
    OracleInstance {
        reward: vec![0.1, 0.0, 0.0],
        reference: vec![1.0 / 3.0; 3],
        invariance: vec![1.0 / 3.0; 3],
        sensitivity: vec![1.0 / 3.0; 3],
        hp: Hyperparams {
            gamma_lpd: 0.0,
            ..Hyperparams::default()
        },
    }
}

#[test]
fn kl_by_direct_summation() {
    let by_hand = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let kl = kl_divergence_slices(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    assert!((kl - by_hand).abs() < 1e-15);
    assert!((kl - 0.1438).abs() < 5e-5);
}

#[test]
fn three_way_closed_form_matches_exponential_ratio_and_grid() {
    let inst = three_way();
    let uniform = PolicyDistribution::uniform(3);
    let anchors = Anchors {
        reference: &uniform,
        invariance: &uniform,
        sensitivity: &uniform,
    };
    let reward = RewardVector::new(inst.reward.clone()).unwrap();
    let p = closed_form_policy(&reward, anchors, &inst.hp).unwrap();

    // With uniform anchors the optimum is a softmax of r / τ, τ = 0.07.
    let w = (0.1f64 / 0.07).exp();
    let expected = [w / (w + 2.0), 1.0 / (w + 2.0), 1.0 / (w + 2.0)];
    for (a, b) in p.probs().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((p.probs()[0] - 0.676).abs() < 1e-3);

    let grid = grid_argmax3(&inst, 1e-3);
    let best = objective_at(&grid, &inst);
    let value = mod_objective_value(&p, &reward, anchors, &inst.hp).unwrap();
    assert!(value >= best - 1e-12);
    assert!((value - best).abs() < 1e-6, "closed form {value} vs grid {best}");
}

/// `ᾱ_t = Π_{s ≤ t} (1 − β_s)` with `β` linear from 1e-4 to 0.02 over 1000
/// steps, accumulated in a different order than the library does.
fn alpha_bar_by_hand(t: usize) -> f64 {
    let beta = |s: usize| 1e-4 + (0.02 - 1e-4) * (s - 1) as f64 / 999.0;
    (1..=t).rev().map(|s| (1.0 - beta(s)).ln()).sum::<f64>().exp()
}

#[test]
fn alpha_bar_matches_an_independent_product() {
    let schedule = NoiseSchedule::default();
    for t in [1, 2, 10, 100, 500, 999, 1000] {
        let lib = schedule.alpha_bar(t).unwrap();
        assert!((lib - alpha_bar_by_hand(t)).abs() < 1e-12, "t={t}: {lib}");
    }
    assert!((schedule.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
    let a500 = schedule.alpha_bar(500).unwrap();
    assert!((a500 - 0.0786).abs() < 1e-3, "{a500}");
}

#[test]
fn diffusion_moments_match_the_forward_process() {
    let schedule = NoiseSchedule::default();
    let t = 500;
    let a = schedule.alpha_bar(t).unwrap();
    let x = vec![2.0; 8];
    let n = 4000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for k in 0..n {
        let out = corrupt(&x, &CorruptionSpec::diffusion(t, k), &schedule, None).unwrap();
        for v in out {
            sum += v;
            sq += v * v;
        }
    }
    let m = n as f64 * 8.0;
    let mean = sum / m;
    let var = sq / m - mean * mean;
    // mean √ᾱ·x, variance 1 − ᾱ; tolerances are about 5 standard errors
    assert!((mean - a.sqrt() * 2.0).abs() < 0.03, "mean {mean}");
    assert!((var - (1.0 - a)).abs() < 0.04, "var {var}");
}

fn ctx() -> ModalityContext {
    ModalityContext {
        audio: (0..8).map(|i| 0.3 * i as f64 - 1.0).collect(),
        visual: (0..8).map(|i| (i as f64).sin()).collect(),
        prompt_id: 4,
        modality_tag: ModalityTag::AudioRelated,
    }
}

#[test]
fn forward_matches_a_plain_loop_reimplementation() {
    let params = PolicyParams::init(PolicyDims::default(), 77);
    let c = ctx();
    let d = params.dims;
    let mut hidden = vec![0.0; d.d_hidden];
    for (h, hv) in hidden.iter_mut().enumerate() {
        let mut s = params.e_prompt.data[c.prompt_id * d.d_hidden + h];
        for j in 0..d.d_audio {
            s += params.u_audio.data[h * d.d_audio + j] * c.audio[j];
        }
        for j in 0..d.d_visual {
            s += params.u_visual.data[h * d.d_visual + j] * c.visual[j];
        }
        *hv = s.tanh();
    }
    let logits: Vec<f64> = (0..d.vocab)
        .map(|k| params.b_out.data[k] + (0..d.d_hidden).map(|h| params.w_out.data[k * d.d_hidden + h] * hidden[h]).sum::<f64>())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let lib = forward_logprobs(&params, &c).unwrap();
    for (a, l) in lib.log_probs().iter().zip(&logits) {
        assert!((a - (l - lse)).abs() < 1e-12);
    }
}

#[test]
fn bias_gradient_is_one_hot_minus_softmax() {
    let params = PolicyParams::init(PolicyDims::default(), 5);
    let c = ctx();
    let y = 3;
    let mut upstream = vec![0.0; 8];
    upstream[y] = 1.0;
    let g = backward(&params, &c, &upstream).unwrap();
    let probs: Vec<f64> = forward_logprobs(&params, &c).unwrap().log_probs().iter().map(|l| l.exp()).collect();
    for (k, p) in probs.iter().enumerate() {
        let expected = f64::from(u8::from(k == y)) - p;
        assert!((g.b_out.data[k] - expected).abs() < 1e-14);
    }
}
