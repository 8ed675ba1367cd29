//! Preference-optimization loop.
//!
//! Every pair in a step runs these passes:
//!
//! | variant | policy fwd (clean, irrelevant-corrupted, relevant-corrupted) | reference fwd (clean, text-only) |
//! |---------|------------------------------------|-----------------------|
//! | `dpo`   | 2, –, –                            | 2, –                  |
//! | `mod`   | 2, 2, 2                            | 2, –                  |
//! | `modpp` | 2, 2, 2                            | 2, 2                  |
//!
//! Counts are per response (`y_w` and `y_l`). Only the clean policy pass is
//! tracked and back-propagated; corrupted passes go through
//! [`forward_detached`] and the reference is never differentiated.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrupt::{corrupt, CorruptionSpec, NoiseSchedule, SwapPool};
use crate::error::{Error, Result};
use crate::objective::{
    evaluate_pair, Hyperparams, LogProbPair, LpdPlacement, PairLogProbs, PairObjective,
};
use crate::policy::{
    backward_into, forward_detached, forward_logprobs, GradAccumulator, ModalityContext,
    ModalityTag, PolicyDims, PolicyParams,
};
use crate::seeding;
use crate::synth::PreferencePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Dpo,
    Mod,
    Modpp,
    ModWithAv,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Dpo => "dpo",
            LossVariant::Mod => "mod",
            LossVariant::Modpp => "modpp",
            LossVariant::ModWithAv => "mod_with_av",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hp: Hyperparams,
    pub loss_variant: LossVariant,
    pub lpd_placement: LpdPlacement,
    pub corruption: CorruptionSpec,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alternate_batches: bool,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparams::default(),
            loss_variant: LossVariant::Modpp,
            lpd_placement: LpdPlacement::Inside,
            corruption: CorruptionSpec::default(),
            lr: 3e-7,
            epochs: 1,
            batch_size: 16,
            seed: 0,
            alternate_batches: true,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the toy policy: the same objective weights with a
    /// step size large enough to move a few hundred parameters.
    pub fn desk_scale() -> Self {
        Self {
            lr: 1.0,
            epochs: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.loss_variant == LossVariant::ModWithAv && self.hp.tau_av() <= 0.0 {
            return Err(Error::Config(
                "mod_with_av needs beta > beta_sens (positive audiovisual temperature)".into(),
            ));
        }
        Ok(())
    }

    fn objective_for(&self, tag: ModalityTag) -> PairObjective {
        match (self.loss_variant, tag) {
            (LossVariant::Dpo, _) => PairObjective::Dpo,
            (LossVariant::Mod, _) => PairObjective::Mod,
            (LossVariant::ModWithAv, ModalityTag::Audiovisual) => PairObjective::Audiovisual,
            (LossVariant::Modpp | LossVariant::ModWithAv, _) => {
                PairObjective::ModPlusPlus(self.lpd_placement)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent: the step is `−lr · gradient`.
    #[default]
    Sgd,
    /// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Parameter-update rule with its running state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: PolicyParams,
    second: PolicyParams,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, dims: PolicyDims) -> Self {
        Self {
            kind,
            first: PolicyParams::zeros(dims),
            second: PolicyParams::zeros(dims),
            t: 0,
        }
    }

    pub fn apply(&mut self, params: &mut PolicyParams, grad: &GradAccumulator, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, -lr),
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                let states = self.first.tensors_mut().into_iter().zip(self.second.tensors_mut());
                for (((_, p), (_, g)), ((_, m), (_, v))) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(states)
                {
                    for (((p, g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Per-pair pass tally; counts individual response evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PassCounter {
    pub fwd_policy: u64,
    pub fwd_ref: u64,
    pub bwd_policy: u64,
    pub bwd_ref: u64,
}

impl PassCounter {
    pub const fn new(fwd_policy: u64, fwd_ref: u64, bwd_policy: u64, bwd_ref: u64) -> Self {
        Self {
            fwd_policy,
            fwd_ref,
            bwd_policy,
            bwd_ref,
        }
    }

    pub fn tuple(&self) -> (u64, u64, u64, u64) {
        (self.fwd_policy, self.fwd_ref, self.bwd_policy, self.bwd_ref)
    }

    fn add(&mut self, other: &PassCounter) {
        self.fwd_policy += other.fwd_policy;
        self.fwd_ref += other.fwd_ref;
        self.bwd_policy += other.bwd_policy;
        self.bwd_ref += other.bwd_ref;
    }
}

/// Training pairs plus the feature pools random-swap corruption draws from.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub pairs: Vec<PreferencePair>,
    audio_pool: Vec<Vec<f64>>,
    visual_pool: Vec<Vec<f64>>,
}

impl TrainData {
    pub fn new(pairs: Vec<PreferencePair>) -> Self {
        let audio_pool = pairs.iter().map(|p| p.context.audio.clone()).collect();
        let visual_pool = pairs.iter().map(|p| p.context.visual.clone()).collect();
        Self {
            pairs,
            audio_pool,
            visual_pool,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Modality {
    Audio,
    Visual,
}

/// Corruption applied to one context; `seed_path` identifies the draw.
fn corrupted_context(
    ctx: &ModalityContext,
    which: &[Modality],
    spec: &CorruptionSpec,
    schedule: &NoiseSchedule,
    data: &TrainData,
    own_index: usize,
    seed: u64,
) -> Result<ModalityContext> {
    let mut out = ctx.clone();
    for &m in which {
        let (features, pool, salt) = match m {
            Modality::Audio => (&mut out.audio, &data.audio_pool, 0),
            Modality::Visual => (&mut out.visual, &data.visual_pool, 1),
        };
        let draw = spec.with_seed(seeding::derive(seed, &[salt]));
        *features = corrupt(
            features,
            &draw,
            schedule,
            Some(SwapPool {
                members: pool,
                own_index: Some(own_index),
            }),
        )?;
    }
    Ok(out)
}

/// `(irrelevant, relevant)` modalities of a prompt.
fn roles(tag: ModalityTag) -> (&'static [Modality], &'static [Modality]) {
    match tag {
        ModalityTag::VisualRelated => (&[Modality::Audio], &[Modality::Visual]),
        ModalityTag::AudioRelated => (&[Modality::Visual], &[Modality::Audio]),
        ModalityTag::Audiovisual => (&[], &[Modality::Audio, Modality::Visual]),
    }
}

fn read_pair(log_probs: &[f64], pair: &PreferencePair, counter: &mut u64) -> LogProbPair {
    *counter += 2;
    LogProbPair::new(log_probs[pair.y_w], log_probs[pair.y_l])
}

/// Result of evaluating a batch without updating parameters.
#[derive(Debug, Clone)]
pub struct BatchEval {
    /// Mean loss over the batch.
    pub loss: f64,
    pub mean_margin: f64,
    /// Gradient of the mean loss with stop-gradient passes held fixed.
    pub grad: GradAccumulator,
    /// Log-probabilities each pair's loss was built from.
    pub log_probs: Vec<PairLogProbs>,
    pub counters: Vec<PassCounter>,
}

/// Runs every forward pass for a batch and accumulates the gradient of the
/// mean loss through the tracked clean-policy passes only.
pub fn evaluate_batch(
    params: &PolicyParams,
    reference: &PolicyParams,
    data: &TrainData,
    batch: &[usize],
    step: usize,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = PolicyParams::zeros(params.dims);
    let mut loss = 0.0;
    let mut margin = 0.0;
    let mut log_probs = Vec::with_capacity(batch.len());
    let mut counters = Vec::with_capacity(batch.len());
    for &idx in batch {
        let pair = data
            .pairs
            .get(idx)
            .ok_or_else(|| Error::Contract(format!("batch index {idx} out of range")))?;
        let ctx = &pair.context;
        let objective = cfg.objective_for(ctx.modality_tag);
        let mut counter = PassCounter::default();
        let mut pl = PairLogProbs::default();

        let tracked = forward_logprobs(params, ctx)?;
        pl.policy = read_pair(tracked.log_probs(), pair, &mut counter.fwd_policy);
        let reference_clean = forward_detached(reference, ctx)?;
        pl.reference = read_pair(reference_clean.log_probs(), pair, &mut counter.fwd_ref);

        let seed = seeding::derive(cfg.seed, &[step as u64, idx as u64]);
        let (irrelevant, relevant) = roles(ctx.modality_tag);
        match objective {
            PairObjective::Dpo => {}
            PairObjective::Audiovisual => {
                let both = corrupted_context(ctx, relevant, &cfg.corruption, schedule, data, idx, seeding::derive(seed, &[2]))?;
                let lp = forward_detached(params, &both)?;
                pl.both_corrupted = read_pair(lp.log_probs(), pair, &mut counter.fwd_policy);
            }
            PairObjective::Mod | PairObjective::ModPlusPlus(_) => {
                let irr = corrupted_context(ctx, irrelevant, &cfg.corruption, schedule, data, idx, seeding::derive(seed, &[0]))?;
                let lp = forward_detached(params, &irr)?;
                pl.irrelevant_corrupted = read_pair(lp.log_probs(), pair, &mut counter.fwd_policy);
                let rel = corrupted_context(ctx, relevant, &cfg.corruption, schedule, data, idx, seeding::derive(seed, &[1]))?;
                let lp = forward_detached(params, &rel)?;
                pl.relevant_corrupted = read_pair(lp.log_probs(), pair, &mut counter.fwd_policy);
                if matches!(objective, PairObjective::ModPlusPlus(_)) {
                    let lp = forward_detached(reference, &ctx.text_only())?;
                    pl.reference_text = read_pair(lp.log_probs(), pair, &mut counter.fwd_ref);
                }
            }
        }

        let eval = evaluate_pair(objective, &pl, &cfg.hp)?;
        loss += eval.loss * scale;
        margin += eval.margin * scale;

        let g = eval.d_loss_d_policy_delta * scale;
        let mut upstream = vec![0.0; params.dims.vocab];
        upstream[pair.y_w] += g;
        upstream[pair.y_l] -= g;
        backward_into(params, &tracked, &upstream, &mut grad)?;
        counter.bwd_policy += 2;

        log_probs.push(pl);
        counters.push(counter);
    }
    Ok(BatchEval {
        loss,
        mean_margin: margin,
        grad,
        log_probs,
        counters,
    })
}

/// Mean batch loss as a function of the clean-policy parameters alone, with
/// every other log-probability taken from `frozen`.
pub fn frozen_surrogate_loss(
    params: &PolicyParams,
    data: &TrainData,
    batch: &[usize],
    frozen: &[PairLogProbs],
    cfg: &TrainConfig,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (&idx, frozen_pl) in batch.iter().zip(frozen) {
        let pair = &data.pairs[idx];
        let lp = forward_detached(params, &pair.context)?;
        let pl = PairLogProbs {
            policy: LogProbPair::new(lp.log_probs()[pair.y_w], lp.log_probs()[pair.y_l]),
            ..*frozen_pl
        };
        loss += evaluate_pair(cfg.objective_for(pair.context.modality_tag), &pl, &cfg.hp)?.loss * scale;
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub mean_margin: f64,
    /// Counter of every pair in the batch, in batch order.
    pub counters: Vec<PassCounter>,
}

fn batch_tag(data: &TrainData, batch: &[usize]) -> Option<ModalityTag> {
    let first = data.pairs.get(*batch.first()?)?.context.modality_tag;
    batch
        .iter()
        .all(|&i| data.pairs.get(i).map(|p| p.context.modality_tag) == Some(first))
        .then_some(first)
}

/// One optimizer update on `params`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut PolicyParams,
    optimizer: &mut Optimizer,
    reference: &PolicyParams,
    data: &TrainData,
    batch: &[usize],
    step: usize,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<StepOutcome> {
    if cfg.alternate_batches && batch_tag(data, batch).is_none() {
        return Err(Error::Contract(
            "batch mixes modality tags while alternation is enabled".into(),
        ));
    }
    let eval = evaluate_batch(params, reference, data, batch, step, cfg, schedule)?;
    optimizer.apply(params, &eval.grad, cfg.lr);
    if !params.is_finite() {
        return Err(Error::Domain(format!("parameters diverged at step {step}")));
    }
    Ok(StepOutcome {
        loss: eval.loss,
        mean_margin: eval.mean_margin,
        counters: eval.counters,
    })
}

/// Batches for every step of training, in order.
///
/// With alternation the visual-related and audio-related streams are each
/// shuffled per epoch, cut into batches, and interleaved `V, A, V, A, …`
/// (plus an audiovisual batch per round under `mod_with_av`); shorter
/// streams are cycled so every round is complete.
pub fn batch_schedule(data: &TrainData, cfg: &TrainConfig) -> Result<Vec<(ModalityTag, Vec<usize>)>> {
    let use_av = cfg.loss_variant == LossVariant::ModWithAv;
    let indices_of = |tag: ModalityTag| -> Vec<usize> {
        (0..data.len())
            .filter(|&i| data.pairs[i].context.modality_tag == tag)
            .collect()
    };
    let mut schedule = Vec::new();
    if cfg.alternate_batches {
        let mut tags = vec![ModalityTag::VisualRelated, ModalityTag::AudioRelated];
        if use_av {
            tags.push(ModalityTag::Audiovisual);
        }
        let streams: Vec<Vec<usize>> = tags.iter().map(|&t| indices_of(t)).collect();
        for (tag, s) in tags.iter().zip(&streams) {
            if s.is_empty() {
                return Err(Error::Config(format!(
                    "alternating batches need {} pairs but the dataset has none",
                    tag.as_str()
                )));
            }
        }
        for epoch in 0..cfg.epochs {
            let batches: Vec<Vec<Vec<usize>>> = streams
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let mut s = s.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, &[epoch as u64, k as u64]));
                    s.shuffle(&mut rng);
                    s.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
                })
                .collect();
            let rounds = batches.iter().map(Vec::len).max().unwrap_or(0);
            for r in 0..rounds {
                for (tag, b) in tags.iter().zip(&batches) {
                    schedule.push((*tag, b[r % b.len()].clone()));
                }
            }
        }
    } else {
        let mut all: Vec<usize> = (0..data.len())
            .filter(|&i| use_av || data.pairs[i].context.modality_tag != ModalityTag::Audiovisual)
            .collect();
        if all.is_empty() {
            return Err(Error::Config("no trainable pairs in the dataset".into()));
        }
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, &[epoch as u64, 99]));
            all.shuffle(&mut rng);
            for b in all.chunks(cfg.batch_size) {
                let tag = batch_tag(data, b).unwrap_or(ModalityTag::Audiovisual);
                schedule.push((tag, b.to_vec()));
            }
        }
    }
    Ok(schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub modality: ModalityTag,
    pub batch_size: usize,
    pub loss: f64,
    pub mean_margin: f64,
    /// The per-pair counter when every pair in the step had the same one.
    pub per_pair: Option<PassCounter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterSummary {
    pub loss_variant: LossVariant,
    pub steps: usize,
    pub pairs_processed: u64,
    pub totals: PassCounter,
    /// Distinct per-pair counters seen, with how many pairs had each.
    pub per_pair: Vec<(PassCounter, u64)>,
}

impl CounterSummary {
    fn new(variant: LossVariant) -> Self {
        Self {
            loss_variant: variant,
            steps: 0,
            pairs_processed: 0,
            totals: PassCounter::default(),
            per_pair: Vec::new(),
        }
    }

    fn record(&mut self, counters: &[PassCounter]) {
        self.steps += 1;
        for c in counters {
            self.pairs_processed += 1;
            self.totals.add(c);
            match self.per_pair.iter_mut().find(|(k, _)| k == c) {
                Some((_, n)) => *n += 1,
                None => self.per_pair.push((*c, 1)),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub trace: Vec<StepRecord>,
    pub counters: CounterSummary,
}

/// Trains a copy of `init` against the frozen `reference`.
pub fn train(
    init: &PolicyParams,
    reference: &PolicyParams,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_with_limit(init, reference, data, cfg, None)
}

/// As [`train`], stopping after `max_steps` steps when given.
pub fn train_with_limit(
    init: &PolicyParams,
    reference: &PolicyParams,
    data: &TrainData,
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if init.dims != reference.dims {
        return Err(Error::Config("policy and reference dimensions differ".into()));
    }
    let noise = NoiseSchedule::default();
    cfg.corruption.validate(&noise)?;
    let schedule = batch_schedule(data, cfg)?;
    let mut params = init.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, init.dims);
    let mut trace = Vec::with_capacity(schedule.len());
    let mut counters = CounterSummary::new(cfg.loss_variant);
    for (step, (tag, batch)) in schedule.iter().enumerate() {
        if max_steps.is_some_and(|m| step >= m) {
            break;
        }
        let out = train_step(&mut params, &mut optimizer, reference, data, batch, step, cfg, &noise)?;
        let first = out.counters[0];
        trace.push(StepRecord {
            step,
            modality: *tag,
            batch_size: batch.len(),
            loss: out.loss,
            mean_margin: out.mean_margin,
            per_pair: out.counters.iter().all(|c| *c == first).then_some(first),
        });
        counters.record(&out.counters);
    }
    Ok(TrainOutput {
        params,
        trace,
        counters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub d_hidden: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            batch_size: 16,
            seed: 0,
            d_hidden: 16,
        }
    }
}

/// Supervised warm-up: `steps` gradient steps maximizing `log π(y_w)` on
/// clean contexts, starting from the seeded initialization.
pub fn warmup_reference(
    pairs: &[PreferencePair],
    dims: PolicyDims,
    cfg: &WarmupConfig,
) -> Result<PolicyParams> {
    if pairs.is_empty() {
        return Err(Error::Config("warm-up needs a non-empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config("warm-up needs batch_size >= 1 and lr > 0".into()));
    }
    let mut params = PolicyParams::init(dims, cfg.seed);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, &[0x3a, step as u64]));
        let mut grad = PolicyParams::zeros(dims);
        for _ in 0..cfg.batch_size {
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let tracked = forward_logprobs(&params, &pair.context)?;
            let mut upstream = vec![0.0; dims.vocab];
            upstream[pair.y_w] = -scale;
            backward_into(&params, &tracked, &upstream, &mut grad)?;
        }
        params.add_scaled(&grad, -cfg.lr);
    }
    Ok(params)
}

/// Mean `log π(y_w)` over pairs on clean contexts.
pub fn mean_chosen_logprob(params: &PolicyParams, pairs: &[PreferencePair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        total += forward_detached(params, &p.context)?.log_probs()[p.y_w];
    }
    Ok(total / pairs.len().max(1) as f64)
}

pub fn write_loss_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "modality", "batch_size", "loss", "mean_margin", "fwd_policy", "fwd_ref", "bwd_policy", "bwd_ref"])?;
    for r in trace {
        let c = r.per_pair.map(|c| c.tuple());
        let cell = |f: fn((u64, u64, u64, u64)) -> u64| c.map(|c| f(c).to_string()).unwrap_or_default();
        w.write_record([
            r.step.to_string(),
            r.modality.as_str().to_string(),
            r.batch_size.to_string(),
            format!("{:e}", r.loss),
            format!("{:e}", r.mean_margin),
            cell(|c| c.0),
            cell(|c| c.1),
            cell(|c| c.2),
            cell(|c| c.3),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_counters(path: &Path, counters: &CounterSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(counters).expect("counters serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_counters(path: &Path) -> Result<CounterSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}
