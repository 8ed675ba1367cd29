//! End-to-end runs: world → data → reference warm-up → preference training
//! → benchmark scores and log-likelihood shifts, averaged over seeds.

use serde::{Deserialize, Serialize};

use crate::corrupt::{CorruptionKind, CorruptionSpec};
use crate::error::Result;
use crate::eval::{
    loglik_shift, predict_all, score, score_by_group, EvalItem, MetricsReport, ShiftStats,
    ShiftTarget,
};
use crate::policy::{PolicyDims, PolicyParams};
use crate::seeding;
use crate::synth::{
    assemble_dataset, generate_eval_items, natural_corpus, DatasetConfig, EvalSetConfig,
    NaturalCorpusConfig, PreferencePair, World, WorldConfig,
};
use crate::train::{train, LossVariant, TrainConfig, TrainData, WarmupConfig};

/// What the reference model is warmed up on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceCorpus {
    /// Matched, literally truthful QA ([`natural_corpus`]).
    #[default]
    Natural,
    /// The chosen responses of the preference dataset.
    Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub natural: NaturalCorpusConfig,
    pub eval: EvalSetConfig,
    pub warmup: WarmupConfig,
    pub reference_corpus: ReferenceCorpus,
    pub train: TrainConfig,
    /// Corruption used for the log-likelihood-shift analysis.
    pub shift_corruption: CorruptionSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            dataset: DatasetConfig::default(),
            natural: NaturalCorpusConfig::default(),
            eval: EvalSetConfig::default(),
            warmup: WarmupConfig::default(),
            reference_corpus: ReferenceCorpus::Natural,
            train: TrainConfig::desk_scale(),
            shift_corruption: CorruptionSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// The same configuration with every seed derived from `seed`. Derived
    /// seeds keep 63 bits so they fit a signed 64-bit config integer.
    pub fn reseeded(&self, seed: u64) -> Self {
        let sub = |k: u64| seeding::derive(seed, &[k]) >> 1;
        let mut c = *self;
        c.world.seed = sub(10);
        c.dataset.seed = sub(11);
        c.natural.seed = sub(12);
        c.eval.seed = sub(13);
        c.warmup.seed = sub(14);
        c.train.seed = sub(15);
        c.shift_corruption.seed = sub(16);
        c
    }

    pub fn dims(&self, world: &World) -> PolicyDims {
        PolicyDims {
            d_audio: self.world.d_audio,
            d_visual: self.world.d_visual,
            d_hidden: self.warmup.d_hidden,
            n_prompts: world.n_prompts(),
            vocab: world.vocab(),
        }
    }
}

/// Everything a seed's models are trained and evaluated on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub world: World,
    pub pairs: Vec<PreferencePair>,
    pub items: Vec<EvalItem>,
    pub reference: PolicyParams,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let world = World::new(cfg.world)?;
    let (pairs, _) = assemble_dataset(&world, &cfg.dataset)?;
    let items = generate_eval_items(&world, &cfg.eval)?
        .into_iter()
        .map(|s| s.item)
        .collect();
    let warm_corpus = match cfg.reference_corpus {
        ReferenceCorpus::Natural => natural_corpus(&world, &cfg.natural)?,
        ReferenceCorpus::Dataset => pairs.clone(),
    };
    let reference = crate::train::warmup_reference(&warm_corpus, cfg.dims(&world), &cfg.warmup)?;
    Ok(Prepared {
        world,
        pairs,
        items,
        reference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub name: String,
    pub metrics: MetricsReport,
    pub by_group: Vec<(String, MetricsReport)>,
    pub relevant_shift: ShiftStats,
    pub irrelevant_shift: ShiftStats,
    pub first_loss: f64,
    pub final_loss: f64,
}

fn assess(name: &str, params: &PolicyParams, items: &[EvalItem], shift: &CorruptionSpec) -> Result<ModelOutcome> {
    let predictions = predict_all(params, items)?;
    Ok(ModelOutcome {
        name: name.to_string(),
        metrics: score(&predictions, items)?,
        by_group: score_by_group(&predictions, items)?.into_iter().collect(),
        relevant_shift: loglik_shift(params, items, shift, ShiftTarget::Relevant)?,
        irrelevant_shift: loglik_shift(params, items, shift, ShiftTarget::Irrelevant)?,
        first_loss: f64::NAN,
        final_loss: f64::NAN,
    })
}

/// Trains every named variant from the same reference and evaluates it; the
/// first outcome is the reference itself under the name `reference`.
pub fn run_seed(cfg: &ExperimentConfig, variants: &[(String, TrainConfig)]) -> Result<Vec<ModelOutcome>> {
    let prep = prepare(cfg)?;
    let data = TrainData::new(prep.pairs);
    let mut out = vec![assess("reference", &prep.reference, &prep.items, &cfg.shift_corruption)?];
    for (name, train_cfg) in variants {
        let mut tc = *train_cfg;
        tc.seed = cfg.train.seed;
        let trained = train(&prep.reference, &prep.reference, &data, &tc)?;
        let mut o = assess(name, &trained.params, &prep.items, &cfg.shift_corruption)?;
        let steps = trained.trace.len();
        let tail = (steps / 10).max(1);
        o.first_loss = trained.trace.first().map_or(f64::NAN, |r| r.loss);
        o.final_loss = trained.trace[steps - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
        out.push(o);
    }
    Ok(out)
}

/// Seed-averaged summary of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedOutcome {
    pub name: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub relevant_mean_abs_shift: f64,
    pub irrelevant_mean_abs_shift: f64,
    pub per_seed_accuracy: Vec<f64>,
}

/// Runs `seeds` in parallel threads and averages per model.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    variants: &[(String, TrainConfig)],
    seeds: &[u64],
) -> Result<Vec<AveragedOutcome>> {
    let runs: Vec<Result<Vec<ModelOutcome>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let c = cfg.reseeded(seed);
                s.spawn(move || run_seed(&c, variants))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment thread panicked"))
            .collect()
    });
    let runs: Vec<Vec<ModelOutcome>> = runs.into_iter().collect::<Result<_>>()?;
    let n = runs.len() as f64;
    let models = runs.first().map_or(0, Vec::len);
    Ok((0..models)
        .map(|m| {
            let mean = |f: &dyn Fn(&ModelOutcome) -> f64| runs.iter().map(|r| f(&r[m])).sum::<f64>() / n;
            AveragedOutcome {
                name: runs[0][m].name.clone(),
                accuracy: mean(&|o| o.metrics.accuracy.unwrap_or(f64::NAN)),
                precision: mean(&|o| o.metrics.precision.unwrap_or(f64::NAN)),
                recall: mean(&|o| o.metrics.recall.unwrap_or(f64::NAN)),
                relevant_mean_abs_shift: mean(&|o| o.relevant_shift.mean_abs),
                irrelevant_mean_abs_shift: mean(&|o| o.irrelevant_shift.mean_abs),
                per_seed_accuracy: runs.iter().map(|r| r[m].metrics.accuracy.unwrap_or(f64::NAN)).collect(),
            }
        })
        .collect())
}

/// DPO, MoD-DPO++ with the configured corruption, and MoD-DPO++ with a
/// light diffusion corruption (`t = 10`), all from `cfg.train`.
pub fn directional_variants(cfg: &ExperimentConfig) -> Vec<(String, TrainConfig)> {
    let base = cfg.train;
    let mut light = base;
    light.loss_variant = LossVariant::Modpp;
    light.corruption.kind = CorruptionKind::Diffusion;
    light.corruption.t = 10;
    vec![
        ("dpo".to_string(), TrainConfig { loss_variant: LossVariant::Dpo, ..base }),
        ("modpp".to_string(), TrainConfig { loss_variant: LossVariant::Modpp, ..base }),
        ("modpp_t10".to_string(), light),
    ]
}

/// Verdicts of the three seed-averaged directional checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalChecks {
    pub outcomes: Vec<AveragedOutcome>,
}

/// Minimum accuracy lead of MoD-DPO++ over DPO, in percentage points.
pub const HALLUCINATION_MARGIN_PP: f64 = 3.0;

impl DirectionalChecks {
    pub fn run(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Self> {
        Ok(Self {
            outcomes: run_seeds(cfg, &directional_variants(cfg), seeds)?,
        })
    }

    pub fn get(&self, name: &str) -> Option<&AveragedOutcome> {
        self.outcomes.iter().find(|o| o.name == name)
    }

    fn trio(&self, a: &str, b: &str, c: &str) -> Option<(&AveragedOutcome, &AveragedOutcome, &AveragedOutcome)> {
        Some((self.get(a)?, self.get(b)?, self.get(c)?))
    }

    /// MoD-DPO++ beats DPO by the margin and both beat the reference.
    pub fn hallucination(&self) -> (bool, String) {
        let Some((r, d, m)) = self.trio("reference", "dpo", "modpp") else {
            return (false, "missing model".into());
        };
        let ok = m.accuracy - d.accuracy >= HALLUCINATION_MARGIN_PP
            && d.accuracy > r.accuracy
            && m.accuracy > r.accuracy;
        (
            ok,
            format!(
                "accuracy reference {:.2}, dpo {:.2}, modpp {:.2} (lead {:+.2} pp, need >= {HALLUCINATION_MARGIN_PP})",
                r.accuracy,
                d.accuracy,
                m.accuracy,
                m.accuracy - d.accuracy
            ),
        )
    }

    /// Relevant corruption moves MoD-DPO++ more than irrelevant corruption,
    /// and irrelevant corruption moves it less than it moves DPO.
    pub fn sensitivity(&self) -> (bool, String) {
        let Some((_, d, m)) = self.trio("reference", "dpo", "modpp") else {
            return (false, "missing model".into());
        };
        let ok = m.relevant_mean_abs_shift > m.irrelevant_mean_abs_shift
            && m.irrelevant_mean_abs_shift < d.irrelevant_mean_abs_shift;
        (
            ok,
            format!(
                "modpp mean|shift| relevant {:.4} vs irrelevant {:.4}; dpo irrelevant {:.4}",
                m.relevant_mean_abs_shift, m.irrelevant_mean_abs_shift, d.irrelevant_mean_abs_shift
            ),
        )
    }

    /// Training with the configured (strong) corruption beats `t = 10`.
    pub fn corruption_strength(&self) -> (bool, String) {
        let Some((_, strong, light)) = self.trio("reference", "modpp", "modpp_t10") else {
            return (false, "missing model".into());
        };
        (
            strong.accuracy > light.accuracy,
            format!("accuracy t=configured {:.2} vs t=10 {:.2}", strong.accuracy, light.accuracy),
        )
    }
}
