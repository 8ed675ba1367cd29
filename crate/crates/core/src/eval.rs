//! Scoring and analysis of trained policies.
//!
//! `precision` and `recall` follow the hallucination-benchmark convention:
//! precision is the accuracy on items whose ground truth is "yes" (a
//! sensitivity) and recall is the accuracy on items whose ground truth is
//! "no" (a specificity). `pa` and `hr` are the same two stratum accuracies
//! under their perception-accuracy / hallucination-resistance names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corrupt::{corrupt, CorruptionSpec, NoiseSchedule, SwapPool};
use crate::error::{Error, Result};
use crate::policy::{forward_detached, ModalityContext, ModalityTag, PolicyParams};
use crate::seeding;
use crate::synth::{Answer, QuestionKind, NO, YES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGroup {
    AdvHallucination,
    VdaHallucination,
    Matching,
    Dominance,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 4] = [
        TaskGroup::AdvHallucination,
        TaskGroup::VdaHallucination,
        TaskGroup::Matching,
        TaskGroup::Dominance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskGroup::AdvHallucination => "adv_hallucination",
            TaskGroup::VdaHallucination => "vda_hallucination",
            TaskGroup::Matching => "matching",
            TaskGroup::Dominance => "dominance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub context: ModalityContext,
    pub question_kind: QuestionKind,
    pub ground_truth: Answer,
    pub task_group: TaskGroup,
}

/// Yes/no prediction from the `yes` and `no` log-probabilities; other
/// responses are ignored and an exact tie answers "no".
pub fn predict(params: &PolicyParams, item: &EvalItem) -> Result<Answer> {
    let lp = forward_detached(params, &item.context)?;
    Ok(answer_from_logprobs(lp.log_probs()))
}

pub fn answer_from_logprobs(log_probs: &[f64]) -> Answer {
    if log_probs[YES] > log_probs[NO] {
        Answer::Yes
    } else {
        Answer::No
    }
}

pub fn predict_all(params: &PolicyParams, items: &[EvalItem]) -> Result<Vec<Answer>> {
    items.iter().map(|i| predict(params, i)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub yes_correct: usize,
    pub yes_total: usize,
    pub no_correct: usize,
    pub no_total: usize,
}

impl Tally {
    pub fn add(&mut self, truth: Answer, predicted: Answer) {
        match truth {
            Answer::Yes => {
                self.yes_total += 1;
                self.yes_correct += usize::from(predicted == Answer::Yes);
            }
            Answer::No => {
                self.no_total += 1;
                self.no_correct += usize::from(predicted == Answer::No);
            }
        }
    }

    pub fn total(&self) -> usize {
        self.yes_total + self.no_total
    }
}

/// Percentages; `None` marks a metric whose stratum is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub pa: Option<f64>,
    pub hr: Option<f64>,
    /// Set when precision and recall are both 0 and F1 is reported as 0.
    pub f1_degenerate: bool,
    pub counts: Tally,
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

impl MetricsReport {
    pub fn from_tally(counts: Tally) -> Self {
        let precision = percent(counts.yes_correct, counts.yes_total);
        let recall = percent(counts.no_correct, counts.no_total);
        let (f1, f1_degenerate) = match (precision, recall) {
            (Some(p), Some(r)) if p + r == 0.0 => (Some(0.0), true),
            (Some(p), Some(r)) => (Some(2.0 * p * r / (p + r)), false),
            _ => (None, false),
        };
        Self {
            accuracy: percent(counts.yes_correct + counts.no_correct, counts.total()),
            precision,
            recall,
            f1,
            pa: precision,
            hr: recall,
            f1_degenerate,
            counts,
        }
    }
}

pub fn score(predictions: &[Answer], items: &[EvalItem]) -> Result<MetricsReport> {
    if predictions.len() != items.len() {
        return Err(Error::Dimension {
            what: "predictions vs items",
            expected: items.len(),
            got: predictions.len(),
        });
    }
    let mut tally = Tally::default();
    for (p, item) in predictions.iter().zip(items) {
        tally.add(item.ground_truth, *p);
    }
    Ok(MetricsReport::from_tally(tally))
}

/// Scores overall (`"all"`) and per task group.
pub fn score_by_group(predictions: &[Answer], items: &[EvalItem]) -> Result<BTreeMap<String, MetricsReport>> {
    let mut out = BTreeMap::new();
    out.insert("all".to_string(), score(predictions, items)?);
    for group in TaskGroup::ALL {
        let (p, i): (Vec<Answer>, Vec<EvalItem>) = predictions
            .iter()
            .zip(items)
            .filter(|(_, i)| i.task_group == group)
            .map(|(p, i)| (*p, i.clone()))
            .unzip();
        if !i.is_empty() {
            out.insert(group.as_str().to_string(), score(&p, &i)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftTarget {
    Relevant,
    Irrelevant,
}

impl ShiftTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftTarget::Relevant => "relevant",
            ShiftTarget::Irrelevant => "irrelevant",
        }
    }
}

pub const HISTOGRAM_BINS: usize = 41;
pub const HISTOGRAM_RANGE: (f64, f64) = (-5.0, 5.0);

/// Fixed-width histogram over [`HISTOGRAM_RANGE`] with out-of-range counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn new() -> Self {
        Self {
            lo: HISTOGRAM_RANGE.0,
            hi: HISTOGRAM_RANGE.1,
            counts: vec![0; HISTOGRAM_BINS],
            underflow: 0,
            overflow: 0,
        }
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn add(&mut self, x: f64) {
        if x < self.lo {
            self.underflow += 1;
        } else if x >= self.hi {
            // The upper edge belongs to the last bin.
            if x == self.hi {
                *self.counts.last_mut().expect("bins") += 1;
            } else {
                self.overflow += 1;
            }
        } else {
            let bin = ((x - self.lo) / self.bin_width()) as usize;
            let last = self.counts.len() - 1;
            self.counts[bin.min(last)] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    pub target: ShiftTarget,
    pub n: usize,
    pub mean: f64,
    pub mean_abs: f64,
    pub histogram: Histogram,
}

/// Per-item `log π(truth | clean) − log π(truth | corrupted)`, corrupting the
/// prompt-relevant or prompt-irrelevant modality. Random-swap corruption
/// draws from the items' own features.
pub fn loglik_shifts(
    params: &PolicyParams,
    items: &[EvalItem],
    spec: &CorruptionSpec,
    target: ShiftTarget,
) -> Result<Vec<f64>> {
    let schedule = NoiseSchedule::default();
    let audio_pool: Vec<Vec<f64>> = items.iter().map(|i| i.context.audio.clone()).collect();
    let visual_pool: Vec<Vec<f64>> = items.iter().map(|i| i.context.visual.clone()).collect();
    let mut shifts = Vec::with_capacity(items.len());
    for (idx, item) in items.iter().enumerate() {
        let ctx = &item.context;
        let (corrupt_audio, corrupt_visual) = match (ctx.modality_tag, target) {
            (ModalityTag::VisualRelated, ShiftTarget::Relevant)
            | (ModalityTag::AudioRelated, ShiftTarget::Irrelevant) => (false, true),
            (ModalityTag::AudioRelated, ShiftTarget::Relevant)
            | (ModalityTag::VisualRelated, ShiftTarget::Irrelevant) => (true, false),
            (ModalityTag::Audiovisual, ShiftTarget::Relevant) => (true, true),
            (ModalityTag::Audiovisual, ShiftTarget::Irrelevant) => (false, false),
        };
        let seed = seeding::derive(spec.seed, &[idx as u64]);
        let mut corrupted = ctx.clone();
        if corrupt_audio {
            corrupted.audio = corrupt(
                &ctx.audio,
                &spec.with_seed(seeding::derive(seed, &[0])),
                &schedule,
                Some(SwapPool { members: &audio_pool, own_index: Some(idx) }),
            )?;
        }
        if corrupt_visual {
            corrupted.visual = corrupt(
                &ctx.visual,
                &spec.with_seed(seeding::derive(seed, &[1])),
                &schedule,
                Some(SwapPool { members: &visual_pool, own_index: Some(idx) }),
            )?;
        }
        let y = item.ground_truth.response_id();
        let clean = forward_detached(params, ctx)?.log_probs()[y];
        let shifted = forward_detached(params, &corrupted)?.log_probs()[y];
        shifts.push(clean - shifted);
    }
    Ok(shifts)
}

pub fn loglik_shift(
    params: &PolicyParams,
    items: &[EvalItem],
    spec: &CorruptionSpec,
    target: ShiftTarget,
) -> Result<ShiftStats> {
    let shifts = loglik_shifts(params, items, spec, target)?;
    let n = shifts.len();
    let mut histogram = Histogram::new();
    for &d in &shifts {
        histogram.add(d);
    }
    let denom = n.max(1) as f64;
    Ok(ShiftStats {
        target,
        n,
        mean: shifts.iter().sum::<f64>() / denom,
        mean_abs: shifts.iter().map(|d| d.abs()).sum::<f64>() / denom,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub group: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub model: String,
    pub stats: ShiftStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub shifts: Vec<ShiftRow>,
}

/// Scores every model per task group and measures its log-likelihood
/// shifts under `spec`.
pub fn compare(models: &[(String, PolicyParams)], items: &[EvalItem], spec: &CorruptionSpec) -> Result<ComparisonReport> {
    if models.is_empty() {
        return Err(Error::Config("compare needs at least one model".into()));
    }
    let mut rows = Vec::new();
    let mut shifts = Vec::new();
    for (name, params) in models {
        let predictions = predict_all(params, items)?;
        for (group, metrics) in score_by_group(&predictions, items)? {
            rows.push(ComparisonRow { model: name.clone(), group, metrics });
        }
        for target in [ShiftTarget::Relevant, ShiftTarget::Irrelevant] {
            shifts.push(ShiftRow {
                model: name.clone(),
                stats: loglik_shift(params, items, spec, target)?,
            });
        }
    }
    Ok(ComparisonReport { rows, shifts })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "undef".into())
}

impl ComparisonReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "model", "group", "accuracy", "precision", "recall", "f1", "pa", "hr", "f1_degenerate",
            "yes_correct", "yes_total", "no_correct", "no_total",
        ])?;
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.model.clone(),
                r.group.clone(),
                fmt_opt(m.accuracy),
                fmt_opt(m.precision),
                fmt_opt(m.recall),
                fmt_opt(m.f1),
                fmt_opt(m.pa),
                fmt_opt(m.hr),
                m.f1_degenerate.to_string(),
                m.counts.yes_correct.to_string(),
                m.counts.yes_total.to_string(),
                m.counts.no_correct.to_string(),
                m.counts.no_total.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One row per model, bin, and shift target.
    pub fn write_histograms_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "target", "bin_lo", "bin_hi", "count"])?;
        for s in &self.shifts {
            let h = &s.stats.histogram;
            let width = h.bin_width();
            let target = s.stats.target.as_str();
            w.write_record([s.model.as_str(), target, "-inf", &format!("{}", h.lo), &h.underflow.to_string()])?;
            for (i, c) in h.counts.iter().enumerate() {
                let lo = h.lo + i as f64 * width;
                w.write_record([
                    s.model.clone(),
                    target.to_string(),
                    format!("{lo:.4}"),
                    format!("{:.4}", lo + width),
                    c.to_string(),
                ])?;
            }
            w.write_record([s.model.as_str(), target, &format!("{}", h.hi), "inf", &h.overflow.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<18} {:>8} {:>8} {:>8} {:>8}",
            "model", "group", "acc", "pre/pa", "rec/hr", "f1"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{:<14} {:<18} {:>8} {:>8} {:>8} {:>8}",
                r.model,
                r.group,
                fmt_opt(m.accuracy),
                fmt_opt(m.precision),
                fmt_opt(m.recall),
                fmt_opt(m.f1),
            );
        }
        if !self.shifts.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<14} {:<11} {:>10} {:>10}", "model", "corrupted", "mean", "mean|d|");
            for s in &self.shifts {
                let _ = writeln!(
                    out,
                    "{:<14} {:<11} {:>10.4} {:>10.4}",
                    s.model,
                    s.stats.target.as_str(),
                    s.stats.mean,
                    s.stats.mean_abs
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyDims;

    fn item(truth: Answer) -> EvalItem {
        EvalItem {
            context: ModalityContext {
                audio: vec![0.0; 8],
                visual: vec![0.0; 8],
                prompt_id: 0,
                modality_tag: ModalityTag::VisualRelated,
            },
            question_kind: QuestionKind::VisualPresence,
            ground_truth: truth,
            task_group: TaskGroup::AdvHallucination,
        }
    }

    #[test]
    fn tie_answers_no() {
        let params = PolicyParams::zeros(PolicyDims::default());
        assert_eq!(predict(&params, &item(Answer::Yes)).unwrap(), Answer::No);
        assert_eq!(answer_from_logprobs(&[-0.1, -0.2]), Answer::Yes);
    }

    #[test]
    fn all_inverted_is_degenerate() {
        let items = vec![item(Answer::Yes), item(Answer::No)];
        let r = score(&[Answer::No, Answer::Yes], &items).unwrap();
        assert_eq!(r.accuracy, Some(0.0));
        assert_eq!(r.f1, Some(0.0));
        assert!(r.f1_degenerate);
    }

    #[test]
    fn empty_stratum_is_undefined() {
        let items = vec![item(Answer::Yes); 3];
        let r = score(&[Answer::Yes; 3], &items).unwrap();
        assert_eq!(r.precision, Some(100.0));
        assert_eq!(r.recall, None);
        assert_eq!(r.f1, None);
        assert_eq!(r.accuracy, Some(100.0));
    }

    #[test]
    fn histogram_edges() {
        let mut h = Histogram::new();
        for x in [-5.1, -5.0, 0.0, 4.99, 5.0, 5.1] {
            h.add(x);
        }
        assert_eq!(h.underflow, 1);
        assert_eq!(h.overflow, 1);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[20], 1);
        assert_eq!(h.counts[40], 2);
        assert_eq!(h.total(), 6);
    }

    #[test]
    fn identity_corruption_gives_zero_shift() {
        let params = PolicyParams::init(PolicyDims::default(), 5);
        let mut items = vec![item(Answer::Yes), item(Answer::No)];
        items[1].context.audio = vec![0.3; 8];
        let s = loglik_shift(&params, &items, &CorruptionSpec::diffusion(0, 1), ShiftTarget::Relevant).unwrap();
        assert_eq!(s.mean_abs, 0.0);
    }
}
