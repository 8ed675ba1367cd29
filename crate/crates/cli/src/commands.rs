use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use moddpo::audit::{run_oracle_suite, CheckOutcome};
use moddpo::eval::{compare, ComparisonReport};
use moddpo::experiment::{DirectionalChecks, ReferenceCorpus};
use moddpo::policy::{load_checkpoint, save_checkpoint, PolicyDims};
use moddpo::synth::{
    assemble_dataset_to_file, generate_eval_items, natural_corpus, read_records, read_sidecar,
    write_eval_items, write_natural_corpus, PreferencePair, World,
};
use moddpo::train::{read_counters, train as run_training, warmup_reference, write_counters, write_loss_trace, TrainData};

use crate::config::RunConfig;
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const NATURAL_FILE: &str = "natural.jsonl";
pub const REFERENCE_STEM: &str = "reference";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn snapshot(cfg: &RunConfig, name: &str) -> Result<(), CliError> {
    write_text(&cfg.out_dir().join(format!("{name}.config.toml")), &cfg.to_toml())
}

fn require(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Input(format!("missing input {} (run `moddpo synth` first?)", path.display())))
    }
}

fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, CliError> {
    Ok(read_records(path)?.iter().map(|r| r.to_pair()).collect())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    ensure_dir(out)?;
    let world = World::new(cfg.synth.world)?;
    let stats = assemble_dataset_to_file(&world, &cfg.synth.dataset, &out.join(DATASET_FILE))?;
    let items = generate_eval_items(&world, &cfg.synth.eval_set)?;
    write_eval_items(&world, &cfg.synth.eval_set, &items, &out.join(EVAL_FILE))?;
    let natural = natural_corpus(&world, &cfg.synth.natural)?;
    write_natural_corpus(&world, &cfg.synth.natural, &natural, &out.join(NATURAL_FILE))?;
    snapshot(cfg, "synth")?;
    println!(
        "dataset: {} pairs ({} matched, ratio {:.3}); eval: {} items; warm-up corpus: {} pairs",
        stats.records,
        stats.matched,
        stats.matched_ratio,
        items.len(),
        natural.len()
    );
    for (task, n) in &stats.per_task {
        println!("  {task:<22} {n}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let dataset = require(out.join(DATASET_FILE))?;
    let pairs = load_pairs(&dataset)?;
    let world = World::new(read_sidecar(&dataset)?.world)?;
    let dims = PolicyDims {
        d_audio: world.config().d_audio,
        d_visual: world.config().d_visual,
        d_hidden: cfg.train.warmup.d_hidden,
        n_prompts: world.n_prompts(),
        vocab: world.vocab(),
    };
    let warm = match cfg.train.reference_corpus {
        ReferenceCorpus::Natural => load_pairs(&require(out.join(NATURAL_FILE))?)?,
        ReferenceCorpus::Dataset => pairs.clone(),
    };
    let reference = warmup_reference(&warm, dims, &cfg.train.warmup)?;
    save_checkpoint(&reference, &out.join(format!("{REFERENCE_STEM}.ckpt")))?;

    let stem = cfg.train.stem();
    if stem == REFERENCE_STEM {
        return Err(CliError::Config(format!("train.name `{REFERENCE_STEM}` is reserved")));
    }
    let result = run_training(&reference, &reference, &TrainData::new(pairs), &cfg.train.config)?;
    save_checkpoint(&result.params, &out.join(format!("{stem}.ckpt")))?;
    write_loss_trace(&out.join(format!("{stem}.loss.csv")), &result.trace)?;
    write_counters(&out.join(format!("{stem}.counters.json")), &result.counters)?;
    snapshot(cfg, &format!("train-{stem}"))?;

    let first = result.trace.first().map_or(f64::NAN, |r| r.loss);
    let last = result.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{stem}: {} steps, {} pairs, loss {first:.6} -> {last:.6}",
        result.counters.steps, result.counters.pairs_processed
    );
    for (c, n) in &result.counters.per_pair {
        println!("  per-pair passes {:?} x {n}", c.tuple());
    }
    Ok(())
}

/// Stems of every checkpoint in `dir`, reference first, the rest sorted.
fn checkpoint_stems(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Input(format!("cannot list {}: {e}", dir.display())))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "ckpt").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    stems.sort_by_key(|s| (s != REFERENCE_STEM, s.clone()));
    Ok(stems)
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let items = read_records(&require(out.join(EVAL_FILE))?)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_eval_item()
                .ok_or_else(|| CliError::Config(format!("{EVAL_FILE} line {} has no ground truth or task group", i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let stems = if cfg.eval.models.is_empty() {
        checkpoint_stems(out)?
    } else {
        cfg.eval.models.clone()
    };
    if stems.is_empty() {
        return Err(CliError::Input(format!("no checkpoints in {} (run `moddpo train` first?)", out.display())));
    }
    let models = stems
        .iter()
        .map(|s| Ok((s.clone(), load_checkpoint(&require(out.join(format!("{s}.ckpt")))?)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = compare(&models, &items, &cfg.eval.shift_corruption)?;
    report.write_csv(&out.join("metrics.csv"))?;
    report.write_histograms_csv(&out.join("shifts.csv"))?;
    write_text(
        &out.join("comparison.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    snapshot(cfg, "eval")?;
    print!("{}", report.to_text_table());
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let entries = std::fs::read_dir(out).map_err(|e| CliError::Input(format!("cannot list {}: {e}", out.display())))?;
    let mut counter_files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".counters.json")))
        .collect();
    counter_files.sort();
    let comparison = out.join("comparison.json");
    if counter_files.is_empty() && !comparison.is_file() {
        return Err(CliError::Input(format!("no training or evaluation artifacts in {}", out.display())));
    }

    let mut text = String::new();
    if !counter_files.is_empty() {
        let _ = writeln!(text, "counters (per pair: policy fwd, reference fwd, policy bwd, reference bwd)");
        for path in &counter_files {
            let c = read_counters(path)?;
            let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or("?").trim_end_matches(".counters.json");
            let per_pair: Vec<String> = c.per_pair.iter().map(|(k, n)| format!("{:?} x {n}", k.tuple())).collect();
            let _ = writeln!(
                text,
                "  {stem:<14} {:<12} steps {:>5}  pairs {:>6}  per pair {}",
                c.loss_variant.as_str(),
                c.steps,
                c.pairs_processed,
                per_pair.join(", ")
            );
        }
    }
    if comparison.is_file() {
        let raw = std::fs::read_to_string(&comparison).map_err(|e| CliError::Input(format!("{}: {e}", comparison.display())))?;
        let report: ComparisonReport =
            serde_json::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", comparison.display())))?;
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&report.to_text_table());
    }
    write_text(&out.join("report.txt"), &text)?;
    snapshot(cfg, "report")?;
    print!("{text}");
    Ok(())
}

pub fn verify(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let work = out.join("verify");
    ensure_dir(&work)?;
    let mut checks = run_oracle_suite(&work, cfg.verify.seed)?;
    if cfg.verify.experiments {
        let d = DirectionalChecks::run(&cfg.experiment(), &cfg.verify.experiment_seeds)?;
        for (name, (passed, detail)) in [
            ("hallucination_direction", d.hallucination()),
            ("sensitivity_invariance", d.sensitivity()),
            ("corruption_strength", d.corruption_strength()),
        ] {
            checks.push(CheckOutcome {
                name: name.to_string(),
                passed,
                detail,
            });
        }
    }
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    write_text(
        &out.join("verify.json"),
        &(serde_json::to_string_pretty(&checks).expect("checks serialize") + "\n"),
    )?;
    snapshot(cfg, "verify")?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
