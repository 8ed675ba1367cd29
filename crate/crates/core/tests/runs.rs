//! Assertions over short end-to-end runs.

use moddpo::corrupt::CorruptionSpec;
use moddpo::eval::{compare, loglik_shift, predict_all, score, ShiftTarget};
use moddpo::experiment::{prepare, run_seed, ExperimentConfig};
use moddpo::policy::{PolicyDims, PolicyParams};
use moddpo::synth::{assemble_dataset, generate_eval_items, DatasetConfig, EvalSetConfig, World, WorldConfig};
use moddpo::train::{mean_chosen_logprob, train, warmup_reference, TrainData};

#[test]
fn default_dataset_has_exact_size_and_several_tasks() {
    let world = World::new(WorldConfig::default()).unwrap();
    let (pairs, stats) = assemble_dataset(&world, &DatasetConfig::default()).unwrap();
    assert_eq!(pairs.len(), 2000);
    assert_eq!(stats.records, 2000);
    assert_eq!(stats.matched, 1000);
    assert!(stats.per_task.len() >= 2, "{:?}", stats.per_task);
}

#[test]
fn warmup_beats_the_uniform_policy_on_average_and_is_deterministic() {
    let mut total = 0.0;
    for seed in 0..5 {
        let cfg = ExperimentConfig::default().reseeded(seed);
        let prep = prepare(&cfg).unwrap();
        total += mean_chosen_logprob(&prep.reference, &prep.pairs).unwrap();
        if seed == 0 {
            let again = prepare(&cfg).unwrap();
            assert_eq!(again.reference.to_bits(), prep.reference.to_bits());
        }
    }
    let vocab = World::new(WorldConfig::default()).unwrap().vocab() as f64;
    assert!(total / 5.0 > -vocab.ln(), "mean log pi_ref(y_w) = {}", total / 5.0);
}

#[test]
fn training_lowers_the_loss_on_average() {
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..5 {
        let cfg = ExperimentConfig::default().reseeded(seed);
        let prep = prepare(&cfg).unwrap();
        let out = train(&prep.reference, &prep.reference, &TrainData::new(prep.pairs), &cfg.train).unwrap();
        let tail = out.trace.len() / 10;
        first += out.trace[0].loss;
        last += out.trace[out.trace.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
    }
    assert!(last < first, "first {first} vs final {last} (sums over seeds)");
}

#[test]
fn untrained_policy_is_at_chance_on_the_balanced_benchmark() {
    let world = World::new(WorldConfig::default()).unwrap();
    let items: Vec<_> = generate_eval_items(&world, &EvalSetConfig::default())
        .unwrap()
        .into_iter()
        .map(|s| s.item)
        .collect();
    let dims = PolicyDims {
        n_prompts: world.n_prompts(),
        vocab: world.vocab(),
        ..PolicyDims::default()
    };
    let n = items.len() as f64;
    let three_sigma = 300.0 * (0.25 / n).sqrt();
    for seed in 0..3 {
        let params = PolicyParams::init(dims, seed);
        let acc = score(&predict_all(&params, &items).unwrap(), &items).unwrap().accuracy.unwrap();
        assert!((acc - 50.0).abs() <= three_sigma, "seed {seed}: {acc}");
    }
    // All-tie policy answers "no" everywhere: exactly half right.
    let zeros = PolicyParams::zeros(dims);
    let r = score(&predict_all(&zeros, &items).unwrap(), &items).unwrap();
    assert_eq!(r.accuracy, Some(50.0));
    let spec = CorruptionSpec::default();
    assert_eq!(loglik_shift(&zeros, &items, &spec, ShiftTarget::Relevant).unwrap().mean_abs, 0.0);
}

#[test]
fn comparison_rows_agree_with_score() {
    let cfg = ExperimentConfig::default();
    let prep = prepare(&cfg).unwrap();
    let spec = CorruptionSpec::default();
    let single = compare(&[("ref".into(), prep.reference.clone())], &prep.items, &spec).unwrap();
    let direct = score(&predict_all(&prep.reference, &prep.items).unwrap(), &prep.items).unwrap();
    let all = single.rows.iter().find(|r| r.group == "all").unwrap();
    assert_eq!(all.metrics, direct);

    let twin = compare(
        &[("a".into(), prep.reference.clone()), ("b".into(), prep.reference.clone())],
        &prep.items,
        &spec,
    )
    .unwrap();
    let half = twin.rows.len() / 2;
    for (x, y) in twin.rows[..half].iter().zip(&twin.rows[half..]) {
        assert_eq!((x.group.as_str(), x.metrics), (y.group.as_str(), y.metrics));
    }
    assert_eq!(twin.shifts[0].stats, twin.shifts[2].stats);
}

#[test]
fn relevant_corruption_moves_modpp_more_than_irrelevant() {
    let base = ExperimentConfig::default();
    let variants = [("modpp".to_string(), base.train)];
    let (mut rel, mut irr) = (0.0, 0.0);
    for seed in 0..5 {
        let out = run_seed(&base.reseeded(seed), &variants).unwrap();
        rel += out[1].relevant_shift.mean_abs;
        irr += out[1].irrelevant_shift.mean_abs;
    }
    assert!(rel > irr, "relevant {rel} vs irrelevant {irr}");
}

#[test]
fn warmup_on_the_preference_data_itself_also_learns() {
    let world = World::new(WorldConfig::default()).unwrap();
    let (pairs, _) = assemble_dataset(&world, &DatasetConfig { n: 400, ..DatasetConfig::default() }).unwrap();
    let dims = PolicyDims {
        n_prompts: world.n_prompts(),
        vocab: world.vocab(),
        ..PolicyDims::default()
    };
    let reference = warmup_reference(&pairs, dims, &Default::default()).unwrap();
    assert!(mean_chosen_logprob(&reference, &pairs).unwrap() > -(world.vocab() as f64).ln());
}
