use dualm::corpus::{pack, repetition_stream, train_bpe, PackedDataset, RepetitionPlan, Vocab};
use dualm::fixture::{World, WorldShape};
use dualm::model::{ModelConfig, Params};
use dualm::objectives::{Objective, RatioSchedule};
use dualm::training::{train, TrainConfig, TrainData, TrainOutcome};

struct Setup {
    vocab: Vocab,
    train: PackedDataset,
    heldout: PackedDataset,
}

fn setup() -> Setup {
    let docs = World::new(WorldShape::default(), 1).corpus(40_000, 2);
    let vocab = train_bpe(&docs, 300).unwrap();
    let (train, heldout) = pack(&vocab, &docs, 32, 3)
        .unwrap()
        .split_heldout(0.05)
        .unwrap();
    Setup {
        vocab,
        train,
        heldout,
    }
}

fn model_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        hidden_size: 32,
        n_heads: 2,
        ffn_inner: 64,
        vocab_size: vocab.size(),
        max_len: 32,
        ..Default::default()
    }
}

fn run(
    s: &Setup,
    schedule: RatioSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> (Params<f32>, TrainOutcome) {
    let plan = RepetitionPlan::new(4, (s.train.len() * s.train.window_len) as u64).unwrap();
    let stream = repetition_stream(&s.train, &plan, seed).unwrap();
    let mut params = Params::<f32>::init(&model_config(&s.vocab), seed).unwrap();
    let mut rows = 0;
    let outcome = train(
        &mut params,
        &TrainConfig {
            seed,
            ..cfg.clone()
        },
        &schedule,
        TrainData {
            windows: &s.train.windows,
            stream: &stream,
            heldout: &s.heldout.windows,
        },
        &s.vocab.specials,
        |_| rows += 1,
    )
    .unwrap();
    assert_eq!(rows, outcome.metrics.len());
    (params, outcome)
}

fn short() -> TrainConfig {
    TrainConfig {
        total_steps: 50,
        batch_sequences: 8,
        val_every: 10,
        ..Default::default()
    }
}

#[test]
fn both_objectives_improve_over_fifty_steps() {
    let s = setup();
    let (_, out) = run(&s, RatioSchedule::new(1, 1).unwrap(), &short(), 9);
    for which in [Objective::Ar, Objective::Diffusion] {
        let series = out.curve.series(which);
        assert_eq!(series.len(), 5, "{which:?}");
        assert!(series.last().unwrap() < &series[0], "{which:?}: {series:?}");
    }
    assert_eq!(out.ar_sequences + out.diff_sequences, 50 * 8);
    assert_eq!(out.ar_sequences, out.diff_sequences);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let s = setup();
    let schedule = RatioSchedule::new(3, 1).unwrap();
    let cfg = TrainConfig {
        total_steps: 12,
        val_every: 4,
        ..short()
    };
    let (p1, o1) = run(&s, schedule.clone(), &cfg, 4);
    let (p2, o2) = run(&s, schedule.clone(), &cfg, 4);
    assert_eq!(p1, p2);
    assert_eq!(o1.metrics, o2.metrics);
    let (p3, _) = run(&s, schedule, &cfg, 5);
    assert_ne!(p1, p3);
}

#[test]
fn schedule_fixes_the_objective_mix() {
    let s = setup();
    let cfg = TrainConfig {
        total_steps: 4,
        val_every: 4,
        ..short()
    };
    let (_, out) = run(&s, RatioSchedule::new(0, 1).unwrap(), &cfg, 1);
    assert_eq!((out.ar_sequences, out.diff_sequences), (0, 32));
    let (_, out) = run(&s, RatioSchedule::new(3, 1).unwrap(), &cfg, 1);
    assert_eq!((out.ar_sequences, out.diff_sequences), (24, 8));
}

#[test]
fn auto_fields_resolve_from_the_stream() {
    let s = setup();
    let (_, out) = run(
        &s,
        RatioSchedule::new(1, 0).unwrap(),
        &TrainConfig {
            batch_sequences: 16,
            ..Default::default()
        },
        2,
    );
    let c = &out.config;
    let plan = RepetitionPlan::new(4, (s.train.len() * s.train.window_len) as u64).unwrap();
    let stream_len = plan.subset_windows(s.train.window_len) * 4;
    assert_eq!(c.total_steps, stream_len / 16);
    assert_eq!(c.decay_steps, c.total_steps / 4);
    assert_eq!(out.curve.last().unwrap().step, c.total_steps);
}

#[test]
fn empty_heldout_is_rejected() {
    let s = setup();
    let stream: Vec<usize> = (0..s.train.len()).collect();
    let mut params = Params::<f32>::init(&model_config(&s.vocab), 0).unwrap();
    let err = train(
        &mut params,
        &short(),
        &RatioSchedule::new(1, 0).unwrap(),
        TrainData {
            windows: &s.train.windows,
            stream: &stream,
            heldout: &[],
        },
        &s.vocab.specials,
        |_| {},
    );
    assert!(err.is_err());
}
