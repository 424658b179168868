//! One function per subcommand. Each writes its artifacts under an output
//! directory via temp-file-and-rename and returns a short summary.

use std::fs;
use std::path::{Path, PathBuf};

use dualm::corpus::{
    pack, read_documents, repetition_stream, train_bpe, PackedDataset, RepetitionPlan, Vocab,
};
use dualm::evals::{write_reports, Evaluator, Protocol, ScoreReport, TaskSpec};
use dualm::fixture::{World, WorldShape};
use dualm::gpr::{self, density_csv, features, grid_csv, linspace, log2_space};
use dualm::io::atomic_write;
use dualm::model::{checkpoint, ModelConfig, Params};
use dualm::objectives::Objective;
use dualm::rasp::{self, parse_sequence, ShiftDemo};
use dualm::seed;
use dualm::sweep::{
    load_results, run_grid, save_results, save_skipped, Grid, SweepInputs, DEFAULT_RATIO_CYCLE,
};
use dualm::training::{
    detect_overfit, train as train_model, MetricsAppender, TrainData, DEFAULT_OVERFIT_THRESHOLD,
};

use crate::config::{DataConfig, RunConfig};
use crate::CliError;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SKIPPED_FILE: &str = "skipped.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const DENSITY_FILE: &str = "density.csv";

fn documents(data: &DataConfig) -> Result<Vec<String>, CliError> {
    let docs = read_documents(&data.corpus)?;
    if docs.is_empty() {
        return Err(CliError::Usage(format!(
            "corpus {} has no documents",
            data.corpus.display()
        )));
    }
    Ok(docs)
}

/// Trains a BPE vocabulary on the corpus and writes `vocab.txt`.
pub fn tokenize(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let data = cfg.data()?;
    let vocab = train_bpe(&documents(data)?, data.vocab_size)?;
    let path = out.join(VOCAB_FILE);
    vocab.save(&path)?;
    Ok(path)
}

/// The configured vocabulary, or one trained now and saved next to the
/// other outputs.
fn vocab_for(data: &DataConfig, docs: &[String], out: &Path) -> Result<Vocab, CliError> {
    match &data.vocab {
        Some(p) => Ok(Vocab::load(p)?),
        None => {
            let v = train_bpe(docs, data.vocab_size)?;
            v.save(&out.join(VOCAB_FILE))?;
            Ok(v)
        }
    }
}

struct Prepared {
    vocab: Vocab,
    train: PackedDataset,
    heldout: PackedDataset,
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<Prepared, CliError> {
    let data = cfg.data()?;
    let docs = documents(data)?;
    let vocab = vocab_for(data, &docs, out)?;
    let ds = pack(
        &vocab,
        &docs,
        data.window_len,
        seed::derive(cfg.seed, "pack"),
    )?;
    let (train, heldout) = ds.split_heldout(cfg.training.heldout_fraction)?;
    Ok(Prepared {
        vocab,
        train,
        heldout,
    })
}

fn model_config(cfg: &RunConfig, vocab: &Vocab) -> Result<ModelConfig, CliError> {
    let m = ModelConfig {
        vocab_size: vocab.size(),
        max_len: cfg.data()?.window_len,
        ..cfg.model.clone()
    };
    m.validate()?;
    Ok(m)
}

fn budget(cfg: &RunConfig, train: &PackedDataset) -> u64 {
    match cfg.plan.total_budget_tokens {
        0 => train.unique_token_count() as u64 * cfg.plan.repetitions as u64,
        b => b,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_ar_val: f64,
    pub final_diff_val: f64,
    pub overfit_ar: bool,
    pub overfit_diff: bool,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains one model: writes the checkpoint, the metrics stream and (when
/// none was configured) the vocabulary.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary, CliError> {
    fs::create_dir_all(out)?;
    let prep = prepare(cfg, out)?;
    let model = model_config(cfg, &prep.vocab)?;
    let plan = RepetitionPlan::new(cfg.plan.repetitions, budget(cfg, &prep.train))?;
    let stream = repetition_stream(&prep.train, &plan, cfg.seed)?;
    let mut params = Params::<f32>::init(&model, cfg.seed)?;
    let training = dualm::training::TrainConfig {
        seed: cfg.seed,
        ..cfg.training.clone()
    };

    let metrics_path = out.join(METRICS_FILE);
    let partial = out.join(format!(".{METRICS_FILE}.partial"));
    let mut appender = MetricsAppender::create(&partial)?;
    let mut write_err = None;
    let outcome = train_model(
        &mut params,
        &training,
        &cfg.ratio,
        TrainData {
            windows: &prep.train.windows,
            stream: &stream,
            heldout: &prep.heldout.windows,
        },
        &prep.vocab.specials,
        |row| {
            if write_err.is_none() {
                write_err = appender.append(row).err();
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    drop(appender);
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&params, &ckpt)?;
    fs::rename(&partial, &metrics_path)?;

    let last = outcome
        .curve
        .last()
        .expect("training records a final validation point");
    Ok(TrainSummary {
        steps: outcome.config.total_steps,
        final_ar_val: last.ar_val_loss,
        final_diff_val: last.diff_val_loss,
        overfit_ar: detect_overfit(&outcome.curve, Objective::Ar, DEFAULT_OVERFIT_THRESHOLD),
        overfit_diff: detect_overfit(
            &outcome.curve,
            Objective::Diffusion,
            DEFAULT_OVERFIT_THRESHOLD,
        ),
        checkpoint: ckpt,
        metrics: metrics_path,
    })
}

fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskSpec>, CliError> {
    if cfg.eval.tasks.is_empty() {
        return Err(CliError::Usage(
            "no evaluation tasks configured (eval.tasks)".into(),
        ));
    }
    Ok(cfg
        .eval
        .tasks
        .iter()
        .map(|p| TaskSpec::load(p))
        .collect::<dualm::Result<_>>()?)
}

/// Scores a checkpoint on the configured tasks under each protocol and
/// writes `scores.csv`.
pub fn eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    protocols: &[Protocol],
    out: &Path,
) -> Result<Vec<ScoreReport>, CliError> {
    let params = checkpoint::load(checkpoint_path)?;
    let vocab_path = cfg
        .data
        .as_ref()
        .and_then(|d| d.vocab.clone())
        .unwrap_or_else(|| checkpoint_path.with_file_name(VOCAB_FILE));
    let vocab = Vocab::load(&vocab_path)?;
    if params.config.vocab_size != vocab.size() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} tokens but {} has {}",
            params.config.vocab_size,
            vocab_path.display(),
            vocab.size()
        )));
    }
    let tasks = load_tasks(cfg)?;
    let ev = Evaluator::new(&params, &vocab, cfg.eval.options);
    let reports = protocols
        .iter()
        .map(|&p| ev.evaluate(&tasks, p))
        .collect::<dualm::Result<Vec<_>>>()?;
    write_reports(&reports, &out.join(SCORES_FILE))?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub records: usize,
    pub skipped: usize,
    pub results: PathBuf,
}

/// Trains and scores every (repetitions, ratio) cell; writes `results.csv`
/// and `skipped.csv`.
pub fn sweep(
    cfg: &RunConfig,
    protocols: &[Protocol],
    out: &Path,
) -> Result<SweepSummary, CliError> {
    let sc = cfg.sweep.as_ref().ok_or_else(|| {
        CliError::Usage("this command needs a [sweep] section in the config".into())
    })?;
    fs::create_dir_all(out)?;
    let prep = prepare(cfg, out)?;
    let tasks = load_tasks(cfg)?;
    let grid = Grid {
        repetitions: sc.repetitions.clone(),
        ratios: sc
            .ratios
            .clone()
            .unwrap_or_else(|| Grid::ratios_for_cycle(DEFAULT_RATIO_CYCLE)),
        protocols: protocols.to_vec(),
    };
    // without an explicit budget the one-repetition cell sees every window once
    let total_budget_tokens = match cfg.plan.total_budget_tokens {
        0 => prep.train.unique_token_count() as u64,
        b => b,
    };
    let inputs = SweepInputs {
        train: &prep.train,
        heldout: &prep.heldout.windows,
        vocab: &prep.vocab,
        model: model_config(cfg, &prep.vocab)?,
        training: cfg.training.clone(),
        tasks: &tasks,
        eval: cfg.eval.options,
        total_budget_tokens,
        overfit_threshold: sc.overfit_threshold,
        seed: cfg.seed,
    };
    let result = run_grid(&inputs, &grid, |(r, a, b), res| match res {
        Ok(_) => eprintln!("cell R={r} {a}:{b} done"),
        Err(reason) => eprintln!("cell R={r} {a}:{b} skipped: {reason}"),
    })?;
    let results = out.join(RESULTS_FILE);
    save_results(&result.records, &results)?;
    save_skipped(&result.skipped, &out.join(SKIPPED_FILE))?;
    Ok(SweepSummary {
        records: result.records.len(),
        skipped: result.skipped.len(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSummary {
    pub points: usize,
    pub r_squared: f64,
    pub log_marginal_likelihood: f64,
    pub grid: PathBuf,
    pub density: PathBuf,
}

/// Fits the interpolating GP to one protocol's sweep scores and writes the
/// contour grid and the optimal-ratio density.
pub fn analyze(
    cfg: &RunConfig,
    results: &Path,
    protocol: Protocol,
    out: &Path,
) -> Result<AnalyzeSummary, CliError> {
    let records: Vec<_> = load_results(results)?
        .into_iter()
        .filter(|r| r.protocol == protocol)
        .collect();
    if records.len() < 3 {
        return Err(CliError::Usage(format!(
            "{} has {} {protocol} rows; the fit needs at least 3",
            results.display(),
            records.len()
        )));
    }
    let x: Vec<Vec<f64>> = records
        .iter()
        .map(|r| features(r.repetitions as f64, r.diffusion_fraction()))
        .collect();
    let y: Vec<f64> = records.iter().map(|r| r.score).collect();
    let a = &cfg.analyze;
    let fit = gpr::fit(&x, &y, a.restarts, seed::derive(cfg.seed, "gpr"))?;
    let lo = a.min_repetitions.unwrap_or_else(|| {
        records
            .iter()
            .map(|r| r.repetitions)
            .min()
            .expect("nonempty") as f64
    });
    let hi = a.max_repetitions.unwrap_or_else(|| {
        records
            .iter()
            .map(|r| r.repetitions)
            .max()
            .expect("nonempty") as f64
    });
    if !(lo > 0.0 && hi >= lo) {
        return Err(CliError::Usage(format!(
            "invalid repetition range [{lo}, {hi}]"
        )));
    }
    let reps = log2_space(lo, hi, a.grid_points);
    let fractions = linspace(0.0, 1.0, a.grid_points);
    let density = gpr::optimal_ratio_density(
        &fit,
        &reps,
        &fractions,
        a.posterior_samples,
        seed::derive(cfg.seed, "density"),
    )?;
    let grid = out.join(GRID_FILE);
    let dens = out.join(DENSITY_FILE);
    atomic_write(&grid, grid_csv(&fit, &reps, &fractions).as_bytes())?;
    atomic_write(&dens, density_csv(&density, &reps, &fractions).as_bytes())?;
    Ok(AnalyzeSummary {
        points: records.len(),
        r_squared: fit.r_squared(&x, &y),
        log_marginal_likelihood: fit.log_marginal_likelihood,
        grid,
        density: dens,
    })
}

/// The shift construction on `sequence`, followed by the composition check
/// for every built-in program.
pub fn rasp_demo(sequence: &str) -> Result<String, CliError> {
    let z = parse_sequence(sequence)?;
    let mut s = format!("{}\n", ShiftDemo { z: &z });
    for (name, program) in rasp::programs::ALL {
        let direct = program(&z);
        let shifted = rasp::shift(&direct);
        let ok = rasp::is_left_shift_of(&shifted, &direct);
        s.push_str(&format!(
            "shift({name}(z)) == {name}(z) shifted left: {}\n",
            if ok { "ok" } else { "FAILED" }
        ));
    }
    Ok(s)
}

/// Writes a synthetic corpus, matching evaluation tasks and a starter
/// config to `out`.
pub fn fixture(
    out: &Path,
    corpus_bytes: usize,
    tasks_per_kind: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, CliError> {
    let world = World::new(WorldShape::default(), seed);
    let docs = world.corpus(corpus_bytes, seed::derive(seed, "corpus"));
    let corpus = out.join("corpus.txt");
    atomic_write(&corpus, docs.join("\n\n").as_bytes())?;
    let mut written = vec![corpus];
    let mut task_names = Vec::new();
    for task in world.tasks(tasks_per_kind, seed::derive(seed, "tasks"))? {
        let p = out.join("tasks").join(format!("{}.jsonl", task.name));
        atomic_write(&p, task.to_jsonl().as_bytes())?;
        task_names.push(format!("\"tasks/{}.jsonl\"", task.name));
        written.push(p);
    }
    let config = format!(
        "seed = {seed}\n\n\
         [data]\ncorpus = \"corpus.txt\"\nvocab_size = 384\nwindow_len = 64\n\n\
         [model]\nn_layers = 2\nhidden_size = 32\nn_heads = 2\nffn_inner = 84\n\n\
         [training]\nbatch_sequences = 16\n\n\
         [ratio]\nar_parts = 7\ndiff_parts = 1\n\n\
         [plan]\nrepetitions = 4\n\n\
         [eval]\ntasks = [{}]\nprotocols = [\"ar\", \"prefix\", \"pll\"]\n\n\
         [sweep]\nrepetitions = [1, 4, 16]\nratios = [[1, 0], [7, 1], [1, 1], [1, 7], [0, 1]]\n",
        task_names.join(", ")
    );
    let cfg_path = out.join("config.toml");
    atomic_write(&cfg_path, config.as_bytes())?;
    written.push(cfg_path);
    Ok(written)
}
