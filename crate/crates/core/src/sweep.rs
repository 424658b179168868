//! Repetitions × AR/diffusion ratio grid runner.
//!
//! Every cell trains a fresh model on the same token budget: the first
//! `budget / R` tokens of the packed corpus, repeated `R` times. Cells share
//! the model-init and data seeds, so any difference between two cells comes
//! from the repetition count and the objective mixture alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{repetition_stream, PackedDataset, RepetitionPlan, Vocab};
use crate::evals::{EvalOptions, Evaluator, Protocol, TaskSpec};
use crate::io::atomic_write;
use crate::model::{ModelConfig, Params};
use crate::objectives::Objective;
use crate::objectives::RatioSchedule;
use crate::training::{detect_overfit, train, TrainConfig, TrainData, TrainOutcome};
use crate::{par, Error, Result};

pub const DEFAULT_RATIO_CYCLE: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repetitions: u32,
    pub ar_parts: u32,
    pub diff_parts: u32,
    pub protocol: Protocol,
    /// Aggregate normalized score in percentage points.
    pub score: f64,
    pub overfit_ar: bool,
    pub seed: u64,
}

impl RunRecord {
    fn sort_key(&self) -> (u32, u32, u32, Protocol) {
        (
            self.repetitions,
            self.ar_parts,
            self.diff_parts,
            self.protocol,
        )
    }

    /// `b / (a + b)`.
    pub fn diffusion_fraction(&self) -> f64 {
        self.diff_parts as f64 / (self.ar_parts + self.diff_parts) as f64
    }
}

/// A grid cell that could not be run, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub repetitions: u32,
    pub ar_parts: u32,
    pub diff_parts: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub skipped: Vec<SkippedCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub repetitions: Vec<u32>,
    /// `(ar_parts, diff_parts)` pairs.
    pub ratios: Vec<(u32, u32)>,
    pub protocols: Vec<Protocol>,
}

impl Grid {
    /// Every split of a cycle of `cycle` slots, pure diffusion to pure AR.
    pub fn ratios_for_cycle(cycle: u32) -> Vec<(u32, u32)> {
        (0..=cycle).map(|a| (a, cycle - a)).collect()
    }

    pub fn cells(&self) -> Vec<(u32, u32, u32)> {
        let mut out = Vec::with_capacity(self.repetitions.len() * self.ratios.len());
        for &r in &self.repetitions {
            for &(a, b) in &self.ratios {
                out.push((r, a, b));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions.is_empty() || self.ratios.is_empty() || self.protocols.is_empty() {
            return Err(Error::Config(
                "grid needs at least one repetition count, ratio and protocol".into(),
            ));
        }
        if self.repetitions.contains(&0) {
            return Err(Error::Config("repetition counts must be positive".into()));
        }
        for &(a, b) in &self.ratios {
            RatioSchedule::new(a, b)?;
        }
        Ok(())
    }
}

/// Everything a cell needs besides its coordinates.
pub struct SweepInputs<'a> {
    /// Training windows (held-out windows already removed).
    pub train: &'a PackedDataset,
    pub heldout: &'a [Vec<u32>],
    pub vocab: &'a Vocab,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub tasks: &'a [TaskSpec],
    pub eval: EvalOptions,
    pub total_budget_tokens: u64,
    pub overfit_threshold: f64,
    /// Seeds model init, epoch shuffles and noise for every cell.
    pub seed: u64,
}

pub struct CellTraining {
    pub params: Params<f32>,
    pub outcome: TrainOutcome,
}

/// Trains one cell, or explains why it cannot be run.
pub fn train_cell(
    inputs: &SweepInputs<'_>,
    repetitions: u32,
    ar_parts: u32,
    diff_parts: u32,
) -> Result<std::result::Result<CellTraining, String>> {
    let schedule = RatioSchedule::new(ar_parts, diff_parts)?;
    let plan = RepetitionPlan::new(repetitions, inputs.total_budget_tokens)?;
    let k = plan.subset_windows(inputs.train.window_len);
    if k == 0 {
        return Ok(Err(format!(
            "subset of {} tokens is smaller than one window",
            plan.subset_tokens
        )));
    }
    if k > inputs.train.len() {
        return Ok(Err(format!(
            "needs {k} unique windows, corpus has {}",
            inputs.train.len()
        )));
    }
    let stream = repetition_stream(inputs.train, &plan, inputs.seed)?;
    if stream.len() < inputs.training.batch_sequences {
        return Ok(Err("stream is shorter than one batch".into()));
    }
    let mut params = Params::<f32>::init(&inputs.model, inputs.seed)?;
    let cfg = TrainConfig {
        seed: inputs.seed,
        ..inputs.training.clone()
    };
    let outcome = train(
        &mut params,
        &cfg,
        &schedule,
        TrainData {
            windows: &inputs.train.windows,
            stream: &stream,
            heldout: inputs.heldout,
        },
        &inputs.vocab.specials,
        |_| {},
    )?;
    Ok(Ok(CellTraining { params, outcome }))
}

/// Records for one trained cell, one per protocol.
pub fn score_cell(
    inputs: &SweepInputs<'_>,
    cell: &CellTraining,
    coords: (u32, u32, u32),
    protocols: &[Protocol],
) -> Result<Vec<RunRecord>> {
    let ev = Evaluator::new(&cell.params, inputs.vocab, inputs.eval);
    let overfit_ar = detect_overfit(&cell.outcome.curve, Objective::Ar, inputs.overfit_threshold);
    protocols
        .iter()
        .map(|&p| {
            let report = ev.evaluate(inputs.tasks, p)?;
            if !report.aggregate.is_finite() {
                return Err(Error::NonFinite {
                    step: cell.outcome.config.total_steps,
                    detail: format!("aggregate {p} score"),
                });
            }
            Ok(RunRecord {
                repetitions: coords.0,
                ar_parts: coords.1,
                diff_parts: coords.2,
                protocol: p,
                score: report.aggregate,
                overfit_ar,
                seed: inputs.seed,
            })
        })
        .collect()
}

/// Runs every cell (in parallel with the `parallel` feature). `on_cell`
/// sees each finished cell's records in completion order; the returned
/// records are sorted by (R, a, b, protocol).
pub fn run_grid(
    inputs: &SweepInputs<'_>,
    grid: &Grid,
    on_cell: impl Fn((u32, u32, u32), &std::result::Result<Vec<RunRecord>, String>) + Sync,
) -> Result<SweepResult> {
    grid.validate()?;
    let cells = grid.cells();
    let results = par::map(
        &cells,
        |&(r, a, b)| -> Result<std::result::Result<Vec<RunRecord>, String>> {
            let out = match train_cell(inputs, r, a, b)? {
                Ok(cell) => Ok(score_cell(inputs, &cell, (r, a, b), &grid.protocols)?),
                Err(reason) => Err(reason),
            };
            on_cell((r, a, b), &out);
            Ok(out)
        },
    );
    let mut result = SweepResult::default();
    for (&(r, a, b), res) in cells.iter().zip(results) {
        match res? {
            Ok(recs) => result.records.extend(recs),
            Err(reason) => result.skipped.push(SkippedCell {
                repetitions: r,
                ar_parts: a,
                diff_parts: b,
                reason,
            }),
        }
    }
    sort_records(&mut result.records);
    Ok(result)
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by_key(RunRecord::sort_key);
}

pub const RESULTS_HEADER: &str = "repetitions,ar_parts,diff_parts,protocol,score,overfit_ar,seed";

pub fn results_csv(records: &[RunRecord]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in records {
        // `{}` on f64 prints the shortest string that parses back exactly
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.repetitions, r.ar_parts, r.diff_parts, r.protocol, r.score, r.overfit_ar, r.seed
        ));
    }
    s
}

pub fn save_results(records: &[RunRecord], path: &Path) -> Result<()> {
    atomic_write(path, results_csv(records).as_bytes())
}

pub fn load_results(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {RESULTS_HEADER}"),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RunRecord>().enumerate() {
        let rec = row.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        if !rec.score.is_finite() {
            return Err(Error::parse(path, i + 2, "score is not finite"));
        }
        RatioSchedule::new(rec.ar_parts, rec.diff_parts)
            .map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub const SKIPPED_HEADER: &str = "repetitions,ar_parts,diff_parts,reason";

pub fn save_skipped(cells: &[SkippedCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SKIPPED_HEADER.split(','))?;
    for c in cells {
        w.serialize(c)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cycle_ratios() {
        let r = Grid::ratios_for_cycle(4);
        assert_eq!(r, vec![(0, 4), (1, 3), (2, 2), (3, 1), (4, 0)]);
    }

    #[test]
    fn grid_validation() {
        let g = Grid {
            repetitions: vec![1, 4],
            ratios: vec![(1, 0), (0, 0)],
            protocols: vec![Protocol::Ar],
        };
        assert!(g.validate().is_err());
        let g = Grid {
            repetitions: vec![1, 4],
            ratios: vec![(1, 0), (7, 1)],
            protocols: vec![Protocol::Ar],
        };
        assert_eq!(g.cells().len(), 4);
    }

    fn protocol() -> impl Strategy<Value = Protocol> {
        prop::sample::select(Protocol::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn results_round_trip(
            recs in prop::collection::vec(
                (1u32..200, 0u32..20, 1u32..20, protocol(), -1e3f64..1e3, any::<bool>(), any::<u64>()),
                0..20,
            )
        ) {
            let records: Vec<RunRecord> = recs
                .into_iter()
                .map(|(repetitions, ar_parts, diff_parts, protocol, score, overfit_ar, seed)| RunRecord {
                    repetitions, ar_parts, diff_parts, protocol, score, overfit_ar, seed,
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("results.csv");
            save_results(&records, &path).unwrap();
            prop_assert_eq!(load_results(&path).unwrap(), records);
        }
    }
}
