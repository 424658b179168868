//! Zero-shot multiple-choice scoring.
//!
//! Every protocol scores the token sequence `[BOS] ⊕ enc(c) ⊕ enc(w)`, with
//! context and completion encoded separately so the completion boundary is
//! exact. Predictions for token `j` are read from logits row `j − 1` in every
//! attention mode.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Specials, Vocab};
use crate::io::atomic_write;
use crate::model::{AttentionMode, Params};
use crate::{par, seed, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Raw,
    CharLen,
    Pmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Ar,
    Prefix,
    Pll,
    Mc,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Ar, Protocol::Prefix, Protocol::Pll, Protocol::Mc];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Ar => "ar",
            Protocol::Prefix => "prefix",
            Protocol::Pll => "pll",
            Protocol::Mc => "mc",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown protocol {s:?} (expected ar, prefix, pll or mc)"
                ))
            })
    }
}

fn default_uncond() -> String {
    "Answer:".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalExample {
    #[serde(default)]
    pub context: String,
    pub completions: Vec<String>,
    pub gold: usize,
    #[serde(default = "default_uncond")]
    pub uncond_context: String,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask: Option<String>,
}

impl EvalExample {
    pub fn validate(&self) -> Result<()> {
        if self.completions.is_empty() {
            return Err(Error::Input("example has no completions".into()));
        }
        if self.gold >= self.completions.len() {
            return Err(Error::Input(format!(
                "gold index {} out of range for {} completions",
                self.gold,
                self.completions.len()
            )));
        }
        if self.norm == Norm::Pmi && self.uncond_context.is_empty() {
            return Err(Error::Input(
                "pmi normalization needs a nonempty uncond_context".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub examples: Vec<EvalExample>,
    pub random_baseline: f64,
    pub max_score: f64,
    pub pll_mask_counts: Vec<usize>,
}

pub const DEFAULT_PLL_MASK_COUNTS: [usize; 2] = [1, 6];

impl TaskSpec {
    /// Baseline `1 / mean completion count`, maximum 1, PLL masks {1, 6}.
    pub fn new(name: impl Into<String>, examples: Vec<EvalExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Input("task has no examples".into()));
        }
        let mean = examples
            .iter()
            .map(|e| e.completions.len() as f64)
            .sum::<f64>()
            / examples.len() as f64;
        let t = Self {
            name: name.into(),
            examples,
            random_baseline: 1.0 / mean,
            max_score: 1.0,
            pll_mask_counts: DEFAULT_PLL_MASK_COUNTS.to_vec(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Input(format!("task {}: no examples", self.name)));
        }
        if self.random_baseline.partial_cmp(&self.max_score) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Input(format!(
                "task {}: random baseline {} must be below max score {}",
                self.name, self.random_baseline, self.max_score
            )));
        }
        if self.pll_mask_counts.is_empty() || self.pll_mask_counts.contains(&0) {
            return Err(Error::Input(format!(
                "task {}: pll mask counts must be nonempty and positive",
                self.name
            )));
        }
        for e in &self.examples {
            e.validate()
                .map_err(|err| Error::Input(format!("task {}: {err}", self.name)))?;
        }
        Ok(())
    }

    fn has_subtasks(&self) -> bool {
        self.examples.iter().any(|e| e.subtask.is_some())
    }

    /// Parses one JSON record per nonblank line; the task is named after the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ex: EvalExample =
                serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            ex.validate()
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            examples.push(ex);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into());
        if examples.is_empty() {
            return Err(Error::parse(path, 0, "no examples"));
        }
        Self::new(name, examples)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.examples {
            s.push_str(&serde_json::to_string(e).expect("examples serialize"));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub protocol: Protocol,
    /// Accuracy in percent.
    pub raw: f64,
    /// Baseline-rescaled score in percentage points.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub protocol: Protocol,
    pub tasks: Vec<TaskScore>,
    pub aggregate: f64,
}

impl ScoreReport {
    pub fn csv(&self) -> String {
        report_csv(std::slice::from_ref(self))
    }
}

pub fn report_csv(reports: &[ScoreReport]) -> String {
    let mut s = String::from("task,protocol,raw,normalized\n");
    for r in reports {
        for t in &r.tasks {
            s.push_str(&format!(
                "{},{},{:.4},{:.4}\n",
                t.task, t.protocol, t.raw, t.normalized
            ));
        }
    }
    s
}

pub fn write_reports(reports: &[ScoreReport], path: &Path) -> Result<()> {
    atomic_write(path, report_csv(reports).as_bytes())
}

/// `(x − r) / (m − r)`.
pub fn normalized_score(x: f64, r_t: f64, m_t: f64) -> f64 {
    (x - r_t) / (m_t - r_t)
}

/// Unweighted mean; `NaN` for no scores.
pub fn aggregate(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn normalize_loglik(ll_cond: f64, ll_uncond: f64, completion: &str, norm: Norm) -> f64 {
    match norm {
        Norm::Raw => ll_cond,
        Norm::CharLen => ll_cond / completion.chars().count().max(1) as f64,
        Norm::Pmi => ll_cond - ll_uncond,
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn join(bos: u32, c: &[u32], w: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(1 + c.len() + w.len());
    v.push(bos);
    v.extend_from_slice(c);
    v.extend_from_slice(w);
    v
}

fn completion_sum<T: Real>(
    params: &Params<T>,
    bos: u32,
    c: &[u32],
    w: &[u32],
    mode: AttentionMode,
) -> Result<f64> {
    if w.is_empty() {
        return Ok(0.0);
    }
    let x = join(bos, c, w);
    let logits = params.forward(&x, mode)?;
    let start = 1 + c.len();
    Ok((0..w.len())
        .map(|i| logits.log_prob(start + i - 1, w[i]))
        .sum())
}

/// `Σ_i log p(w_i | c ⊕ w_<i)` with causal attention.
pub fn ar_loglik<T: Real>(params: &Params<T>, bos: u32, c: &[u32], w: &[u32]) -> Result<f64> {
    completion_sum(params, bos, c, w, AttentionMode::Causal)
}

/// As [`ar_loglik`], but BOS and the context attend to each other freely.
pub fn prefix_loglik<T: Real>(params: &Params<T>, bos: u32, c: &[u32], w: &[u32]) -> Result<f64> {
    completion_sum(params, bos, c, w, AttentionMode::Prefix(1 + c.len()))
}

/// Pseudo log-likelihood: each `w_i` is predicted with itself and the next
/// `n_masks − 1` completion tokens masked (run truncated at the end of `w`),
/// everything else visible, bidirectional attention. `|w|` forward passes.
pub fn pll<T: Real>(
    params: &Params<T>,
    specials: &Specials,
    c: &[u32],
    w: &[u32],
    n_masks: usize,
) -> Result<f64> {
    if n_masks < 1 {
        return Err(Error::Input("pll needs at least one mask token".into()));
    }
    let x = join(specials.bos, c, w);
    let start = 1 + c.len();
    let mut total = 0.0;
    for i in 0..w.len() {
        let mut masked = x.clone();
        let end = (i + n_masks).min(w.len());
        masked[start + i..start + end].fill(specials.mask);
        let logits = params.forward(&masked, AttentionMode::Bidirectional)?;
        total += logits.log_prob(start + i - 1, w[i]);
    }
    Ok(total)
}

/// How [`mc_elbo_loglik`] draws masks at each time point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskDraw {
    /// One random mask per time point from the given seed.
    Sampled(u64),
    /// Exact expectation over all `2^|w|` masks (|w| ≤ 20).
    Enumerated,
}

pub const MAX_ENUMERATED_LEN: usize = 20;

/// Diffusion ELBO estimate of `log p(w | c)`: mean over `N` time points
/// `t_k = (k − ½)/N` of `(1/t_k) Σ_{masked i} log p(w_i | ·)`, masking only
/// completion tokens. A draw with nothing masked contributes zero.
pub fn mc_elbo_loglik<T: Real>(
    params: &Params<T>,
    specials: &Specials,
    c: &[u32],
    w: &[u32],
    n_points: usize,
    draw: MaskDraw,
) -> Result<f64> {
    if n_points < 1 {
        return Err(Error::Input(
            "mc_elbo_loglik needs at least one time point".into(),
        ));
    }
    if w.is_empty() {
        return Ok(0.0);
    }
    let x = join(specials.bos, c, w);
    let start = 1 + c.len();
    let masked_sum = |mask: &[bool]| -> Result<f64> {
        let mut noised = x.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                noised[start + i] = specials.mask;
            }
        }
        let logits = params.forward(&noised, AttentionMode::Bidirectional)?;
        Ok(mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| logits.log_prob(start + i - 1, w[i]))
            .sum())
    };
    let times = (1..=n_points).map(|k| (k as f64 - 0.5) / n_points as f64);
    match draw {
        MaskDraw::Sampled(s) => {
            let mut rng = seed::rng(s, "mc-elbo");
            let mut total = 0.0;
            for t in times {
                let mask: Vec<bool> = (0..w.len()).map(|_| rng.random::<f64>() < t).collect();
                if mask.iter().any(|&m| m) {
                    total += masked_sum(&mask)? / t;
                }
            }
            Ok(total / n_points as f64)
        }
        MaskDraw::Enumerated => {
            let m = w.len();
            if m > MAX_ENUMERATED_LEN {
                return Err(Error::Input(format!(
                    "mask enumeration limited to {MAX_ENUMERATED_LEN} tokens, completion has {m}"
                )));
            }
            // per subset: masked count and summed log-prob, one forward each
            let mut subsets = Vec::with_capacity((1usize << m) - 1);
            for bits in 1u32..(1u32 << m) {
                let mask: Vec<bool> = (0..m).map(|i| bits >> i & 1 == 1).collect();
                subsets.push((bits.count_ones() as i32, masked_sum(&mask)?));
            }
            let mut total = 0.0;
            for t in times {
                for &(k, s) in &subsets {
                    total += t.powi(k) * (1.0 - t).powi(m as i32 - k) * s / t;
                }
            }
            Ok(total / n_points as f64)
        }
    }
}

/// Protocol plus the per-protocol knob that [`Evaluator::predict`] needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    Ar,
    Prefix,
    Pll(usize),
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Time points for the `mc` protocol.
    pub mc_points: usize,
    /// Enumerate masks instead of sampling them (short completions only).
    pub mc_enumerate: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mc_points: 64,
            mc_enumerate: false,
            seed: 0,
        }
    }
}

/// Text-level scorer bound to one model and tokenizer.
pub struct Evaluator<'a, T> {
    pub params: &'a Params<T>,
    pub vocab: &'a Vocab,
    pub options: EvalOptions,
}

impl<'a, T: Real> Evaluator<'a, T> {
    pub fn new(params: &'a Params<T>, vocab: &'a Vocab, options: EvalOptions) -> Self {
        Self {
            params,
            vocab,
            options,
        }
    }

    fn mc_seed(&self, c: &[u32], w: &[u32]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.options.seed.to_le_bytes());
        for &t in c.iter().chain([u32::MAX].iter()).chain(w) {
            h.update(t.to_le_bytes());
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    /// Unnormalized `log p(w | c)` under a scoring rule.
    pub fn loglik(&self, context: &str, completion: &str, scoring: Scoring) -> Result<f64> {
        let c = self.vocab.encode(context.as_bytes());
        let w = self.vocab.encode(completion.as_bytes());
        let sp = &self.vocab.specials;
        match scoring {
            Scoring::Ar => ar_loglik(self.params, sp.bos, &c, &w),
            Scoring::Prefix => prefix_loglik(self.params, sp.bos, &c, &w),
            Scoring::Pll(n) => pll(self.params, sp, &c, &w, n),
            Scoring::Mc => {
                let draw = if self.options.mc_enumerate {
                    MaskDraw::Enumerated
                } else {
                    MaskDraw::Sampled(self.mc_seed(&c, &w))
                };
                mc_elbo_loglik(self.params, sp, &c, &w, self.options.mc_points, draw)
            }
        }
    }

    /// Normalized score of every completion.
    pub fn completion_scores(&self, ex: &EvalExample, scoring: Scoring) -> Result<Vec<f64>> {
        ex.validate()?;
        ex.completions
            .iter()
            .map(|w| {
                let cond = self.loglik(&ex.context, w, scoring)?;
                let uncond = if ex.norm == Norm::Pmi {
                    self.loglik(&ex.uncond_context, w, scoring)?
                } else {
                    0.0
                };
                Ok(normalize_loglik(cond, uncond, w, ex.norm))
            })
            .collect()
    }

    pub fn predict(&self, ex: &EvalExample, scoring: Scoring) -> Result<usize> {
        Ok(argmax(&self.completion_scores(ex, scoring)?))
    }

    /// Accuracy in [0, 1]; the unweighted mean over subtasks when present.
    pub fn accuracy(&self, task: &TaskSpec, scoring: Scoring) -> Result<f64> {
        let hits = par::map(&task.examples, |ex| {
            self.predict(ex, scoring).map(|p| p == ex.gold)
        });
        let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        let grouped = task.has_subtasks();
        for (ex, hit) in task.examples.iter().zip(hits) {
            let key = if grouped {
                ex.subtask.as_deref().unwrap_or("")
            } else {
                ""
            };
            let g = groups.entry(key).or_default();
            g.0 += usize::from(hit?);
            g.1 += 1;
        }
        let accs: Vec<f64> = groups.values().map(|&(h, n)| h as f64 / n as f64).collect();
        Ok(aggregate(&accs))
    }

    /// Best task-level accuracy over the task's PLL mask counts.
    pub fn combined_pll_accuracy(&self, task: &TaskSpec) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for &n in &task.pll_mask_counts {
            best = best.max(self.accuracy(task, Scoring::Pll(n))?);
        }
        Ok(best)
    }

    pub fn task_score(&self, task: &TaskSpec, protocol: Protocol) -> Result<TaskScore> {
        task.validate()?;
        let acc = match protocol {
            Protocol::Ar => self.accuracy(task, Scoring::Ar)?,
            Protocol::Prefix => self.accuracy(task, Scoring::Prefix)?,
            Protocol::Pll => self.combined_pll_accuracy(task)?,
            Protocol::Mc => self.accuracy(task, Scoring::Mc)?,
        };
        Ok(TaskScore {
            task: task.name.clone(),
            protocol,
            raw: 100.0 * acc,
            normalized: 100.0 * normalized_score(acc, task.random_baseline, task.max_score),
        })
    }

    pub fn evaluate(&self, tasks: &[TaskSpec], protocol: Protocol) -> Result<ScoreReport> {
        let scores = tasks
            .iter()
            .map(|t| self.task_score(t, protocol))
            .collect::<Result<Vec<_>>>()?;
        let aggregate = aggregate(&scores.iter().map(|s| s.normalized).collect::<Vec<_>>());
        Ok(ScoreReport {
            protocol,
            tasks: scores,
            aggregate,
        })
    }
}
