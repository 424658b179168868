//! Run configuration: one TOML file, with a few keys overridable by flags.
//!
//! Relative paths are resolved against the directory holding the config
//! file, and every input path must exist when the file is loaded.

use std::path::{Path, PathBuf};

use dualm::evals::{EvalOptions, Protocol};
use dualm::model::ModelConfig;
use dualm::objectives::RatioSchedule;
use dualm::training::{TrainConfig, DEFAULT_OVERFIT_THRESHOLD};
use serde::Deserialize;

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DUALM_OUT";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; falls back to `$DUALM_OUT`, then `runs`.
    pub out: Option<PathBuf>,
    pub data: Option<DataConfig>,
    /// `vocab_size` and `max_len` are taken from the data section.
    #[serde(default)]
    pub model: ModelConfig,
    /// `seed` is replaced by the top-level seed.
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default = "default_ratio")]
    pub ratio: RatioSchedule,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
}

fn default_ratio() -> RatioSchedule {
    RatioSchedule::new(1, 0).expect("valid ratio")
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// A text file (documents separated by blank lines) or a directory with
    /// one document per file.
    pub corpus: PathBuf,
    /// Existing vocabulary; trained from the corpus when absent.
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
}

fn default_vocab_size() -> usize {
    512
}

fn default_window_len() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub repetitions: u32,
    /// 0: every training window exactly once per repetition.
    pub total_budget_tokens: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            repetitions: 1,
            total_budget_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub tasks: Vec<PathBuf>,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<Protocol>,
    #[serde(default)]
    pub options: EvalOptions,
}

fn default_protocols() -> Vec<Protocol> {
    vec![Protocol::Ar]
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            protocols: default_protocols(),
            options: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub repetitions: Vec<u32>,
    /// `[ar_parts, diff_parts]` pairs; defaults to every split of 16 slots.
    pub ratios: Option<Vec<(u32, u32)>>,
    #[serde(default = "default_threshold")]
    pub overfit_threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_OVERFIT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Grid resolution along each axis.
    pub grid_points: usize,
    pub posterior_samples: usize,
    pub restarts: usize,
    /// Repetition range of the interpolation grid; defaults to the range
    /// present in the results.
    pub min_repetitions: Option<f64>,
    pub max_repetitions: Option<f64>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            grid_points: 64,
            posterior_samples: 2000,
            restarts: dualm::gpr::DEFAULT_RESTARTS,
            min_repetitions: None,
            max_repetitions: None,
        }
    }
}

impl RunConfig {
    /// Parses `text`, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: base.to_path_buf(),
            msg: e.message().to_string(),
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            resolve(&mut d.corpus);
            if let Some(v) = d.vocab.as_mut() {
                resolve(v);
            }
        }
        cfg.eval.tasks.iter_mut().for_each(resolve);
        if let Some(o) = cfg.out.as_mut() {
            resolve(o);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::parse(&text, base).map_err(|e| match e {
            CliError::Config { msg, .. } => CliError::Config {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })?;
        cfg.check(path)?;
        Ok(cfg)
    }

    /// Rejects missing input paths and invalid sections.
    pub fn check(&self, path: &Path) -> Result<(), CliError> {
        let bad = |msg: String| CliError::Config {
            path: path.to_path_buf(),
            msg,
        };
        let mut inputs: Vec<&Path> = self.eval.tasks.iter().map(PathBuf::as_path).collect();
        if let Some(d) = &self.data {
            inputs.push(&d.corpus);
            if let Some(v) = &d.vocab {
                inputs.push(v);
            }
        }
        if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
            return Err(bad(format!("{} does not exist", missing.display())));
        }
        self.training.validate().map_err(|e| bad(e.to_string()))?;
        if self.plan.repetitions == 0 {
            return Err(bad("plan.repetitions must be positive".into()));
        }
        if self.eval.protocols.is_empty() {
            return Err(bad("eval.protocols is empty".into()));
        }
        if let Some(s) = &self.sweep {
            if s.repetitions.is_empty() || s.repetitions.contains(&0) {
                return Err(bad(
                    "sweep.repetitions must be a nonempty list of positive counts".into(),
                ));
            }
        }
        if self.analyze.grid_points < 2 || self.analyze.posterior_samples == 0 {
            return Err(bad(
                "analyze needs grid_points >= 2 and posterior_samples >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataConfig, CliError> {
        self.data.as_ref().ok_or_else(|| {
            CliError::Usage("this command needs a [data] section in the config".into())
        })
    }

    /// `--out`, then the config's `out`, then `$DUALM_OUT`, then `runs`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse("seed = 3\n", Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.ratio, RatioSchedule::new(1, 0).unwrap());
        assert_eq!(cfg.eval.protocols, vec![Protocol::Ar]);
        assert!(cfg.data.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("[training]\nlearning_rate = 0.1\n", Path::new(".")).is_err());
        assert!(RunConfig::parse(
            "[ratio]\nar_parts = 1\ndiff_parts = 1\nextra = 2\n",
            Path::new(".")
        )
        .is_err());
    }

    #[test]
    fn invalid_ratio_is_rejected() {
        assert!(
            RunConfig::parse("[ratio]\nar_parts = 0\ndiff_parts = 0\n", Path::new(".")).is_err()
        );
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let cfg = RunConfig::parse(
            "[data]\ncorpus = \"c.txt\"\n[eval]\ntasks = [\"t.jsonl\", \"/abs/u.jsonl\"]\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.data.unwrap().corpus, PathBuf::from("/base/c.txt"));
        assert_eq!(
            cfg.eval.tasks,
            vec![
                PathBuf::from("/base/t.jsonl"),
                PathBuf::from("/abs/u.jsonl")
            ]
        );
    }

    #[test]
    fn missing_paths_fail_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\ncorpus = \"missing.txt\"\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("missing.txt"), "{err}");
    }
}
