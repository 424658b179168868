//! Optimization loop for the dual objective.
//!
//! Every step draws `batch_sequences` windows from the repetition stream and
//! hands each one to the objective its global slot index maps to in the
//! [`RatioSchedule`]. Per-sequence gradients are computed independently (in
//! parallel with the `parallel` feature) and summed in slot order, so a run
//! is bit-for-bit reproducible regardless of thread count.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Specials;
use crate::io::atomic_write;
use crate::linalg::{frobenius, matmul_a_bt, matmul_acc, transpose};
use crate::model::{AttentionMode, Logits, ParamKind, Params};
use crate::objectives::{
    ar_loss, diffusion_loss, noise_with_uniforms, objective_weight, sample_t, Objective,
    RatioSchedule, DEFAULT_T_MIN,
};
use crate::{par, seed, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Muon,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// 0: one pass over the repetition stream.
    pub total_steps: usize,
    /// 0: a quarter of `total_steps`.
    pub decay_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub zloss_coeff: f64,
    pub batch_sequences: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub t_min: f64,
    /// 0: every `total_steps / 64` steps.
    pub val_every: usize,
    /// Noise draws per held-out window for the diffusion validation loss.
    pub val_diffusion_draws: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 0,
            decay_steps: 0,
            base_lr: 0.007,
            weight_decay: 0.1,
            zloss_coeff: 1e-4,
            batch_sequences: 16,
            optimizer: OptimizerKind::Muon,
            momentum: 0.95,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            t_min: DEFAULT_T_MIN,
            val_every: 0,
            val_diffusion_draws: 4,
            heldout_fraction: 0.02,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sequences == 0 {
            return Err(Error::Config("batch_sequences must be positive".into()));
        }
        if self.total_steps > 0 && self.decay_steps > self.total_steps {
            return Err(Error::Config(format!(
                "decay_steps {} exceeds total_steps {}",
                self.decay_steps, self.total_steps
            )));
        }
        let coeffs = [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("zloss_coeff", self.zloss_coeff),
            ("momentum", self.momentum),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.t_min) {
            return Err(Error::Config("t_min must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Resolves the auto (zero) fields for a stream of `stream_len` windows.
    pub fn resolved(&self, stream_len: usize) -> Result<TrainConfig> {
        self.validate()?;
        let mut c = self.clone();
        if c.total_steps == 0 {
            c.total_steps = stream_len / c.batch_sequences;
        }
        if c.total_steps == 0 {
            return Err(Error::Config("stream is shorter than one batch".into()));
        }
        if c.total_steps * c.batch_sequences > stream_len {
            return Err(Error::Config(format!(
                "{} steps of {} sequences need {} windows, stream has {stream_len}",
                c.total_steps,
                c.batch_sequences,
                c.total_steps * c.batch_sequences
            )));
        }
        if c.decay_steps == 0 {
            c.decay_steps = c.total_steps / 4;
        }
        if c.decay_steps > c.total_steps {
            return Err(Error::Config("decay_steps exceeds total_steps".into()));
        }
        if c.val_every == 0 {
            c.val_every = (c.total_steps / 64).max(1);
        }
        Ok(c)
    }
}

/// Warmup-free stable phase followed by a linear decay to zero.
pub fn wsd_lr(step: usize, total: usize, decay_steps: usize, base_lr: f64) -> f64 {
    let decay_start = total.saturating_sub(decay_steps);
    if step < decay_start {
        base_lr
    } else if step >= total {
        0.0
    } else {
        base_lr * (total - step) as f64 / decay_steps as f64
    }
}

/// `coeff · mean_i logsumexp(row_i)²` over the given rows.
pub fn zloss<T: Real>(logits: &Logits<T>, coeff: f64) -> f64 {
    zloss_grad(logits, logits.n, coeff, 0.0, None)
}

/// z-loss over the first `rows` rows; adds `scale · ∂/∂logits` when asked.
pub fn zloss_grad<T: Real>(
    logits: &Logits<T>,
    rows: usize,
    coeff: f64,
    scale: f64,
    mut dlogits: Option<&mut [T]>,
) -> f64 {
    if rows == 0 || coeff == 0.0 {
        return 0.0;
    }
    let v = logits.vocab;
    let mut total = 0.0;
    for i in 0..rows {
        let row = logits.row(i);
        let lse = crate::model::logsumexp(row);
        total += lse * lse;
        if let Some(d) = dlogits.as_deref_mut() {
            let c = scale * coeff * 2.0 * lse / rows as f64;
            for (g, &x) in d[i * v..(i + 1) * v].iter_mut().zip(row) {
                *g += T::from_f64(c * (x.as_f64() - lse).exp());
            }
        }
    }
    coeff * total / rows as f64
}

/// Quintic Newton–Schulz iteration towards the orthogonal polar factor of a
/// `rows×cols` matrix. Returns zeros for a zero input.
pub fn newton_schulz<T: Real>(g: &[T], rows: usize, cols: usize, iters: usize) -> Vec<T> {
    const A: f64 = 3.4445;
    const B: f64 = -4.7750;
    const C: f64 = 2.0315;
    assert_eq!(g.len(), rows * cols);
    let norm = frobenius(g);
    if norm == T::zero() || !norm.is_finite() {
        return vec![T::zero(); g.len()];
    }
    // work on the wide orientation so X·Xᵀ is the smaller gram matrix
    let tall = rows > cols;
    let (r, c) = if tall { (cols, rows) } else { (rows, cols) };
    let mut x: Vec<T> = if tall {
        transpose(g, rows, cols)
    } else {
        g.to_vec()
    };
    let inv = T::one() / norm;
    x.iter_mut().for_each(|v| *v *= inv);
    let (a, b, cc) = (T::from_f64(A), T::from_f64(B), T::from_f64(C));
    for _ in 0..iters {
        let gram = matmul_a_bt(&x, &x, r, c, r);
        let mut poly = vec![T::zero(); r * r];
        matmul_acc(&gram, &gram, &mut poly, r, r, r);
        for (p, &gv) in poly.iter_mut().zip(&gram) {
            *p = b * gv + cc * *p;
        }
        let mut next: Vec<T> = x.iter().map(|&v| a * v).collect();
        matmul_acc(&poly, &x, &mut next, r, r, c);
        x = next;
    }
    if tall {
        transpose(&x, r, c)
    } else {
        x
    }
}

#[derive(Debug, Clone)]
enum SlotState {
    Muon {
        momentum: Vec<f32>,
        rows: usize,
        cols: usize,
    },
    Adam {
        m: Vec<f32>,
        v: Vec<f32>,
    },
}

/// Per-tensor optimizer state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    slots: Vec<SlotState>,
}

impl OptimizerState {
    /// Hidden matrices get Muon under [`OptimizerKind::Muon`]; gains,
    /// embeddings and the output projection always get AdamW.
    pub fn new(params: &Params<f32>, kind: OptimizerKind) -> Self {
        let slots = params
            .tensors()
            .iter()
            .map(|t| match (kind, t.kind) {
                (OptimizerKind::Muon, ParamKind::Matrix) => SlotState::Muon {
                    momentum: vec![0.0; t.data.len()],
                    rows: t.shape[0],
                    cols: t.shape[1],
                },
                _ => SlotState::Adam {
                    m: vec![0.0; t.data.len()],
                    v: vec![0.0; t.data.len()],
                },
            })
            .collect();
        Self { step: 0, slots }
    }
}

pub const MUON_NS_ITERS: usize = 5;

/// One update. Muon: Nesterov momentum, orthogonalized, scaled by
/// `0.2·sqrt(max(rows, cols))`; AdamW elsewhere; decoupled decay everywhere.
pub fn optimizer_step(
    params: &mut Params<f32>,
    grads: &Params<f32>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    let grad_views: Vec<&[f32]> = grads.tensors().into_iter().map(|v| v.data).collect();
    for ((p, g), slot) in params
        .slices_mut()
        .into_iter()
        .zip(grad_views)
        .zip(state.slots.iter_mut())
    {
        match slot {
            SlotState::Muon {
                momentum,
                rows,
                cols,
            } => {
                let mu = cfg.momentum as f32;
                let mut nesterov = vec![0.0f32; g.len()];
                for ((m, &gv), n) in momentum.iter_mut().zip(g).zip(nesterov.iter_mut()) {
                    *m = mu * *m + gv;
                    *n = gv + mu * *m;
                }
                let o = newton_schulz(&nesterov, *rows, *cols, MUON_NS_ITERS);
                let scale = (lr * 0.2 * ((*rows).max(*cols) as f64).sqrt()) as f32;
                for (pv, &ov) in p.iter_mut().zip(&o) {
                    *pv = *pv * decay - scale * ov;
                }
            }
            SlotState::Adam { m, v } => {
                let lr_c = lr / bc1;
                for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                {
                    *mv = (b1 as f32) * *mv + (1.0 - b1 as f32) * gv;
                    *vv = (b2 as f32) * *vv + (1.0 - b2 as f32) * gv * gv;
                    let denom = ((*vv as f64) / bc2).sqrt() + cfg.adam_eps;
                    *pv = *pv * decay - (lr_c * (*mv as f64) / denom) as f32;
                }
            }
        }
    }
}

/// Held-out losses recorded during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub ar_val_loss: f64,
    pub diff_val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValCurve {
    pub points: Vec<ValPoint>,
}

impl ValCurve {
    pub fn push(&mut self, p: ValPoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if p.step <= last.step {
                return Err(Error::Input(format!(
                    "validation steps must increase ({} after {})",
                    p.step, last.step
                )));
            }
        }
        self.points.push(p);
        Ok(())
    }

    pub fn series(&self, which: Objective) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| match which {
                Objective::Ar => p.ar_val_loss,
                Objective::Diffusion => p.diff_val_loss,
            })
            .collect()
    }

    pub fn last(&self) -> Option<&ValPoint> {
        self.points.last()
    }
}

/// True when the final loss exceeds `(1 + rel_threshold)` times the minimum.
pub fn detect_overfit_series(losses: &[f64], rel_threshold: f64) -> bool {
    let Some(&last) = losses.last() else {
        return false;
    };
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    last > (1.0 + rel_threshold) * min
}

pub fn detect_overfit(curve: &ValCurve, which: Objective, rel_threshold: f64) -> bool {
    detect_overfit_series(&curve.series(which), rel_threshold)
}

pub const DEFAULT_OVERFIT_THRESHOLD: f64 = 0.02;

/// One line of the metrics CSV. Train losses average the sequences of each
/// objective since the previous row; `NaN` means "none seen".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss_ar: f64,
    pub train_loss_diff: f64,
    pub val_loss_ar: f64,
    pub val_loss_diff: f64,
}

pub const METRICS_HEADER: &str = "step,lr,train_loss_ar,train_loss_diff,val_loss_ar,val_loss_diff";

fn fmt_opt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lr,
            fmt_opt(self.train_loss_ar),
            fmt_opt(self.train_loss_diff),
            fmt_opt(self.val_loss_ar),
            fmt_opt(self.val_loss_diff)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    atomic_write(path, metrics_csv(rows).as_bytes())
}

/// Windows and order for one run.
pub struct TrainData<'a> {
    pub windows: &'a [Vec<u32>],
    /// Indices into `windows`, consumed `batch_sequences` at a time.
    pub stream: &'a [usize],
    pub heldout: &'a [Vec<u32>],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: ValCurve,
    pub metrics: Vec<MetricsRow>,
    pub ar_sequences: u64,
    pub diff_sequences: u64,
    pub config: TrainConfig,
}

#[cfg(feature = "parallel")]
struct SeqResult {
    grads: Params<f32>,
    objective: Objective,
    loss: f64,
}

/// Loss and gradient of one training sequence under its assigned objective,
/// including the objective weight and the z-loss.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss_grad<T: Real>(
    params: &Params<T>,
    window: &[u32],
    objective: Objective,
    specials: &Specials,
    t: f64,
    uniforms: &[f64],
    cfg: &TrainConfig,
    grads: &mut Params<T>,
) -> Result<f64> {
    let n = window.len();
    let mut dlogits = vec![T::zero(); n * params.config.vocab_size];
    let w = objective_weight(objective);
    let (loss, cache) = match objective {
        Objective::Ar => {
            let (logits, cache) = params.forward_cached(window, AttentionMode::Causal)?;
            let targets: Vec<Option<u32>> = window[1..].iter().map(|&t| Some(t)).collect();
            let norm = 1.0 / (n - 1) as f64;
            let nll = fused_head_grad(&logits, &targets, w * norm, cfg.zloss_coeff, &mut dlogits);
            (nll * norm, cache)
        }
        Objective::Diffusion => {
            let sample = noise_with_uniforms(window, t, specials, uniforms)?;
            let (logits, cache) =
                params.forward_cached(&sample.noised, AttentionMode::Bidirectional)?;
            let targets: Vec<Option<u32>> = (1..n)
                .map(|i| sample.mask_flags[i].then_some(sample.original[i]))
                .collect();
            let weight = 1.0 / t.max(cfg.t_min) / (n - 1) as f64;
            let nll = fused_head_grad(&logits, &targets, w * weight, cfg.zloss_coeff, &mut dlogits);
            (nll * weight, cache)
        }
    };
    params.backward(&cache, &dlogits, grads);
    Ok(loss)
}

/// Cross-entropy and z-loss gradients over rows `0..targets.len()` with a
/// single softmax per row. Row `i` carries a cross-entropy term scaled by
/// `ce_scale` when `targets[i]` is set; every row carries the z-loss
/// averaged over all rows. Returns the summed target negative log-likelihood.
///
/// Equivalent to [`ar_loss_grad`] or [`diffusion_loss_grad`] followed by
/// [`zloss_grad`], at roughly half the cost.
pub fn fused_head_grad<T: Real>(
    logits: &Logits<T>,
    targets: &[Option<u32>],
    ce_scale: f64,
    zloss_coeff: f64,
    dlogits: &mut [T],
) -> f64 {
    let v = logits.vocab;
    let rows = targets.len();
    let mut nll = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let r = logits.row(i);
        let max = r.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut sum = 0.0f64;
        for &x in r {
            sum += (x - max).exp().as_f64();
        }
        let lse = max.as_f64() + sum.ln();
        let mut c = 2.0 * zloss_coeff * lse / rows as f64;
        if target.is_some() {
            c += ce_scale;
        }
        let lse_t = T::from_f64(lse);
        let ct = T::from_f64(c);
        let drow = &mut dlogits[i * v..(i + 1) * v];
        for (g, &x) in drow.iter_mut().zip(r) {
            *g += ct * (x - lse_t).exp();
        }
        if let Some(tok) = target {
            drow[tok as usize] -= T::from_f64(ce_scale);
            nll += lse - r[tok as usize].as_f64();
        }
    }
    nll
}

/// Noise parameters for training sequence number `slot`.
fn slot_noise(seed: u64, slot: u64, len: usize, t_min: f64) -> (f64, Vec<f64>) {
    use rand::Rng as _;
    let mut rng = seed::rng_indexed(seed, "noise", slot);
    let t = sample_t(&mut rng, t_min);
    let u = (1..len).map(|_| rng.random::<f64>()).collect();
    (t, u)
}

/// Mean held-out losses `(ar, diffusion)`. The diffusion loss uses fixed
/// noise (stratified t per draw) so successive evaluations are comparable.
pub fn validation_losses<T: Real>(
    params: &Params<T>,
    heldout: &[Vec<u32>],
    specials: &Specials,
    draws: usize,
    t_min: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::Rng as _;
    let draws = draws.max(1);
    let per = par::map_range(heldout.len(), |k| -> Result<(f64, f64)> {
        let w = &heldout[k];
        let ar = ar_loss(&params.forward(w, AttentionMode::Causal)?, w);
        let mut diff = 0.0;
        let mut rng = seed::rng_indexed(seed, "val-noise", k as u64);
        for r in 0..draws {
            let stratum = (k * draws + r) % draws;
            let t = t_min + (1.0 - t_min) * (stratum as f64 + rng.random::<f64>()) / draws as f64;
            let u: Vec<f64> = (1..w.len()).map(|_| rng.random::<f64>()).collect();
            let s = noise_with_uniforms(w, t, specials, &u)?;
            let logits = params.forward(&s.noised, AttentionMode::Bidirectional)?;
            diff += diffusion_loss(&logits, &s, t_min)?;
        }
        Ok((ar, diff / draws as f64))
    });
    let mut ar = 0.0;
    let mut diff = 0.0;
    for r in per {
        let (a, d) = r?;
        ar += a;
        diff += d;
    }
    let n = heldout.len().max(1) as f64;
    Ok((ar / n, diff / n))
}

/// Trains `params` in place.
///
/// `on_row` sees every metrics row as soon as it is produced (used by the
/// CLI for append-only metrics output and progress).
pub fn train(
    params: &mut Params<f32>,
    cfg: &TrainConfig,
    schedule: &RatioSchedule,
    data: TrainData<'_>,
    specials: &Specials,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let cfg = cfg.resolved(data.stream.len())?;
    if data.heldout.is_empty() {
        return Err(Error::Config("no held-out windows".into()));
    }
    let b = cfg.batch_sequences;
    let mut state = OptimizerState::new(params, cfg.optimizer);
    let mut curve = ValCurve::default();
    let mut metrics = Vec::new();
    let (mut ar_seqs, mut diff_seqs) = (0u64, 0u64);
    let (mut acc_ar, mut n_ar, mut acc_diff, mut n_diff) = (0.0, 0u64, 0.0, 0u64);
    let mut grads = params.zeros_like();
    #[cfg(not(feature = "parallel"))]
    let mut scratch = params.zeros_like();

    for step in 0..cfg.total_steps {
        let lr = wsd_lr(step, cfg.total_steps, cfg.decay_steps, cfg.base_lr);
        grads.for_each_mut(|_, xs| xs.fill(0.0));
        let slot0 = (step * b) as u64;
        let run_one = |j: usize, out: &mut Params<f32>| -> Result<(Objective, f64)> {
            let slot = slot0 + j as u64;
            let window = &data.windows[data.stream[slot as usize]];
            let objective = schedule.slot(slot);
            let (t, u) = slot_noise(cfg.seed, slot, window.len(), cfg.t_min);
            let loss = sequence_loss_grad(&*params, window, objective, specials, t, &u, &cfg, out)?;
            Ok((objective, loss))
        };

        #[cfg(feature = "parallel")]
        let results: Vec<Result<SeqResult>> = par::map_range(b, |j| {
            let mut g = params.zeros_like();
            run_one(j, &mut g).map(|(objective, loss)| SeqResult {
                grads: g,
                objective,
                loss,
            })
        });
        #[cfg(feature = "parallel")]
        let outcomes: Vec<(Objective, f64)> = {
            let mut v = Vec::with_capacity(b);
            for r in results {
                let r = r?;
                grads.add_assign(&r.grads);
                v.push((r.objective, r.loss));
            }
            v
        };
        #[cfg(not(feature = "parallel"))]
        let outcomes: Vec<(Objective, f64)> = {
            let mut v = Vec::with_capacity(b);
            for j in 0..b {
                scratch.for_each_mut(|_, xs| xs.fill(0.0));
                v.push(run_one(j, &mut scratch)?);
                grads.add_assign(&scratch);
            }
            v
        };

        for (objective, loss) in outcomes {
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("{objective:?} loss is {loss}"),
                });
            }
            match objective {
                Objective::Ar => {
                    ar_seqs += 1;
                    acc_ar += loss;
                    n_ar += 1;
                }
                Objective::Diffusion => {
                    diff_seqs += 1;
                    acc_diff += loss;
                    n_diff += 1;
                }
            }
        }
        grads.scale(1.0 / b as f32);
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "gradient contains NaN or inf".into(),
            });
        }
        optimizer_step(params, &grads, &mut state, lr, &cfg);

        let done = step + 1;
        if done % cfg.val_every == 0 || done == cfg.total_steps {
            let (va, vd) = validation_losses(
                &*params,
                data.heldout,
                specials,
                cfg.val_diffusion_draws,
                cfg.t_min,
                seed::derive(cfg.seed, "validation"),
            )?;
            if !va.is_finite() || !vd.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: "validation loss".into(),
                });
            }
            curve.push(ValPoint {
                step: done,
                ar_val_loss: va,
                diff_val_loss: vd,
            })?;
            let mean = |s: f64, n: u64| if n == 0 { f64::NAN } else { s / n as f64 };
            let row = MetricsRow {
                step: done,
                lr,
                train_loss_ar: mean(acc_ar, n_ar),
                train_loss_diff: mean(acc_diff, n_diff),
                val_loss_ar: va,
                val_loss_diff: vd,
            };
            on_row(&row);
            metrics.push(row);
            (acc_ar, n_ar, acc_diff, n_diff) = (0.0, 0, 0.0, 0);
        }
    }
    Ok(TrainOutcome {
        curve,
        metrics,
        ar_sequences: ar_seqs,
        diff_sequences: diff_seqs,
        config: cfg,
    })
}

/// Appends metrics rows to a CSV file as they arrive.
pub struct MetricsAppender {
    file: std::fs::File,
}

impl MetricsAppender {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self { file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv_line())?;
        Ok(())
    }
}
