//! Gaussian-process regression over sweep results.
//!
//! Inputs are `(log₂ R, b / (a + b))`, standardized per column; targets are
//! centered and scaled. The kernel is a constant times an anisotropic
//! Matérn-3/2 plus white noise. Hyperparameters maximize the log marginal
//! likelihood by multi-start compass search in log space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{par, seed, Error, Result};

pub const LENGTHSCALE_FLOOR: f64 = 1e-3;
pub const NOISE_FLOOR: f64 = 1e-8;
pub const AMPLITUDE_FLOOR: f64 = 1e-8;
pub const JITTER: f64 = 1e-8;
pub const DEFAULT_RESTARTS: usize = 16;

const LOG_CEILING: f64 = 9.2; // e^9.2 ≈ 1e4, in standardized units
const SQRT3: f64 = 1.732_050_807_568_877_2;

/// `(1 + √3 d) · exp(−√3 d)`.
pub fn matern32(d: f64) -> f64 {
    let s = SQRT3 * d;
    (1.0 + s) * (-s).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub amplitude2: f64,
    pub lengthscales: Vec<f64>,
    pub noise: f64,
}

impl KernelParams {
    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            amplitude2: v[0].exp(),
            lengthscales: v[1..=d].iter().map(|x| x.exp()).collect(),
            noise: v[d + 1].exp(),
        }
    }

    fn log_bounds(dims: usize) -> Vec<(f64, f64)> {
        let mut b = vec![(AMPLITUDE_FLOOR.ln(), LOG_CEILING)];
        b.extend(std::iter::repeat_n(
            (LENGTHSCALE_FLOOR.ln(), LOG_CEILING),
            dims,
        ));
        b.push((NOISE_FLOOR.ln(), LOG_CEILING));
        b
    }
}

fn scaled_distance(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Cross-covariance between rows of `x1` and `x2`. With `gram`, the
/// white-noise term is added on the diagonal (`x1` and `x2` must coincide).
pub fn kernel_matrix(
    x1: &[Vec<f64>],
    x2: &[Vec<f64>],
    p: &KernelParams,
    gram: bool,
) -> DMatrix<f64> {
    let mut k = DMatrix::from_fn(x1.len(), x2.len(), |i, j| {
        p.amplitude2 * matern32(scaled_distance(&x1[i], &x2[j], &p.lengthscales))
    });
    if gram {
        for i in 0..x1.len().min(x2.len()) {
            k[(i, i)] += p.noise;
        }
    }
    k
}

fn factor(mut k: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    for i in 0..k.nrows() {
        k[(i, i)] += JITTER;
    }
    Cholesky::new(k)
}

/// `−½ yᵀK⁻¹y − ½ log|K| − (n/2) log 2π` with `K` the noisy gram matrix.
pub fn log_marginal_likelihood(p: &KernelParams, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let chol = factor(kernel_matrix(x, x, p, true))
        .ok_or_else(|| Error::Fit("covariance is not positive definite".into()))?;
    Ok(lml_from_factor(&chol, y))
}

fn lml_from_factor(chol: &Cholesky<f64, Dyn>, y: &[f64]) -> f64 {
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let log_det: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
        * 2.0;
    let n = y.len() as f64;
    -0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Per-column affine map to zero mean and unit variance. Constant columns
/// keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: f64,
    pub scale: f64,
}

impl Scaling {
    fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }

    fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.mean
    }
}

#[derive(Debug, Clone)]
pub struct GprFit {
    /// Standardized design.
    pub x: Vec<Vec<f64>>,
    /// Standardized targets.
    pub y: Vec<f64>,
    pub params: KernelParams,
    pub x_scaling: Vec<Scaling>,
    pub y_scaling: Scaling,
    pub log_marginal_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Design row for a sweep cell: `(log₂ R, b / (a + b))`.
pub fn features(repetitions: f64, diffusion_fraction: f64) -> Vec<f64> {
    vec![repetitions.log2(), diffusion_fraction]
}

/// Compass search from `start`, staying inside `bounds`.
fn compass_search(
    f: &dyn Fn(&[f64]) -> f64,
    start: Vec<f64>,
    bounds: &[(f64, f64)],
) -> (Vec<f64>, f64) {
    let mut x = start;
    let mut fx = f(&x);
    let mut step = 1.0;
    let mut evals = 0;
    while step > 1e-7 && evals < 20_000 {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut cand = x.clone();
                cand[i] = (cand[i] + dir * step).clamp(bounds[i].0, bounds[i].1);
                if cand[i] == x[i] {
                    continue;
                }
                let fc = f(&cand);
                evals += 1;
                if fc > fx {
                    x = cand;
                    fx = fc;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Fits hyperparameters from `restarts` random starts; the best restart
/// wins, ties going to the lowest index.
pub fn fit(x_raw: &[Vec<f64>], y_raw: &[f64], restarts: usize, seed: u64) -> Result<GprFit> {
    let n = x_raw.len();
    if n < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {n}")));
    }
    if y_raw.len() != n {
        return Err(Error::Fit(format!(
            "{n} inputs but {} targets",
            y_raw.len()
        )));
    }
    let dims = x_raw[0].len();
    if dims == 0 || x_raw.iter().any(|r| r.len() != dims) {
        return Err(Error::Fit(
            "inputs must share one positive dimension".into(),
        ));
    }
    if x_raw.iter().flatten().chain(y_raw).any(|v| !v.is_finite()) {
        return Err(Error::Fit("inputs and targets must be finite".into()));
    }
    let x_scaling: Vec<Scaling> = (0..dims)
        .map(|j| Scaling::fit(x_raw.iter().map(move |r| r[j])))
        .collect();
    let y_scaling = Scaling::fit(y_raw.iter().copied());
    let x: Vec<Vec<f64>> = x_raw
        .iter()
        .map(|r| r.iter().zip(&x_scaling).map(|(v, s)| s.apply(*v)).collect())
        .collect();
    let y: Vec<f64> = y_raw.iter().map(|v| y_scaling.apply(*v)).collect();

    let bounds = KernelParams::log_bounds(dims);
    let objective = |v: &[f64]| -> f64 {
        match log_marginal_likelihood(&KernelParams::from_log(v), &x, &y) {
            Ok(l) if l.is_finite() => l,
            _ => f64::NEG_INFINITY,
        }
    };
    let runs = par::map_range(restarts.max(1), |r| {
        let start = if r == 0 {
            // a neutral start: unit amplitude and lengthscales, small noise
            let mut v = vec![0.0; dims + 2];
            v[dims + 1] = (1e-2f64).ln();
            v
        } else {
            let mut rng = seed::rng_indexed(seed, "gpr-restart", r as u64);
            let mut v = vec![rng.random_range(-2.0..2.0)];
            v.extend((0..dims).map(|_| rng.random_range(-2.5..2.5)));
            v.push(rng.random_range(-12.0..0.0));
            v
        };
        compass_search(&objective, start, &bounds)
    });
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (v, l) in runs {
        if best.as_ref().is_none_or(|(_, bl)| l > *bl) {
            best = Some((v, l));
        }
    }
    let (v, lml) = best.expect("at least one restart");
    if !lml.is_finite() {
        return Err(Error::Fit("no restart reached a finite likelihood".into()));
    }
    let params = KernelParams::from_log(&v);
    let chol = factor(kernel_matrix(&x, &x, &params, true))
        .ok_or_else(|| Error::Fit("covariance is not positive definite".into()))?;
    let alpha = chol.solve(&DVector::from_column_slice(&y));
    Ok(GprFit {
        x,
        y,
        params,
        x_scaling,
        y_scaling,
        log_marginal_likelihood: lml,
        chol,
        alpha,
    })
}

impl GprFit {
    fn standardize(&self, raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
        raw.iter()
            .map(|r| {
                r.iter()
                    .zip(&self.x_scaling)
                    .map(|(v, s)| s.apply(*v))
                    .collect()
            })
            .collect()
    }

    /// Mean and covariance of the latent function at `x_star` (raw units,
    /// white noise excluded).
    pub fn posterior(&self, x_star: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
        let xs = self.standardize(x_star);
        let mut p = self.params.clone();
        p.noise = 0.0;
        let k_star = kernel_matrix(&xs, &self.x, &p, false);
        let mean_std = &k_star * &self.alpha;
        let v = self
            .chol
            .l_dirty()
            .lower_triangle()
            .solve_lower_triangular(&k_star.transpose())
            .expect("triangular factor is nonsingular");
        let cov_std = kernel_matrix(&xs, &xs, &p, false) - v.transpose() * v;
        let s2 = self.y_scaling.scale * self.y_scaling.scale;
        let mean = mean_std.iter().map(|m| self.y_scaling.invert(*m)).collect();
        (mean, cov_std * s2)
    }

    /// Posterior means and standard deviations at `x_star`.
    pub fn predict(&self, x_star: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let (mean, cov) = self.posterior(x_star);
        let std = (0..mean.len())
            .map(|i| cov[(i, i)].max(0.0).sqrt())
            .collect();
        (mean, std)
    }

    /// `1 − SS_res / SS_tot` of the posterior mean on `(x, y)`.
    pub fn r_squared(&self, x: &[Vec<f64>], y: &[f64]) -> f64 {
        let (mean, _) = self.posterior(x);
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        let ss_res: f64 = y.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
        let ss_tot: f64 = y.iter().map(|a| (a - ybar).powi(2)).sum();
        if ss_tot == 0.0 {
            return if ss_res == 0.0 {
                1.0
            } else {
                f64::NEG_INFINITY
            };
        }
        1.0 - ss_res / ss_tot
    }
}

pub fn r_squared(fit: &GprFit, x: &[Vec<f64>], y: &[f64]) -> f64 {
    fit.r_squared(x, y)
}

/// Cholesky factor of a covariance, growing the jitter until it succeeds.
fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = (0..cov.nrows())
        .map(|i| cov[(i, i)])
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut jitter = JITTER * scale;
    for _ in 0..12 {
        let mut m = cov.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok(c.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::Fit(
        "posterior covariance could not be factorized".into(),
    ))
}

/// Frequency with which each ratio maximizes a posterior sample, per
/// repetition count. `out[i][j]` belongs to `reps[i]` and `fractions[j]`.
///
/// Samples are drawn from the exact joint posterior over each repetition
/// column; the argmax statistic only depends on those per-column marginals.
pub fn optimal_ratio_density(
    fit: &GprFit,
    reps: &[f64],
    fractions: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n_samples == 0 || fractions.is_empty() {
        return Err(Error::Input(
            "density needs samples and at least one ratio".into(),
        ));
    }
    let columns = par::map_range(reps.len(), |i| -> Result<Vec<f64>> {
        let pts: Vec<Vec<f64>> = fractions.iter().map(|&f| features(reps[i], f)).collect();
        let (mean, cov) = fit.posterior(&pts);
        let l = sampling_factor(&cov)?;
        let mut rng = seed::rng_indexed(seed, "ratio-density", i as u64);
        let m = fractions.len();
        let mut counts = vec![0usize; m];
        let mut z = DVector::zeros(m);
        for _ in 0..n_samples {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let f = &l * &z;
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..m {
                let v = mean[j] + f[j];
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            counts[best] += 1;
        }
        Ok(counts
            .iter()
            .map(|&c| c as f64 / n_samples as f64)
            .collect())
    });
    columns.into_iter().collect()
}

/// `n` evenly spaced values over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// `n` repetition counts spaced evenly in log₂ over `[lo, hi]`.
pub fn log2_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.log2(), hi.log2(), n)
        .into_iter()
        .map(f64::exp2)
        .collect()
}

pub const GRID_HEADER: &str = "repetitions,ratio_fraction,mean,std";
pub const DENSITY_HEADER: &str = "repetitions,ratio_fraction,probability";

pub fn grid_csv(fit: &GprFit, reps: &[f64], fractions: &[f64]) -> String {
    let mut s = format!("{GRID_HEADER}\n");
    for &r in reps {
        let pts: Vec<Vec<f64>> = fractions.iter().map(|&f| features(r, f)).collect();
        let (mean, std) = fit.predict(&pts);
        for ((f, m), sd) in fractions.iter().zip(mean).zip(std) {
            s.push_str(&format!("{r},{f},{m},{sd}\n"));
        }
    }
    s
}

pub fn density_csv(density: &[Vec<f64>], reps: &[f64], fractions: &[f64]) -> String {
    let mut s = format!("{DENSITY_HEADER}\n");
    for (col, &r) in density.iter().zip(reps) {
        for (&p, &f) in col.iter().zip(fractions) {
            s.push_str(&format!("{r},{f},{p}\n"));
        }
    }
    s
}
