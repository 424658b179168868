//! Training objectives: next-token cross-entropy, forward masking, the
//! 1/t-weighted masked-diffusion loss, objective weighting and the
//! deterministic AR/diffusion slot schedule.
//!
//! Both losses read the prediction for token `i + 1` from logits row `i`.

use serde::{Deserialize, Serialize};

use crate::corpus::Specials;
use crate::model::Logits;
use crate::{Error, Real, Result};

/// Lower clamp on the diffusion time used inside the 1/t weight.
pub const DEFAULT_T_MIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ar,
    Diffusion,
}

/// A masked copy of a sequence at diffusion time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub t: f64,
    pub noised: Vec<u32>,
    pub mask_flags: Vec<bool>,
    pub original: Vec<u32>,
}

impl DiffusionSample {
    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }
}

/// Masks every non-BOS token independently with probability `t`.
///
/// If nothing ends up masked, the first non-BOS position is masked so the
/// loss is never an empty sum.
pub fn forward_noising(
    x: &[u32],
    t: f64,
    specials: &Specials,
    rng: &mut impl rand::Rng,
) -> Result<DiffusionSample> {
    let u: Vec<f64> = (1..x.len()).map(|_| rng.random::<f64>()).collect();
    noise_with_uniforms(x, t, specials, &u)
}

/// Deterministic core of [`forward_noising`]: position `i ≥ 1` is masked iff
/// `u[i - 1] < t`. Lets callers supply stratified or low-discrepancy draws.
pub fn noise_with_uniforms(
    x: &[u32],
    t: f64,
    specials: &Specials,
    u: &[f64],
) -> Result<DiffusionSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("diffusion time {t} outside [0, 1]")));
    }
    if x.len() < 2 {
        return Err(Error::Input(
            "need at least one token after BOS to noise".into(),
        ));
    }
    if x[0] != specials.bos {
        return Err(Error::Input("sequence must start with BOS".into()));
    }
    if u.len() != x.len() - 1 {
        return Err(Error::Input(format!(
            "expected {} uniforms, got {}",
            x.len() - 1,
            u.len()
        )));
    }
    let mut mask_flags = vec![false; x.len()];
    for (flag, &ui) in mask_flags[1..].iter_mut().zip(u) {
        *flag = ui < t;
    }
    if !mask_flags.iter().any(|&m| m) {
        mask_flags[1] = true;
    }
    let noised = x
        .iter()
        .zip(&mask_flags)
        .map(|(&tok, &m)| if m { specials.mask } else { tok })
        .collect();
    Ok(DiffusionSample {
        t,
        noised,
        mask_flags,
        original: x.to_vec(),
    })
}

/// One stratified noise draw: `t`, per-position uniforms for
/// [`noise_with_uniforms`], and the probability of its stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: f64,
    pub u: Vec<f64>,
    pub weight: f64,
}

/// `draws` stratified noise draws for a sequence with `positions` maskable
/// tokens. `Σ weight · loss` over the draws is an unbiased estimate of the
/// expected loss under `t ~ U[t_min, 1]` and independent masking.
///
/// `[t_min, 1]` is cut into `draws` strata whose density grows like
/// `t^(-1/2)` toward `t_min`, where the 1/t weight makes the loss most
/// variable; each draw takes `t` uniformly inside its own stratum. Stratum
/// order and the mask uniforms come from an Owen-scrambled Sobol sequence
/// over `(t, u_1, .., u_positions)`, snapped to `draws` cells and jittered,
/// so every coordinate covers each cell exactly once and `(t, u_1)` is a
/// two-dimensional net. Each draw's uniforms are exactly i.i.d. on `[0, 1)`.
///
/// `draws` must be a power of two, at most 2^16, and `positions` at most
/// 255 (the limits of the underlying sequence).
pub fn stratified_draws(
    positions: usize,
    draws: usize,
    t_min: f64,
    rng: &mut impl rand::Rng,
) -> Result<Vec<NoiseDraw>> {
    if !draws.is_power_of_two() || draws > 1 << 16 {
        return Err(Error::Input(format!(
            "stratified draws need a power of two up to 65536, got {draws}"
        )));
    }
    if positions >= sobol_burley::NUM_DIMENSIONS as usize {
        return Err(Error::Input(format!(
            "stratified draws support at most {} positions, got {positions}",
            sobol_burley::NUM_DIMENSIONS - 1
        )));
    }
    if !(0.0..1.0).contains(&t_min) {
        return Err(Error::Input(format!("t_min {t_min} outside [0, 1)")));
    }
    let cells = draws as f64;
    let root = t_min.sqrt();
    let bound = |h: usize| (root + (1.0 - root) * h as f64 / cells).powi(2);
    let scramble: u32 = rng.random();
    let cell = |k: usize, dim: usize| {
        let x = sobol_burley::sample(k as u32, dim as u32, scramble) as f64;
        (x * cells).floor()
    };
    let mut out = Vec::with_capacity(draws);
    for k in 0..draws {
        let h = cell(k, 0) as usize;
        let (lo, hi) = (bound(h), bound(h + 1));
        let t = lo + (hi - lo) * rng.random::<f64>();
        let u = (1..=positions)
            .map(|d| (cell(k, d) + rng.random::<f64>()) / cells)
            .collect();
        out.push(NoiseDraw {
            t,
            u,
            weight: (hi - lo) / (1.0 - t_min),
        });
    }
    Ok(out)
}

/// Uniform draw on `[t_min, 1]`.
pub fn sample_t(rng: &mut impl rand::Rng, t_min: f64) -> f64 {
    t_min + (1.0 - t_min) * rng.random::<f64>()
}

/// Mean next-token negative log-likelihood over positions `0..n-1`.
pub fn ar_loss<T: Real>(logits: &Logits<T>, targets: &[u32]) -> f64 {
    ar_loss_grad(logits, targets, 0.0, None)
}

/// [`ar_loss`]; when `dlogits` is given, adds `scale · ∂loss/∂logits` to it.
pub fn ar_loss_grad<T: Real>(
    logits: &Logits<T>,
    targets: &[u32],
    scale: f64,
    mut dlogits: Option<&mut [T]>,
) -> f64 {
    assert_eq!(logits.n, targets.len(), "logits/targets length mismatch");
    let n = targets.len();
    if n < 2 {
        return 0.0;
    }
    let norm = 1.0 / (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n - 1 {
        let tgt = targets[i + 1];
        total -= xent_row(logits, i, tgt, scale * norm, dlogits.as_deref_mut());
    }
    total * norm
}

/// `(1/max(t, t_min)) · Σ_{masked i+1} −log p(original[i+1] | row i) / (n − 1)`.
pub fn diffusion_loss<T: Real>(
    logits: &Logits<T>,
    sample: &DiffusionSample,
    t_min: f64,
) -> Result<f64> {
    diffusion_loss_grad(logits, sample, t_min, 0.0, None)
}

pub fn diffusion_loss_grad<T: Real>(
    logits: &Logits<T>,
    sample: &DiffusionSample,
    t_min: f64,
    scale: f64,
    mut dlogits: Option<&mut [T]>,
) -> Result<f64> {
    let n = sample.original.len();
    assert_eq!(logits.n, n, "logits/sample length mismatch");
    if sample.masked_count() == 0 {
        return Err(Error::Input(
            "diffusion sample has no masked positions".into(),
        ));
    }
    let weight = 1.0 / sample.t.max(t_min) / (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n - 1 {
        if sample.mask_flags[i + 1] {
            let tgt = sample.original[i + 1];
            total -= xent_row(logits, i, tgt, scale * weight, dlogits.as_deref_mut());
        }
    }
    Ok(total * weight)
}

/// Returns `log p(target | row)`; adds `scale · (softmax − onehot)` to the
/// gradient row when requested (the gradient of `−log p`).
fn xent_row<T: Real>(
    logits: &Logits<T>,
    row: usize,
    target: u32,
    scale: f64,
    dlogits: Option<&mut [T]>,
) -> f64 {
    let r = logits.row(row);
    let lse = crate::model::logsumexp(r);
    if let Some(d) = dlogits {
        let v = logits.vocab;
        let drow = &mut d[row * v..(row + 1) * v];
        for (g, &x) in drow.iter_mut().zip(r) {
            *g += T::from_f64(scale * (x.as_f64() - lse).exp());
        }
        drow[target as usize] -= T::from_f64(scale);
    }
    r[target as usize].as_f64() - lse
}

/// Autoregressive losses count twice; the 1/t factor already lives inside
/// the diffusion loss.
pub fn dual_weight(loss: f64, objective: Objective) -> f64 {
    match objective {
        Objective::Ar => 2.0 * loss,
        Objective::Diffusion => loss,
    }
}

pub fn objective_weight(objective: Objective) -> f64 {
    dual_weight(1.0, objective)
}

/// Deterministic assignment of training slots to objectives, `a` AR slots
/// and `b` diffusion slots per cycle of `a + b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RatioParts", into = "RatioParts")]
pub struct RatioSchedule {
    pub ar_parts: u32,
    pub diff_parts: u32,
    cycle: Vec<Objective>,
}

/// Serialized form of a [`RatioSchedule`]: just the two part counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioParts {
    pub ar_parts: u32,
    pub diff_parts: u32,
}

impl TryFrom<RatioParts> for RatioSchedule {
    type Error = Error;

    fn try_from(p: RatioParts) -> Result<Self> {
        RatioSchedule::new(p.ar_parts, p.diff_parts)
    }
}

impl From<RatioSchedule> for RatioParts {
    fn from(s: RatioSchedule) -> Self {
        RatioParts {
            ar_parts: s.ar_parts,
            diff_parts: s.diff_parts,
        }
    }
}

impl RatioSchedule {
    pub fn new(ar_parts: u32, diff_parts: u32) -> Result<Self> {
        let total = ar_parts as u64 + diff_parts as u64;
        if total == 0 {
            return Err(Error::Config("ratio needs at least one part".into()));
        }
        // Slot s is AR when ceil((s+1)·a/N) steps past ceil(s·a/N): spreads
        // the a AR slots as evenly as possible and starts with AR when a > 0.
        let a = ar_parts as u64;
        let ceil_div = |x: u64| x.div_ceil(total);
        let cycle = (0..total)
            .map(|s| {
                if ceil_div((s + 1) * a) > ceil_div(s * a) {
                    Objective::Ar
                } else {
                    Objective::Diffusion
                }
            })
            .collect();
        Ok(Self {
            ar_parts,
            diff_parts,
            cycle,
        })
    }

    pub fn cycle(&self) -> &[Objective] {
        &self.cycle
    }

    pub fn len(&self) -> usize {
        self.cycle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycle.is_empty()
    }

    /// Objective of the `slot`-th sequence overall.
    pub fn slot(&self, slot: u64) -> Objective {
        self.cycle[(slot % self.cycle.len() as u64) as usize]
    }

    /// Diffusion share `b / (a + b)`.
    pub fn diffusion_fraction(&self) -> f64 {
        self.diff_parts as f64 / (self.ar_parts as f64 + self.diff_parts as f64)
    }
}

/// `ratio_schedule(a, b)`.
pub fn ratio_schedule(ar_parts: u32, diff_parts: u32) -> Result<RatioSchedule> {
    RatioSchedule::new(ar_parts, diff_parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn specials() -> Specials {
        Specials {
            bos: 0,
            mask: 1,
            pad: 2,
            docsep: 3,
        }
    }

    fn uniform_logits(n: usize, v: usize) -> Logits<f64> {
        Logits {
            n,
            vocab: v,
            data: vec![0.0; n * v],
        }
    }

    #[test]
    fn noising_extremes() {
        let x = [0u32, 5, 6, 7, 8];
        let mut rng = seed::rng(1, "t");
        let all = forward_noising(&x, 1.0, &specials(), &mut rng).unwrap();
        assert_eq!(all.mask_flags, vec![false, true, true, true, true]);
        assert_eq!(all.noised, vec![0, 1, 1, 1, 1]);
        let none = forward_noising(&x, 0.0, &specials(), &mut rng).unwrap();
        assert_eq!(none.masked_count(), 1);
        assert!(none.mask_flags[1]);
        assert!(forward_noising(&x, 1.5, &specials(), &mut rng).is_err());
        assert!(forward_noising(&x, -0.1, &specials(), &mut rng).is_err());
        assert!(forward_noising(&[5, 6], 0.5, &specials(), &mut rng).is_err());
    }

    #[test]
    fn masked_fraction_concentrates() {
        let mut x = vec![4u32; 10_001];
        x[0] = 0;
        let mut rng = seed::rng(2, "t");
        let s = forward_noising(&x, 0.3, &specials(), &mut rng).unwrap();
        let frac = s.masked_count() as f64 / 10_000.0;
        // binomial sd = sqrt(0.3·0.7/1e4) ≈ 0.0046; 0.02 is > 4 sd
        assert!((frac - 0.3).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn ar_loss_examples() {
        let l = uniform_logits(3, 4);
        assert!((ar_loss(&l, &[0, 1, 2]) - 4f64.ln()).abs() < 1e-12);
        let mut sharp = uniform_logits(3, 4);
        sharp.data[1] = 100.0; // row 0 predicts token 1
        sharp.data[4 + 2] = 100.0; // row 1 predicts token 2
        assert!(ar_loss(&sharp, &[0, 1, 2]) < 1e-12);
    }

    #[test]
    fn diffusion_loss_examples() {
        // vocab 2 with logits chosen so log p(target=1) = −1 exactly
        let p1 = (-1.0f64).exp();
        let z = (p1 / (1.0 - p1)).ln();
        let logits = Logits {
            n: 2,
            vocab: 2,
            data: vec![0.0, z, 0.0, 0.0],
        };
        let sample = DiffusionSample {
            t: 0.5,
            noised: vec![0, 9],
            mask_flags: vec![false, true],
            original: vec![0, 1],
        };
        let loss = diffusion_loss(&logits, &sample, DEFAULT_T_MIN).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);

        let l = uniform_logits(4, 4);
        let x = [0u32, 2, 3, 2];
        let s = noise_with_uniforms(&x, 1.0, &specials(), &[0.1, 0.5, 0.9]).unwrap();
        assert!((diffusion_loss(&l, &s, DEFAULT_T_MIN).unwrap() - 4f64.ln()).abs() < 1e-12);

        let empty = DiffusionSample {
            mask_flags: vec![false, false],
            ..sample
        };
        assert!(diffusion_loss(&logits, &empty, DEFAULT_T_MIN).is_err());
    }

    #[test]
    fn t_is_clamped_inside_the_weight() {
        let l = uniform_logits(2, 4);
        let s = DiffusionSample {
            t: 1e-6,
            noised: vec![0, 1],
            mask_flags: vec![false, true],
            original: vec![0, 3],
        };
        let loss = diffusion_loss(&l, &s, 0.01).unwrap();
        assert!((loss - 100.0 * 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn dual_weight_examples() {
        assert_eq!(dual_weight(1.0, Objective::Ar), 2.0);
        assert_eq!(dual_weight(1.0, Objective::Diffusion), 1.0);
    }

    #[test]
    fn schedule_examples() {
        let ar = ratio_schedule(1, 0).unwrap();
        assert!(ar.cycle().iter().all(|&o| o == Objective::Ar));
        let d = ratio_schedule(0, 3).unwrap();
        assert!(d.cycle().iter().all(|&o| o == Objective::Diffusion));
        let s = ratio_schedule(63, 1).unwrap();
        assert_eq!(s.len(), 64);
        assert_eq!(
            s.cycle()
                .iter()
                .filter(|&&o| o == Objective::Diffusion)
                .count(),
            1
        );
        let alt = ratio_schedule(1, 1).unwrap();
        for slot in 0..10 {
            let want = if slot % 2 == 0 {
                Objective::Ar
            } else {
                Objective::Diffusion
            };
            assert_eq!(alt.slot(slot), want);
        }
        assert!(ratio_schedule(0, 0).is_err());
    }

    #[test]
    fn sample_t_range_and_mean() {
        let mut rng = seed::rng(3, "t");
        let draws: Vec<f64> = (0..100_000).map(|_| sample_t(&mut rng, 0.01)).collect();
        assert!(draws.iter().all(|&t| (0.01..=1.0).contains(&t)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.505).abs() < 0.01);
        assert_eq!(sample_t(&mut rng, 1.0), 1.0);
    }

    proptest! {
        #[test]
        fn schedule_windows_are_exact(a in 0u32..40, b in 0u32..40, start in 0u64..500) {
            prop_assume!(a + b > 0);
            let s = ratio_schedule(a, b).unwrap();
            let n = (a + b) as u64;
            let ar = (start..start + n).filter(|&k| s.slot(k) == Objective::Ar).count();
            prop_assert_eq!(ar as u32, a);
        }

        #[test]
        fn bos_never_masked(len in 2usize..40, t in 0.0f64..=1.0, sd in any::<u64>()) {
            let mut x = vec![7u32; len];
            x[0] = 0;
            let mut rng = seed::rng(sd, "p");
            let s = forward_noising(&x, t, &specials(), &mut rng).unwrap();
            prop_assert!(!s.mask_flags[0]);
            prop_assert!(s.masked_count() >= 1);
            for i in 0..len {
                prop_assert_eq!(s.mask_flags[i], s.noised[i] == 1);
            }
        }

        #[test]
        fn losses_nonnegative(vals in proptest::collection::vec(-5.0f64..5.0, 12), t in 0.0f64..=1.0) {
            let l = Logits { n: 3, vocab: 4, data: vals };
            prop_assert!(ar_loss(&l, &[0, 2, 3]) >= 0.0);
            let s = noise_with_uniforms(&[0, 2, 3], t, &specials(), &[0.3, 0.6]).unwrap();
            prop_assert!(diffusion_loss(&l, &s, DEFAULT_T_MIN).unwrap() >= 0.0);
        }
    }

    #[test]
    fn stratified_draws_cover_every_cell() {
        let mut rng = seed::rng(3, "strat");
        let d = stratified_draws(5, 64, 0.01, &mut rng).unwrap();
        assert_eq!(d.len(), 64);
        let total: f64 = d.iter().map(|x| x.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut by_t = d.clone();
        by_t.sort_by(|a, b| a.t.total_cmp(&b.t));
        // strata tile [t_min, 1]: cumulative weight brackets each t
        let mut acc = 0.0;
        for x in &by_t {
            let cdf = (x.t - 0.01) / 0.99;
            assert!(acc <= cdf + 1e-12 && cdf <= acc + x.weight + 1e-12);
            acc += x.weight;
            assert_eq!(x.u.len(), 5);
        }
        assert!(by_t[0].weight < by_t[63].weight);
        for i in 0..5 {
            let mut cells: Vec<usize> = d.iter().map(|x| (x.u[i] * 64.0) as usize).collect();
            cells.sort_unstable();
            assert_eq!(cells, (0..64).collect::<Vec<_>>());
        }
        assert!(stratified_draws(300, 64, 0.01, &mut rng).is_err());
        assert!(stratified_draws(5, 48, 0.01, &mut rng).is_err());
    }

    #[test]
    fn stratified_estimate_is_unbiased_for_a_known_integrand() {
        // E[1/t · 1{u_1 < t}] = E[1/t · t] = 1
        let mut rng = seed::rng(4, "strat-mean");
        let est: f64 = stratified_draws(1, 4096, 0.01, &mut rng)
            .unwrap()
            .iter()
            .map(|x| x.weight * if x.u[0] < x.t { 1.0 / x.t } else { 0.0 })
            .sum();
        assert!((est - 1.0).abs() < 1e-3, "{est}");
    }
}
