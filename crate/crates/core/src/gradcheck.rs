//! Central finite-difference checks of the analytic loss gradients.
//!
//! [`loss_and_grad`] runs the same forward pass, loss and backward pass that
//! training uses, in double precision; [`gradient_check`] compares it with
//! numeric derivatives at random parameter coordinates.

use rand::Rng;

use crate::corpus::Specials;
use crate::model::{AttentionMode, ModelConfig, Params};
use crate::objectives::{ar_loss_grad, diffusion_loss_grad, noise_with_uniforms, DEFAULT_T_MIN};
use crate::training::zloss_grad;

pub const SPECIALS: Specials = Specials {
    bos: 0,
    mask: 1,
    pad: 2,
    docsep: 3,
};

/// 2 layers, hidden 16, double precision, with weights jittered away from
/// the near-zero init so every path carries signal.
pub fn small_f64_model(seed: u64) -> Params<f64> {
    let cfg = ModelConfig {
        n_layers: 2,
        hidden_size: 16,
        n_heads: 2,
        ffn_inner: 40,
        vocab_size: 13,
        max_len: 16,
        ..ModelConfig::default()
    };
    let mut p = Params::<f64>::init(&cfg, seed).unwrap();
    p.jitter(0.3, seed + 1);
    p
}

#[derive(Clone, Copy, Debug)]
pub enum Loss {
    Ar,
    Diffusion,
    Zloss,
}

pub struct LossCase {
    pub tokens: Vec<u32>,
    pub t: f64,
    pub uniforms: Vec<f64>,
}

impl LossCase {
    pub fn random(len: usize, vocab: u32, rng: &mut impl Rng) -> Self {
        let mut tokens = vec![SPECIALS.bos];
        tokens.extend((1..len).map(|_| rng.random_range(4..vocab)));
        Self {
            tokens,
            t: rng.random_range(0.2..0.9),
            uniforms: (1..len).map(|_| rng.random::<f64>()).collect(),
        }
    }
}

/// Loss and analytic gradient in one place so the two cannot drift apart.
pub fn loss_and_grad(
    p: &Params<f64>,
    case: &LossCase,
    which: Loss,
    with_grad: bool,
) -> (f64, Option<Params<f64>>) {
    let n = case.tokens.len();
    let vocab = p.config.vocab_size;
    let mut dl = vec![0.0; n * vocab];
    let (input, mode) = match which {
        Loss::Ar | Loss::Zloss => (case.tokens.clone(), AttentionMode::Causal),
        Loss::Diffusion => (
            noise_with_uniforms(&case.tokens, case.t, &SPECIALS, &case.uniforms)
                .unwrap()
                .noised,
            AttentionMode::Bidirectional,
        ),
    };
    let (logits, cache) = p.forward_cached(&input, mode).unwrap();
    let grad_buf = if with_grad { Some(&mut dl[..]) } else { None };
    let loss = match which {
        Loss::Ar => ar_loss_grad(&logits, &case.tokens, 1.0, grad_buf),
        Loss::Diffusion => {
            let s = noise_with_uniforms(&case.tokens, case.t, &SPECIALS, &case.uniforms).unwrap();
            diffusion_loss_grad(&logits, &s, DEFAULT_T_MIN, 1.0, grad_buf).unwrap()
        }
        // a large coefficient so the check is not dominated by rounding
        Loss::Zloss => zloss_grad(&logits, n, 1.0, 1.0, grad_buf),
    };
    if !with_grad {
        return (loss, None);
    }
    let mut g = p.zeros_like();
    p.backward(&cache, &dl, &mut g);
    (loss, Some(g))
}

/// Max relative error between central differences and the analytic gradient
/// over `coords` random parameter coordinates.
pub fn gradient_check(
    p: &Params<f64>,
    case: &LossCase,
    which: Loss,
    coords: usize,
    h: f64,
    rng: &mut impl Rng,
) -> f64 {
    let (_, g) = loss_and_grad(p, case, which, true);
    let g = g.unwrap();
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let flat_grad: Vec<f64> = g
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter().copied())
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let idx = rng.random_range(0..total);
        let bump = |delta: f64| {
            let mut q = p.clone();
            let mut offset = 0;
            for s in q.slices_mut() {
                if idx < offset + s.len() {
                    s[idx - offset] += delta;
                    break;
                }
                offset += s.len();
            }
            loss_and_grad(&q, case, which, false).0
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        let analytic = flat_grad[idx];
        let denom = numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max((numeric - analytic).abs() / denom);
    }
    worst
}
