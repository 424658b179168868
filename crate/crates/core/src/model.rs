//! The shared transformer.
//!
//! A pre-norm decoder stack (RMSNorm, rotary attention, SwiGLU feed-forward)
//! whose only mode switch is the attention mask. In both modes the hidden
//! state at position `i` predicts the token at position `i + 1`.
//!
//! Gradients are computed by hand: [`Params::forward_cached`] keeps the
//! activations of one sequence and [`Params::backward`] walks them in reverse.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::seed;
use crate::{Error, Real, Result};

pub mod checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub ffn_inner: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_size: 256,
            n_heads: 4,
            ffn_inner: 684,
            vocab_size: 4096,
            max_len: 256,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden_size", self.hidden_size),
            ("n_heads", self.n_heads),
            ("ffn_inner", self.ffn_inner),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(
                "rotary embedding needs an even head dimension".into(),
            ));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.rope_base) || !(positive(self.norm_eps) || self.norm_eps == 0.0) {
            return Err(Error::Config(
                "rope_base must be > 0 and norm_eps >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
    /// Bidirectional over the first `k` positions, causal afterwards.
    Prefix(usize),
}

impl AttentionMode {
    /// Exclusive end of the contiguous key range visible from query `i`.
    ///
    /// Every supported mode allows exactly the keys `0..row_end(i)`.
    #[inline]
    pub fn row_end(self, i: usize, n: usize) -> usize {
        match self {
            AttentionMode::Causal => i + 1,
            AttentionMode::Bidirectional => n,
            AttentionMode::Prefix(k) => (i + 1).max(k.min(n)),
        }
    }

    pub fn allows(self, i: usize, j: usize, n: usize) -> bool {
        j < self.row_end(i, n)
    }
}

/// Boolean `n×n` mask; `mask[i][j]` is true when query `i` sees key `j`.
pub fn attention_mask(mode: AttentionMode, n: usize) -> Result<Vec<Vec<bool>>> {
    if let AttentionMode::Prefix(k) = mode {
        if k > n {
            return Err(Error::Input(format!(
                "prefix length {k} exceeds sequence length {n}"
            )));
        }
    }
    Ok((0..n)
        .map(|i| (0..n).map(|j| mode.allows(i, j, n)).collect())
        .collect())
}

/// `y = x · gain / sqrt(mean(x²) + eps)`.
pub fn rmsnorm<T: Real>(x: &[T], gain: &[T], eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    rmsnorm_into(x, gain, eps, &mut out);
    out
}

/// Writes the normalized row into `out`; returns the inverse RMS.
#[inline]
fn rmsnorm_into<T: Real>(x: &[T], gain: &[T], eps: f64, out: &mut [T]) -> T {
    let ms = dot(x, x).as_f64() / x.len() as f64;
    let inv = T::from_f64(1.0 / (ms + eps).sqrt());
    for ((o, &xv), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xv * inv * g;
    }
    inv
}

/// Accumulates `dx` and `dgain` for one normalized row.
#[inline]
fn rmsnorm_backward<T: Real>(x: &[T], inv: T, gain: &[T], dy: &[T], dx: &mut [T], dgain: &mut [T]) {
    let d = T::from_f64(x.len() as f64);
    let mut s = T::zero();
    for ((&xv, &g), &dyv) in x.iter().zip(gain).zip(dy) {
        s += dyv * g * xv;
    }
    let coef = s * inv * inv * inv / d;
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * inv;
        dx[i] += inv * gain[i] * dy[i] - x[i] * coef;
    }
}

/// Cos/sin table for rotary embeddings: `angle(pos, p) = pos · base^(−2p/head_dim)`.
#[derive(Debug, Clone)]
pub struct Rope<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> Rope<T> {
    pub fn new(head_dim: usize, positions: &[usize], base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &pos in positions {
            for p in 0..half {
                let freq = base.powf(-2.0 * p as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head vector in place at the `row`-th tabulated position.
    /// `inverse` applies the transpose rotation (used by the backward pass).
    #[inline]
    fn rotate(&self, v: &mut [T], row: usize, inverse: bool) {
        let cs = &self.cos[row * self.half..(row + 1) * self.half];
        let sn = &self.sin[row * self.half..(row + 1) * self.half];
        for p in 0..self.half {
            let (a, b) = (v[2 * p], v[2 * p + 1]);
            let (c, s) = (cs[p], if inverse { -sn[p] } else { sn[p] });
            v[2 * p] = a * c - b * s;
            v[2 * p + 1] = a * s + b * c;
        }
    }
}

/// Applies rotary embeddings to per-position head vectors `q[i]`, `k[i]`.
pub fn rope_apply<T: Real>(
    q: &[Vec<T>],
    k: &[Vec<T>],
    positions: &[usize],
    base: f64,
) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let dim = q.first().map_or(0, Vec::len);
    let rope = Rope::new(dim, positions, base);
    let rot = |xs: &[Vec<T>]| -> Vec<Vec<T>> {
        xs.iter()
            .enumerate()
            .map(|(r, x)| {
                let mut y = x.clone();
                rope.rotate(&mut y, r, false);
                y
            })
            .collect()
    };
    (rot(q), rot(k))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SwiGLU feed-forward on a single row:
/// `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
pub fn swiglu<T: Real>(x: &[T], w_gate: &[T], w_up: &[T], w_down: &[T], inner: usize) -> Vec<T> {
    let d = x.len();
    let mut a = vec![T::zero(); inner];
    let mut b = vec![T::zero(); inner];
    matmul_acc(x, w_gate, &mut a, 1, d, inner);
    matmul_acc(x, w_up, &mut b, 1, d, inner);
    let s: Vec<T> = a
        .iter()
        .zip(&b)
        .map(|(&av, &bv)| {
            let af = av.as_f64();
            T::from_f64(af * sigmoid(af)) * bv
        })
        .collect();
    let mut out = vec![T::zero(); d];
    matmul_acc(&s, w_down, &mut out, 1, inner, d);
    out
}

/// Role of a parameter tensor, used by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Hidden weight matrix, updated with orthogonalized momentum.
    Matrix,
    /// Norm gain.
    Vector,
    /// Token embedding or output projection.
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    /// `d×d`, applied as `x · W`.
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ffn_norm: Vec<T>,
    /// `d×f`
    pub w_gate: Vec<T>,
    /// `d×f`
    pub w_up: Vec<T>,
    /// `f×d`
    pub w_down: Vec<T>,
}

/// All trainable weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    /// `V×d`
    pub embed: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    /// `V×d`; `None` when tied to `embed`.
    pub lm_head: Option<Vec<T>>,
}

/// Named view of one tensor.
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: &'a [T],
}

impl<T: Real> Params<T> {
    /// Matrices ~ N(0, 0.02), gains = 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "init");
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut mat = |len: usize| -> Vec<T> {
            (0..len)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect()
        };
        let (d, f, v) = (config.hidden_size, config.ffn_inner, config.vocab_size);
        let embed = mat(v * d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![T::one(); d],
                wq: mat(d * d),
                wk: mat(d * d),
                wv: mat(d * d),
                wo: mat(d * d),
                ffn_norm: vec![T::one(); d],
                w_gate: mat(d * f),
                w_up: mat(d * f),
                w_down: mat(f * d),
            })
            .collect();
        let lm_head = (!config.tie_embeddings).then(|| mat(v * d));
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            final_norm: vec![T::one(); d],
            lm_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, xs| xs.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    pub fn head(&self) -> &[T] {
        self.lm_head.as_deref().unwrap_or(&self.embed)
    }

    /// Tensors in canonical order (checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        let c = &self.config;
        let (d, f, v) = (c.hidden_size, c.ffn_inner, c.vocab_size);
        let mut out = vec![TensorView {
            name: "embed".into(),
            shape: vec![v, d],
            kind: ParamKind::Embedding,
            data: &self.embed,
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            let name = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                view(
                    name("attn_norm"),
                    vec![d],
                    ParamKind::Vector,
                    &layer.attn_norm,
                ),
                view(name("wq"), vec![d, d], ParamKind::Matrix, &layer.wq),
                view(name("wk"), vec![d, d], ParamKind::Matrix, &layer.wk),
                view(name("wv"), vec![d, d], ParamKind::Matrix, &layer.wv),
                view(name("wo"), vec![d, d], ParamKind::Matrix, &layer.wo),
                view(
                    name("ffn_norm"),
                    vec![d],
                    ParamKind::Vector,
                    &layer.ffn_norm,
                ),
                view(name("w_gate"), vec![d, f], ParamKind::Matrix, &layer.w_gate),
                view(name("w_up"), vec![d, f], ParamKind::Matrix, &layer.w_up),
                view(name("w_down"), vec![f, d], ParamKind::Matrix, &layer.w_down),
            ]);
        }
        out.push(TensorView {
            name: "final_norm".into(),
            shape: vec![d],
            kind: ParamKind::Vector,
            data: &self.final_norm,
        });
        if let Some(h) = &self.lm_head {
            out.push(TensorView {
                name: "lm_head".into(),
                shape: vec![v, d],
                kind: ParamKind::Embedding,
                data: h,
            });
        }
        out
    }

    /// Visits every tensor mutably in canonical order with its kind.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(ParamKind, &mut [T])) {
        f(ParamKind::Embedding, &mut self.embed);
        for layer in &mut self.layers {
            f(ParamKind::Vector, &mut layer.attn_norm);
            f(ParamKind::Matrix, &mut layer.wq);
            f(ParamKind::Matrix, &mut layer.wk);
            f(ParamKind::Matrix, &mut layer.wv);
            f(ParamKind::Matrix, &mut layer.wo);
            f(ParamKind::Vector, &mut layer.ffn_norm);
            f(ParamKind::Matrix, &mut layer.w_gate);
            f(ParamKind::Matrix, &mut layer.w_up);
            f(ParamKind::Matrix, &mut layer.w_down);
        }
        f(ParamKind::Vector, &mut self.final_norm);
        if let Some(h) = &mut self.lm_head {
            f(ParamKind::Embedding, h);
        }
    }

    /// Mutable slices in canonical order.
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.ffn_norm);
            out.push(&mut layer.w_gate);
            out.push(&mut layer.w_up);
            out.push(&mut layer.w_down);
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.lm_head {
            out.push(h);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += other` element-wise.
    pub fn add_assign(&mut self, other: &Self) {
        let src: Vec<&[T]> = other.tensors().into_iter().map(|t| t.data).collect();
        for (dst, s) in self.slices_mut().into_iter().zip(src) {
            for (a, &b) in dst.iter_mut().zip(s) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.for_each_mut(|_, xs| xs.iter_mut().for_each(|x| *x *= s));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Converts every element to another float type.
    pub fn cast<U: Real>(&self) -> Params<U> {
        let conv = |xs: &[T]| {
            xs.iter()
                .map(|&x| U::from_f64(x.as_f64()))
                .collect::<Vec<U>>()
        };
        Params {
            config: self.config.clone(),
            embed: conv(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: conv(&l.attn_norm),
                    wq: conv(&l.wq),
                    wk: conv(&l.wk),
                    wv: conv(&l.wv),
                    wo: conv(&l.wo),
                    ffn_norm: conv(&l.ffn_norm),
                    w_gate: conv(&l.w_gate),
                    w_up: conv(&l.w_up),
                    w_down: conv(&l.w_down),
                })
                .collect(),
            final_norm: conv(&self.final_norm),
            lm_head: self.lm_head.as_deref().map(conv),
        }
    }

    /// Random perturbation used by tests that need a non-degenerate model.
    pub fn jitter(&mut self, std: f64, seed: u64) {
        let mut rng = seed::rng(seed, "jitter");
        self.for_each_mut(|_, xs| {
            for x in xs {
                *x += T::from_f64(std * (rng.random::<f64>() * 2.0 - 1.0));
            }
        });
    }
}

fn view<T>(name: String, shape: Vec<usize>, kind: ParamKind, data: &[T]) -> TensorView<'_, T> {
    TensorView {
        name,
        shape,
        kind,
        data,
    }
}

/// Row-major `n×vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub n: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// `log p(token | row i)` in double precision.
    pub fn log_prob(&self, i: usize, token: u32) -> f64 {
        let row = self.row(i);
        row[token as usize].as_f64() - logsumexp(row)
    }
}

/// Max-subtracted log-sum-exp, accumulated in `f64`.
pub fn logsumexp<T: Real>(row: &[T]) -> f64 {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    if !max.is_finite() {
        return max;
    }
    let s: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
    max + s.ln()
}

struct LayerCache<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads × n × n`; only `0..row_end(i)` of each row is meaningful.
    probs: Vec<T>,
    att: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    h2: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

/// Activations of one forward pass, consumed by [`Params::backward`].
pub struct ForwardCache<T> {
    tokens: Vec<u32>,
    mode: AttentionMode,
    rope: Rope<T>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    inv_f: Vec<T>,
    h_final: Vec<T>,
}

impl<T: Real> Params<T> {
    fn check_tokens(&self, tokens: &[u32], mode: AttentionMode) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > c.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                c.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        if let AttentionMode::Prefix(k) = mode {
            if k > tokens.len() {
                return Err(Error::Input(format!(
                    "prefix length {k} exceeds sequence length {}",
                    tokens.len()
                )));
            }
        }
        Ok(())
    }

    /// Logits for every position; row `i` is the distribution over token `i + 1`.
    pub fn forward(&self, tokens: &[u32], mode: AttentionMode) -> Result<Logits<T>> {
        self.forward_cached(tokens, mode).map(|(l, _)| l)
    }

    pub fn forward_cached(
        &self,
        tokens: &[u32],
        mode: AttentionMode,
    ) -> Result<(Logits<T>, ForwardCache<T>)> {
        self.check_tokens(tokens, mode)?;
        let c = &self.config;
        let (n, d, f, vsz) = (tokens.len(), c.hidden_size, c.ffn_inner, c.vocab_size);
        let (nh, hd) = (c.n_heads, c.head_dim());
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let positions: Vec<usize> = (0..n).collect();
        let rope = Rope::<T>::new(hd, &positions, c.rope_base);

        let mut x = vec![T::zero(); n * d];
        for (i, &t) in tokens.iter().enumerate() {
            x[i * d..(i + 1) * d]
                .copy_from_slice(&self.embed[t as usize * d..(t as usize + 1) * d]);
        }

        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_in = x.clone();
            let mut h1 = vec![T::zero(); n * d];
            let mut inv1 = vec![T::zero(); n];
            for i in 0..n {
                inv1[i] = rmsnorm_into(
                    &x_in[i * d..(i + 1) * d],
                    &layer.attn_norm,
                    c.norm_eps,
                    &mut h1[i * d..(i + 1) * d],
                );
            }
            let mut q = vec![T::zero(); n * d];
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            matmul_acc(&h1, &layer.wq, &mut q, n, d, d);
            matmul_acc(&h1, &layer.wk, &mut k, n, d, d);
            matmul_acc(&h1, &layer.wv, &mut v, n, d, d);
            for i in 0..n {
                for h in 0..nh {
                    let s = i * d + h * hd;
                    rope.rotate(&mut q[s..s + hd], i, false);
                    rope.rotate(&mut k[s..s + hd], i, false);
                }
            }

            let mut probs = vec![T::zero(); nh * n * n];
            let mut att = vec![T::zero(); n * d];
            let mut scores = vec![T::zero(); n * n];
            for h in 0..nh {
                let qh = gather_head(&q, n, d, h, hd);
                let kh = gather_head(&k, n, d, h, hd);
                let vh = gather_head(&v, n, d, h, hd);
                scores.fill(T::zero());
                matmul_a_bt_acc(&qh, &kh, &mut scores, n, hd, n);
                let ph = &mut probs[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let end = mode.row_end(i, n);
                    let srow = &scores[i * n..i * n + end];
                    let row = &mut ph[i * n..i * n + end];
                    let max = srow
                        .iter()
                        .fold(T::neg_infinity(), |m, &x| m.max(x * scale));
                    let mut sum = T::zero();
                    for (p, &sv) in row.iter_mut().zip(srow) {
                        *p = (sv * scale - max).exp();
                        sum += *p;
                    }
                    let inv = T::one() / sum;
                    row.iter_mut().for_each(|p| *p *= inv);
                }
                let mut oh = vec![T::zero(); n * hd];
                matmul_acc(ph, &vh, &mut oh, n, n, hd);
                scatter_head(&oh, &mut att, n, d, h, hd);
            }
            matmul_acc(&att, &layer.wo, &mut x, n, d, d);
            let x_mid = x.clone();

            let mut h2 = vec![T::zero(); n * d];
            let mut inv2 = vec![T::zero(); n];
            for i in 0..n {
                inv2[i] = rmsnorm_into(
                    &x_mid[i * d..(i + 1) * d],
                    &layer.ffn_norm,
                    c.norm_eps,
                    &mut h2[i * d..(i + 1) * d],
                );
            }
            let mut gate = vec![T::zero(); n * f];
            let mut up = vec![T::zero(); n * f];
            matmul_acc(&h2, &layer.w_gate, &mut gate, n, d, f);
            matmul_acc(&h2, &layer.w_up, &mut up, n, d, f);
            let act: Vec<T> = gate
                .iter()
                .zip(&up)
                .map(|(&a, &b)| a * silu_sigmoid(a) * b)
                .collect();
            matmul_acc(&act, &layer.w_down, &mut x, n, f, d);

            caches.push(LayerCache {
                x_in,
                inv1,
                h1,
                q,
                k,
                v,
                probs,
                att,
                x_mid,
                inv2,
                h2,
                gate,
                up,
                act,
            });
        }

        let x_final = x;
        let mut h_final = vec![T::zero(); n * d];
        let mut inv_f = vec![T::zero(); n];
        for i in 0..n {
            inv_f[i] = rmsnorm_into(
                &x_final[i * d..(i + 1) * d],
                &self.final_norm,
                c.norm_eps,
                &mut h_final[i * d..(i + 1) * d],
            );
        }
        let mut logits = vec![T::zero(); n * vsz];
        matmul_a_bt_acc(&h_final, self.head(), &mut logits, n, d, vsz);

        Ok((
            Logits {
                n,
                vocab: vsz,
                data: logits,
            },
            ForwardCache {
                tokens: tokens.to_vec(),
                mode,
                rope,
                layers: caches,
                x_final,
                inv_f,
                h_final,
            },
        ))
    }

    /// Accumulates into `grads` the gradient of a scalar loss whose gradient
    /// with respect to the logits is `dlogits` (`n×V`).
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T], grads: &mut Params<T>) {
        let c = &self.config;
        let n = cache.tokens.len();
        let (d, f, vsz) = (c.hidden_size, c.ffn_inner, c.vocab_size);
        let (nh, hd) = (c.n_heads, c.head_dim());
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        debug_assert_eq!(dlogits.len(), n * vsz);

        // logits = h_final · headᵀ
        {
            let dhead = match grads.lm_head.as_mut() {
                Some(h) => h,
                None => &mut grads.embed,
            };
            matmul_at_b_acc(dlogits, &cache.h_final, dhead, n, vsz, d);
        }
        let mut dh = vec![T::zero(); n * d];
        matmul_acc(dlogits, self.head(), &mut dh, n, vsz, d);

        let mut dx = vec![T::zero(); n * d];
        for i in 0..n {
            let r = i * d..(i + 1) * d;
            rmsnorm_backward(
                &cache.x_final[r.clone()],
                cache.inv_f[i],
                &self.final_norm,
                &dh[r.clone()],
                &mut dx[r],
                &mut grads.final_norm,
            );
        }

        for (l, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let g = &mut grads.layers[l];

            // x_out = x_mid + act · w_down
            let mut dact = vec![T::zero(); n * f];
            matmul_a_bt_acc(&dx, &layer.w_down, &mut dact, n, d, f);
            matmul_at_b_acc(&lc.act, &dx, &mut g.w_down, n, f, d);
            let mut dgate = vec![T::zero(); n * f];
            let mut dup = vec![T::zero(); n * f];
            for idx in 0..n * f {
                let a = lc.gate[idx];
                let sg = silu_sigmoid(a);
                let silu = a * sg;
                dup[idx] = dact[idx] * silu;
                dgate[idx] = dact[idx] * lc.up[idx] * sg * (T::one() + a * (T::one() - sg));
            }
            matmul_at_b_acc(&lc.h2, &dgate, &mut g.w_gate, n, d, f);
            matmul_at_b_acc(&lc.h2, &dup, &mut g.w_up, n, d, f);
            let mut dh2 = vec![T::zero(); n * d];
            matmul_a_bt_acc(&dgate, &layer.w_gate, &mut dh2, n, f, d);
            matmul_a_bt_acc(&dup, &layer.w_up, &mut dh2, n, f, d);
            let mut dx_mid = dx;
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                rmsnorm_backward(
                    &lc.x_mid[r.clone()],
                    lc.inv2[i],
                    &layer.ffn_norm,
                    &dh2[r.clone()],
                    &mut dx_mid[r],
                    &mut g.ffn_norm,
                );
            }

            // x_mid = x_in + att · wo
            let mut datt = vec![T::zero(); n * d];
            matmul_a_bt_acc(&dx_mid, &layer.wo, &mut datt, n, d, d);
            matmul_at_b_acc(&lc.att, &dx_mid, &mut g.wo, n, d, d);

            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut dp = vec![T::zero(); n * n];
            for h in 0..nh {
                let qh = gather_head(&lc.q, n, d, h, hd);
                let kh = gather_head(&lc.k, n, d, h, hd);
                let vh = gather_head(&lc.v, n, d, h, hd);
                let doh = gather_head(&datt, n, d, h, hd);
                let ph = &lc.probs[h * n * n..(h + 1) * n * n];
                dp.fill(T::zero());
                matmul_a_bt_acc(&doh, &vh, &mut dp, n, hd, n);
                let mut dvh = vec![T::zero(); n * hd];
                matmul_at_b_acc(ph, &doh, &mut dvh, n, n, hd);
                // dp becomes the score gradient in place
                for i in 0..n {
                    let end = cache.mode.row_end(i, n);
                    let prow = &ph[i * n..i * n + end];
                    let drow = &mut dp[i * n..(i + 1) * n];
                    let acc = prow
                        .iter()
                        .zip(&drow[..end])
                        .fold(T::zero(), |a, (&p, &g)| a + p * g);
                    for (g, &p) in drow[..end].iter_mut().zip(prow) {
                        *g = p * (*g - acc) * scale;
                    }
                    drow[end..].fill(T::zero());
                }
                let mut dqh = vec![T::zero(); n * hd];
                let mut dkh = vec![T::zero(); n * hd];
                matmul_acc(&dp, &kh, &mut dqh, n, n, hd);
                matmul_at_b_acc(&dp, &qh, &mut dkh, n, n, hd);
                scatter_head(&dqh, &mut dq, n, d, h, hd);
                scatter_head(&dkh, &mut dk, n, d, h, hd);
                scatter_head(&dvh, &mut dv, n, d, h, hd);
            }
            for i in 0..n {
                for h in 0..nh {
                    let s = i * d + h * hd;
                    cache.rope.rotate(&mut dq[s..s + hd], i, true);
                    cache.rope.rotate(&mut dk[s..s + hd], i, true);
                }
            }
            matmul_at_b_acc(&lc.h1, &dq, &mut g.wq, n, d, d);
            matmul_at_b_acc(&lc.h1, &dk, &mut g.wk, n, d, d);
            matmul_at_b_acc(&lc.h1, &dv, &mut g.wv, n, d, d);
            let mut dh1 = vec![T::zero(); n * d];
            matmul_a_bt_acc(&dq, &layer.wq, &mut dh1, n, d, d);
            matmul_a_bt_acc(&dk, &layer.wk, &mut dh1, n, d, d);
            matmul_a_bt_acc(&dv, &layer.wv, &mut dh1, n, d, d);
            let mut dx_in = dx_mid;
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                rmsnorm_backward(
                    &lc.x_in[r.clone()],
                    lc.inv1[i],
                    &layer.attn_norm,
                    &dh1[r.clone()],
                    &mut dx_in[r],
                    &mut g.attn_norm,
                );
            }
            dx = dx_in;
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            let dst = &mut grads.embed[t as usize * d..(t as usize + 1) * d];
            for (a, &b) in dst.iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *a += b;
            }
        }
    }
}

/// Copies head `h` of an `n×d` interleaved-heads matrix into an `n×hd` one.
fn gather_head<T: Real>(x: &[T], n: usize, d: usize, h: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * hd);
    for i in 0..n {
        out.extend_from_slice(&x[i * d + h * hd..i * d + (h + 1) * hd]);
    }
    out
}

/// Adds an `n×hd` head matrix into head `h` of an `n×d` matrix.
fn scatter_head<T: Real>(src: &[T], dst: &mut [T], n: usize, d: usize, h: usize, hd: usize) {
    for i in 0..n {
        for (a, &b) in dst[i * d + h * hd..i * d + (h + 1) * hd]
            .iter_mut()
            .zip(&src[i * hd..(i + 1) * hd])
        {
            *a += b;
        }
    }
}

#[inline]
fn silu_sigmoid<T: Real>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}
