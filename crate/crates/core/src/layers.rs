//! Layers around the TaLK kernel, each with a hand-written backward pass.
//!
//! A [`TalkBlock`] is pre-norm by default:
//!
//! ```text
//! y1 = x  + OutProj(TaLK(GLU(InProj(LN1(x)))))
//! y  = y1 + FFN(LN2(y1)),      FFN(h) = W2 swish(W1 h)
//! ```
//!
//! or post-norm (`y1 = LN1(x + ...)`, `y = LN2(y1 + FFN(y1))`) with
//! [`NormPlacement::Post`].
//!
//! Offsets for the kernel come from an [`OffsetGenerator`] reading the
//! kernel input. Gradient structs reuse the parameter types: the gradient of
//! a `Linear` is a `Linear` holding `dW` and `db`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::kernel::{talk_backward, talk_forward, KernelSaved, RelativeOffsets, TalkConfig};
use crate::rng::Rng;
use crate::tensor::{matmul, sigmoid, Scalar, Tensor, Trans};

/// Uniform parameter access for optimizers and checkpoints. The order of
/// `params`, `params_mut` and `param_names` always agrees.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn param_names(&self) -> Vec<String>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn prefixed(prefix: &str, names: Vec<String>) -> Vec<String> {
    names.into_iter().map(|n| format!("{prefix}.{n}")).collect()
}

fn replace_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
}

// ---------------------------------------------------------------- linear

/// Affine map over the last axis: `y = x W + b`, `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Weights uniform in `+-sqrt(1 / fan_in)`, bias zero.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (1.0 / fan_in as f64).sqrt();
        Ok(Linear {
            weight: Tensor::rand_uniform(&[fan_in, fan_out], -bound, bound, rng)?,
            bias: Tensor::new(&[fan_out], T::zero())?,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.last_dim() != self.fan_in() {
            return shape_err(format!(
                "linear expects last dim {}, got {:?}",
                self.fan_in(),
                x.shape()
            ));
        }
        let rows = x.rows();
        let out_dim = self.fan_out();
        let mut y = Vec::with_capacity(rows * out_dim);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.data());
        }
        matmul(
            x.data(),
            Trans::No,
            self.weight.data(),
            Trans::No,
            &mut y,
            rows,
            self.fan_in(),
            out_dim,
            true,
        );
        Tensor::from_vec(&replace_last(x.shape(), out_dim), y)
    }

    /// Returns `(grad_x, grads)` for input `x` and upstream `grad_y`.
    pub fn backward(&self, x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, Linear<T>)> {
        let rows = x.rows();
        let (fi, fo) = (self.fan_in(), self.fan_out());
        grad_y.expect_shape(&replace_last(x.shape(), fo))?;
        let mut gx = vec![T::zero(); rows * fi];
        matmul(grad_y.data(), Trans::No, self.weight.data(), Trans::Yes, &mut gx, rows, fo, fi, false);
        let mut gw = vec![T::zero(); fi * fo];
        matmul(x.data(), Trans::Yes, grad_y.data(), Trans::No, &mut gw, fi, rows, fo, false);
        let mut gb = vec![T::zero(); fo];
        for row in grad_y.data().chunks_exact(fo) {
            for (a, &g) in gb.iter_mut().zip(row) {
                *a += g;
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), gx)?,
            Linear {
                weight: Tensor::from_vec(&[fi, fo], gw)?,
                bias: Tensor::from_vec(&[fo], gb)?,
            },
        ))
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }
}

// ------------------------------------------------------------ activations

/// Gated linear unit over the last axis: `[a | b] -> a * sigmoid(b)`.
pub fn glu_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let two_d = x.last_dim();
    if two_d % 2 != 0 {
        return shape_err(format!("GLU needs an even last dim, got {:?}", x.shape()));
    }
    let d = two_d / 2;
    let mut y = Vec::with_capacity(x.len() / 2);
    for row in x.data().chunks_exact(two_d) {
        let (a, b) = row.split_at(d);
        y.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
    }
    Tensor::from_vec(&replace_last(x.shape(), d), y)
}

pub fn glu_backward<T: Scalar>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    let two_d = x.last_dim();
    let d = two_d / 2;
    grad_y.expect_shape(&replace_last(x.shape(), d))?;
    let mut gx = vec![T::zero(); x.len()];
    for ((row, g), out) in x
        .data()
        .chunks_exact(two_d)
        .zip(grad_y.data().chunks_exact(d))
        .zip(gx.chunks_exact_mut(two_d))
    {
        let (a, b) = row.split_at(d);
        let (ga, gb) = out.split_at_mut(d);
        for c in 0..d {
            let s = sigmoid(b[c]);
            ga[c] = g[c] * s;
            gb[c] = g[c] * a[c] * s * (T::one() - s);
        }
    }
    Tensor::from_vec(x.shape(), gx)
}

/// `x * sigmoid(x)`.
pub fn swish_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn swish_backward<T: Scalar>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_y, |v, g| {
        let s = sigmoid(v);
        g * (s + v * s * (T::one() - s))
    })
}

// -------------------------------------------------------------- layernorm

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::new(&[dim], T::one())?,
            beta: Tensor::new(&[dim], T::zero())?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Tensor::zeros_like(&self.gamma),
            beta: Tensor::zeros_like(&self.beta),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let d = self.gamma.len();
        if x.last_dim() != d {
            return shape_err(format!("layernorm expects last dim {d}, got {:?}", x.shape()));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.rows());
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for row in x.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.push(h);
                y.push(gamma[c] * h + beta[c]);
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), y)?,
            LayerNormCache {
                xhat: Tensor::from_vec(x.shape(), xhat)?,
                inv_std,
            },
        ))
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, LayerNorm<T>)> {
        let d = self.gamma.len();
        grad_y.expect_shape(cache.xhat.shape())?;
        let gamma = self.gamma.data();
        let mut gx = Vec::with_capacity(grad_y.len());
        let mut gg = vec![T::zero(); d];
        let mut gb = vec![T::zero(); d];
        let dn = T::lit(d as f64);
        let mut dxhat = vec![T::zero(); d];
        for ((g, xh), &is) in grad_y
            .data()
            .chunks_exact(d)
            .zip(cache.xhat.data().chunks_exact(d))
            .zip(&cache.inv_std)
        {
            let mut sum = T::zero();
            let mut dot = T::zero();
            for c in 0..d {
                gg[c] += g[c] * xh[c];
                gb[c] += g[c];
                dxhat[c] = g[c] * gamma[c];
                sum += dxhat[c];
                dot += dxhat[c] * xh[c];
            }
            for c in 0..d {
                gx.push(is / dn * (dn * dxhat[c] - sum - xh[c] * dot));
            }
        }
        Ok((
            Tensor::from_vec(grad_y.shape(), gx)?,
            LayerNorm {
                gamma: Tensor::from_vec(&[d], gg)?,
                beta: Tensor::from_vec(&[d], gb)?,
            },
        ))
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["gamma".into(), "beta".into()]
    }
}

// -------------------------------------------------------------- embedding

/// Lookup table `[vocab, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub table: Tensor<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(vocab: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Embedding {
            table: Tensor::rand_uniform(&[vocab, dim], -1.0, 1.0, rng)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Embedding {
            table: Tensor::zeros_like(&self.table),
        }
    }

    /// Rows for `ids`, output shape `out_shape ++ [dim]`.
    pub fn forward(&self, ids: &[usize], out_shape: &[usize]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut y = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.vocab() {
                return shape_err(format!("token id {id} outside vocab {}", self.vocab()));
            }
            y.extend_from_slice(&self.table.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        Tensor::from_vec(&shape, y)
    }

    pub fn backward(&self, ids: &[usize], grad_y: &Tensor<T>) -> Result<Embedding<T>> {
        let d = self.dim();
        if grad_y.len() != ids.len() * d {
            return shape_err("embedding gradient does not match ids");
        }
        let mut g = Tensor::zeros_like(&self.table);
        let gt = g.data_mut();
        for (&id, row) in ids.iter().zip(grad_y.data().chunks_exact(d)) {
            for (a, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                *a += v;
            }
        }
        Ok(Embedding { table: g })
    }
}

impl<T: Scalar> Parameterized<T> for Embedding<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.table]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.table]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["table".into()]
    }
}

// ---------------------------------------------------------- cross-entropy

#[derive(Debug, Clone)]
pub struct XentOutput<T> {
    /// Mean negative log-likelihood over masked rows.
    pub loss: T,
    pub grad_logits: Tensor<T>,
    pub correct: usize,
    pub counted: usize,
}

/// Masked softmax cross-entropy over rows of `logits [.., V]`; the loss is
/// averaged over rows with `mask` set.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<XentOutput<T>> {
    let v = logits.last_dim();
    let rows = logits.rows();
    if targets.len() != rows || mask.len() != rows {
        return shape_err(format!(
            "xent: {rows} rows but {} targets / {} mask entries",
            targets.len(),
            mask.len()
        ));
    }
    let counted = mask.iter().filter(|&&m| m).count();
    let norm = if counted > 0 {
        T::one() / T::lit(counted as f64)
    } else {
        T::zero()
    };
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    let mut correct = 0;
    for (r, row) in logits.data().chunks_exact(v).enumerate() {
        if !mask[r] {
            continue;
        }
        let target = targets[r];
        if target >= v {
            return shape_err(format!("target {target} outside {v} classes"));
        }
        let (mut best, mut best_v) = (0, row[0]);
        let mut max = row[0];
        for (k, &x) in row.iter().enumerate() {
            if x > best_v {
                best = k;
                best_v = x;
            }
            if x > max {
                max = x;
            }
        }
        if best == target {
            correct += 1;
        }
        let g = &mut grad[r * v..(r + 1) * v];
        let mut z = T::zero();
        for (gk, &x) in g.iter_mut().zip(row) {
            *gk = (x - max).exp();
            z += *gk;
        }
        loss += (z.ln() + max - row[target]) * norm;
        let inv_z = T::one() / z;
        for gk in g.iter_mut() {
            *gk = *gk * inv_z * norm;
        }
        g[target] -= norm;
    }
    Ok(XentOutput {
        loss,
        grad_logits: Tensor::from_vec(logits.shape(), grad)?,
        correct,
        counted,
    })
}

// ------------------------------------------------------- offset generator

/// Per-head affine map from the head's `R` channels to (left, right) logits,
/// followed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetGenerator<T> {
    /// `[H, R, 2]`
    pub weight: Tensor<T>,
    /// `[H, 2]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> OffsetGenerator<T> {
    /// Weights uniform in `+-sqrt(1 / R)`, bias zero so initial windows
    /// span half the maximum reach.
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return config_err(format!("heads ({heads}) must divide dim ({dim})"));
        }
        let r = dim / heads;
        let bound = (1.0 / r as f64).sqrt();
        Ok(OffsetGenerator {
            weight: Tensor::rand_uniform(&[heads, r, 2], -bound, bound, rng)?,
            bias: Tensor::new(&[heads, 2], T::zero())?,
        })
    }

    pub fn heads(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn head_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        OffsetGenerator {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        match *x.shape() {
            [b, n, d] if d == self.heads() * self.head_width() => Ok((b, n)),
            [_, _, d] => config_err(format!(
                "offset generator for {} heads x {} channels cannot read dim {d}",
                self.heads(),
                self.head_width()
            )),
            _ => shape_err(format!("expected [B, n, d], got {:?}", x.shape())),
        }
    }

    /// `sigmoid(W_h x_h + b_h)` per head, shape `[B, n, H, 2]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<RelativeOffsets<T>> {
        let (b, n) = self.check(x)?;
        let (heads, r) = (self.heads(), self.head_width());
        let w = self.weight.data();
        let bias = self.bias.data();
        let mut out = Vec::with_capacity(b * n * heads * 2);
        for row in x.data().chunks_exact(heads * r) {
            for h in 0..heads {
                let xs = &row[h * r..(h + 1) * r];
                let mut l = bias[h * 2];
                let mut rr = bias[h * 2 + 1];
                for (k, &v) in xs.iter().enumerate() {
                    l += v * w[(h * r + k) * 2];
                    rr += v * w[(h * r + k) * 2 + 1];
                }
                out.push(sigmoid(l));
                out.push(sigmoid(rr));
            }
        }
        RelativeOffsets::new(Tensor::from_vec(&[b, n, heads, 2], out)?)
    }

    /// Backward given the generator's own output `rel`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        rel: &RelativeOffsets<T>,
        grad_rel: &Tensor<T>,
    ) -> Result<(Tensor<T>, OffsetGenerator<T>)> {
        self.check(x)?;
        grad_rel.expect_shape(rel.values().shape())?;
        let (heads, r) = (self.heads(), self.head_width());
        let w = self.weight.data();
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut gb = vec![T::zero(); heads * 2];
        for ((row, gxr), (a, g)) in x
            .data()
            .chunks_exact(heads * r)
            .zip(gx.chunks_exact_mut(heads * r))
            .zip(
                rel.values()
                    .data()
                    .chunks_exact(heads * 2)
                    .zip(grad_rel.data().chunks_exact(heads * 2)),
            )
        {
            for h in 0..heads {
                let zl = g[h * 2] * a[h * 2] * (T::one() - a[h * 2]);
                let zr = g[h * 2 + 1] * a[h * 2 + 1] * (T::one() - a[h * 2 + 1]);
                gb[h * 2] += zl;
                gb[h * 2 + 1] += zr;
                for k in 0..r {
                    let wi = (h * r + k) * 2;
                    let xv = row[h * r + k];
                    gw[wi] += zl * xv;
                    gw[wi + 1] += zr * xv;
                    gxr[h * r + k] = zl * w[wi] + zr * w[wi + 1];
                }
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), gx)?,
            OffsetGenerator {
                weight: Tensor::from_vec(self.weight.shape(), gw)?,
                bias: Tensor::from_vec(self.bias.shape(), gb)?,
            },
        ))
    }
}

impl<T: Scalar> Parameterized<T> for OffsetGenerator<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }
}

/// Zeroes each offset independently with probability `p` while training.
/// No rescaling: offsets must stay inside `[0, 1]`. Returns the keep mask
/// when anything could have been dropped.
pub fn offsets_dropout<T: Scalar>(
    rel: &RelativeOffsets<T>,
    p: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(RelativeOffsets<T>, Option<Vec<bool>>)> {
    if !(0.0..1.0).contains(&p) {
        return config_err(format!("offsets dropout {p} outside [0, 1)"));
    }
    if !training || p == 0.0 {
        return Ok((rel.clone(), None));
    }
    let keep: Vec<bool> = (0..rel.values().len()).map(|_| !rng.bernoulli(p)).collect();
    let mut values = rel.values().clone();
    for (v, &k) in values.data_mut().iter_mut().zip(&keep) {
        if !k {
            *v = T::zero();
        }
    }
    Ok((RelativeOffsets::new(values)?, Some(keep)))
}

fn apply_mask<T: Scalar>(t: &mut Tensor<T>, keep: &[bool], scale: T) {
    for (v, &k) in t.data_mut().iter_mut().zip(keep) {
        *v = if k { *v * scale } else { T::zero() };
    }
}

/// Inverted dropout on activations. Off by default at desk scale.
fn activation_dropout<T: Scalar>(x: &mut Tensor<T>, p: f64, rng: &mut Rng, training: bool) -> Option<Vec<bool>> {
    if !training || p == 0.0 {
        return None;
    }
    let keep: Vec<bool> = (0..x.len()).map(|_| !rng.bernoulli(p)).collect();
    apply_mask(x, &keep, T::lit(1.0 / (1.0 - p)));
    Some(keep)
}

// ------------------------------------------------------------------ block

/// Where the block's layer norms sit relative to the residual additions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `y = x + F(LN(x))`
    #[default]
    Pre,
    /// `y = LN(x + F(x))`
    Post,
}

/// Shape of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub talk: TalkConfig,
    pub ffn_dim: usize,
    /// Project `d -> 2d` and gate; otherwise a plain `d -> d` projection.
    pub glu: bool,
    pub activation_dropout: f64,
    #[serde(default)]
    pub norm: NormPlacement,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        self.talk.validate()?;
        if self.ffn_dim == 0 {
            return config_err("ffn_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.activation_dropout) {
            return config_err("activation dropout outside [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TalkBlock<T> {
    pub cfg: BlockConfig,
    pub ln1: LayerNorm<T>,
    pub in_proj: Linear<T>,
    pub offsets: OffsetGenerator<T>,
    pub out_proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

/// Intermediates of [`TalkBlock::forward`].
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    x_shape: Vec<usize>,
    ln1: LayerNormCache<T>,
    h0: Tensor<T>,
    proj: Tensor<T>,
    gated: Tensor<T>,
    rel_raw: RelativeOffsets<T>,
    offsets_keep: Option<Vec<bool>>,
    conv: Tensor<T>,
    kernel: KernelSaved<T>,
    attn_keep: Option<Vec<bool>>,
    ln2: LayerNormCache<T>,
    h1: Tensor<T>,
    f1: Tensor<T>,
    act: Tensor<T>,
    ffn_keep: Option<Vec<bool>>,
}

impl<T> BlockCache<T> {
    /// Offsets the kernel actually used, before dropout.
    pub fn offsets(&self) -> &RelativeOffsets<T> {
        &self.rel_raw
    }

    pub fn kernel(&self) -> &KernelSaved<T> {
        &self.kernel
    }
}

impl<T: Scalar> TalkBlock<T> {
    pub fn new(cfg: BlockConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.talk.dim;
        let proj_out = if cfg.glu { 2 * d } else { d };
        Ok(TalkBlock {
            cfg,
            ln1: LayerNorm::new(d)?,
            in_proj: Linear::new(d, proj_out, rng)?,
            offsets: OffsetGenerator::new(d, cfg.talk.heads, rng)?,
            out_proj: Linear::new(d, d, rng)?,
            ln2: LayerNorm::new(d)?,
            ffn_in: Linear::new(d, cfg.ffn_dim, rng)?,
            ffn_out: Linear::new(cfg.ffn_dim, d, rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        TalkBlock {
            cfg: self.cfg,
            ln1: self.ln1.zeros_like(),
            in_proj: self.in_proj.zeros_like(),
            offsets: self.offsets.zeros_like(),
            out_proj: self.out_proj.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
        }
    }

    /// `x: [B, n, d]`. `rng` drives offsets and activation dropout when
    /// `training` is set.
    pub fn forward(&self, x: &Tensor<T>, training: bool, rng: &mut Rng) -> Result<(Tensor<T>, BlockCache<T>)> {
        let talk_cfg = self.cfg.talk;
        match *x.shape() {
            [_, _, d] if d == talk_cfg.dim => {}
            _ => return shape_err(format!("block expects [B, n, {}], got {:?}", talk_cfg.dim, x.shape())),
        }
        let pre = self.cfg.norm == NormPlacement::Pre;
        let (h0, ln1_pre) = if pre {
            let (h, c) = self.ln1.forward(x)?;
            (h, Some(c))
        } else {
            (x.clone(), None)
        };
        let proj = self.in_proj.forward(&h0)?;
        let gated = if self.cfg.glu { glu_forward(&proj)? } else { proj.clone() };
        let rel_raw = self.offsets.forward(&gated)?;
        let (rel, offsets_keep) = offsets_dropout(&rel_raw, talk_cfg.offsets_dropout, rng, training)?;
        let (conv, kernel) = talk_forward(&gated, &rel, &talk_cfg)?;
        let mut z = self.out_proj.forward(&conv)?;
        let attn_keep = activation_dropout(&mut z, self.cfg.activation_dropout, rng, training);
        let (y1, ln1) = match ln1_pre {
            Some(c) => (x.add(&z)?, c),
            None => self.ln1.forward(&x.add(&z)?)?,
        };

        let (h1, ln2_pre) = if pre {
            let (h, c) = self.ln2.forward(&y1)?;
            (h, Some(c))
        } else {
            (y1.clone(), None)
        };
        let f1 = self.ffn_in.forward(&h1)?;
        let act = swish_forward(&f1);
        let mut f2 = self.ffn_out.forward(&act)?;
        let ffn_keep = activation_dropout(&mut f2, self.cfg.activation_dropout, rng, training);
        let (y, ln2) = match ln2_pre {
            Some(c) => (y1.add(&f2)?, c),
            None => self.ln2.forward(&y1.add(&f2)?)?,
        };

        Ok((
            y,
            BlockCache {
                x_shape: x.shape().to_vec(),
                ln1,
                h0,
                proj,
                gated,
                rel_raw,
                offsets_keep,
                conv,
                kernel,
                attn_keep,
                ln2,
                h1,
                f1,
                act,
                ffn_keep,
            },
        ))
    }

    /// Returns `(grad_x, grads)`; `grads` has this block's layout.
    pub fn backward(&self, cache: &BlockCache<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, TalkBlock<T>)> {
        grad_y.expect_shape(&cache.x_shape)?;
        let keep_scale = T::lit(1.0 / (1.0 - self.cfg.activation_dropout));
        let pre = self.cfg.norm == NormPlacement::Pre;

        // FFN branch; `g_y2` is the gradient at the second residual sum
        let (g_y2, mut g_ln2) = if pre {
            (grad_y.clone(), self.ln2.zeros_like())
        } else {
            self.ln2.backward(&cache.ln2, grad_y)?
        };
        let mut g_f2 = g_y2.clone();
        if let Some(keep) = &cache.ffn_keep {
            apply_mask(&mut g_f2, keep, keep_scale);
        }
        let (g_act, g_ffn_out) = self.ffn_out.backward(&cache.act, &g_f2)?;
        let g_f1 = swish_backward(&cache.f1, &g_act)?;
        let (g_h1, g_ffn_in) = self.ffn_in.backward(&cache.h1, &g_f1)?;
        let g_y1 = if pre {
            let (g_y1_ln, g) = self.ln2.backward(&cache.ln2, &g_h1)?;
            g_ln2 = g;
            g_y2.add(&g_y1_ln)?
        } else {
            g_y2.add(&g_h1)?
        };
        let (g_y1, mut g_ln1) = if pre {
            (g_y1, self.ln1.zeros_like())
        } else {
            self.ln1.backward(&cache.ln1, &g_y1)?
        };

        // convolution branch
        let mut g_z = g_y1.clone();
        if let Some(keep) = &cache.attn_keep {
            apply_mask(&mut g_z, keep, keep_scale);
        }
        let (g_conv, g_out_proj) = self.out_proj.backward(&cache.conv, &g_z)?;
        let (mut g_gated, mut g_rel) = talk_backward(&g_conv, &cache.kernel)?;
        if let Some(keep) = &cache.offsets_keep {
            apply_mask(&mut g_rel, keep, T::one());
        }
        let (g_gated_off, g_offsets) = self.offsets.backward(&cache.gated, &cache.rel_raw, &g_rel)?;
        g_gated.add_assign(&g_gated_off)?;
        let g_proj = if self.cfg.glu {
            glu_backward(&cache.proj, &g_gated)?
        } else {
            g_gated
        };
        let (g_h0, g_in_proj) = self.in_proj.backward(&cache.h0, &g_proj)?;
        let g_x = if pre {
            let (g_x_ln, g) = self.ln1.backward(&cache.ln1, &g_h0)?;
            g_ln1 = g;
            g_y1.add(&g_x_ln)?
        } else {
            g_y1.add(&g_h0)?
        };

        Ok((
            g_x,
            TalkBlock {
                cfg: self.cfg,
                ln1: g_ln1,
                in_proj: g_in_proj,
                offsets: g_offsets,
                out_proj: g_out_proj,
                ln2: g_ln2,
                ffn_in: g_ffn_in,
                ffn_out: g_ffn_out,
            },
        ))
    }
}

impl<T: Scalar> Parameterized<T> for TalkBlock<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.ln1.params();
        v.extend(self.in_proj.params());
        v.extend(self.offsets.params());
        v.extend(self.out_proj.params());
        v.extend(self.ln2.params());
        v.extend(self.ffn_in.params());
        v.extend(self.ffn_out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.ln1.params_mut();
        v.extend(self.in_proj.params_mut());
        v.extend(self.offsets.params_mut());
        v.extend(self.out_proj.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ffn_in.params_mut());
        v.extend(self.ffn_out.params_mut());
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = prefixed("ln1", self.ln1.param_names());
        v.extend(prefixed("in_proj", self.in_proj.param_names()));
        v.extend(prefixed("offsets", self.offsets.param_names()));
        v.extend(prefixed("out_proj", self.out_proj.param_names()));
        v.extend(prefixed("ln2", self.ln2.param_names()));
        v.extend(prefixed("ffn_in", self.ffn_in.param_names()));
        v.extend(prefixed("ffn_out", self.ffn_out.param_names()));
        v
    }
}

pub(crate) fn prefix_names(prefix: &str, names: Vec<String>) -> Vec<String> {
    prefixed(prefix, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, rel_error, FD_STEP};

    fn rand(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::rand_uniform(shape, -1.0, 1.0, rng).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn swish_and_glu_identities() {
        let x = Tensor::<f64>::from_vec(&[3], vec![0.0, 40.0, -40.0]).unwrap();
        let y = swish_forward(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 40.0).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-12);

        let x = Tensor::<f64>::from_vec(&[1, 4], vec![2.0, -6.0, 0.0, 0.0]).unwrap();
        assert_eq!(glu_forward(&x).unwrap().data(), &[1.0, -3.0]);
    }

    #[test]
    fn offsets_generator_examples() {
        let mut rng = Rng::new(0);
        let mut gen = OffsetGenerator::<f64>::new(8, 2, &mut rng).unwrap();
        gen.weight.fill(0.0);
        let x = rand(&[2, 5, 8], &mut rng);
        let rel = gen.forward(&x).unwrap();
        assert!(rel.values().data().iter().all(|&v| v == 0.5));

        gen.bias.fill(20.0);
        let rel = gen.forward(&x).unwrap();
        assert!(rel.values().data().iter().all(|&v| v > 1.0 - 1e-8));

        let single = OffsetGenerator::<f64>::new(8, 1, &mut rng).unwrap();
        assert_eq!(single.forward(&x).unwrap().values().shape(), &[2, 5, 1, 2]);

        assert!(OffsetGenerator::<f64>::new(8, 3, &mut rng).is_err());
    }

    #[test]
    fn offsets_dropout_identities_and_rate() {
        let mut rng = Rng::new(5);
        let rel = RelativeOffsets::new(
            Tensor::<f64>::rand_uniform(&[2, 50, 5, 2], 0.0, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        let (same, keep) = offsets_dropout(&rel, 0.0, &mut rng, true).unwrap();
        assert_eq!(same, rel);
        assert!(keep.is_none());
        let (same, _) = offsets_dropout(&rel, 0.7, &mut rng, false).unwrap();
        assert_eq!(same, rel);
        assert!(offsets_dropout(&rel, 1.0, &mut rng, true).is_err());
        assert!(offsets_dropout(&rel, -0.1, &mut rng, true).is_err());

        let (dropped, keep) = offsets_dropout(&rel, 0.5, &mut rng, true).unwrap();
        let keep = keep.unwrap();
        let rate = keep.iter().filter(|k| !**k).count() as f64 / keep.len() as f64;
        assert!((rate - 0.5).abs() < 0.05, "rate {rate}");
        for ((&d, &o), &k) in dropped.values().data().iter().zip(rel.values().data()).zip(&keep) {
            assert_eq!(d, if k { o } else { 0.0 });
        }
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = Rng::new(1);
        let lin = Linear::<f64>::new(5, 3, &mut rng).unwrap();
        let x = rand(&[2, 4, 5], &mut rng);
        let w = rand(&[2, 4, 3], &mut rng);
        let (gx, gp) = lin.backward(&x, &w).unwrap();
        let num = numeric_grad(&x, FD_STEP, |x| dot(&lin.forward(x).unwrap(), &w));
        assert!(rel_error(gx.data(), num.data()) < 1e-6);
        let num = numeric_grad(&lin.weight, FD_STEP, |p| {
            let l = Linear { weight: p.clone(), bias: lin.bias.clone() };
            dot(&l.forward(&x).unwrap(), &w)
        });
        assert!(rel_error(gp.weight.data(), num.data()) < 1e-6);
        let num = numeric_grad(&lin.bias, FD_STEP, |p| {
            let l = Linear { weight: lin.weight.clone(), bias: p.clone() };
            dot(&l.forward(&x).unwrap(), &w)
        });
        assert!(rel_error(gp.bias.data(), num.data()) < 1e-6);
    }

    #[test]
    fn activations_backward_match_fd() {
        let mut rng = Rng::new(2);
        let x = rand(&[3, 6], &mut rng);
        let w = rand(&[3, 3], &mut rng);
        let g = glu_backward(&x, &w).unwrap();
        let num = numeric_grad(&x, FD_STEP, |x| dot(&glu_forward(x).unwrap(), &w));
        assert!(rel_error(g.data(), num.data()) < 1e-6);

        let w = rand(&[3, 6], &mut rng);
        let g = swish_backward(&x, &w).unwrap();
        let num = numeric_grad(&x, FD_STEP, |x| dot(&swish_forward(x), &w));
        assert!(rel_error(g.data(), num.data()) < 1e-6);
    }

    #[test]
    fn layernorm_backward_matches_fd() {
        let mut rng = Rng::new(3);
        let mut ln = LayerNorm::<f64>::new(6).unwrap();
        ln.gamma = rand(&[6], &mut rng);
        ln.beta = rand(&[6], &mut rng);
        let x = rand(&[4, 6], &mut rng);
        let w = rand(&[4, 6], &mut rng);
        let (_, cache) = ln.forward(&x).unwrap();
        let (gx, gp) = ln.backward(&cache, &w).unwrap();
        let num = numeric_grad(&x, FD_STEP, |x| dot(&ln.forward(x).unwrap().0, &w));
        assert!(rel_error(gx.data(), num.data()) < 1e-6);
        let num = numeric_grad(&ln.gamma, FD_STEP, |p| {
            let l = LayerNorm { gamma: p.clone(), beta: ln.beta.clone() };
            dot(&l.forward(&x).unwrap().0, &w)
        });
        assert!(rel_error(gp.gamma.data(), num.data()) < 1e-6);
    }

    #[test]
    fn embedding_and_xent_backward_match_fd() {
        let mut rng = Rng::new(4);
        let emb = Embedding::<f64>::new(7, 3, &mut rng).unwrap();
        let ids = [1usize, 4, 1, 6];
        let w = rand(&[2, 2, 3], &mut rng);
        let g = emb.backward(&ids, &w).unwrap();
        let num = numeric_grad(&emb.table, FD_STEP, |t| {
            let e = Embedding { table: t.clone() };
            dot(&e.forward(&ids, &[2, 2]).unwrap(), &w)
        });
        assert!(rel_error(g.table.data(), num.data()) < 1e-6);
        assert!(emb.forward(&[9], &[1]).is_err());

        let logits = rand(&[5, 4], &mut rng);
        let targets = [0usize, 3, 2, 2, 1];
        let mask = [true, false, true, true, true];
        let out = softmax_xent(&logits, &targets, &mask).unwrap();
        assert_eq!(out.counted, 4);
        let num = numeric_grad(&logits, FD_STEP, |l| softmax_xent(l, &targets, &mask).unwrap().loss);
        assert!(rel_error(out.grad_logits.data(), num.data()) < 1e-6);
    }

    #[test]
    fn xent_of_uniform_logits_is_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[3, 16]);
        let out = softmax_xent(&logits, &[1, 2, 3], &[true; 3]).unwrap();
        assert!((out.loss - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn offset_generator_backward_matches_fd() {
        let mut rng = Rng::new(6);
        let gen = OffsetGenerator::<f64>::new(6, 3, &mut rng).unwrap();
        let x = rand(&[2, 3, 6], &mut rng);
        let w = rand(&[2, 3, 3, 2], &mut rng);
        let rel = gen.forward(&x).unwrap();
        let (gx, gp) = gen.backward(&x, &rel, &w).unwrap();
        let num = numeric_grad(&x, FD_STEP, |x| dot(gen.forward(x).unwrap().values(), &w));
        assert!(rel_error(gx.data(), num.data()) < 1e-6);
        let num = numeric_grad(&gen.weight, FD_STEP, |p| {
            let g = OffsetGenerator { weight: p.clone(), bias: gen.bias.clone() };
            dot(g.forward(&x).unwrap().values(), &w)
        });
        assert!(rel_error(gp.weight.data(), num.data()) < 1e-6);
    }

    fn block_cfg(glu: bool, normalize: bool) -> BlockConfig {
        BlockConfig {
            talk: TalkConfig {
                dim: 8,
                heads: 2,
                left_max: 3,
                right_max: 2,
                offsets_dropout: 0.0,
                normalize,
            },
            ffn_dim: 12,
            glu,
            activation_dropout: 0.0,
            norm: NormPlacement::Pre,
        }
    }

    #[test]
    fn block_preserves_shape_and_names_match_params() {
        let mut rng = Rng::new(8);
        let block = TalkBlock::<f64>::new(block_cfg(true, true), &mut rng).unwrap();
        let x = rand(&[2, 6, 8], &mut rng);
        let (y, _) = block.forward(&x, false, &mut rng).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(block.params().len(), block.param_names().len());
        assert_eq!(block.param_names()[2], "in_proj.weight");
    }

    #[test]
    fn block_input_gradient_matches_fd() {
        let mut rng = Rng::new(10);
        for (glu, norm) in [(true, NormPlacement::Pre), (false, NormPlacement::Pre), (true, NormPlacement::Post)] {
            let cfg = BlockConfig { norm, ..block_cfg(glu, true) };
            let block = TalkBlock::<f64>::new(cfg, &mut rng).unwrap();
            let x = rand(&[1, 5, 8], &mut rng);
            let w = rand(&[1, 5, 8], &mut rng);
            let (_, cache) = block.forward(&x, false, &mut rng).unwrap();
            if cache.kernel().min_kink_distance() < 1e-3 {
                continue;
            }
            let (gx, _) = block.backward(&cache, &w).unwrap();
            let num = numeric_grad(&x, FD_STEP, |x| {
                dot(&block.forward(x, false, &mut Rng::new(0)).unwrap().0, &w)
            });
            assert!(rel_error(gx.data(), num.data()) < 1e-5);
        }
    }
}
