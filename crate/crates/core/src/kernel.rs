//! Time-aware large kernel (TaLK) convolution.
//!
//! Every output step sums a contiguous, per-step window of the input:
//!
//! ```text
//! o_i = sum_{j = a_l}^{a_r} x_j = S[a_r] - S[a_l - 1]
//! a_l = i - rel_l * left_max        a_r = i + rel_r * right_max
//! ```
//!
//! with `S` the summed-area table over time and `rel_{l,r}` in `[0, 1]`.
//! Fractional boundaries read `S` by linear interpolation between adjacent
//! rows, which makes the output differentiable in the offsets. Channels are
//! split into `heads` contiguous groups of `dim / heads` that share one pair
//! of offsets per step. Cost is `O(B * n * d)` whatever the reach.
//!
//! Boundary conventions (time is 1-based in the formulas, 0-based in code):
//!
//! * Absolute offsets are clamped into `1 <= a_l <= i <= a_r <= n`. Where a
//!   clamp binds the offset gradient is exactly zero.
//! * The right boundary reads the cell `[floor(a_r), floor(a_r) + 1]`
//!   (capped at `n`); the left boundary reads `[ceil(a_l) - 2, ceil(a_l) - 1]`
//!   (floored at 0). At integral boundaries the forward value is unchanged,
//!   and the gradient is the one-sided derivative for a growing window.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::scan::{sat_build_parallel, sat_suffix_sum, SummedAreaTable};
use crate::tensor::{Scalar, Tensor};

/// Static configuration of one TaLK convolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TalkConfig {
    /// Channels `d`.
    pub dim: usize,
    /// Offset groups `H`; must divide `dim`.
    pub heads: usize,
    /// Maximum reach to the left, in tokens.
    pub left_max: usize,
    /// Maximum reach to the right, in tokens. Zero gives a causal layer.
    pub right_max: usize,
    /// Probability of zeroing each predicted offset during training.
    pub offsets_dropout: f64,
    /// Scale outputs by `1 / (left_max + right_max + 1)`.
    pub normalize: bool,
}

impl TalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return config_err("dim and heads must be positive");
        }
        if self.dim % self.heads != 0 {
            return config_err(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            ));
        }
        if !(0.0..1.0).contains(&self.offsets_dropout) {
            return config_err(format!(
                "offsets dropout {} outside [0, 1)",
                self.offsets_dropout
            ));
        }
        if self.normalize && self.left_max + self.right_max == 0 {
            return config_err("normalized layer with zero reach is a pure identity");
        }
        Ok(())
    }

    /// Channels per head, `R = d / H`.
    pub fn head_width(&self) -> usize {
        self.dim / self.heads
    }

    /// Output scale: `1 / (left_max + right_max + 1)` or 1.
    pub fn output_scale<T: Scalar>(&self) -> T {
        if self.normalize {
            T::one() / T::lit((self.left_max + self.right_max + 1) as f64)
        } else {
            T::one()
        }
    }

    /// Same layer restricted to past context.
    pub fn causal(mut self) -> Self {
        self.right_max = 0;
        self
    }
}

/// Sigmoid-bounded relative offsets, shape `[B, n, H, 2]` (left, right).
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeOffsets<T> {
    values: Tensor<T>,
}

impl<T: Scalar> RelativeOffsets<T> {
    /// Rejects values outside `[0, 1]`. NaN passes through so divergence
    /// upstream stays visible in the output.
    pub fn new(values: Tensor<T>) -> Result<Self> {
        match *values.shape() {
            [_, _, _, 2] => {}
            _ => return shape_err(format!("offsets must be [B, n, H, 2], got {:?}", values.shape())),
        }
        if values.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(crate::error::TalkError::Range(
                "relative offsets must lie in [0, 1]".into(),
            ));
        }
        Ok(RelativeOffsets { values })
    }

    /// Constant offsets for every step and head.
    pub fn constant(batch: usize, n: usize, heads: usize, left: T, right: T) -> Result<Self> {
        let mut values = Tensor::zeros(&[batch, n, heads, 2]);
        for pair in values.data_mut().chunks_exact_mut(2) {
            pair[0] = left;
            pair[1] = right;
        }
        Self::new(values)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn left(&self, b: usize, t: usize, h: usize) -> T {
        self.values.data()[self.flat(b, t, h) * 2]
    }

    pub fn right(&self, b: usize, t: usize, h: usize) -> T {
        self.values.data()[self.flat(b, t, h) * 2 + 1]
    }

    fn flat(&self, b: usize, t: usize, h: usize) -> usize {
        (b * self.seq_len() + t) * self.heads() + h
    }
}

/// Clamped absolute window boundaries, one per `(b, t, h)`, 1-based time.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsoluteOffsets<T> {
    pub left: Vec<T>,
    pub right: Vec<T>,
    /// Boundaries before clamping.
    pub raw_left: Vec<T>,
    pub raw_right: Vec<T>,
    pub left_clamped: Vec<bool>,
    pub right_clamped: Vec<bool>,
}

fn clamp_flagged<T: Scalar>(v: T, lo: T, hi: T) -> (T, bool) {
    // comparisons are false for NaN, which passes through unclamped
    if v < lo {
        (lo, true)
    } else if v > hi {
        (hi, true)
    } else {
        (v, false)
    }
}

fn check_offsets<T: Scalar>(rel: &RelativeOffsets<T>, cfg: &TalkConfig, batch: usize, n: usize) -> Result<()> {
    if rel.batch() != batch || rel.seq_len() != n || rel.heads() != cfg.heads {
        return shape_err(format!(
            "offsets {:?} do not match batch {batch}, length {n}, heads {}",
            rel.values().shape(),
            cfg.heads
        ));
    }
    Ok(())
}

/// Converts relative offsets into clamped absolute boundaries.
pub fn offsets_to_absolute<T: Scalar>(
    rel: &RelativeOffsets<T>,
    cfg: &TalkConfig,
    n: usize,
) -> Result<AbsoluteOffsets<T>> {
    check_offsets(rel, cfg, rel.batch(), n)?;
    let count = rel.batch() * n * cfg.heads;
    let mut out = AbsoluteOffsets {
        left: Vec::with_capacity(count),
        right: Vec::with_capacity(count),
        raw_left: Vec::with_capacity(count),
        raw_right: Vec::with_capacity(count),
        left_clamped: Vec::with_capacity(count),
        right_clamped: Vec::with_capacity(count),
    };
    let l_max = T::lit(cfg.left_max as f64);
    let r_max = T::lit(cfg.right_max as f64);
    let last = T::lit(n as f64);
    for b in 0..rel.batch() {
        for t in 0..n {
            let i = T::lit((t + 1) as f64);
            for h in 0..cfg.heads {
                let raw_l = i - rel.left(b, t, h) * l_max;
                let raw_r = i + rel.right(b, t, h) * r_max;
                let (al, cl) = clamp_flagged(raw_l, T::one(), i);
                let (ar, cr) = clamp_flagged(raw_r, i, last);
                out.left.push(al);
                out.right.push(ar);
                out.raw_left.push(raw_l);
                out.raw_right.push(raw_r);
                out.left_clamped.push(cl);
                out.right_clamped.push(cr);
            }
        }
    }
    Ok(out)
}

/// Linear read of the table between rows `lo` and `hi`:
/// `(1 - frac) * S[lo] + frac * S[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

fn floor_index<T: Scalar>(v: T) -> usize {
    v.floor().to_usize().unwrap_or(0)
}

/// Tap for `S[a_l - 1]`.
fn left_tap<T: Scalar>(a_left: T) -> Tap<T> {
    let u = a_left - T::one();
    let fl = u.floor();
    if u == fl {
        // integral: lower cell, all weight on the upper row
        let hi = floor_index(u);
        Tap {
            lo: hi.saturating_sub(1),
            hi,
            frac: T::one(),
        }
    } else {
        let lo = floor_index(u);
        Tap {
            lo,
            hi: lo + 1,
            frac: u - fl,
        }
    }
}

/// Tap for `S[a_r]`. `causal` keeps the read inside the past.
fn right_tap<T: Scalar>(a_right: T, n: usize, causal: bool) -> Tap<T> {
    let fl = a_right.floor();
    let lo = floor_index(a_right).min(n);
    let hi = if causal { lo } else { (lo + 1).min(n) };
    let frac = if hi == lo { T::zero() } else { a_right - fl };
    Tap {
        lo,
        hi,
        frac: if a_right.is_nan() { a_right } else { frac },
    }
}

impl<T: Scalar> Tap<T> {
    #[inline]
    fn weights(&self) -> (T, T) {
        (T::one() - self.frac, self.frac)
    }
}

/// State kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct KernelSaved<T> {
    pub cfg: TalkConfig,
    pub table: SummedAreaTable<T>,
    pub offsets: AbsoluteOffsets<T>,
    pub left_taps: Vec<Tap<T>>,
    pub right_taps: Vec<Tap<T>>,
}

impl<T: Scalar> KernelSaved<T> {
    pub fn batch(&self) -> usize {
        self.table.batch()
    }

    pub fn seq_len(&self) -> usize {
        self.table.seq_len()
    }

    /// Interpolation weight on the lower row for the left boundary.
    pub fn gamma_left(&self, k: usize) -> T {
        T::one() - self.left_taps[k].frac
    }

    /// Interpolation weight on the upper row for the right boundary.
    pub fn gamma_right(&self, k: usize) -> T {
        self.right_taps[k].frac
    }

    /// Smallest distance from any unclamped boundary to an integer, or from
    /// any raw boundary to its clamp limit. The kernel is only piecewise
    /// smooth; finite-difference checks need this to exceed the step.
    pub fn min_kink_distance(&self) -> f64 {
        let n = self.seq_len();
        let heads = self.cfg.heads;
        let mut best = f64::INFINITY;
        for (k, (&rl, &rr)) in self
            .offsets
            .raw_left
            .iter()
            .zip(&self.offsets.raw_right)
            .enumerate()
        {
            let i = ((k / heads) % n + 1) as f64;
            let rl = rl.to_f64_lossless();
            let rr = rr.to_f64_lossless();
            let dist_int = |v: f64| (v - v.round()).abs();
            if self.cfg.left_max > 0 {
                best = best.min((rl - 1.0).abs()).min((rl - i).abs());
                if !self.offsets.left_clamped[k] {
                    best = best.min(dist_int(rl));
                }
            }
            if self.cfg.right_max > 0 {
                best = best.min((rr - n as f64).abs()).min((rr - i).abs());
                if !self.offsets.right_clamped[k] {
                    best = best.min(dist_int(rr));
                }
            }
        }
        best
    }
}

fn dims<T: Scalar>(x: &Tensor<T>, cfg: &TalkConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    match *x.shape() {
        [b, n, d] if d == cfg.dim => Ok((b, n)),
        _ => shape_err(format!(
            "input must be [B, n, {}], got {:?}",
            cfg.dim,
            x.shape()
        )),
    }
}

/// TaLK forward pass, single-threaded.
pub fn talk_forward<T: Scalar>(
    x: &Tensor<T>,
    rel: &RelativeOffsets<T>,
    cfg: &TalkConfig,
) -> Result<(Tensor<T>, KernelSaved<T>)> {
    talk_forward_with_workers(x, rel, cfg, 1)
}

/// TaLK forward pass with the table build and the per-sequence gather
/// spread over `workers` threads.
pub fn talk_forward_with_workers<T: Scalar>(
    x: &Tensor<T>,
    rel: &RelativeOffsets<T>,
    cfg: &TalkConfig,
    workers: usize,
) -> Result<(Tensor<T>, KernelSaved<T>)> {
    let (batch, n) = dims(x, cfg)?;
    check_offsets(rel, cfg, batch, n)?;
    let table = sat_build_parallel(x, workers)?;
    let offsets = offsets_to_absolute(rel, cfg, n)?;
    let causal = cfg.right_max == 0;
    let left_taps: Vec<Tap<T>> = offsets.left.iter().map(|&a| left_tap(a)).collect();
    let right_taps: Vec<Tap<T>> = offsets
        .right
        .iter()
        .map(|&a| right_tap(a, n, causal))
        .collect();

    let d = cfg.dim;
    let mut out = vec![T::zero(); batch * n * d];
    let gather = |b: usize, seq_out: &mut [T]| {
        gather_sequence(&table, &left_taps, &right_taps, cfg, b, n, seq_out)
    };
    if workers > 1 && batch > 1 {
        out.par_chunks_mut(n * d)
            .enumerate()
            .for_each(|(b, seq_out)| gather(b, seq_out));
    } else {
        out.chunks_mut(n * d)
            .enumerate()
            .for_each(|(b, seq_out)| gather(b, seq_out));
    }

    let saved = KernelSaved {
        cfg: *cfg,
        table,
        offsets,
        left_taps,
        right_taps,
    };
    Ok((Tensor::from_vec(&[batch, n, d], out)?, saved))
}

fn gather_sequence<T: Scalar>(
    table: &SummedAreaTable<T>,
    left_taps: &[Tap<T>],
    right_taps: &[Tap<T>],
    cfg: &TalkConfig,
    b: usize,
    n: usize,
    out: &mut [T],
) {
    let d = cfg.dim;
    let r = cfg.head_width();
    let scale = cfg.output_scale::<T>();
    for t in 0..n {
        let row_out = &mut out[t * d..(t + 1) * d];
        for h in 0..cfg.heads {
            let k = (b * n + t) * cfg.heads + h;
            let lt = left_taps[k];
            let rt = right_taps[k];
            let (l0, l1) = lt.weights();
            let (r0, r1) = rt.weights();
            let span = h * r..(h + 1) * r;
            let sl0 = &table.row(b, lt.lo)[span.clone()];
            let sl1 = &table.row(b, lt.hi)[span.clone()];
            let sr0 = &table.row(b, rt.lo)[span.clone()];
            let sr1 = &table.row(b, rt.hi)[span.clone()];
            let dst = &mut row_out[span];
            for c in 0..r {
                let upper = r0 * sr0[c] + r1 * sr1[c];
                let lower = l0 * sl0[c] + l1 * sl1[c];
                dst[c] = upper - lower;
            }
        }
        if cfg.normalize {
            for v in row_out.iter_mut() {
                *v = *v * scale;
            }
        }
    }
}

/// Causal forward: `cfg.right_max` forced to zero, so step `i` reads only
/// inputs `1..=i`.
pub fn talk_forward_causal<T: Scalar>(
    x: &Tensor<T>,
    rel: &RelativeOffsets<T>,
    cfg: &TalkConfig,
) -> Result<(Tensor<T>, KernelSaved<T>)> {
    talk_forward(x, rel, &cfg.causal())
}

/// Backward pass. Returns `(grad_x [B, n, d], grad_rel [B, n, H, 2])`.
///
/// Offset gradients are the interpolation slopes scaled by the reach and
/// zeroed under a binding clamp. Input gradients scatter the interpolation
/// weights into a table-shaped buffer and take one suffix sum.
pub fn talk_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved: &KernelSaved<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let cfg = &saved.cfg;
    let batch = saved.batch();
    let n = saved.seq_len();
    let d = cfg.dim;
    let heads = cfg.heads;
    let r = cfg.head_width();
    grad_out.expect_shape(&[batch, n, d])?;

    let scale = cfg.output_scale::<T>();
    let l_max = T::lit(cfg.left_max as f64);
    let r_max = T::lit(cfg.right_max as f64);
    let table = &saved.table;
    let g = grad_out.data();

    let mut grad_table = vec![T::zero(); batch * (n + 1) * d];
    let mut grad_rel = vec![T::zero(); batch * n * heads * 2];

    for b in 0..batch {
        let gt = &mut grad_table[b * (n + 1) * d..(b + 1) * (n + 1) * d];
        for t in 0..n {
            let g_row = &g[(b * n + t) * d..(b * n + t + 1) * d];
            for h in 0..heads {
                let k = (b * n + t) * heads + h;
                let lt = saved.left_taps[k];
                let rt = saved.right_taps[k];
                let span = h * r..(h + 1) * r;
                let gh = &g_row[span.clone()];

                let mut dot_l = T::zero();
                let mut dot_r = T::zero();
                let sl0 = &table.row(b, lt.lo)[span.clone()];
                let sl1 = &table.row(b, lt.hi)[span.clone()];
                let sr0 = &table.row(b, rt.lo)[span.clone()];
                let sr1 = &table.row(b, rt.hi)[span.clone()];
                for c in 0..r {
                    dot_l += gh[c] * (sl1[c] - sl0[c]);
                    dot_r += gh[c] * (sr1[c] - sr0[c]);
                }
                if !saved.offsets.left_clamped[k] {
                    grad_rel[k * 2] = dot_l * l_max * scale;
                }
                if !saved.offsets.right_clamped[k] {
                    grad_rel[k * 2 + 1] = dot_r * r_max * scale;
                }

                let (l0, l1) = lt.weights();
                let (r0, r1) = rt.weights();
                for c in 0..r {
                    let gc = gh[c] * scale;
                    let col = h * r + c;
                    gt[rt.lo * d + col] += gc * r0;
                    gt[rt.hi * d + col] += gc * r1;
                    gt[lt.lo * d + col] -= gc * l0;
                    gt[lt.hi * d + col] -= gc * l1;
                }
            }
        }
    }

    let grad_table = Tensor::from_vec(&[batch, n + 1, d], grad_table)?;
    let grad_x = sat_suffix_sum(&grad_table)?;
    Ok((grad_x, Tensor::from_vec(&[batch, n, heads, 2], grad_rel)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cfg(l: usize, r: usize) -> TalkConfig {
        TalkConfig {
            dim: 1,
            heads: 1,
            left_max: l,
            right_max: r,
            offsets_dropout: 0.0,
            normalize: false,
        }
    }

    fn x1234() -> Tensor<f64> {
        Tensor::from_vec(&[1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    /// Offsets that are zero everywhere except step `t`.
    fn single(n: usize, t: usize, left: f64, right: f64) -> RelativeOffsets<f64> {
        let mut v = Tensor::zeros(&[1, n, 1, 2]);
        v.set(&[0, t, 0, 0], left);
        v.set(&[0, t, 0, 1], right);
        RelativeOffsets::new(v).unwrap()
    }

    #[test]
    fn absolute_offsets_examples() {
        let rel = single(10, 4, 1.0, 0.0);
        let abs = offsets_to_absolute(&rel, &cfg(3, 2), 10).unwrap();
        assert_eq!(abs.left[4], 2.0);

        let rel = single(10, 0, 1.0, 0.0);
        let abs = offsets_to_absolute(&rel, &cfg(3, 2), 10).unwrap();
        assert_eq!(abs.raw_left[0], -2.0);
        assert_eq!(abs.left[0], 1.0);
        assert!(abs.left_clamped[0]);

        let rel = single(10, 1, 0.0, 0.75);
        let abs = offsets_to_absolute(&rel, &cfg(3, 2), 10).unwrap();
        assert_eq!(abs.right[1], 3.5);
        assert!(!abs.right_clamped[1]);
    }

    #[test]
    fn forward_examples_on_1234() {
        // i = 2 (t = 1): a_l = 1, a_r = 3
        let (o, _) = talk_forward(&x1234(), &single(4, 1, 1.0, 1.0), &cfg(1, 1)).unwrap();
        assert_eq!(o.get(&[0, 1, 0]), 6.0);

        // a_l = 1.5: S[0.5] = 0.5 * S0 + 0.5 * S1; o = S2 - 0.5
        let (o, saved) = talk_forward(&x1234(), &single(4, 1, 0.5, 0.0), &cfg(1, 1)).unwrap();
        assert_eq!(o.get(&[0, 1, 0]), 2.5);
        assert_eq!(saved.gamma_left(1), 0.5);

        // a_r = 3.5: S = 0.5 * S3 + 0.5 * S4 = 8; a_l = 1 so o = 8 - S0
        let (o, saved) = talk_forward(&x1234(), &single(4, 1, 0.5, 0.75), &cfg(2, 2)).unwrap();
        assert_eq!(o.get(&[0, 1, 0]), 8.0);
        assert_eq!(saved.gamma_right(1), 0.5);
    }

    #[test]
    fn zero_offsets_are_identity() {
        let x = Tensor::<f64>::rand_uniform(&[2, 7, 4], -1.0, 1.0, &mut Rng::new(3)).unwrap();
        let c = TalkConfig {
            dim: 4,
            heads: 2,
            left_max: 3,
            right_max: 3,
            offsets_dropout: 0.0,
            normalize: false,
        };
        let rel = RelativeOffsets::constant(2, 7, 2, 0.0, 0.0).unwrap();
        let (o, _) = talk_forward(&x, &rel, &c).unwrap();
        for (a, b) in o.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_examples_on_1234() {
        let mut grad = Tensor::zeros(&[1, 4, 1]);
        grad.set(&[0, 1, 0], 1.0);

        let (_, saved) = talk_forward(&x1234(), &single(4, 1, 0.5, 0.0), &cfg(1, 1)).unwrap();
        let (_, grad_rel) = talk_backward(&grad, &saved).unwrap();
        assert_eq!(grad_rel.get(&[0, 1, 0, 0]), 1.0);

        // a_l = 1, a_r = 3: every token in the window has weight one
        let (_, saved) = talk_forward(&x1234(), &single(4, 1, 1.0, 1.0), &cfg(1, 1)).unwrap();
        let (grad_x, _) = talk_backward(&grad, &saved).unwrap();
        assert_eq!(grad_x.data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn single_step_sequence_is_identity_with_zero_offset_grads() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![3.0, -2.0]).unwrap();
        let c = TalkConfig {
            dim: 2,
            heads: 1,
            left_max: 4,
            right_max: 4,
            offsets_dropout: 0.0,
            normalize: true,
        };
        for (l, r) in [(0.0, 0.0), (0.3, 0.9), (1.0, 1.0)] {
            let rel = RelativeOffsets::constant(1, 1, 1, l, r).unwrap();
            let (o, saved) = talk_forward(&x, &rel, &c).unwrap();
            assert_eq!(o.data(), &[3.0 / 9.0, -2.0 / 9.0]);
            let (_, gr) = talk_backward(&Tensor::new(&[1, 1, 2], 1.0).unwrap(), &saved).unwrap();
            assert_eq!(gr.data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn causal_mode_reads_only_the_past() {
        let c = TalkConfig {
            dim: 2,
            heads: 2,
            left_max: 3,
            right_max: 5,
            offsets_dropout: 0.0,
            normalize: false,
        };
        let mut rng = Rng::new(11);
        let x = Tensor::<f64>::rand_uniform(&[1, 6, 2], -1.0, 1.0, &mut rng).unwrap();
        let rel = RelativeOffsets::new(
            Tensor::rand_uniform(&[1, 6, 2, 2], 0.0, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        let (o, saved) = talk_forward_causal(&x, &rel, &c).unwrap();
        for (k, &a) in saved.offsets.right.iter().enumerate() {
            assert_eq!(a, (k / 2 + 1) as f64);
        }
        let (o2, _) = talk_forward(&x, &rel, &c.causal()).unwrap();
        assert_eq!(o, o2);

        let mut y = x.clone();
        y.set(&[0, 5, 0], f64::INFINITY);
        let (o3, _) = talk_forward_causal(&y, &rel, &c).unwrap();
        assert_eq!(&o.data()[..10], &o3.data()[..10]);
    }

    #[test]
    fn nan_propagates() {
        let mut x = x1234();
        x.set(&[0, 0, 0], f64::NAN);
        let rel = RelativeOffsets::constant(1, 4, 1, 1.0, 0.0).unwrap();
        let (o, _) = talk_forward(&x, &rel, &cfg(2, 0)).unwrap();
        assert!(o.get(&[0, 0, 0]).is_nan());
        assert!(o.get(&[0, 2, 0]).is_nan());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(1, 1);
        c.dim = 6;
        c.heads = 4;
        assert!(c.validate().is_err());
        c.heads = 3;
        assert!(c.validate().is_ok());
        c.offsets_dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(0, 0);
        c.normalize = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mismatched_offsets_rejected() {
        let rel = RelativeOffsets::constant(1, 3, 1, 0.5, 0.5).unwrap();
        assert!(talk_forward(&x1234(), &rel, &cfg(1, 1)).is_err());
        let bad = Tensor::<f64>::new(&[1, 4, 1, 2], 1.5).unwrap();
        assert!(RelativeOffsets::new(bad).is_err());
    }
}
