//! Reference cores: a per-position TaLK oracle, softmax self-attention and
//! dynamic convolution. All forward-only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result, TalkError};
use crate::kernel::{talk_forward, talk_forward_with_workers, RelativeOffsets, TalkConfig};
use crate::layers::{Linear, OffsetGenerator};
use crate::rng::Rng;
use crate::tensor::{matmul, Scalar, Tensor, Trans};

/// Largest sequence the oracle accepts.
pub const ORACLE_MAX_LEN: usize = 512;

/// Attention score buffers above this size are reported as out of memory
/// instead of being allocated.
pub const DEFAULT_MEMORY_LIMIT: usize = 2 << 30;

/// Direct evaluation of the kernel: prefix sums by explicit loops and
/// interpolated reads at the real-valued boundaries. `O(n^2 * d)`.
pub fn talk_oracle<T: Scalar>(x: &Tensor<T>, rel: &RelativeOffsets<T>, cfg: &TalkConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (b, n, d) = match *x.shape() {
        [b, n, d] if d == cfg.dim => (b, n, d),
        _ => return shape_err(format!("oracle input must be [B, n, {}]", cfg.dim)),
    };
    if n > ORACLE_MAX_LEN {
        return config_err(format!("oracle limited to n <= {ORACLE_MAX_LEN}"));
    }
    if rel.batch() != b || rel.seq_len() != n || rel.heads() != cfg.heads {
        return shape_err("oracle offsets do not match input");
    }
    let r = cfg.head_width();
    let scale = cfg.output_scale::<T>();
    let xs = x.data();
    let prefix = |bb: usize, k: usize, c: usize| -> T {
        let mut s = T::zero();
        for t in 0..k {
            s += xs[(bb * n + t) * d + c];
        }
        s
    };
    // S at a real coordinate in [0, n]
    let read = |bb: usize, u: T, c: usize| -> T {
        let lo = u.floor();
        let li = lo.to_usize().unwrap_or(0);
        let f = u - lo;
        if f == T::zero() {
            prefix(bb, li, c)
        } else {
            let s0 = prefix(bb, li, c);
            s0 + f * (prefix(bb, li + 1, c) - s0)
        }
    };
    let mut out = vec![T::zero(); b * n * d];
    for bb in 0..b {
        for t in 0..n {
            let i = T::lit((t + 1) as f64);
            for h in 0..cfg.heads {
                let mut al = i - rel.left(bb, t, h) * T::lit(cfg.left_max as f64);
                let mut ar = i + rel.right(bb, t, h) * T::lit(cfg.right_max as f64);
                if al < T::one() {
                    al = T::one();
                }
                if ar > T::lit(n as f64) {
                    ar = T::lit(n as f64);
                }
                for c in h * r..(h + 1) * r {
                    let o = read(bb, ar, c) - read(bb, al - T::one(), c);
                    out[(bb * n + t) * d + c] = if cfg.normalize { o * scale } else { o };
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Worst disagreement between [`talk_forward`](crate::kernel::talk_forward)
/// in `T` and the oracle in `f64` over random instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleSweep {
    pub instances: usize,
    pub worst_rel_error: f64,
    /// Instances in which at least one boundary was clamped.
    pub clamped_instances: usize,
    /// Instances in which at least one boundary sat on an integer.
    pub integral_instances: usize,
}

/// Random instances with `B <= 4`, `n <= 64`, `d <= 32`, `H` in
/// `{1, 2, 8}`; a third of the offsets are chosen to land on integers.
pub fn oracle_sweep<T: Scalar>(seed: u64, instances: usize) -> Result<OracleSweep> {
    let mut rng = Rng::new(seed);
    let mut sweep = OracleSweep {
        instances,
        worst_rel_error: 0.0,
        clamped_instances: 0,
        integral_instances: 0,
    };
    for _ in 0..instances {
        let heads = [1, 2, 8][rng.below(3)];
        let r = 1 + rng.below(32 / heads);
        let cfg = TalkConfig {
            dim: heads * r,
            heads,
            left_max: rng.below(20),
            right_max: rng.below(20),
            offsets_dropout: 0.0,
            normalize: rng.bernoulli(0.5),
        };
        let cfg = if cfg.normalize && cfg.left_max + cfg.right_max == 0 {
            TalkConfig { left_max: 1, ..cfg }
        } else {
            cfg
        };
        let b = 1 + rng.below(4);
        let n = 1 + rng.below(64);
        let x = Tensor::<f64>::rand_uniform(&[b, n, cfg.dim], -1.0, 1.0, &mut rng)?;
        let mut rel = Tensor::<f64>::zeros(&[b, n, heads, 2]);
        for (k, v) in rel.data_mut().iter_mut().enumerate() {
            let reach = if k % 2 == 0 { cfg.left_max } else { cfg.right_max };
            *v = if reach > 0 && rng.below(3) == 0 {
                rng.below(reach + 1) as f64 / reach as f64
            } else {
                rng.uniform(0.0, 1.0)
            };
        }
        let rel64 = RelativeOffsets::new(rel)?;
        let want = talk_oracle(&x, &rel64, &cfg)?;
        let rel_t = RelativeOffsets::new(rel64.values().cast::<T>())?;
        let (got, saved) = talk_forward(&x.cast::<T>(), &rel_t, &cfg)?;
        let got = got.cast::<f64>();
        let err = crate::gradcheck::rel_error(got.data(), want.data());
        sweep.worst_rel_error = sweep.worst_rel_error.max(err);
        let off = &saved.offsets;
        if off.left_clamped.iter().chain(&off.right_clamped).any(|&c| c) {
            sweep.clamped_instances += 1;
        }
        if off
            .left
            .iter()
            .zip(&off.raw_left)
            .chain(off.right.iter().zip(&off.raw_right))
            .any(|(a, raw)| a == raw && a.floor() == *a)
        {
            sweep.integral_instances += 1;
        }
    }
    Ok(sweep)
}

/// Core under benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchCoreKind {
    TalkConv,
    SelfAttention,
    /// Kernel width `k`, odd.
    DynamicConv(usize),
}

impl BenchCoreKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BenchCoreKind::DynamicConv(k) if k == 0 || k % 2 == 0 => {
                config_err(format!("dynamic conv width must be odd and positive, got {k}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for BenchCoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchCoreKind::TalkConv => write!(f, "talk"),
            BenchCoreKind::SelfAttention => write!(f, "attention"),
            BenchCoreKind::DynamicConv(k) => write!(f, "dynconv{k}"),
        }
    }
}

impl FromStr for BenchCoreKind {
    type Err = TalkError;

    /// `talk`, `attention`, `dynconv` (k = 31) or `dynconv<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "talk" => BenchCoreKind::TalkConv,
            "attention" => BenchCoreKind::SelfAttention,
            "dynconv" => BenchCoreKind::DynamicConv(31),
            _ => match s.strip_prefix("dynconv").map(str::parse::<usize>) {
                Some(Ok(k)) => BenchCoreKind::DynamicConv(k),
                _ => return config_err(format!("unknown core {s:?} (talk, attention, dynconv[k])")),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

fn split_dims<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, n, d] if heads > 0 && d % heads == 0 => Ok((b, n, d, d / heads)),
        [_, _, d] => config_err(format!("heads ({heads}) must divide dim ({d})")),
        _ => shape_err(format!("expected [B, n, d], got {:?}", x.shape())),
    }
}

fn reserve<T>(len: usize, limit: usize) -> Result<Vec<T>> {
    let bytes = len.saturating_mul(std::mem::size_of::<T>());
    if bytes > limit {
        return Err(TalkError::OutOfMemory { bytes: bytes as u64 });
    }
    let mut v = Vec::new();
    v.try_reserve_exact(len)
        .map_err(|_| TalkError::OutOfMemory { bytes: bytes as u64 })?;
    Ok(v)
}

/// `softmax(Q K^T / sqrt(R)) V` per head with `Q = K = V = x`, projections
/// omitted. Score matrices for every batch element and head are held at
/// once, as a batched implementation would.
pub fn attention_core<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    attention_core_with_limit(x, heads, DEFAULT_MEMORY_LIMIT)
}

pub fn attention_core_with_limit<T: Scalar>(x: &Tensor<T>, heads: usize, limit: usize) -> Result<Tensor<T>> {
    let (b, n, d, r) = split_dims(x, heads)?;
    let mut scores: Vec<T> = reserve(b * heads * n * n, limit)?;
    scores.resize(b * heads * n * n, T::zero());
    let scale = T::one() / T::lit(r as f64).sqrt();
    let mut head_x = vec![T::zero(); n * r];
    let mut head_out = vec![T::zero(); n * r];
    let mut out = vec![T::zero(); b * n * d];
    for bb in 0..b {
        for h in 0..heads {
            for t in 0..n {
                let src = &x.data()[(bb * n + t) * d + h * r..(bb * n + t) * d + (h + 1) * r];
                head_x[t * r..(t + 1) * r].copy_from_slice(src);
            }
            let s = &mut scores[(bb * heads + h) * n * n..(bb * heads + h + 1) * n * n];
            matmul(&head_x, Trans::No, &head_x, Trans::Yes, s, n, r, n, false);
            for row in s.chunks_exact_mut(n) {
                let mut max = T::neg_infinity();
                for v in row.iter_mut() {
                    *v = *v * scale;
                    if *v > max {
                        max = *v;
                    }
                }
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                let inv = T::one() / z;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            matmul(s, Trans::No, &head_x, Trans::No, &mut head_out, n, n, r, false);
            for t in 0..n {
                out[(bb * n + t) * d + h * r..(bb * n + t) * d + (h + 1) * r]
                    .copy_from_slice(&head_out[t * r..(t + 1) * r]);
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Depthwise convolution whose width-`k` kernel is generated per step from
/// the input and softmax-normalized; one kernel per head.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicConv<T> {
    pub k: usize,
    pub heads: usize,
    /// `d -> H * k` kernel logits.
    pub proj: Linear<T>,
}

impl<T: Scalar> DynamicConv<T> {
    pub fn new(dim: usize, heads: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        BenchCoreKind::DynamicConv(k).validate()?;
        if heads == 0 || dim % heads != 0 {
            return config_err(format!("heads ({heads}) must divide dim ({dim})"));
        }
        Ok(DynamicConv {
            k,
            heads,
            proj: Linear::new(dim, heads * k, rng)?,
        })
    }

    /// Softmax-normalized kernels, `[B, n, H, k]`.
    pub fn kernels(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut w = self.proj.forward(x)?;
        for row in w.data_mut().chunks_exact_mut(self.k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        Ok(w)
    }

    /// Window centred on each step, zero outside the sequence.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, d, r) = split_dims(x, self.heads)?;
        let w = self.kernels(x)?;
        let k = self.k;
        let half = (k - 1) / 2;
        let xs = x.data();
        let ws = w.data();
        let mut out = vec![T::zero(); b * n * d];
        for bb in 0..b {
            for t in 0..n {
                let dst = &mut out[(bb * n + t) * d..(bb * n + t + 1) * d];
                for h in 0..self.heads {
                    let kern = &ws[((bb * n + t) * self.heads + h) * k..][..k];
                    for (j, &wj) in kern.iter().enumerate() {
                        let Some(src_t) = (t + j).checked_sub(half).filter(|&s| s < n) else {
                            continue;
                        };
                        let src = &xs[(bb * n + src_t) * d + h * r..][..r];
                        for (o, &v) in dst[h * r..(h + 1) * r].iter_mut().zip(src) {
                            *o += wj * v;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(x.shape(), out)
    }
}

/// Convenience wrapper: fresh kernel generator, then [`DynamicConv::forward`].
pub fn dynamic_conv_core<T: Scalar>(x: &Tensor<T>, weights: &DynamicConv<T>) -> Result<Tensor<T>> {
    weights.forward(x)
}

/// A core with its weights drawn, ready to time.
#[derive(Debug, Clone)]
pub enum PreparedCore<T> {
    /// Offset generation plus the kernel.
    Talk { generator: OffsetGenerator<T>, cfg: TalkConfig },
    Attention { heads: usize, memory_limit: usize },
    Dynamic(DynamicConv<T>),
}

/// Reach used for benchmarked TaLK layers on both sides.
pub const BENCH_REACH: usize = 15;

impl<T: Scalar> PreparedCore<T> {
    pub fn new(kind: BenchCoreKind, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_reach(kind, dim, heads, BENCH_REACH, rng)
    }

    pub fn with_reach(kind: BenchCoreKind, dim: usize, heads: usize, reach: usize, rng: &mut Rng) -> Result<Self> {
        kind.validate()?;
        Ok(match kind {
            BenchCoreKind::TalkConv => {
                let cfg = TalkConfig {
                    dim,
                    heads,
                    left_max: reach,
                    right_max: reach,
                    offsets_dropout: 0.0,
                    normalize: true,
                };
                cfg.validate()?;
                PreparedCore::Talk {
                    generator: OffsetGenerator::new(dim, heads, rng)?,
                    cfg,
                }
            }
            BenchCoreKind::SelfAttention => {
                if heads == 0 || dim % heads != 0 {
                    return config_err(format!("heads ({heads}) must divide dim ({dim})"));
                }
                PreparedCore::Attention {
                    heads,
                    memory_limit: DEFAULT_MEMORY_LIMIT,
                }
            }
            BenchCoreKind::DynamicConv(k) => PreparedCore::Dynamic(DynamicConv::new(dim, heads, k, rng)?),
        })
    }

    pub fn run(&self, x: &Tensor<T>, workers: usize) -> Result<Tensor<T>> {
        match self {
            PreparedCore::Talk { generator, cfg } => {
                let rel = generator.forward(x)?;
                Ok(talk_forward_with_workers(x, &rel, cfg, workers)?.0)
            }
            PreparedCore::Attention { heads, memory_limit } => attention_core_with_limit(x, *heads, *memory_limit),
            PreparedCore::Dynamic(dc) => dc.forward(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_error;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn oracle_matches_kernel_on_random_instances() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let heads = [1, 2, 4][rng.below(3)];
            let cfg = TalkConfig {
                dim: heads * (1 + rng.below(3)),
                heads,
                left_max: rng.below(6),
                right_max: rng.below(6),
                offsets_dropout: 0.0,
                normalize: rng.bernoulli(0.5),
            };
            if cfg.validate().is_err() {
                continue;
            }
            let n = 1 + rng.below(12);
            let x = Tensor::rand_uniform(&[2, n, cfg.dim], -1.0, 1.0, &mut rng).unwrap();
            let rel = RelativeOffsets::new(
                Tensor::rand_uniform(&[2, n, heads, 2], 0.0, 1.0, &mut rng).unwrap(),
            )
            .unwrap();
            let fast = talk_forward(&x, &rel, &cfg).unwrap().0;
            let slow = talk_oracle(&x, &rel, &cfg).unwrap();
            assert!(rel_error(fast.data(), slow.data()) < 1e-12);
        }
    }

    #[test]
    fn oracle_zero_offsets_is_identity_and_integer_offsets_sum() {
        let cfg = TalkConfig {
            dim: 1,
            heads: 1,
            left_max: 2,
            right_max: 1,
            offsets_dropout: 0.0,
            normalize: false,
        };
        let x = Tensor::<f64>::from_vec(&[1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zero = RelativeOffsets::constant(1, 4, 1, 0.0, 0.0).unwrap();
        assert_eq!(talk_oracle(&x, &zero, &cfg).unwrap(), x);
        let full = RelativeOffsets::constant(1, 4, 1, 1.0, 1.0).unwrap();
        // windows [1,2], [1,3], [1,4], [2,4]
        assert_eq!(talk_oracle(&x, &full, &cfg).unwrap().data(), &[3.0, 6.0, 10.0, 9.0]);
    }

    #[test]
    fn sweep_covers_edges_in_both_precisions() {
        let s = oracle_sweep::<f64>(1, 40).unwrap();
        assert!(s.worst_rel_error < 1e-6, "{s:?}");
        assert!(s.clamped_instances > 0 && s.integral_instances > 0);
        let s = oracle_sweep::<f32>(1, 40).unwrap();
        assert!(s.worst_rel_error < 1e-4, "{s:?}");
    }

    #[test]
    fn attention_single_step_returns_value() {
        let x = rand(&[2, 1, 4], 1);
        assert_eq!(attention_core(&x, 2).unwrap(), x);
    }

    #[test]
    fn attention_uniform_keys_average_values() {
        // identical rows: scores equal, output is the mean (= the row)
        let mut x = Tensor::<f64>::zeros(&[1, 5, 2]);
        for row in x.data_mut().chunks_exact_mut(2) {
            row.copy_from_slice(&[0.3, -0.7]);
        }
        let y = attention_core(&x, 1).unwrap();
        assert!(rel_error(y.data(), x.data()) < 1e-14);
    }

    #[test]
    fn attention_matches_textbook_loop() {
        let (n, d, heads) = (6, 4, 2);
        let x = rand(&[1, n, d], 3);
        let y = attention_core(&x, heads).unwrap();
        let r = d / heads;
        let xs = x.data();
        let mut want = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| (0..r).map(|c| xs[i * d + h * r + c] * xs[j * d + h * r + c]).sum::<f64>() / (r as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for c in 0..r {
                    want[i * d + h * r + c] = (0..n).map(|j| (s[j] - m).exp() / z * xs[j * d + h * r + c]).sum();
                }
            }
        }
        assert!(rel_error(y.data(), &want) < 1e-12);
    }

    #[test]
    fn attention_over_limit_reports_oom() {
        let x = Tensor::<f32>::zeros(&[1, 64, 4]);
        match attention_core_with_limit(&x, 1, 1000) {
            Err(TalkError::OutOfMemory { bytes }) => assert_eq!(bytes, 64 * 64 * 4),
            other => panic!("expected OOM, got {other:?}"),
        }
    }

    #[test]
    fn dynamic_conv_width_one_is_identity() {
        let x = rand(&[1, 5, 4], 4);
        let dc = DynamicConv::new(4, 2, 1, &mut Rng::new(0)).unwrap();
        assert!(rel_error(dc.forward(&x).unwrap().data(), x.data()) < 1e-15);
    }

    #[test]
    fn dynamic_conv_uniform_logits_average_window() {
        let x = rand(&[1, 7, 2], 5);
        let mut dc = DynamicConv::new(2, 1, 3, &mut Rng::new(0)).unwrap();
        dc.proj.weight.fill(0.0);
        let y = dc.forward(&x).unwrap();
        for c in 0..2 {
            let mean = (x.get(&[0, 2, c]) + x.get(&[0, 3, c]) + x.get(&[0, 4, c])) / 3.0;
            assert!((y.get(&[0, 3, c]) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn dynamic_conv_matches_loop_oracle() {
        let (n, d, heads, k) = (8, 4, 2, 3);
        let x = rand(&[1, n, d], 6);
        let dc = DynamicConv::new(d, heads, k, &mut Rng::new(1)).unwrap();
        let y = dc.forward(&x).unwrap();
        let w = dc.kernels(&x).unwrap();
        let r = d / heads;
        for i in 0..n {
            for c in 0..d {
                let h = c / r;
                let mut want = 0.0;
                for j in 0..k {
                    let src = i as isize + j as isize - 1;
                    if (0..n as isize).contains(&src) {
                        want += w.get(&[0, i, h * k + j]) * x.get(&[0, src as usize, c]);
                    }
                }
                assert!((y.get(&[0, i, c]) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn core_kind_parsing() {
        assert_eq!("talk".parse::<BenchCoreKind>().unwrap(), BenchCoreKind::TalkConv);
        assert_eq!("dynconv".parse::<BenchCoreKind>().unwrap(), BenchCoreKind::DynamicConv(31));
        assert_eq!("dynconv7".parse::<BenchCoreKind>().unwrap(), BenchCoreKind::DynamicConv(7));
        assert!("dynconv4".parse::<BenchCoreKind>().is_err());
        assert!("lstm".parse::<BenchCoreKind>().is_err());
        assert_eq!(BenchCoreKind::DynamicConv(31).to_string(), "dynconv31");
    }
}
