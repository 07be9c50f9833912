//! Summed-area tables (one-dimensional integral images) over the time axis.
//!
//! For an input `x` of shape `[B, n, d]` the table has shape `[B, n + 1, d]`
//! with `S[b][0] = 0` and `S[b][i] = S[b][i - 1] + x[b][i - 1]`. Any window
//! sum is then `S[r] - S[l - 1]`, independent of the window length.
//!
//! Two builders are provided: a sequential recurrence and a work-efficient
//! two-pass (up-sweep / down-sweep) scan whose phases run in parallel. The
//! latter performs `2 * ceil(log2 n)` dependent phases per sequence.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{shape_err, Result, TalkError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SummedAreaTable<T> {
    values: Tensor<T>,
}

impl<T: Scalar> SummedAreaTable<T> {
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    /// Sequence length `n` (the table has `n + 1` rows).
    pub fn seq_len(&self) -> usize {
        self.values.shape()[1] - 1
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Row `i` (0..=n) of sequence `b`, all channels.
    #[inline]
    pub fn row(&self, b: usize, i: usize) -> &[T] {
        let d = self.channels();
        let start = (b * (self.seq_len() + 1) + i) * d;
        &self.values.data()[start..start + d]
    }

    pub fn at(&self, b: usize, i: usize, c: usize) -> T {
        self.row(b, i)[c]
    }
}

fn dims3<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, n, d] => {
            if n == 0 {
                return shape_err("sequence length must be at least 1");
            }
            Ok((b, n, d))
        }
        _ => shape_err(format!("expected [B, n, d], got {:?}", x.shape())),
    }
}

/// Builds the table with the plain recurrence `S_i = S_{i-1} + x_i`.
pub fn sat_build_sequential<T: Scalar>(x: &Tensor<T>) -> Result<SummedAreaTable<T>> {
    let (batch, n, d) = dims3(x)?;
    let mut out = vec![T::zero(); batch * (n + 1) * d];
    let src = x.data();
    for b in 0..batch {
        let table = &mut out[b * (n + 1) * d..(b + 1) * (n + 1) * d];
        let seq = &src[b * n * d..(b + 1) * n * d];
        for i in 1..=n {
            let (done, rest) = table.split_at_mut(i * d);
            let prev = &done[(i - 1) * d..];
            let cur = &mut rest[..d];
            let xi = &seq[(i - 1) * d..i * d];
            for c in 0..d {
                cur[c] = prev[c] + xi[c];
            }
        }
    }
    Ok(SummedAreaTable {
        values: Tensor::from_vec(&[batch, n + 1, d], out)?,
    })
}

/// Depth bookkeeping from a two-pass scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanTrace {
    pub up_sweep_phases: usize,
    pub down_sweep_phases: usize,
}

impl ScanTrace {
    /// Dependent phases per sequence; the scan's parallel depth.
    pub fn phases(&self) -> usize {
        self.up_sweep_phases + self.down_sweep_phases
    }
}

fn pool(workers: usize) -> Result<Arc<ThreadPool>> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(Default::default)
        .lock()
        .expect("pool cache poisoned");
    if let Some(p) = pools.get(&workers) {
        return Ok(p.clone());
    }
    let p = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TalkError::Config(format!("thread pool: {e}")))?;
    let p = Arc::new(p);
    pools.insert(workers, p.clone());
    Ok(p)
}

fn add_rows<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Exclusive scan of `rows` (pow2 rows of width `d`) in place. Returns the
/// total and the trace.
fn two_pass_exclusive<T: Scalar>(buf: &mut [T], d: usize, pool: &ThreadPool) -> (Vec<T>, ScanTrace) {
    let rows = buf.len() / d;
    debug_assert!(rows.is_power_of_two());
    let levels = rows.trailing_zeros() as usize;
    let mut trace = ScanTrace {
        up_sweep_phases: 0,
        down_sweep_phases: 0,
    };

    pool.install(|| {
        // up-sweep: each chunk of 2s rows folds its left half's last row
        // into its right half's last row
        for level in 0..levels {
            let s = 1usize << level;
            buf.par_chunks_mut(2 * s * d).with_min_len(64).for_each(|chunk| {
                let (left, right) = chunk.split_at_mut(s * d);
                add_rows(&mut right[(s - 1) * d..], &left[(s - 1) * d..]);
            });
            trace.up_sweep_phases += 1;
        }

        let total = buf[(rows - 1) * d..].to_vec();
        buf[(rows - 1) * d..].iter_mut().for_each(|v| *v = T::zero());

        for level in (0..levels).rev() {
            let s = 1usize << level;
            buf.par_chunks_mut(2 * s * d).with_min_len(64).for_each(|chunk| {
                let (left, right) = chunk.split_at_mut(s * d);
                let l = &mut left[(s - 1) * d..];
                let r = &mut right[(s - 1) * d..];
                for c in 0..d {
                    let t = l[c];
                    l[c] = r[c];
                    r[c] += t;
                }
            });
            trace.down_sweep_phases += 1;
        }
        (total, trace)
    })
}

/// Two-pass scan regardless of `workers`, returning the phase trace.
pub fn sat_build_two_pass<T: Scalar>(
    x: &Tensor<T>,
    workers: usize,
) -> Result<(SummedAreaTable<T>, ScanTrace)> {
    let (batch, n, d) = dims3(x)?;
    if workers == 0 {
        return Err(TalkError::Config("workers must be at least 1".into()));
    }
    let pool = pool(workers)?;
    let padded = n.next_power_of_two();
    let mut out = vec![T::zero(); batch * (n + 1) * d];
    let mut buf = vec![T::zero(); padded * d];
    let mut trace = ScanTrace {
        up_sweep_phases: 0,
        down_sweep_phases: 0,
    };
    for b in 0..batch {
        buf[..n * d].copy_from_slice(&x.data()[b * n * d..(b + 1) * n * d]);
        buf[n * d..].iter_mut().for_each(|v| *v = T::zero());
        let (total, t) = two_pass_exclusive(&mut buf, d, &pool);
        trace = t;
        let table = &mut out[b * (n + 1) * d..(b + 1) * (n + 1) * d];
        // exclusive prefix E_k = S_k for k < padded; S_n is the total when
        // n fills the padded length
        let copied = n.min(padded - 1) + 1;
        table[..copied * d].copy_from_slice(&buf[..copied * d]);
        if n == padded {
            table[n * d..].copy_from_slice(&total);
        }
    }
    Ok((
        SummedAreaTable {
            values: Tensor::from_vec(&[batch, n + 1, d], out)?,
        },
        trace,
    ))
}

/// Parallel build. With one worker this is the sequential recurrence, so
/// results are bit-identical; otherwise the two-pass scan, equal up to
/// floating-point reassociation.
pub fn sat_build_parallel<T: Scalar>(x: &Tensor<T>, workers: usize) -> Result<SummedAreaTable<T>> {
    match workers {
        0 => Err(TalkError::Config("workers must be at least 1".into())),
        1 => sat_build_sequential(x),
        w => sat_build_two_pass(x, w).map(|(t, _)| t),
    }
}

/// Adjoint of the table build: `out[b][j] = sum_{k = j+1}^{n} g[b][k]`.
///
/// Since `S_k` is the sum of `x_1..x_k`, a gradient on table row `k` reaches
/// every input at or before `k`.
pub fn sat_suffix_sum<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, rows, d) = dims3(g)?;
    if rows < 2 {
        return shape_err(format!("table gradient needs n + 1 >= 2 rows, got {rows}"));
    }
    let n = rows - 1;
    let mut out = vec![T::zero(); batch * n * d];
    let src = g.data();
    let mut acc = vec![T::zero(); d];
    for b in 0..batch {
        acc.iter_mut().for_each(|v| *v = T::zero());
        for j in (0..n).rev() {
            let gk = &src[(b * rows + j + 1) * d..(b * rows + j + 2) * d];
            add_rows(&mut acc, gk);
            out[(b * n + j) * d..(b * n + j + 1) * d].copy_from_slice(&acc);
        }
    }
    Tensor::from_vec(&[batch, n, d], out)
}
