//! Synthetic probes and byte-level text batches.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::Rng;

/// Token id used for positions whose content must be recalled.
pub const BLANK: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    CharLm,
}

/// Token ids `[B, n]` row-major, with per-position targets and loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

fn check_vocab(vocab: usize) -> Result<()> {
    if vocab < 4 {
        return config_err(format!("vocab must be at least 4, got {vocab}"));
    }
    Ok(())
}

/// `[p_1 .. p_m, BLANK x m]` with the pattern drawn from `1..vocab`; the
/// second half must reproduce the first, so each target sits `m = n / 2`
/// steps behind its position.
pub fn make_copy_batch(rng: &mut Rng, batch: usize, n: usize, vocab: usize) -> Result<TaskBatch> {
    check_vocab(vocab)?;
    if n < 2 || n % 2 != 0 {
        return config_err(format!("copy task needs an even length >= 2, got {n}"));
    }
    let m = n / 2;
    let mut out = TaskBatch {
        batch,
        seq_len: n,
        inputs: Vec::with_capacity(batch * n),
        targets: Vec::with_capacity(batch * n),
        mask: Vec::with_capacity(batch * n),
    };
    for _ in 0..batch {
        let pattern: Vec<usize> = (0..m).map(|_| 1 + rng.below(vocab - 1)).collect();
        out.inputs.extend(&pattern);
        out.inputs.extend(std::iter::repeat(BLANK).take(m));
        out.targets.extend(&pattern);
        out.targets.extend(&pattern);
        out.mask.extend(std::iter::repeat(false).take(m));
        out.mask.extend(std::iter::repeat(true).take(m));
    }
    Ok(out)
}

/// Every position predicts the token mirrored about the centre; needs
/// context on both sides.
pub fn make_reverse_batch(rng: &mut Rng, batch: usize, n: usize, vocab: usize) -> Result<TaskBatch> {
    check_vocab(vocab)?;
    if n == 0 {
        return config_err("reverse task needs n >= 1");
    }
    let mut out = TaskBatch {
        batch,
        seq_len: n,
        inputs: Vec::with_capacity(batch * n),
        targets: Vec::with_capacity(batch * n),
        mask: vec![true; batch * n],
    };
    for _ in 0..batch {
        let seq: Vec<usize> = (0..n).map(|_| 1 + rng.below(vocab - 1)).collect();
        out.targets.extend(seq.iter().rev());
        out.inputs.extend(seq);
    }
    Ok(out)
}

/// Random windows of `text`; targets are the next byte.
pub fn make_char_lm_batch(rng: &mut Rng, text: &[u8], batch: usize, n: usize) -> Result<TaskBatch> {
    if text.len() < n + 1 {
        return config_err(format!("text of {} bytes is shorter than n + 1 = {}", text.len(), n + 1));
    }
    let mut out = TaskBatch {
        batch,
        seq_len: n,
        inputs: Vec::with_capacity(batch * n),
        targets: Vec::with_capacity(batch * n),
        mask: vec![true; batch * n],
    };
    for _ in 0..batch {
        let start = rng.below(text.len() - n);
        let w = &text[start..start + n + 1];
        out.inputs.extend(w[..n].iter().map(|&b| b as usize));
        out.targets.extend(w[1..].iter().map(|&b| b as usize));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_batch_layout() {
        let b = make_copy_batch(&mut Rng::new(3), 2, 32, 16).unwrap();
        for s in 0..2 {
            let inp = &b.inputs[s * 32..(s + 1) * 32];
            let tgt = &b.targets[s * 32..(s + 1) * 32];
            let mask = &b.mask[s * 32..(s + 1) * 32];
            assert_eq!(&tgt[16..], &inp[..16]);
            assert!(inp[16..].iter().all(|&t| t == BLANK));
            assert!(inp[..16].iter().all(|&t| (1..16).contains(&t)));
            assert!(mask[..16].iter().all(|m| !m) && mask[16..].iter().all(|&m| m));
        }
    }

    #[test]
    fn batches_reproducible_and_checked() {
        let a = make_copy_batch(&mut Rng::new(9), 3, 8, 6).unwrap();
        let b = make_copy_batch(&mut Rng::new(9), 3, 8, 6).unwrap();
        assert_eq!(a, b);
        assert!(make_copy_batch(&mut Rng::new(0), 1, 8, 3).is_err());
        assert!(make_copy_batch(&mut Rng::new(0), 1, 7, 8).is_err());
        assert!(make_reverse_batch(&mut Rng::new(0), 1, 8, 2).is_err());
    }

    #[test]
    fn reverse_and_char_lm_targets() {
        let b = make_reverse_batch(&mut Rng::new(1), 1, 5, 8).unwrap();
        let mut rev = b.inputs.clone();
        rev.reverse();
        assert_eq!(b.targets, rev);

        let text = b"abcdefghij";
        let b = make_char_lm_batch(&mut Rng::new(2), text, 4, 3).unwrap();
        for s in 0..4 {
            for t in 0..3 {
                assert_eq!(b.targets[s * 3 + t], b.inputs[s * 3 + t] + 1);
            }
        }
        assert!(make_char_lm_batch(&mut Rng::new(2), text, 1, 10).is_err());
    }
}
