//! Central finite-difference checks for every hand-written backward pass.

use serde::Serialize;

use crate::error::{config_err, Result};
use crate::kernel::{talk_backward, talk_forward, RelativeOffsets, TalkConfig};
use crate::layers::{
    glu_backward, glu_forward, softmax_xent, swish_backward, swish_forward, BlockConfig, Embedding,
    LayerNorm, Linear, NormPlacement, OffsetGenerator, Parameterized, TalkBlock,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for single layers and the bare kernel.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Tolerance for a full block.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Minimum distance of any kernel boundary from a kink for a trial to count.
const KINK_MARGIN: f64 = 1e-3;

/// `d f / d x` by central differences, one coordinate at a time.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Central differences for every parameter of `model`, in `params()` order.
pub fn numeric_param_grads<M>(model: &M, h: f64, mut f: impl FnMut(&M) -> f64) -> Vec<Tensor<f64>>
where
    M: Parameterized<f64> + Clone,
{
    let mut probe = model.clone();
    let count = model.params().len();
    let mut grads = Vec::with_capacity(count);
    for p in 0..count {
        let mut g = Tensor::zeros_like(model.params()[p]);
        for i in 0..g.len() {
            let orig = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.params_mut()[p].data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.params_mut()[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// `max |a - n| / max(max |a|, max |n|)`; zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut diff = 0f64;
    let mut scale = 0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst error seen for one layer type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub layer: String,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    pub trials: usize,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub rows: Vec<GradcheckRow>,
    /// Offset-gradient entries under a binding clamp that were not exactly 0.
    pub clamped_nonzero: usize,
    /// Offset-gradient entries checked under a binding clamp.
    pub clamped_checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.clamped_nonzero == 0 && self.rows.iter().all(GradcheckRow::passed)
    }
}

/// Deliberate backward faults, used as negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    /// Scales the kernel's input gradient by `1 + 1e-3`.
    KernelInput,
}

struct Tracker {
    rows: Vec<GradcheckRow>,
}

impl Tracker {
    fn record(&mut self, layer: &str, tolerance: f64, err: f64) {
        match self.rows.iter_mut().find(|r| r.layer == layer) {
            Some(row) => {
                row.worst_rel_error = row.worst_rel_error.max(err);
                row.trials += 1;
            }
            None => self.rows.push(GradcheckRow {
                layer: layer.into(),
                worst_rel_error: err,
                tolerance,
                trials: 1,
            }),
        }
    }
}

fn rand(shape: &[usize], rng: &mut Rng) -> Result<Tensor<f64>> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Random kernel instance whose boundaries sit at least `KINK_MARGIN` away
/// from any kink, or `None` if none was found.
pub fn random_kernel_case(
    rng: &mut Rng,
    max_n: usize,
    heads: &[usize],
    max_width: usize,
) -> Result<Option<(TalkConfig, Tensor<f64>, Tensor<f64>)>> {
    for _ in 0..50 {
        let h = heads[rng.below(heads.len())];
        let r = 1 + rng.below(max_width);
        let cfg = TalkConfig {
            dim: h * r,
            heads: h,
            left_max: rng.below(5),
            right_max: rng.below(4),
            offsets_dropout: 0.0,
            normalize: rng.bernoulli(0.5),
        };
        if cfg.validate().is_err() {
            continue;
        }
        let b = 1 + rng.below(2);
        let n = 1 + rng.below(max_n);
        let x = rand(&[b, n, cfg.dim], rng)?;
        let rel = Tensor::rand_uniform(&[b, n, h, 2], 0.001, 0.999, rng)?;
        let (_, saved) = talk_forward(&x, &RelativeOffsets::new(rel.clone())?, &cfg)?;
        if saved.min_kink_distance() > KINK_MARGIN {
            return Ok(Some((cfg, x, rel)));
        }
    }
    Ok(None)
}

fn check_kernel(rng: &mut Rng, t: &mut Tracker, report_clamps: &mut (usize, usize), corruption: Corruption) -> Result<()> {
    let Some((cfg, x, rel)) = random_kernel_case(rng, 6, &[1, 3], 2)? else {
        return Ok(());
    };
    let w = rand(&[x.shape()[0], x.shape()[1], cfg.dim], rng)?;
    let loss = |x: &Tensor<f64>, rel: &Tensor<f64>| {
        let rel = RelativeOffsets::new(rel.clone()).expect("probe stays in range");
        dot(&talk_forward(x, &rel, &cfg).expect("valid case").0, &w)
    };
    let (_, saved) = talk_forward(&x, &RelativeOffsets::new(rel.clone())?, &cfg)?;
    let (mut gx, grel) = talk_backward(&w, &saved)?;
    if corruption == Corruption::KernelInput {
        gx = gx.scale(1.0 + 1e-3);
    }
    let num_x = numeric_grad(&x, FD_STEP, |x| loss(x, &rel));
    let num_rel = numeric_grad(&rel, FD_STEP, |r| loss(&x, r));
    t.record("talk_kernel.x", LAYER_TOLERANCE, rel_error(gx.data(), num_x.data()));
    t.record("talk_kernel.offsets", LAYER_TOLERANCE, rel_error(grel.data(), num_rel.data()));
    let off = &saved.offsets;
    for k in 0..off.left.len() {
        for (clamped, g) in [(off.left_clamped[k], grel.data()[2 * k]), (off.right_clamped[k], grel.data()[2 * k + 1])] {
            if clamped {
                report_clamps.1 += 1;
                if g != 0.0 {
                    report_clamps.0 += 1;
                }
            }
        }
    }
    Ok(())
}

fn check_layers(rng: &mut Rng, t: &mut Tracker) -> Result<()> {
    let rows = 1 + rng.below(4);
    let fi = 1 + rng.below(5);
    let fo = 1 + rng.below(5);

    let lin = Linear::<f64>::new(fi, fo, rng)?;
    let mut lin = lin;
    lin.bias = rand(&[fo], rng)?;
    let x = rand(&[rows, fi], rng)?;
    let w = rand(&[rows, fo], rng)?;
    let (gx, gp) = lin.backward(&x, &w)?;
    let nx = numeric_grad(&x, FD_STEP, |x| dot(&lin.forward(x).unwrap(), &w));
    let np = numeric_param_grads(&lin, FD_STEP, |l| dot(&l.forward(&x).unwrap(), &w));
    let mut err = rel_error(gx.data(), nx.data());
    for (a, n) in gp.params().iter().zip(&np) {
        err = err.max(rel_error(a.data(), n.data()));
    }
    t.record("linear", LAYER_TOLERANCE, err);

    let x = rand(&[rows, 2 * fi], rng)?;
    let w = rand(&[rows, fi], rng)?;
    let g = glu_backward(&x, &w)?;
    let n = numeric_grad(&x, FD_STEP, |x| dot(&glu_forward(x).unwrap(), &w));
    t.record("glu", LAYER_TOLERANCE, rel_error(g.data(), n.data()));

    let x = rand(&[rows, fi], rng)?.scale(3.0);
    let w = rand(&[rows, fi], rng)?;
    let g = swish_backward(&x, &w)?;
    let n = numeric_grad(&x, FD_STEP, |x| dot(&swish_forward(x), &w));
    t.record("swish", LAYER_TOLERANCE, rel_error(g.data(), n.data()));

    let d = 3 + rng.below(5);
    let mut ln = LayerNorm::<f64>::new(d)?;
    ln.gamma = rand(&[d], rng)?;
    ln.beta = rand(&[d], rng)?;
    let x = rand(&[rows, d], rng)?;
    let w = rand(&[rows, d], rng)?;
    let (_, cache) = ln.forward(&x)?;
    let (gx, gp) = ln.backward(&cache, &w)?;
    let nx = numeric_grad(&x, FD_STEP, |x| dot(&ln.forward(x).unwrap().0, &w));
    let np = numeric_param_grads(&ln, FD_STEP, |l| dot(&l.forward(&x).unwrap().0, &w));
    let mut err = rel_error(gx.data(), nx.data());
    for (a, n) in gp.params().iter().zip(&np) {
        err = err.max(rel_error(a.data(), n.data()));
    }
    t.record("layernorm", LAYER_TOLERANCE, err);

    let vocab = 2 + rng.below(6);
    let emb = Embedding::<f64>::new(vocab, d, rng)?;
    let ids: Vec<usize> = (0..rows).map(|_| rng.below(vocab)).collect();
    let w = rand(&[rows, d], rng)?;
    let g = emb.backward(&ids, &w)?;
    let n = numeric_param_grads(&emb, FD_STEP, |e| dot(&e.forward(&ids, &[rows]).unwrap(), &w));
    t.record("embedding", LAYER_TOLERANCE, rel_error(g.table.data(), n[0].data()));

    let logits = rand(&[rows, vocab], rng)?.scale(2.0);
    let targets: Vec<usize> = (0..rows).map(|_| rng.below(vocab)).collect();
    let mut mask: Vec<bool> = (0..rows).map(|_| rng.bernoulli(0.7)).collect();
    mask[0] = true;
    let out = softmax_xent(&logits, &targets, &mask)?;
    let n = numeric_grad(&logits, FD_STEP, |l| softmax_xent(l, &targets, &mask).unwrap().loss);
    t.record("softmax_xent", LAYER_TOLERANCE, rel_error(out.grad_logits.data(), n.data()));

    let heads = 1 + rng.below(3);
    let r = 1 + rng.below(3);
    let mut gen = OffsetGenerator::<f64>::new(heads * r, heads, rng)?;
    gen.bias = rand(&[heads, 2], rng)?;
    let x = rand(&[1, rows, heads * r], rng)?;
    let w = rand(&[1, rows, heads, 2], rng)?;
    let rel = gen.forward(&x)?;
    let (gx, gp) = gen.backward(&x, &rel, &w)?;
    let nx = numeric_grad(&x, FD_STEP, |x| dot(gen.forward(x).unwrap().values(), &w));
    let np = numeric_param_grads(&gen, FD_STEP, |g| dot(g.forward(&x).unwrap().values(), &w));
    let mut err = rel_error(gx.data(), nx.data());
    for (a, n) in gp.params().iter().zip(&np) {
        err = err.max(rel_error(a.data(), n.data()));
    }
    t.record("offset_generator", LAYER_TOLERANCE, err);
    Ok(())
}

/// One random block, checked on the input and every parameter. Returns
/// `None` when no kink-free instance was drawn.
pub fn block_trial(rng: &mut Rng) -> Result<Option<f64>> {
    for _ in 0..20 {
        let heads = [1, 2, 4][rng.below(3)];
        let cfg = BlockConfig {
            talk: TalkConfig {
                dim: 8,
                heads,
                left_max: 1 + rng.below(4),
                right_max: rng.below(4),
                offsets_dropout: 0.0,
                normalize: rng.bernoulli(0.5),
            },
            ffn_dim: 8 + rng.below(9),
            glu: rng.bernoulli(0.5),
            activation_dropout: 0.0,
            norm: if rng.bernoulli(0.5) { NormPlacement::Pre } else { NormPlacement::Post },
        };
        let mut block = TalkBlock::<f64>::new(cfg, rng)?;
        for p in block.params_mut() {
            // move norms and biases off their constant init
            if p.data().iter().all(|&v| v == p.data()[0]) {
                let noise = Tensor::rand_uniform(p.shape(), -0.5, 0.5, rng)?;
                p.add_assign(&noise)?;
            }
        }
        let n = 3 + rng.below(6);
        let x = rand(&[1, n, 8], rng)?;
        let w = rand(&[1, n, 8], rng)?;
        let (_, cache) = block.forward(&x, false, rng)?;
        if cache.kernel().min_kink_distance() < KINK_MARGIN {
            continue;
        }
        let (gx, gp) = block.backward(&cache, &w)?;
        let mut scratch = Rng::new(0);
        let nx = numeric_grad(&x, FD_STEP, |x| dot(&block.forward(x, false, &mut scratch).unwrap().0, &w));
        let np = numeric_param_grads(&block, FD_STEP, |b| dot(&b.forward(&x, false, &mut scratch).unwrap().0, &w));
        let mut err = rel_error(gx.data(), nx.data());
        for (a, n) in gp.params().iter().zip(&np) {
            err = err.max(rel_error(a.data(), n.data()));
        }
        return Ok(Some(err));
    }
    Ok(None)
}

/// Runs `trials` random checks for each layer type.
pub fn run_gradcheck(seed: u64, trials: usize, corruption: Corruption) -> Result<GradcheckReport> {
    if trials == 0 {
        return config_err("trials must be at least 1");
    }
    let mut rng = Rng::new(seed);
    let mut t = Tracker { rows: Vec::new() };
    let mut clamps = (0, 0);
    for _ in 0..trials {
        check_kernel(&mut rng, &mut t, &mut clamps, corruption)?;
        check_layers(&mut rng, &mut t)?;
        if let Some(err) = block_trial(&mut rng)? {
            t.record("talk_block", BLOCK_TOLERANCE, err);
        }
    }
    Ok(GradcheckReport {
        seed,
        rows: t.rows,
        clamped_nonzero: clamps.0,
        clamped_checked: clamps.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_basics() {
        assert_eq!(rel_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((rel_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
        assert_eq!(rel_error(&[f64::NAN], &[1.0]), f64::INFINITY);
    }

    #[test]
    fn numeric_grad_of_quadratic() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_grad(&x, FD_STEP, |x| x.data().iter().map(|v| v * v).sum());
        assert!(rel_error(g.data(), &[2.0, -4.0, 1.0]) < 1e-9);
    }

    #[test]
    fn default_run_passes_and_is_reproducible() {
        let a = run_gradcheck(7, 3, Corruption::None).unwrap();
        assert!(a.passed(), "{a:?}");
        assert!(a.clamped_checked > 0);
        let b = run_gradcheck(7, 3, Corruption::None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_backward_fails() {
        let r = run_gradcheck(7, 3, Corruption::KernelInput).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_gradcheck(1, 0, Corruption::None).is_err());
    }
}
