//! Stack of TaLK blocks between a token embedding and a softmax head.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::kernel::TalkConfig;
use crate::layers::{
    prefix_names, softmax_xent, BlockCache, BlockConfig, Embedding, LayerNorm, LayerNormCache, Linear,
    NormPlacement, Parameterized, TalkBlock, XentOutput,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::tasks::TaskBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    /// One entry per block.
    pub left_max: Vec<usize>,
    /// One entry per block; all zeros gives a causal model.
    pub right_max: Vec<usize>,
    pub offsets_dropout: f64,
    pub normalize: bool,
    pub glu: bool,
    /// Learned positions for sequences up to this length.
    pub positional: Option<usize>,
    pub activation_dropout: f64,
    pub norm: NormPlacement,
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.left_max.len()
    }

    pub fn block(&self, layer: usize) -> BlockConfig {
        BlockConfig {
            talk: TalkConfig {
                dim: self.dim,
                heads: self.heads,
                left_max: self.left_max[layer],
                right_max: self.right_max[layer],
                offsets_dropout: self.offsets_dropout,
                normalize: self.normalize,
            },
            ffn_dim: self.ffn_dim,
            glu: self.glu,
            activation_dropout: self.activation_dropout,
            norm: self.norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.left_max.is_empty() {
            return config_err("model needs at least one block");
        }
        if self.left_max.len() != self.right_max.len() {
            return config_err(format!(
                "{} left reaches but {} right reaches",
                self.left_max.len(),
                self.right_max.len()
            ));
        }
        if self.vocab == 0 {
            return config_err("vocab must be positive");
        }
        for l in 0..self.layers() {
            self.block(l).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TalkModel<T> {
    pub cfg: ModelConfig,
    pub embed: Embedding<T>,
    pub pos: Option<Embedding<T>>,
    pub blocks: Vec<TalkBlock<T>>,
    pub ln_f: LayerNorm<T>,
    pub head: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    ids: Vec<usize>,
    positions: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
    hidden: Tensor<T>,
}

impl<T> ModelCache<T> {
    pub fn blocks(&self) -> &[BlockCache<T>] {
        &self.blocks
    }
}

impl<T: Scalar> TalkModel<T> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let embed = Embedding::new(cfg.vocab, cfg.dim, rng)?;
        let pos = match cfg.positional {
            Some(len) => Some(Embedding::new(len, cfg.dim, rng)?),
            None => None,
        };
        let blocks = (0..cfg.layers())
            .map(|l| TalkBlock::new(cfg.block(l), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TalkModel {
            ln_f: LayerNorm::new(cfg.dim)?,
            head: Linear::new(cfg.dim, cfg.vocab, rng)?,
            cfg,
            embed,
            pos,
            blocks,
        })
    }

    pub fn zeros_like(&self) -> Self {
        TalkModel {
            cfg: self.cfg.clone(),
            embed: self.embed.zeros_like(),
            pos: self.pos.as_ref().map(Embedding::zeros_like),
            blocks: self.blocks.iter().map(TalkBlock::zeros_like).collect(),
            ln_f: self.ln_f.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Logits `[B, n, vocab]` for token ids `[B, n]`.
    pub fn forward(
        &self,
        ids: &[usize],
        batch: usize,
        seq_len: usize,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor<T>, ModelCache<T>)> {
        if ids.len() != batch * seq_len {
            return shape_err(format!("{} ids for a [{batch}, {seq_len}] batch", ids.len()));
        }
        let mut x = self.embed.forward(ids, &[batch, seq_len])?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
        if let Some(pos) = &self.pos {
            if seq_len > pos.vocab() {
                return shape_err(format!("sequence length {seq_len} exceeds {} positions", pos.vocab()));
            }
            x.add_assign(&pos.forward(&positions, &[batch, seq_len])?)?;
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, training, rng)?;
            caches.push(c);
            x = y;
        }
        let (hidden, ln_f) = self.ln_f.forward(&x)?;
        let logits = self.head.forward(&hidden)?;
        Ok((
            logits,
            ModelCache {
                ids: ids.to_vec(),
                positions,
                blocks: caches,
                ln_f,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &ModelCache<T>, grad_logits: &Tensor<T>) -> Result<TalkModel<T>> {
        let (g_hidden, head) = self.head.backward(&cache.hidden, grad_logits)?;
        let (mut g, ln_f) = self.ln_f.backward(&cache.ln_f, &g_hidden)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (gx, gb) = block.backward(c, &g)?;
            blocks.push(gb);
            g = gx;
        }
        blocks.reverse();
        let pos = match &self.pos {
            Some(p) => Some(p.backward(&cache.positions, &g)?),
            None => None,
        };
        Ok(TalkModel {
            cfg: self.cfg.clone(),
            embed: self.embed.backward(&cache.ids, &g)?,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    /// Masked cross-entropy on `batch` with gradients for every parameter.
    pub fn loss_and_grads(&self, batch: &TaskBatch, training: bool, rng: &mut Rng) -> Result<(XentOutput<T>, Self)> {
        let (logits, cache) = self.forward(&batch.inputs, batch.batch, batch.seq_len, training, rng)?;
        let out = softmax_xent(&logits, &batch.targets, &batch.mask)?;
        let grads = self.backward(&cache, &out.grad_logits)?;
        Ok((out, grads))
    }

    /// Loss and accuracy without gradients.
    pub fn evaluate(&self, batch: &TaskBatch, rng: &mut Rng) -> Result<XentOutput<T>> {
        let (logits, _) = self.forward(&batch.inputs, batch.batch, batch.seq_len, false, rng)?;
        softmax_xent(&logits, &batch.targets, &batch.mask)
    }
}

impl<T: Scalar> Parameterized<T> for TalkModel<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.embed.params();
        if let Some(p) = &self.pos {
            v.extend(p.params());
        }
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.ln_f.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.embed.params_mut();
        if let Some(p) = &mut self.pos {
            v.extend(p.params_mut());
        }
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.ln_f.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = prefix_names("embed", self.embed.param_names());
        if let Some(p) = &self.pos {
            v.extend(prefix_names("pos", p.param_names()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefix_names(&format!("blocks.{i}"), b.param_names()));
        }
        v.extend(prefix_names("ln_f", self.ln_f.param_names()));
        v.extend(prefix_names("head", self.head.param_names()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_param_grads, rel_error, FD_STEP};
    use crate::training::tasks::make_copy_batch;

    fn tiny(positional: bool) -> ModelConfig {
        ModelConfig {
            vocab: 6,
            dim: 4,
            ffn_dim: 6,
            heads: 2,
            left_max: vec![3, 2],
            right_max: vec![0, 0],
            offsets_dropout: 0.0,
            normalize: true,
            glu: true,
            positional: positional.then_some(8),
            activation_dropout: 0.0,
            norm: NormPlacement::Pre,
        }
    }

    #[test]
    fn model_gradients_match_fd() {
        let mut rng = Rng::new(4);
        let model = TalkModel::<f64>::new(tiny(true), &mut rng).unwrap();
        let batch = make_copy_batch(&mut rng, 2, 6, 6).unwrap();
        let (logits, cache) = model.forward(&batch.inputs, 2, 6, false, &mut rng).unwrap();
        assert_eq!(logits.shape(), &[2, 6, 6]);
        if cache.blocks().iter().any(|c| c.kernel().min_kink_distance() < 1e-3) {
            return;
        }
        let (_, grads) = model.loss_and_grads(&batch, false, &mut rng).unwrap();
        let num = numeric_param_grads(&model, FD_STEP, |m| m.evaluate(&batch, &mut Rng::new(0)).unwrap().loss);
        for ((a, n), name) in grads.params().iter().zip(&num).zip(model.param_names()) {
            assert!(rel_error(a.data(), n.data()) < 1e-5, "{name}");
        }
    }

    #[test]
    fn names_are_unique_and_aligned() {
        let model = TalkModel::<f32>::new(tiny(true), &mut Rng::new(0)).unwrap();
        let names = model.param_names();
        assert_eq!(names.len(), model.params().len());
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"blocks.1.offsets.bias".to_string()));
    }

    #[test]
    fn mismatched_reach_lists_rejected() {
        let mut cfg = tiny(false);
        cfg.right_max.push(0);
        assert!(TalkModel::<f32>::new(cfg, &mut Rng::new(0)).is_err());
    }
}
