//! Language classifier over the prompt embedding.
//!
//! `e_av` is read channel-major (`d × (n+T)`) through four
//! conv1d → batch norm → ReLU blocks, averaged over the sequence axis and
//! mapped to `m` logits by linear → ReLU → linear.

use rand::Rng;

use crate::autograd::{BatchNormParams, Graph, NodeId};
use crate::encoder::PromptEmbedding;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONV_BLOCKS: usize = 4;
const KERNEL: usize = 3;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LanguageLabel {
    pub id: usize,
}

impl LanguageLabel {
    pub fn new(id: usize, classes: usize) -> Result<Self> {
        if id >= classes {
            return Err(Error::Label { label: id, classes });
        }
        Ok(Self { id })
    }

    /// Display code (`L0`, `L1`, …).
    pub fn code(&self) -> String {
        format!("L{}", self.id)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    kernel: ParamId,
    bn: BatchNormParams,
}

#[derive(Clone, Debug)]
pub struct LangClassifier {
    blocks: Vec<ConvBlock>,
    fc1: Linear,
    fc2: Linear,
    d: usize,
    classes: usize,
}

impl LangClassifier {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, d: usize, classes: usize, rng: &mut R) -> Self {
        let blocks = (0..CONV_BLOCKS)
            .map(|i| {
                let name = format!("classifier.block{i}");
                ConvBlock {
                    kernel: store.add_randn(
                        format!("{name}.conv.kernel"),
                        &[d, d, KERNEL],
                        ((KERNEL * d) as f64).powf(-0.5),
                        rng,
                    ),
                    bn: BatchNormParams {
                        gain: store.add(format!("{name}.bn.gain"), Tensor::full(&[d], F::one())),
                        bias: store.add(format!("{name}.bn.bias"), Tensor::zeros(&[d])),
                        running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[d])),
                        running_var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[d], F::one())),
                        momentum: BN_MOMENTUM,
                        eps: BN_EPS,
                    },
                }
            })
            .collect();
        Self {
            blocks,
            fc1: Linear::new(store, "classifier.fc1", d, d, rng),
            fc2: Linear::new(store, "classifier.fc2", d, classes, rng),
            d,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Logits (`1×m` nodes) for a batch of embeddings. Batch-norm statistics
    /// are shared across the whole batch in training graphs.
    pub fn classify_batch<F: Scalar>(&self, g: &mut Graph<'_, F>, batch: &[PromptEmbedding]) -> Result<Vec<NodeId>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut xs = Vec::with_capacity(batch.len());
        for e in batch {
            let w = g.shape(e.values)[1];
            if w != self.d {
                return Err(Error::dim(
                    "classify",
                    format!("embedding width {w}, classifier width {}", self.d),
                ));
            }
            xs.push(g.transpose(e.values)?);
        }
        let lens: Vec<usize> = xs.iter().map(|&x| g.shape(x)[1]).collect();
        let total: usize = lens.iter().sum();
        for block in &self.blocks {
            let k = g.param(block.kernel);
            let convs = xs
                .iter()
                .map(|&x| g.conv1d(x, k, 1, KERNEL / 2))
                .collect::<Result<Vec<_>>>()?;
            let cat = if convs.len() == 1 { convs[0] } else { g.concat(&convs, 1)? };
            let cat = g.reshape(cat, &[1, self.d, total])?;
            let normed = g.batch_norm1d(cat, &block.bn)?;
            let normed = g.reshape(normed, &[self.d, total])?;
            let normed = g.relu(normed);
            let mut off = 0;
            xs.clear();
            for &len in &lens {
                xs.push(if lens.len() == 1 { normed } else { g.slice(normed, 1, off, len)? });
                off += len;
            }
        }
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let pooled = g.mean_cols(x)?;
            let pooled = g.reshape(pooled, &[1, self.d])?;
            let h = self.fc1.forward(g, pooled)?;
            let h = g.relu(h);
            out.push(self.fc2.forward(g, h)?);
        }
        Ok(out)
    }

    pub fn classify<F: Scalar>(&self, g: &mut Graph<'_, F>, e_av: &PromptEmbedding) -> Result<NodeId> {
        Ok(self.classify_batch(g, std::slice::from_ref(e_av))?[0])
    }
}

/// Cross-entropy node for one `1×m` logit row.
pub fn class_loss_node<F: Scalar>(g: &mut Graph<'_, F>, logits: NodeId, gt: usize) -> Result<NodeId> {
    let m = g.value(logits).len();
    if gt >= m {
        return Err(Error::Label { label: gt, classes: m });
    }
    let lp = g.log_softmax(logits);
    let picked = g.pick_sum(lp, &[gt])?;
    Ok(g.scale(picked, -F::one()))
}

/// Argmax with ties broken towards the lowest id.
pub fn predict_language<F: Scalar>(logits: &[F]) -> LanguageLabel {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    LanguageLabel { id: best }
}
