//! Transformer encoder with fresh learnable prompts at every layer.
//!
//! Layer `i` sees `[P_i ; f_{i-1}]`, attends over all `n+T` positions and
//! returns the split `(prompt_out, feats_out)`. Only the feature part is
//! carried to layer `i+1`, which receives its own bank matrix `P_{i+1}`
//! instead of the previous prompt output. The last layer keeps both parts,
//! giving the prompt embedding `e_av = [P̂_L ; f_L]` with `n+T` rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub const PROMPT_INIT_STD: f64 = 0.02;

/// One `n×d` prompt matrix per encoder layer.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub prompts: Vec<ParamId>,
    pub n: usize,
    pub d: usize,
}

/// Adds `layers` Gaussian prompt matrices named `prompts.layer{i}` to `store`.
pub fn init_prompt_bank<F: Scalar>(
    store: &mut ParamStore<F>,
    n: usize,
    d: usize,
    layers: usize,
    seed: u64,
) -> Result<PromptBank> {
    if layers == 0 {
        return Err(Error::Config("prompt bank needs at least one layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts = (0..layers)
        .map(|i| store.add_randn(format!("prompts.layer{i}"), &[n, d], PROMPT_INIT_STD, &mut rng))
        .collect();
    Ok(PromptBank { prompts, n, d })
}

/// Final-layer output `[P̂_L ; f_L]`.
#[derive(Clone, Copy, Debug)]
pub struct PromptEmbedding {
    pub values: NodeId,
    /// Leading prompt rows.
    pub prompts: usize,
    /// Trailing feature rows.
    pub frames: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

/// Pre-norm layer: attention then feed-forward, each with a residual.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, i: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let name = format!("encoder.layer{i}");
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d, cfg.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d, cfg.d * cfg.ffn_mult, rng),
        }
    }

    fn block<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, None)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }

    /// Returns `(prompt_out, feats_out)` of shapes `n×d` and `T×d`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        prompt_in: NodeId,
        feats_in: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (n, dp) = (g.shape(prompt_in)[0], g.shape(prompt_in)[1]);
        let (t, df) = (g.shape(feats_in)[0], g.shape(feats_in)[1]);
        if dp != df {
            return Err(Error::dim(
                "encoder_layer",
                format!("prompt width {dp} differs from feature width {df}"),
            ));
        }
        let x = g.concat(&[prompt_in, feats_in], 0)?;
        let y = self.block(g, x)?;
        let p = g.slice(y, 0, 0, n)?;
        let f = g.slice(y, 0, n, t)?;
        Ok((p, f))
    }
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    d: usize,
}

impl PromptEncoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            layers: (0..cfg.layers).map(|i| EncoderLayer::new(store, i, cfg, rng)).collect(),
            final_norm: LayerNorm::new(store, "encoder.final_norm", cfg.d),
            d: cfg.d,
        }
    }

    fn with_positions<F: Scalar>(&self, g: &mut Graph<'_, F>, f_av: NodeId) -> Result<NodeId> {
        let (t, d) = (g.shape(f_av)[0], g.shape(f_av)[1]);
        if d != self.d {
            return Err(Error::dim("encoder", format!("feature width {d}, encoder width {}", self.d)));
        }
        let pe = g.constant(sinusoidal(t, d));
        g.add(f_av, pe)
    }

    /// Deep prompt tuning pass producing `e_av`.
    pub fn encode_with_prompts<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        f_av: NodeId,
        bank: &PromptBank,
    ) -> Result<PromptEmbedding> {
        if bank.prompts.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "prompt bank has {} layers, encoder has {}",
                bank.prompts.len(),
                self.layers.len()
            )));
        }
        let t = g.shape(f_av)[0];
        let mut feats = self.with_positions(g, f_av)?;
        let mut last_prompt = None;
        for (layer, &p) in self.layers.iter().zip(&bank.prompts) {
            let prompt_in = g.param(p);
            let (prompt_out, feats_out) = layer.forward(g, prompt_in, feats)?;
            feats = feats_out;
            last_prompt = Some(prompt_out);
        }
        let prompt_out = last_prompt.expect("at least one layer");
        let e = g.concat(&[prompt_out, feats], 0)?;
        let values = self.final_norm.forward(g, e)?;
        Ok(PromptEmbedding {
            values,
            prompts: bank.n,
            frames: t,
        })
    }

    /// The same encoder with no prompt positions at all.
    pub fn encode_features<F: Scalar>(&self, g: &mut Graph<'_, F>, f_av: NodeId) -> Result<NodeId> {
        let mut x = self.with_positions(g, f_av)?;
        for layer in &self.layers {
            x = layer.block(g, x)?;
        }
        self.final_norm.forward(g, x)
    }
}
