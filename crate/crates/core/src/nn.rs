//! Parameterized layers shared by the encoder, decoder and classifier.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x · W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_randn(format!("{name}.w"), &[d_in, d_out], (d_in as f64).powf(-0.5), rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], F::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "width {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.wq"), d, d, rng),
            k: Linear::new(store, &format!("{name}.wk"), d, d, rng),
            v: Linear::new(store, &format!("{name}.wv"), d, d, rng),
            o: Linear::new(store, &format!("{name}.wo"), d, d, rng),
            heads,
        }
    }

    /// Scaled dot-product attention of `queries` over `keys`; `mask` is added
    /// to the scores (use `-inf` to block a position).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        queries: NodeId,
        keys: NodeId,
        mask: Option<NodeId>,
    ) -> Result<NodeId> {
        let d = g.shape(queries)[1];
        let dh = d / self.heads;
        let q = self.q.forward(g, queries)?;
        let q = g.scale(q, F::of(1.0 / (dh as f64).sqrt()));
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let mut scores = g.matmul_bt(qh, kh)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let att = g.softmax(scores);
            outs.push(g.matmul(att, vh)?);
        }
        let cat = g.concat(&outs, 1)?;
        self.o.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Sinusoidal position codes for `len` positions of width `d`.
pub fn sinusoidal<F: Scalar>(len: usize, d: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).expect("consistent shape")
}

/// `n×n` additive mask with `-inf` above the diagonal.
pub fn causal_mask<F: Scalar>(n: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = F::neg_infinity();
        }
    }
    Tensor::new(vec![n, n], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_first_row_alternates_zero_one() {
        let pe = sinusoidal::<f64>(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask::<f32>(3);
        assert_eq!(m.at(0, 0), 0.0);
        assert_eq!(m.at(0, 2), f32::NEG_INFINITY);
        assert_eq!(m.at(2, 1), 0.0);
    }
}
