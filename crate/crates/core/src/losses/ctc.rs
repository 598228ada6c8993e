//! Connectionist temporal classification over `T×V` log-probabilities.
//!
//! The target is extended with blanks to `b y1 b y2 … yU b` and the forward
//! variables `α` and backward variables `β` are run in log space. `β_t(s)`
//! excludes the emission at frame `t`, so the state occupancy is simply
//! `exp(α_t(s) + β_t(s) − log p(y|x))`.

use crate::error::{Error, Result};
use crate::scalar::{log_add, log_sum_exp, Scalar};
use crate::tensor::Tensor;

/// Minimum number of frames needed to emit `target`: one per label plus one
/// separating blank for each adjacent repeat.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_realizable(frames: usize, target: &[usize]) -> bool {
    min_frames(target) <= frames
}

fn extend(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

fn validate<F: Scalar>(log_probs: &Tensor<F>, target: &[usize], blank: usize) -> Result<(usize, usize)> {
    let (t, v) = log_probs.dims2()?;
    if t == 0 {
        return Err(Error::dim("ctc", "no frames"));
    }
    if blank >= v {
        return Err(Error::Label {
            label: blank,
            classes: v,
        });
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= v || y == blank) {
        return Err(Error::Label {
            label: bad,
            classes: v,
        });
    }
    Ok((t, v))
}

/// Log forward variables, `T × (2U+1)`.
fn forward<F: Scalar>(lp: &Tensor<F>, ext: &[usize], blank: usize) -> Vec<F> {
    let (t_len, _) = lp.dims2().expect("validated");
    let s_len = ext.len();
    let ninf = F::neg_infinity();
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp.at(0, blank);
    if s_len > 1 {
        alpha[1] = lp.at(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp.at(t, ext[s]) };
        }
    }
    alpha
}

/// Log backward variables excluding the emission at `t`, `T × (2U+1)`.
fn backward<F: Scalar>(lp: &Tensor<F>, ext: &[usize], blank: usize) -> Vec<F> {
    let (t_len, _) = lp.dims2().expect("validated");
    let s_len = ext.len();
    let ninf = F::neg_infinity();
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = F::zero();
    if s_len > 1 {
        beta[last + s_len - 2] = F::zero();
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let mut b = ninf;
            for succ in s..(s + 3).min(s_len) {
                if succ == s + 2 && (ext[succ] == blank || ext[succ] == ext[s]) {
                    continue;
                }
                if next[succ] != ninf {
                    b = log_add(b, next[succ] + lp.at(t + 1, ext[succ]));
                }
            }
            cur[s] = b;
        }
    }
    beta
}

fn log_likelihood<F: Scalar>(alpha: &[F], t_len: usize, s_len: usize) -> F {
    let last = &alpha[(t_len - 1) * s_len..];
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

/// `−log p(target | x)`; `+∞` when the target cannot be emitted in `T` frames.
pub fn ctc_loss<F: Scalar>(log_probs: &Tensor<F>, target: &[usize], blank: usize) -> Result<F> {
    let (t, _) = validate(log_probs, target, blank)?;
    if !is_realizable(t, target) {
        return Ok(F::infinity());
    }
    let ext = extend(target, blank);
    let alpha = forward(log_probs, &ext, blank);
    Ok(-log_likelihood(&alpha, t, ext.len()))
}

/// Loss and its exact gradient with respect to the logits whose row-wise
/// log-softmax is `log_probs`.
pub fn loss_and_grad<F: Scalar>(
    log_probs: &Tensor<F>,
    target: &[usize],
    blank: usize,
) -> Result<(F, Tensor<F>)> {
    let (t_len, v) = validate(log_probs, target, blank)?;
    if !is_realizable(t_len, target) {
        return Err(Error::Gradient(format!(
            "target of length {} needs {} frames, only {t_len} available",
            target.len(),
            min_frames(target)
        )));
    }
    let ext = extend(target, blank);
    let s_len = ext.len();
    let alpha = forward(log_probs, &ext, blank);
    let beta = backward(log_probs, &ext, blank);
    let log_p = log_likelihood(&alpha, t_len, s_len);
    let mut grad = vec![F::zero(); t_len * v];
    for t in 0..t_len {
        let row = log_probs.row(t);
        let lse = log_sum_exp(row);
        let g = &mut grad[t * v..(t + 1) * v];
        for (gk, &l) in g.iter_mut().zip(row) {
            *gk = (l - lse).exp();
        }
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == F::neg_infinity() || b == F::neg_infinity() {
                continue;
            }
            g[ext[s]] -= (a + b - log_p).exp();
        }
    }
    Ok((-log_p, Tensor::new(vec![t_len, v], grad)?))
}

/// `d loss / d logits` where `log_probs = log_softmax(logits)`.
pub fn ctc_grad<F: Scalar>(log_probs: &Tensor<F>, target: &[usize], blank: usize) -> Result<Tensor<F>> {
    loss_and_grad(log_probs, target, blank).map(|(_, g)| g)
}
