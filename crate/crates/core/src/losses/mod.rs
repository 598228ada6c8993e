//! Training objectives: CTC, attention, language classification, the
//! per-language balancing weight and their weighted combination.

pub mod ctc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ctc::{ctc_grad, ctc_loss};

/// Sum over positions of `−log p(reference token)`, in nats, not length-normalized.
pub fn attention_loss<F: Scalar>(step_log_probs: &Tensor<F>, target_with_eos: &[usize]) -> Result<F> {
    let (n, v) = step_log_probs.dims2()?;
    if n != target_with_eos.len() {
        return Err(Error::Alignment(format!(
            "{n} prediction rows for {} reference tokens",
            target_with_eos.len()
        )));
    }
    let mut total = F::zero();
    for (j, &y) in target_with_eos.iter().enumerate() {
        if y >= v {
            return Err(Error::Label { label: y, classes: v });
        }
        total -= step_log_probs.at(j, y);
    }
    Ok(total)
}

/// Cross-entropy of `logits` (length `m`) against the label `gt`.
pub fn class_loss<F: Scalar>(logits: &[F], gt: usize) -> Result<F> {
    if gt >= logits.len() {
        return Err(Error::Label {
            label: gt,
            classes: logits.len(),
        });
    }
    let lse = crate::scalar::log_sum_exp(logits);
    Ok(lse - logits[gt])
}

/// `γ_i = r_i^{-1/2}`, where `r_i` is the fraction of the batch sharing
/// sample `i`'s language.
pub fn balance_weights(batch_labels: &[usize]) -> Result<Vec<f64>> {
    if batch_labels.is_empty() {
        return Err(Error::Contract("balance weights of an empty batch".into()));
    }
    let n = batch_labels.len() as f64;
    Ok(batch_labels
        .iter()
        .map(|l| {
            let count = batch_labels.iter().filter(|&m| m == l).count() as f64;
            1.0 / (count / n).sqrt()
        })
        .collect())
}

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    /// CTC share of the recognition loss.
    pub alpha: f64,
    /// Weight of the language-classification loss.
    pub beta: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 10.0 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "need alpha in [0,1] and beta >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// `γ · (α·ctc + (1−α)·att + β·cls)`.
pub fn total_loss(ctc: f64, att: f64, cls: f64, gamma: f64, w: ObjectiveWeights) -> Result<f64> {
    w.validate()?;
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::Contract(format!("balancing weight must be positive, got {gamma}")));
    }
    if !(ctc.is_finite() && att.is_finite() && cls.is_finite()) {
        return Err(Error::Contract(format!(
            "non-finite loss component: ctc={ctc} att={att} cls={cls}"
        )));
    }
    Ok(gamma * (w.alpha * ctc + (1.0 - w.alpha) * att + w.beta * cls))
}

/// One sample's loss terms, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub att: f64,
    pub cls: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ctc: f64, att: f64, cls: f64, gamma: f64, w: ObjectiveWeights) -> Result<Self> {
        Ok(Self {
            ctc,
            att,
            cls,
            gamma,
            total: total_loss(ctc, att, cls, gamma, w)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_loss_examples() {
        let one_hot = Tensor::<f64>::from_f64(
            &[2, 3],
            &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY],
        )
        .unwrap();
        assert_eq!(attention_loss(&one_hot, &[0, 1]).unwrap(), 0.0);
        let uniform = Tensor::<f64>::full(&[3, 10], -(10f64).ln());
        let l = attention_loss(&uniform, &[1, 2, 3]).unwrap();
        assert!((l - 3.0 * 10f64.ln()).abs() < 1e-12);
        assert!((l - 6.9078).abs() < 1e-4);
        assert!(matches!(attention_loss(&uniform, &[1, 2]), Err(Error::Alignment(_))));
    }

    #[test]
    fn class_loss_examples() {
        assert!((class_loss(&[0.0f64; 3], 1).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(class_loss(&[20.0f64, 0.0, 0.0], 0).unwrap() < 1e-8);
        assert!(matches!(class_loss(&[0.0f64; 3], 3), Err(Error::Label { .. })));
    }

    #[test]
    fn balance_weight_examples() {
        assert_eq!(balance_weights(&[2, 2, 2]).unwrap(), vec![1.0; 3]);
        let w = balance_weights(&[0, 0, 0, 1]).unwrap();
        assert!((w[0] - 1.154_700_538_379_251_5).abs() < 1e-12);
        assert_eq!(w[3], 2.0);
        let w = balance_weights(&[0, 1, 2, 3]).unwrap();
        assert!(w.iter().all(|&g| (g - 2.0).abs() < 1e-12));
        assert!(balance_weights(&[]).is_err());
    }

    #[test]
    fn quadrupling_minority_halves_its_weight() {
        // 2 majority + 1 minority, then 2·4 majority… keep r_minority scaling by 4.
        let small = balance_weights(&[0, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        let big = balance_weights(&[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert!((big[7] - small[7] / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = ObjectiveWeights::default();
        assert_eq!(w, ObjectiveWeights { alpha: 0.1, beta: 10.0 });
        assert!((total_loss(1.0, 1.0, 0.0, 1.0, w).unwrap() - 1.0).abs() < 1e-15);
        let a = total_loss(0.7, 1.3, 0.2, 1.0, w).unwrap();
        let b = total_loss(0.7, 1.3, 0.2, 2.0, w).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        let ctc_only = ObjectiveWeights { alpha: 1.0, beta: 0.0 };
        assert_eq!(total_loss(0.37, 5.0, 9.0, 1.0, ctc_only).unwrap(), 0.37);
        assert!(total_loss(f64::INFINITY, 1.0, 1.0, 1.0, w).is_err());
        assert!(total_loss(1.0, 1.0, 1.0, 1.0, ObjectiveWeights { alpha: 1.5, beta: 0.0 }).is_err());
    }
}
