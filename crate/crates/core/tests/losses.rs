use polyavsr::losses::ctc::{is_realizable, loss_and_grad, min_frames};
use polyavsr::losses::{
    attention_loss, balance_weights, class_loss, ctc_grad, ctc_loss, total_loss, ObjectiveWeights,
};
use polyavsr::Tensor64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform(t: usize, v: usize) -> Tensor64 {
    Tensor64::full(&[t, v], -(v as f64).ln())
}

#[test]
fn uniform_single_label_has_closed_form() {
    // Alignments of one label in T frames are blank^i y^j blank^k with j >= 1,
    // of which there are T(T+1)/2.
    for v in 2..5 {
        for t in 1..9 {
            let got = ctc_loss(&uniform(t, v), &[1], 0).unwrap();
            let paths = (t * (t + 1) / 2) as f64;
            let want = t as f64 * (v as f64).ln() - paths.ln();
            assert!((got - want).abs() < 1e-10, "T={t} V={v}: {got} vs {want}");
        }
    }
}

#[test]
fn empty_target_is_all_blank_path() {
    let lp = Tensor64::from_rows(&[vec![0.7f64.ln(), 0.3f64.ln()], vec![0.4f64.ln(), 0.6f64.ln()]]).unwrap();
    let got = ctc_loss(&lp, &[], 0).unwrap();
    assert!((got + (0.7f64 * 0.4).ln()).abs() < 1e-12);
}

#[test]
fn repeats_need_a_separating_blank() {
    assert_eq!(min_frames(&[1, 1]), 3);
    assert_eq!(min_frames(&[1, 2, 2, 2]), 6);
    assert!(!is_realizable(2, &[1, 1]));
    assert!(ctc_loss(&uniform(2, 3), &[1, 1], 0).unwrap().is_infinite());
    assert!(ctc_loss(&uniform(3, 3), &[1, 1], 0).unwrap().is_finite());
    assert!(loss_and_grad(&uniform(2, 3), &[1, 1], 0).is_err());
}

#[test]
fn rejects_blank_and_out_of_range_labels() {
    assert!(ctc_loss(&uniform(4, 3), &[0], 0).is_err());
    assert!(ctc_loss(&uniform(4, 3), &[3], 0).is_err());
}

fn log_softmax_rows(logits: &[f64], t: usize, v: usize) -> Tensor64 {
    Tensor64::new(vec![t, v], logits.to_vec()).unwrap().log_softmax()
}

#[test]
fn gradient_matches_finite_differences_of_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, v) = (7, 4);
    let target = [2, 2, 3];
    let logits = Tensor64::randn(&[t, v], 1.0, &mut rng).into_data();
    let grad = ctc_grad(&log_softmax_rows(&logits, t, v), &target, 0).unwrap();
    let eps = 1e-6;
    for i in 0..logits.len() {
        let mut up = logits.clone();
        let mut down = logits.clone();
        up[i] += eps;
        down[i] -= eps;
        let fu = ctc_loss(&log_softmax_rows(&up, t, v), &target, 0).unwrap();
        let fd = ctc_loss(&log_softmax_rows(&down, t, v), &target, 0).unwrap();
        let numeric = (fu - fd) / (2.0 * eps);
        assert!((grad.data()[i] - numeric).abs() < 1e-6, "coord {i}: {} vs {numeric}", grad.data()[i]);
    }
}

#[test]
fn gradient_rows_sum_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lp = Tensor64::randn(&[6, 5], 1.0, &mut rng).log_softmax();
    let (loss, grad) = loss_and_grad(&lp, &[1, 4], 0).unwrap();
    assert!(loss > 0.0);
    for r in 0..6 {
        assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-12);
    }
}

#[test]
fn sharpening_toward_an_alignment_lowers_the_loss() {
    let path = [0usize, 1, 1, 0, 2, 0];
    let target = [1, 2];
    let v = 3;
    let mut prev = f64::INFINITY;
    for s in 0..12 {
        let mut logits = vec![0.0; path.len() * v];
        for (t, &k) in path.iter().enumerate() {
            logits[t * v + k] = s as f64;
        }
        let loss = ctc_loss(&log_softmax_rows(&logits, path.len(), v), &target, 0).unwrap();
        assert!(loss >= 0.0);
        assert!(loss <= prev + 1e-12, "scale {s}: {loss} > {prev}");
        prev = loss;
    }
    assert!(prev < 1e-3);
}

#[test]
fn attention_loss_sums_negative_log_probs() {
    let lp = Tensor64::from_rows(&[vec![0.5f64.ln(), 0.5f64.ln()], vec![0.9f64.ln(), 0.1f64.ln()]]).unwrap();
    let got = attention_loss(&lp, &[1, 0]).unwrap();
    assert!((got + (0.5f64 * 0.9).ln()).abs() < 1e-12);
    assert!(attention_loss(&lp, &[1]).is_err());
}

#[test]
fn class_loss_is_softmax_cross_entropy() {
    let z = [1.0, -2.0, 0.5];
    let denom: f64 = z.iter().map(|v: &f64| v.exp()).sum();
    for gt in 0..3 {
        let want = -(z[gt].exp() / denom).ln();
        assert!((class_loss(&z, gt).unwrap() - want).abs() < 1e-12);
    }
    assert!(class_loss(&z, 3).is_err());
}

#[test]
fn balance_weights_follow_inverse_root_share() {
    let g = balance_weights(&[0, 0, 0, 1]).unwrap();
    assert!((g[0] - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((g[3] - 2.0).abs() < 1e-12);
    assert_eq!(balance_weights(&[2, 2, 2]).unwrap(), vec![1.0; 3]);
    assert!(balance_weights(&[]).is_err());
    // A rarer language never gets a smaller weight.
    let g = balance_weights(&[0, 0, 0, 0, 1, 1, 2]).unwrap();
    assert!(g[0] < g[4] && g[4] < g[6]);
}

#[test]
fn total_loss_combines_terms() {
    let w = ObjectiveWeights { alpha: 0.25, beta: 2.0 };
    let got = total_loss(4.0, 8.0, 1.0, 1.5, w).unwrap();
    assert!((got - 1.5 * (1.0 + 6.0 + 2.0)).abs() < 1e-12);
    assert!(total_loss(1.0, 1.0, 1.0, 1.0, ObjectiveWeights { alpha: 1.5, beta: 1.0 }).is_err());
    assert!(total_loss(1.0, 1.0, 1.0, 0.0, w).is_err());
    assert!(total_loss(f64::INFINITY, 1.0, 1.0, 1.0, w).is_err());
    let d = ObjectiveWeights::default();
    assert_eq!((d.alpha, d.beta), (0.1, 10.0));
}
