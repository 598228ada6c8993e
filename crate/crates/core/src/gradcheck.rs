//! Central finite-difference verification of recorded gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width; must lie in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Maximum number of coordinates compared.
    pub samples: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error, so gradients that are zero
    /// up to roundoff are compared absolutely.
    pub floor: f64,
    /// Record graphs in training mode (batch statistics in batch norm).
    pub train: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: 200,
            seed: 0,
            floor: 1e-5,
            train: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU branch; the one-sided
    /// slopes differ there, so they are excluded.
    pub skipped_kinks: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
}

fn evaluate<F, B>(store: &ParamStore<F>, build: &B, train: bool) -> Result<(f64, u64)>
where
    F: Scalar,
    B: for<'g> Fn(&mut Graph<'g, F>) -> Result<NodeId>,
{
    let mut g = Graph::with_params(store, train);
    let out = build(&mut g)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    Ok((g.value(out).item().f64(), g.kink_signature()))
}

/// Compares autodiff gradients of `build` with respect to `params` against
/// `(f(p+eps) − f(p−eps)) / 2eps`, returning the largest relative error over
/// the sampled coordinates.
pub fn grad_check<F, B>(
    store: &mut ParamStore<F>,
    params: &[ParamId],
    build: B,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Scalar,
    B: for<'g> Fn(&mut Graph<'g, F>) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!("grad_check eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(store, opts.train);
        let out = build(&mut g)?;
        g.backward(out)?;
        params
            .iter()
            .map(|&p| {
                let n = store.get(p).len();
                match g.param_node(p).and_then(|node| g.grad(node)) {
                    Some(gr) => gr.iter().map(|x| x.f64()).collect(),
                    None => vec![0.0; n],
                }
            })
            .collect()
    };

    let (base, base_sig) = evaluate(store, &build, opts.train)?;
    let (again, _) = evaluate(store, &build, opts.train)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism {
            first: base,
            second: again,
        });
    }

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, &p)| (0..store.get(p).len()).map(move |j| (pi, j)))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
        worst_values: None,
    };
    for (pi, j) in coords {
        if report.checked >= opts.samples {
            break;
        }
        let p = params[pi];
        let orig = store.get(p).data()[j];
        store.get_mut(p).data_mut()[j] = F::of(orig.f64() + opts.eps);
        let plus = evaluate(store, &build, opts.train);
        store.get_mut(p).data_mut()[j] = F::of(orig.f64() - opts.eps);
        let minus = evaluate(store, &build, opts.train);
        store.get_mut(p).data_mut()[j] = orig;
        let ((fp, sp), (fm, sm)) = (plus?, minus?);
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.eps);
        let a = analytic[pi][j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.name(p).to_string(), j));
            report.worst_values = Some((a, numeric));
        }
    }
    Ok(report)
}
