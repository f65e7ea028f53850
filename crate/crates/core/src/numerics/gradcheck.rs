//! Reverse-mode vs central-difference gradient verification.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Element, Tensor};
use super::var::{Bound, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error instead of blowing up.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub per_param: BTreeMap<String, f64>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `loss_fn` with
/// `(loss(θ+eps) − loss(θ−eps)) / 2eps` on up to `samples_per_tensor`
/// coordinates of every parameter (all of them if the tensor is smaller).
pub fn finite_diff_check<F, L>(
    loss_fn: L,
    params: &BTreeMap<String, Tensor<F>>,
    eps: f64,
    tolerance: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Element,
    L: Fn(&Bound<F>) -> Result<Var<F>>,
{
    let bound = Bound::new(params, true);
    let loss = loss_fn(&bound)?;
    let grads = bound.gradients(&loss.backward());
    drop(bound);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |p: &BTreeMap<String, Tensor<F>>| -> Result<f64> {
        Ok(loss_fn(&Bound::new(p, false))?.item().to_f64_lossless())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: BTreeMap::new(),
        checked: 0,
        tolerance,
    };
    for (name, tensor) in params {
        let n = tensor.len();
        let mut idx: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, samples_per_tensor).into_vec()
        };
        idx.sort_unstable();
        let analytic = grads.get(name).expect("bound parameter");
        let mut worst_here = 0.0f64;
        for i in idx {
            let original = tensor.data()[i];
            let h = F::of(eps);
            work.get_mut(name).unwrap().data_mut()[i] = original + h;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = original - h;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i].to_f64_lossless();
            let err = relative_error(a, numeric);
            worst_here = worst_here.max(err);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
        report.per_param.insert(name.clone(), worst_here);
    }
    Ok(report)
}
