//! Central finite differences against the tape's analytic gradients.
//!
//! Every layer and every full model carries the same contract: analytic
//! gradients must match central differences in double precision. The checker
//! samples coordinates rather than sweeping entire weight matrices.

use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `loss_and_grads` evaluates the model at the current parameters and returns
/// the scalar loss plus gradients for every trainable parameter. Relative
/// error uses `|a - fd| / max(|a|, |fd|, 1e-6)`.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    loss_and_grads: F,
    coords_per_param: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> (f64, BTreeMap<String, Tensor<f64>>),
{
    let (_, analytic) = loss_and_grads(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let paths: Vec<String> = analytic.keys().cloned().collect();
    for path in paths {
        let n = store.value(&path).unwrap().numel();
        let count = coords_per_param.min(n);
        let mut picked: Vec<usize> = if count == n {
            (0..n).collect()
        } else {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < count {
                set.insert(rng.gen_range(0..n));
            }
            set.into_iter().collect()
        };
        picked.sort_unstable();
        for idx in picked {
            let orig = store.value(&path).unwrap().data()[idx];
            store.value_mut(&path).unwrap().data_mut()[idx] = orig + h;
            let (lp, _) = loss_and_grads(store);
            store.value_mut(&path).unwrap().data_mut()[idx] = orig - h;
            let (lm, _) = loss_and_grads(store);
            store.value_mut(&path).unwrap().data_mut()[idx] = orig;

            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[&path].data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_path = path.clone();
                report.worst_index = idx;
            }
        }
    }
    report
}
