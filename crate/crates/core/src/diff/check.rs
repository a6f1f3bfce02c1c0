use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Gradients smaller than this are compared in absolute terms; finite
/// differences cannot resolve relative error below it.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Outcome of comparing reverse-mode gradients against finite differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest `|analytic − numeric| / max(GRAD_FLOOR, |numeric|)` seen.
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Checks the analytic gradient of a scalar loss against fourth-order central
/// differences with step `epsilon`.
///
/// `loss` must build a deterministic `1 × 1` loss on the graph it is given
/// (inference mode is used throughout). At most `per_param` coordinates of each
/// parameter are sampled; pass `usize::MAX` to check all of them.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    loss: F,
    epsilon: f64,
    per_param: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };

    let grads = {
        let mut g = Graph::inference(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in store.ids() {
        let analytic = grads.get(store, id);
        let n = analytic.len();
        let coords: Vec<usize> = if per_param >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_param).into_vec()
        };
        for k in coords {
            let orig = store.value(id).data()[k];
            let mut at = |delta: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[k] = orig + delta;
                eval(&work)
            };
            let f_p1 = at(epsilon)?;
            let f_m1 = at(-epsilon)?;
            let f_p2 = at(2.0 * epsilon)?;
            let f_m2 = at(-2.0 * epsilon)?;
            work.value_mut(id).data_mut()[k] = orig;
            let numeric = (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * epsilon);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(GRAD_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
    }
    Ok(report)
}
