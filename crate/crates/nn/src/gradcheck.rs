//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};

/// Above this many parameter elements a seeded random subset is checked.
pub const FULL_CHECK_LIMIT: usize = 10_000;

/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not register as failures.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `group.tensor[index]` of the worst element.
    pub worst: Option<String>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar returned by `f` against
/// central differences with step `h` on every trainable parameter element.
pub fn grad_check<F>(f: F, store: &ParamStore<f64>, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;

    let elements: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|&id| !store.is_frozen(id))
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = if elements.len() > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, elements.len(), FULL_CHECK_LIMIT).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| elements[i]).collect()
    } else {
        elements
    };

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for (id, i) in chosen {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + h;
        let fp = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - h;
        let fm = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = Some(format!("{}[{i}]", store.full_name(id)));
            }
        }
    }
    Ok(report)
}
