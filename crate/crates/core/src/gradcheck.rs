//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen, with the parameter name and flat index.
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares autodiff gradients of `loss_fn` against central differences with step `h`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, floor)`. At most
/// `per_tensor` randomly chosen entries of each parameter tensor are probed.
pub fn check<F, R>(
    store: &ParamStore<f64>,
    loss_fn: F,
    h: f64,
    floor: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&grads)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss during finite differences".into()));
        }
        Ok(v)
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let n = store.get(&name).unwrap().len();
        let picks = sample(rng, n, per_tensor.min(n)).into_vec();
        for i in picks {
            let orig = store.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.grad(&name).unwrap().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
