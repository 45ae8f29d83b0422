//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::param::{Bound, ParamStore};

/// One probed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct FdProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<FdProbe>,
    pub probes: usize,
}

/// Compares analytic gradients of a scalar loss with central differences.
///
/// `loss_fn` records the loss on a fresh graph given the bound parameters. For
/// `samples` random coordinates the numeric derivative `(f(x+eps) - f(x-eps)) / (2 eps)`
/// is compared with the analytic one using `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &mut ParamStore<f64>,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(DiffError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("eps {eps:e} outside [1e-7, 1e-4]"),
        });
    }
    if params.is_empty() {
        return Err(DiffError::InvalidArgument {
            op: "finite_difference_check",
            reason: "no parameters".into(),
        });
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, true);
    let loss = loss_fn(&mut graph, &bound)?;
    if graph.value(loss).len() != 1 {
        return Err(DiffError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("loss must be scalar, got shape {:?}", graph.shape(loss)),
        });
    }
    graph.backward_scalar(loss)?;
    let analytic = params.grads(&graph, &bound);
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        probes: 0,
    };
    let mut eval = |params: &ParamStore<f64>, name: &str, index: usize| -> Result<f64> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let l = loss_fn(&mut g, &b)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(DiffError::NonFinite {
                param: name.to_string(),
                index,
                value: v,
            });
        }
        Ok(v)
    };
    for _ in 0..samples {
        let id = ids[rng.gen_range(0..ids.len())];
        let len = params.get(id).tensor.len();
        let index = rng.gen_range(0..len);
        let name = params.get(id).name.clone();
        let original = params.get(id).tensor.data()[index];
        params.tensor_mut(id).data_mut()[index] = original + eps;
        let plus = eval(params, &name, index);
        params.tensor_mut(id).data_mut()[index] = original - eps;
        let minus = eval(params, &name, index);
        params.tensor_mut(id).data_mut()[index] = original;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let a = analytic[id.index()].data()[index];
        let rel_error = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.probes += 1;
        if rel_error >= report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(FdProbe {
                param: name,
                index,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}
