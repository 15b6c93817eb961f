//! Central-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Worst coordinate found by [`grad_check_full`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Denominator floor of [`grad_check_full`] as a fraction of the largest
/// gradient magnitude in the check.
pub const FLOOR_FRACTION: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Gradient check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let report = grad_check_full(|g, _, xs| f(g, xs[0]), std::slice::from_ref(x), &mut [], eps)?;
    Ok(report.max_rel_error)
}

/// Gradient check over several input tensors and every trainable parameter of
/// `stores`. `f` builds a one-element loss from the input leaves.
pub fn grad_check_full<F>(
    f: F,
    inputs: &[Tensor<f64>],
    stores: &mut [ParamStore<f64>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[ParamStore<f64>], &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(TensorError::invalid("grad_check", format!("eps must be > 0, got {eps}")));
    }
    let eval = |inputs: &[Tensor<f64>], stores: &[ParamStore<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, stores, &ids)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(TensorError::invalid("grad_check", "function must return one element"));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, stores, &ids)?;
    let grads = g.backward(out)?;

    let mut coords: Vec<(String, f64, f64)> = Vec::new();
    let mut record = |label: String, a: f64, n: f64| coords.push((label, a, n));

    let mut xs = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.node(*id).unwrap_or(&zero).clone();
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let plus = eval(&xs, stores)?;
            xs[k].data_mut()[i] = orig - eps;
            let minus = eval(&xs, stores)?;
            xs[k].data_mut()[i] = orig;
            record(format!("input{k}[{i}]"), analytic.data()[i], (plus - minus) / (2.0 * eps));
        }
    }

    for s in 0..stores.len() {
        for pid in stores[s].trainable_ids() {
            let shape = stores[s].get(pid).shape().to_vec();
            let analytic = grads
                .param(&stores[s], pid)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(shape));
            let name = stores[s].param(pid).name.clone();
            for i in 0..analytic.len() {
                let orig = stores[s].get(pid).data()[i];
                stores[s].get_mut(pid).data_mut()[i] = orig + eps;
                let plus = eval(inputs, stores)?;
                stores[s].get_mut(pid).data_mut()[i] = orig - eps;
                let minus = eval(inputs, stores)?;
                stores[s].get_mut(pid).data_mut()[i] = orig;
                record(format!("{name}[{i}]"), analytic.data()[i], (plus - minus) / (2.0 * eps));
            }
        }
    }
    Ok(summarize(coords))
}

/// Worst coordinate under [`relative_error_floored`], the floor being
/// [`FLOOR_FRACTION`] of the largest gradient magnitude seen.
fn summarize(coords: Vec<(String, f64, f64)>) -> GradCheckReport {
    let scale = coords.iter().fold(0f64, |m, (_, a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (FLOOR_FRACTION * scale).max(1e-8);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: coords.len(),
    };
    for (label, a, n) in coords {
        let rel = relative_error_floored(a, n, floor);
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = label;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at its kink: analytic 0 from the left convention, numeric 0.5
        let x = Tensor::scalar(0.0);
        let err = grad_check(
            |g, x| {
                let r = g.relu(x)?;
                g.sum(r)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn parameters_are_checked() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec([2], vec![0.3, -0.7]).unwrap(), true);
        let x = Tensor::from_vec([2], vec![1.5, 2.0]).unwrap();
        let mut stores = [store];
        let rep = grad_check_full(
            |g, st, xs| {
                let wn = g.param(&st[0], w);
                let p = g.mul(xs[0], wn)?;
                let t = g.tanh(p)?;
                g.sum(t)
            },
            &[x],
            &mut stores,
            1e-6,
        )
        .unwrap();
        assert_eq!(rep.coordinates, 4);
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(grad_check(|g, x| g.sum(x), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
