use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-tensor comparison of analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub rel_error: f64,
}

/// Outcome of [`gradcheck`]; `max_rel_error` is the worst tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<GradCheck>,
    pub max_rel_error: f64,
}

/// Compares backward-pass gradients of a scalar `loss_fn` against central
/// differences with step `h`, for every input tensor and every non-frozen
/// parameter. At most `max_coords` coordinates per tensor are probed (evenly
/// strided). The relative error of a tensor is
/// `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖, floor)` where `floor` is 1e-3 of the
/// largest gradient norm seen, so exactly-zero gradients do not divide by zero.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let (param_grads, input_grads) = {
        let mut g = Graph::with_params(&*store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        g.backward(loss)?;
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (g.param_grads(), ig)
    };

    let mut raw: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut inputs = inputs.to_vec();
    for (i, ag) in input_grads.iter().enumerate() {
        let idx = probe_indices(ag.len(), max_coords);
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &k in &idx {
            let orig = inputs[i].data()[k];
            inputs[i].data_mut()[k] = orig + h;
            let fp = eval(store, &inputs)?;
            inputs[i].data_mut()[k] = orig - h;
            let fm = eval(store, &inputs)?;
            inputs[i].data_mut()[k] = orig;
            a.push(ag.data()[k]);
            n.push((fp - fm) / (2.0 * h));
        }
        raw.push((format!("input{i}"), a, n));
    }
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let len = store.get(id).len();
        let ag = param_grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let idx = probe_indices(len, max_coords);
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &k in &idx {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let fp = eval(store, &inputs)?;
            store.get_mut(id).data_mut()[k] = orig - h;
            let fm = eval(store, &inputs)?;
            store.get_mut(id).data_mut()[k] = orig;
            a.push(ag.data()[k]);
            n.push((fp - fm) / (2.0 * h));
        }
        raw.push((store.name(id).to_string(), a, n));
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let biggest = raw
        .iter()
        .map(|(_, a, n)| norm(a).max(norm(n)))
        .fold(0.0, f64::max);
    if !biggest.is_finite() {
        return Err(Error::Numeric("non-finite gradient in gradient check".into()));
    }
    let floor = (1e-3 * biggest).max(1e-12);
    let tensors: Vec<GradCheck> = raw
        .into_iter()
        .map(|(name, a, n)| {
            let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
            let rel = norm(&diff) / norm(&a).max(norm(&n)).max(floor);
            GradCheck {
                name,
                checked: a.len(),
                rel_error: rel,
            }
        })
        .collect();
    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
    })
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}
