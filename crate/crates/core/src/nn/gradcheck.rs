use super::graph::{Graph, Mode, Var};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Gradients below this magnitude count as exactly zero. Some are zero by
/// symmetry (key biases under softmax) and differ only by round-off.
const ZERO_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-tensor error `max|a - n| / max(max|a|, max|n|, 1e-7)`.
    pub max_rel_error: f64,
    /// Name of the tensor where it occurred (`input{i}` for inputs).
    pub worst: String,
    pub n_checked: usize,
}

/// Compares analytic gradients of the scalar built by `build` against central
/// differences, over every parameter and every input entry.
pub fn grad_check<F>(store: &ParamStore, inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::validation("eps", "must be positive"));
    }
    let (analytic_params, analytic_inputs) = {
        let mut g = Graph::new(store, Mode::Eval);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.backward(out);
        let pg = g.param_grads();
        let params: Vec<Tensor> = store
            .ids()
            .map(|id| pg.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).rows(), store.get(id).cols())))
            .collect();
        let ins: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        (params, ins)
    };

    let eval = |s: &ParamStore, ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(s, Mode::Eval);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), n_checked: 0 };
    let note = |name: &str, a: &Tensor, n: &[f64], report: &mut GradCheckReport| {
        let scale = a.data().iter().chain(n).fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a.data().iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let rel = diff / scale.max(ZERO_FLOOR);
        report.n_checked += n.len();
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = rel;
            report.worst = name.to_string();
        }
    };

    let mut work = store.clone();
    for (id, analytic) in store.ids().zip(&analytic_params) {
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        note(store.name(id), analytic, &numeric, &mut report);
    }

    let mut ins = inputs.to_vec();
    for (i, analytic) in analytic_inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = ins[i].data()[j];
            ins[i].data_mut()[j] = orig + eps;
            let up = eval(store, &ins)?;
            ins[i].data_mut()[j] = orig - eps;
            let down = eval(store, &ins)?;
            ins[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        note(&format!("input{i}"), analytic, &numeric, &mut report);
    }
    Ok(report)
}
