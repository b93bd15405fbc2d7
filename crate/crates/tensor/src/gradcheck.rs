//! Central finite-difference checks for graph-built scalar functions.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`.
//! The floor keeps entries whose true gradient is ~0 from dividing rounding
//! noise by another rounding-noise-sized number.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (label, flat element index) of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((label.to_string(), idx));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst.take());
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

fn scalar(g: &Graph, n: NodeId) -> Result<f64> {
    let v = g.value(n);
    if !v.is_scalar() {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Check the gradient of `build` with respect to every element of every input.
/// `build` receives the input nodes in order and must return a scalar node.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .wrt(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(&format!("input{k}"), i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Check the gradient of `build` with respect to selected parameter elements.
pub fn check_params<F>(
    store: &mut ParamStore,
    probes: &[(ParamId, usize)],
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    for &(id, i) in probes {
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
        let orig = store.value(id).data()[i];
        let mut eval_at = |v: f64| -> Result<f64> {
            store.get_mut(id).value.data_mut()[i] = v;
            let mut g = Graph::new();
            let out = build(&mut g, store)?;
            scalar(&g, out)
        };
        let plus = eval_at(orig + eps);
        let minus = eval_at(orig - eps);
        store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let label = store.get(id).name.clone();
        report.record(&label, i, analytic, numeric);
    }
    Ok(report)
}
