//! Central finite-difference checks of tape gradients.
//!
//! Only the forward pass is used to build the numerical estimate, so a
//! check here is independent of every backward rule it verifies.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this, times `max(1, |f|)`, are compared absolutely
/// rather than relatively. Scaling with the function value keeps the floor
/// above the round-off of the difference quotient, which grows with `|f|`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    /// Function value at the unperturbed point.
    pub value: f64,
}

impl GradCheck {
    fn new(value: f64) -> Self {
        Self {
            value,
            ..Default::default()
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric, self.value);
        if err > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = err;
            self.worst = format!(
                "{} (analytic {analytic:.6e}, numeric {numeric:.6e})",
                label()
            );
        }
    }
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR * max(1, |value|))`.
pub fn relative_error(a: f64, b: f64, value: f64) -> f64 {
    let floor = REL_FLOOR * value.abs().max(1.0);
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks d(f)/d(input) for every element of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let value = loss.item();
    let grads = tape.gradients(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheck::new(value);
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            report.record(
                || format!("input {i}[{k}]"),
                grad.data()[k],
                (up - down) / (2.0 * STEP),
            );
        }
    }
    Ok(report)
}

/// Checks d(f)/d(param) for every scalar of every parameter in `store`.
/// Gradients already held by the store are discarded.
pub fn check_params<F>(store: &mut ParamStore, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    store.zero_grads();
    let value = {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        let value = loss.item();
        tape.backward(loss, store)?;
        value
    };
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad_or_zero()).collect();
    store.zero_grads();

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, store)?.item())
    };

    let mut report = GradCheck::new(value);
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + STEP;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - STEP;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let name = &store.get(id).name;
            report.record(
                || format!("{name}[{k}]"),
                analytic[pi].data()[k],
                (up - down) / (2.0 * STEP),
            );
        }
    }
    Ok(report)
}
