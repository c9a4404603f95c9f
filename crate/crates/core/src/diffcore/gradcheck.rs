use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.dims() != (1, 1) {
        return Err(Error::Contract(format!(
            "finite-difference check needs a scalar output, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compare the tape gradient of `build(input)` with central differences.
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over all inputs.
pub fn finite_diff_check<F>(mut build: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(input.clone());
    let out = build(&mut g, x)?;
    scalar(&g, out)?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));

    let mut eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let out = build(&mut g, x)?;
        scalar(&g, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check, but over every element of the listed (trainable) parameters.
pub fn finite_diff_check_params<F>(store: &mut ParamStore, ids: &[ParamId], mut build: F, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    scalar(&g, out)?;
    g.backward(out)?;
    store.zero_grads();
    g.accumulate_into(store);

    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = store.get(id).grad.clone().expect("zeroed above");
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let mut gp = Graph::new();
            let op = build(&mut gp, store)?;
            let fp = scalar(&gp, op)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let mut gm = Graph::new();
            let om = build(&mut gm, store)?;
            let fm = scalar(&gm, om)?;
            store.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic.data()[i], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}
