//! Central finite-difference check of the analytic gradients.

use crate::error::Result;
use crate::scalar::Scalar;

use super::params::ModelParams;
use super::train::{example_loss, Task, TrainExample};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorGradCheck {
    pub name: String,
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`, 0 when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Compares the backprop gradient of `example_loss` with `(L(θ+h) − L(θ−h)) / 2h`
/// for every element of every parameter tensor.
pub fn gradient_check<T: Scalar>(
    example: &TrainExample<T>,
    params: &ModelParams<T>,
    task: &Task<'_>,
    h: f64,
) -> Result<Vec<TensorGradCheck>> {
    let mut analytic = params.zeros_like();
    example_loss(example, params, task, Some((&mut analytic, T::one())))?;
    let mut probe = params.clone();
    let tensors = analytic.named();
    let mut out = Vec::with_capacity(tensors.len());
    for (k, (name, g)) in tensors.iter().enumerate() {
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for (j, &ga) in g.iter().enumerate() {
            let original = element(&mut probe, k, j, None);
            element(&mut probe, k, j, Some(original + T::lit(h)));
            let plus = example_loss(example, &probe, task, None)?.as_f64();
            element(&mut probe, k, j, Some(original - T::lit(h)));
            let minus = example_loss(example, &probe, task, None)?.as_f64();
            element(&mut probe, k, j, Some(original));
            let gn = (plus - minus) / (2.0 * h);
            let ga = ga.as_f64();
            diff += (ga - gn).powi(2);
            an += ga * ga;
            nn += gn * gn;
        }
        let (an, nn, diff) = (an.sqrt(), nn.sqrt(), diff.sqrt());
        let denom = an.max(nn);
        let rel_error = if denom == 0.0 { 0.0 } else { diff / denom };
        out.push(TensorGradCheck {
            name: name.clone(),
            rel_error,
            analytic_norm: an,
            numeric_norm: nn,
        });
    }
    Ok(out)
}

/// Reads element `j` of tensor `k`, optionally overwriting it.
fn element<T: Scalar>(params: &mut ModelParams<T>, k: usize, j: usize, set: Option<T>) -> T {
    let mut tensors = params.named_mut();
    let t = &mut tensors[k].1;
    let slot = t.iter_mut().nth(j).expect("element index in range");
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}
