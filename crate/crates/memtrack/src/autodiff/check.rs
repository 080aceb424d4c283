//! Finite-difference verification of recorded gradients.

use super::graph::Graph;
use super::layers::{BoundParams, ParamStore};
use super::tensor::Tensor;
use super::AdError;

/// Worst-case comparison between analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn eval_loss<F>(build: &F, store: &ParamStore) -> Result<f64, AdError>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Tensor, AdError>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g)?;
    let loss = build(&mut g, &bound)?;
    loss.scalar_value()
}

/// Compare the recorded gradient of a scalar-valued closure against central
/// finite differences over every entry of every named input.
///
/// Relative error per entry is |analytic − fd| / max(|analytic|, |fd|, 1e-8).
pub fn grad_check<F>(
    build: F,
    inputs: &[(&str, Tensor)],
    step: f64,
) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Tensor, AdError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut store = ParamStore::new();
    for (name, t) in inputs {
        store.insert(name, t.clone());
    }

    // analytic gradients
    let mut g = Graph::new();
    let bound = store.bind(&mut g)?;
    let loss = build(&mut g, &bound)?;
    if !loss.is_scalar() {
        return Err(AdError::NotScalar {
            shape: loss.shape(),
        });
    }
    let grads = g.backward(&loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };

    for (name, tensor) in inputs {
        let analytic = grads
            .get(name)
            .ok_or_else(|| AdError::UnknownParam((*name).to_string()))?;
        for idx in 0..tensor.numel() {
            let mut plus = tensor.values().to_vec();
            plus[idx] += step;
            let mut minus = tensor.values().to_vec();
            minus[idx] -= step;

            let mut store_p = store.clone();
            store_p.insert(
                name,
                Tensor::new(tensor.rows(), tensor.cols(), plus)?,
            );
            let lp = eval_loss(&build, &store_p)?;

            let mut store_m = store.clone();
            store_m.insert(
                name,
                Tensor::new(tensor.rows(), tensor.cols(), minus)?,
            );
            let lm = eval_loss(&build, &store_m)?;

            let fd = (lp - lm) / (2.0 * step);
            let a = analytic.values()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = (*name).to_string();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

/// `grad_check` over a single unnamed input.
pub fn grad_check_single<F>(build: F, input: &Tensor, step: f64) -> Result<f64, AdError>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor, AdError>,
{
    let report = grad_check(
        |g, bound| {
            let x = bound.get("x")?;
            build(g, x)
        },
        &[("x", input.clone())],
        step,
    )?;
    Ok(report.max_rel_err)
}
