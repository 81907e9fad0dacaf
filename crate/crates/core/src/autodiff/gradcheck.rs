//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub tol: f64,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    fn failure(tol: f64, msg: String) -> Self {
        GradCheckReport {
            passed: false,
            tol,
            max_rel_error: f64::INFINITY,
            max_abs_error: f64::INFINITY,
            checked: 0,
            diagnostic: Some(msg),
        }
    }

    /// Relative error per coordinate. The denominator never drops below
    /// `1e-3` of this tensor's largest gradient or `floor`, so coordinates
    /// whose true gradient vanishes are judged on an absolute scale.
    fn compare(analytic: &[f64], numeric: &[f64], tol: f64, floor: f64) -> Self {
        let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(floor).max(1e-8);
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (&a, &n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(floor));
        }
        GradCheckReport {
            passed: max_rel <= tol,
            tol,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            checked: analytic.len(),
            diagnostic: None,
        }
    }
}

fn step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, store: Option<&ParamStore<f64>>, x: &Tensor<f64>) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let g = match store {
        Some(s) => Graph::with_params(s, Mode::Train),
        None => Graph::new(Mode::Train),
    };
    let out = f(&g, g.input(x.clone()))?;
    Ok(out.value().data()[0])
}

/// Checks `d f(x) / dx` for a scalar-valued `f` built on a fresh graph.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, tol: f64) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let g = Graph::new(Mode::Train);
    let leaf = g.leaf(x.clone());
    let out = match f(&g, leaf) {
        Ok(o) => o,
        Err(e) => return GradCheckReport::failure(tol, format!("forward failed: {e}")),
    };
    if out.value().numel() != 1 {
        return GradCheckReport::failure(tol, format!("output is not scalar: {:?}", out.shape()));
    }
    if let Err(e) = g.check_finite() {
        return GradCheckReport::failure(tol, e.to_string());
    }
    let analytic = match g.backward(out) {
        Ok(gr) => gr.wrt(leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]),
        Err(e) => return GradCheckReport::failure(tol, format!("backward failed: {e}")),
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let h = step(orig);
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, None, &probe);
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, None, &probe);
        probe.data_mut()[i] = orig;
        match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => numeric.push((p - m) / (2.0 * h)),
            _ => return GradCheckReport::failure(tol, format!("non-finite perturbed output at element {i}")),
        }
    }
    GradCheckReport::compare(&analytic, &numeric, tol, 0.0)
}

/// Checks gradients of a scalar function with respect to the input and to
/// every parameter of `store`. At most `samples` coordinates per tensor are
/// perturbed, chosen from `seed`. Returns one `(name, report)` per tensor.
pub fn grad_check_model<F>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    f: F,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Vec<(String, GradCheckReport)>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Graph::with_params(store, Mode::Train);
    let leaf = g.leaf(input.clone());
    let out = match f(&g, leaf).and_then(|o| g.check_finite().map(|_| o)) {
        Ok(o) => o,
        Err(e) => return vec![("forward".into(), GradCheckReport::failure(tol, e.to_string()))],
    };
    let grads = match g.backward(out) {
        Ok(gr) => gr,
        Err(e) => return vec![("backward".into(), GradCheckReport::failure(tol, e.to_string()))],
    };
    let mut reports = Vec::new();
    // gradients below 1e-5 of the largest one anywhere are compared absolutely
    let global = std::iter::once(grads.wrt(leaf))
        .chain(store.ids().map(|id| grads.param(id)))
        .flatten()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-5 * global;

    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= samples {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, samples).into_vec();
            v.sort_unstable();
            v
        }
    };

    // input
    let idx = pick(input.numel(), &mut rng);
    let full = grads.wrt(leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
    let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
    let mut numeric = Vec::new();
    let mut probe = input.clone();
    for &i in &idx {
        let orig = probe.data()[i];
        let h = step(orig);
        probe.data_mut()[i] = orig + h;
        let p = eval_scalar(&f, Some(store), &probe);
        probe.data_mut()[i] = orig - h;
        let m = eval_scalar(&f, Some(store), &probe);
        probe.data_mut()[i] = orig;
        match (p, m) {
            (Ok(p), Ok(m)) => numeric.push((p - m) / (2.0 * h)),
            _ => {
                reports.push(("input".into(), GradCheckReport::failure(tol, "perturbed forward failed".into())));
                return reports;
            }
        }
    }
    reports.push(("input".into(), GradCheckReport::compare(&analytic, &numeric, tol, floor)));

    for pid in store.ids() {
        if !store.is_trainable(pid) {
            continue;
        }
        reports.push((store.name(pid).to_string(), check_param(store, pid, input, &f, &grads, tol, floor, &pick(store.get(pid).numel(), &mut rng))));
    }
    reports
}

fn check_param<F>(
    store: &ParamStore<f64>,
    pid: ParamId,
    input: &Tensor<f64>,
    f: &F,
    grads: &super::Gradients<f64>,
    tol: f64,
    floor: f64,
    idx: &[usize],
) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let numel = store.get(pid).numel();
    let full = grads.param(pid).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; numel]);
    let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in idx {
        let orig = store.get(pid).data()[i];
        let h = step(orig);
        work.get_mut(pid).data_mut()[i] = orig + h;
        let p = eval_scalar(f, Some(&work), input);
        work.get_mut(pid).data_mut()[i] = orig - h;
        let m = eval_scalar(f, Some(&work), input);
        work.get_mut(pid).data_mut()[i] = orig;
        match (p, m) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => numeric.push((p - m) / (2.0 * h)),
            _ => return GradCheckReport::failure(tol, format!("perturbed forward failed at element {i}")),
        }
    }
    GradCheckReport::compare(&analytic, &numeric, tol, floor)
}
