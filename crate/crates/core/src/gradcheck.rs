//! Central-difference gradient checking for 64-bit networks.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::ParameterSet;
use crate::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// Coordinates whose step-`h` and step-`2h` central differences disagree by more than
/// this (relative) straddle a kink of ReLU/PReLU at the chosen step and are skipped.
pub const KINK_TOL: f64 = 2e-5;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: String,
    pub checked: usize,
    /// Coordinates that were not smooth at the step size.
    pub skipped: usize,
}

impl GradReport {
    /// Every compared coordinate is within `tol` and at least half were comparable.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && 2 * self.skipped <= self.checked
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Deterministic 64-bit tensor with entries uniform in `[-1, 1)`.
pub fn seeded_input(seed: u64, dims: &[usize]) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?)
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

fn nudge(var: &Var, i: usize, delta: f64) -> Result<()> {
    let mut v = to_f64(var.as_tensor())?;
    v[i] += delta;
    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu)?)?;
    Ok(())
}

/// Compares backprop gradients of `sum(w * f(x))` (random fixed `w`) against the
/// fourth-order central difference with step `eps` (samples at ±eps and ±2 eps),
/// for the input and every parameter in `params`. At most `per_tensor` coordinates
/// are checked per tensor.
pub fn check(
    params: &ParameterSet,
    input: &Tensor,
    f: impl Fn(&Tensor) -> Result<Tensor>,
    eps: f64,
    per_tensor: usize,
) -> Result<GradReport> {
    if input.dtype() != DType::F64 || params.iter().any(|e| e.var.dtype() != DType::F64) {
        return Err(Error::Config("gradient checks need 64-bit tensors".into()));
    }
    let x = Var::from_tensor(input)?;
    let probe_shape = f(x.as_tensor())?.shape().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w: Vec<f64> = (0..probe_shape.elem_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = Tensor::from_vec(w, probe_shape, &Device::Cpu)?;
    let objective = || -> Result<f64> { Ok((f(x.as_tensor())? * &w)?.sum_all()?.to_scalar::<f64>()?) };

    let loss = (f(x.as_tensor())? * &w)?.sum_all()?;
    let grads = loss.backward()?;

    let mut targets: Vec<(String, &Var)> = vec![("input".to_string(), &x)];
    targets.extend(params.iter().map(|e| (e.name.clone(), &e.var)));
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    for (name, var) in targets {
        let n = var.elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64(g)?,
            None => vec![0.0; n],
        };
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let at = |k: f64| -> Result<f64> {
                nudge(var, i, k * eps)?;
                let v = objective();
                nudge(var, i, -k * eps)?;
                v
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            let d1 = (p1 - m1) / (2.0 * eps);
            let d2 = (p2 - m2) / (4.0 * eps);
            report.checked += 1;
            if rel_err(d1, d2) > KINK_TOL {
                report.skipped += 1;
                continue;
            }
            let numeric = (4.0 * d1 - d2) / 3.0;
            let e = rel_err(analytic[i], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{i}]: analytic {} numeric {numeric}", analytic[i]);
            }
        }
    }
    Ok(report)
}
