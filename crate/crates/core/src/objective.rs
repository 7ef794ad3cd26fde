//! Scale-invariant multi-resolution L1 loss: the estimate is rescaled by the
//! least-squares factor onto the reference, then compared by STFT magnitudes at
//! several window sizes plus a time-domain L1 term.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::spectral_codec::{PadMode, StftPlan};
use crate::{Error, Result};

/// Keeps the magnitude differentiable at zero.
const MAG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Loss STFT window sizes in samples; hop is a quarter window.
    pub fft_sizes: Vec<usize>,
    pub time_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            fft_sizes: vec![256, 512, 768, 1024],
            time_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_sizes.is_empty() {
            return Err(Error::Config("loss needs at least one window size".into()));
        }
        if let Some(w) = self.fft_sizes.iter().find(|&&w| w < 16 || w % 4 != 0) {
            return Err(Error::Config(format!("loss window {w} must be >= 16 and a multiple of 4")));
        }
        if !(self.time_weight >= 0.0) {
            return Err(Error::Config(format!("time weight {} must be >= 0", self.time_weight)));
        }
        Ok(())
    }
}

/// `<estimate, reference> / <estimate, estimate>`.
pub fn optimal_scale(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::LengthMismatch(estimate.len(), reference.len()));
    }
    let ee: f64 = estimate.iter().map(|&e| e as f64 * e as f64).sum();
    if ee == 0.0 {
        return Err(Error::ZeroEnergyEstimate);
    }
    let er: f64 = estimate.iter().zip(reference).map(|(&e, &r)| e as f64 * r as f64).sum();
    Ok(er / ee)
}

fn magnitude(plan: &StftPlan, x: &Tensor) -> Result<Tensor> {
    let spec = plan.forward(x)?;
    Ok((spec.sqr()?.sum(1)? + MAG_EPS)?.sqrt()?)
}

/// Differentiable loss over `(B, L)` rows, averaged over the batch.
pub fn loss_tensor(estimate: &Tensor, reference: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    if estimate.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "estimate {:?} and reference {:?} differ",
            estimate.dims(),
            reference.dims()
        )));
    }
    let ee = estimate.sqr()?.sum_keepdim(D::Minus1)?;
    if ee.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.contains(&0.0) {
        return Err(Error::ZeroEnergyEstimate);
    }
    let beta = ((estimate * reference)?.sum_keepdim(D::Minus1)? / ee)?;
    let scaled = estimate.broadcast_mul(&beta)?;
    let mut total = ((&scaled - reference)?.abs()?.mean_all()? * cfg.time_weight)?;
    for &w in &cfg.fft_sizes {
        let plan = StftPlan::new(w, w / 4, PadMode::Zeros)?;
        let d = (magnitude(&plan, &scaled)? - magnitude(&plan, reference)?)?;
        total = (total + d.abs()?.mean_all()?)?;
    }
    Ok(total)
}

pub fn loss(estimate: &Waveform, reference: &Waveform, cfg: &LossConfig) -> Result<f64> {
    if estimate.rate_hz() != reference.rate_hz() {
        return Err(Error::RateMismatch(estimate.rate_hz(), reference.rate_hz()));
    }
    if estimate.len() != reference.len() || estimate.channels() != reference.channels() {
        return Err(Error::LengthMismatch(estimate.len(), reference.len()));
    }
    let l = loss_tensor(&estimate.to_tensor(DType::F64)?, &reference.to_tensor(DType::F64)?, cfg)?;
    Ok(l.to_scalar::<f64>()?)
}
