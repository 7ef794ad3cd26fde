//! Scoring (SDR, SI-SDR), file enhancement, manifest evaluation and model statistics
//! behind the command-line tool.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, WavEncoding, Waveform};
use crate::datagen::Manifest;
use crate::model::{load_checkpoint, macs_per_second, param_count_for, Model, ModelConfig};
use crate::{Error, Result};

/// Scores are clamped to `[-CAP_DB, CAP_DB]`.
pub const CAP_DB: f64 = 100.0;

fn ratio_db(signal: f64, error: f64) -> f64 {
    if error == 0.0 {
        return CAP_DB;
    }
    (10.0 * (signal / error).log10()).clamp(-CAP_DB, CAP_DB)
}

fn check(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::LengthMismatch(estimate.len(), reference.len()));
    }
    let rr: f64 = reference.iter().map(|&r| r as f64 * r as f64).sum();
    if rr == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(rr)
}

/// `10 log10(|s|^2 / |e - s|^2)`.
pub fn sdr(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    let rr = check(estimate, reference)?;
    let err: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(&e, &r)| (e as f64 - r as f64).powi(2))
        .sum();
    Ok(ratio_db(rr, err))
}

/// SDR against the projection `a s` of the estimate onto the reference.
pub fn si_sdr(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    let rr = check(estimate, reference)?;
    let er: f64 = estimate.iter().zip(reference).map(|(&e, &r)| e as f64 * r as f64).sum();
    let a = er / rr;
    let err: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(&e, &r)| (e as f64 - a * r as f64).powi(2))
        .sum();
    Ok(ratio_db(a * a * rr, err))
}

/// Anything that maps a mixture to a single-channel estimate.
pub trait Enhancer {
    fn enhance(&self, mixture: &Waveform) -> Result<Waveform>;
}

impl Enhancer for Model {
    fn enhance(&self, mixture: &Waveform) -> Result<Waveform> {
        self.forward(mixture)
    }
}

/// Returns the reference channel unchanged.
pub struct Bypass {
    pub reference_channel: usize,
}

impl Enhancer for Bypass {
    fn enhance(&self, mixture: &Waveform) -> Result<Waveform> {
        mixture.select_channels(&[self.reference_channel])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub sdr_db: f64,
    pub si_sdr_db: f64,
    /// Gains over the unprocessed reference channel.
    pub sdr_improvement_db: f64,
    pub si_sdr_improvement_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: usize,
    pub rate_hz: u32,
    pub macs_per_s_1ch: f64,
    pub macs_per_s_2ch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Arithmetic means of the row fields (`id` holds "mean").
    pub mean: EvalRow,
    pub model: Option<ModelStats>,
}

pub fn score(id: &str, estimate: &Waveform, mixture: &Waveform, reference: &Waveform, reference_channel: usize) -> Result<EvalRow> {
    if estimate.rate_hz() != reference.rate_hz() || mixture.rate_hz() != reference.rate_hz() {
        return Err(Error::RateMismatch(estimate.rate_hz(), reference.rate_hz()));
    }
    let noisy = mixture.select_channels(&[reference_channel])?;
    let (e, n, r) = (estimate.samples(), noisy.samples(), reference.samples());
    let (s, si) = (sdr(e, r)?, si_sdr(e, r)?);
    Ok(EvalRow {
        id: id.to_string(),
        sdr_db: s,
        si_sdr_db: si,
        sdr_improvement_db: s - sdr(n, r)?,
        si_sdr_improvement_db: si - si_sdr(n, r)?,
    })
}

fn mean_row(rows: &[EvalRow]) -> EvalRow {
    let k = rows.len().max(1) as f64;
    let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
    EvalRow {
        id: "mean".into(),
        sdr_db: avg(|r| r.sdr_db),
        si_sdr_db: avg(|r| r.si_sdr_db),
        sdr_improvement_db: avg(|r| r.sdr_improvement_db),
        si_sdr_improvement_db: avg(|r| r.si_sdr_improvement_db),
    }
}

/// Scores every record of `manifest` in order.
pub fn evaluate(enhancer: &impl Enhancer, manifest: &Manifest, reference_channel: usize) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let u = manifest.load(r)?;
        let est = enhancer.enhance(&u.mixture)?;
        rows.push(score(&u.id, &est, &u.mixture, &u.reference, reference_channel)?);
    }
    Ok(EvalReport {
        mean: mean_row(&rows),
        rows,
        model: None,
    })
}

/// Evaluates a checkpoint on a manifest and writes the report as JSON.
pub fn evaluate_checkpoint(ckpt: &Path, manifest: &Path, report: &Path) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(ckpt)?;
    let manifest = Manifest::read(manifest)?;
    let mut rep = evaluate(&model, &manifest, model.config.reference_channel)?;
    rep.model = Some(model_stats(&model.config)?);
    fs::write(report, serde_json::to_string_pretty(&rep)?)?;
    Ok(rep)
}

/// Enhances one WAV file into a float-32 single-channel WAV.
pub fn enhance_file(ckpt: &Path, input: &Path, output: &Path) -> Result<Waveform> {
    let (model, _) = load_checkpoint(ckpt)?;
    let mixture = read_wav(input)?;
    let est = model.forward(&mixture)?;
    write_wav(output, &est, WavEncoding::Float32)?;
    Ok(est)
}

pub const STATS_RATE_HZ: u32 = 16000;

pub fn model_stats(cfg: &ModelConfig) -> Result<ModelStats> {
    Ok(ModelStats {
        params: param_count_for(cfg),
        rate_hz: STATS_RATE_HZ,
        macs_per_s_1ch: macs_per_second(cfg, STATS_RATE_HZ, 1)?,
        macs_per_s_2ch: macs_per_second(cfg, STATS_RATE_HZ, 2)?,
    })
}
