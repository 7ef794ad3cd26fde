//! Synthetic corpus: pseudo-speech, multichannel scenes with per-channel gain,
//! delay, SNR and failed microphones, and JSON-lines manifests.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, WavEncoding, Waveform};
use crate::{Error, Result};

pub const PEAK: f64 = 0.5;

/// Independent RNG stream for `(seed, parts...)`; order of use elsewhere cannot shift it.
pub fn stream_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        // splitmix64 step
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Harmonic complex with a drifting fundamental, formant-shaped partials and a
/// syllabic envelope, plus gated high-band noise bursts. Peak-normalized to 0.5.
pub fn synthesize_speech_like(duration_s: f64, rate_hz: u32, rng: &mut impl Rng) -> Result<Waveform> {
    if !(duration_s > 0.0) || rate_hz == 0 {
        return Err(Error::Config(format!("cannot synthesize {duration_s} s at {rate_hz} Hz")));
    }
    let fs = rate_hz as f64;
    let n = ((duration_s * fs).round() as usize).max(1);
    let top = 3800f64.min(0.45 * fs);
    let f0 = rng.gen_range(90.0..220.0);
    let (drift_a, drift_b) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let formants = [rng.gen_range(300.0..800.0), rng.gen_range(900.0..2200.0), rng.gen_range(2300.0..3300.0)];
    let partials = ((top / (f0 * 1.25)).floor() as usize).max(1);
    let weight = |hz: f64| {
        let bumps: f64 = formants.iter().map(|&fm| (-((hz - fm) / 180.0).powi(2)).exp()).sum();
        (0.15 + bumps) / (1.0 + hz / 1000.0)
    };
    let syl_rate = rng.gen_range(2.5..5.0);
    let syl_phase = rng.gen_range(0.0..2.0 * PI);

    let mut x = vec![0.0f64; n];
    let mut phase = 0.0f64;
    for (i, xi) in x.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let f = f0 * (1.0 + 0.12 * (2.0 * PI * 0.7 * t + drift_a).sin() + 0.04 * (2.0 * PI * 2.3 * t + drift_b).sin());
        phase += 2.0 * PI * f / fs;
        let mut v = 0.0;
        for k in 1..=partials {
            let hz = k as f64 * f;
            if hz < top {
                v += weight(hz) * (k as f64 * phase).sin();
            }
        }
        let env = (2.0 * PI * syl_rate * t + syl_phase).sin().max(0.0).powf(0.7);
        *xi = env * v;
    }

    // Bursts: first-difference of white noise (energy toward high frequencies)
    // smoothed by a 3-tap average, under a Hann gate.
    let bursts = ((duration_s * 2.0).ceil() as usize).max(1);
    for _ in 0..bursts {
        let len = ((rng.gen_range(0.04..0.12) * fs) as usize).clamp(1, n);
        let start = rng.gen_range(0..=n - len);
        let gain = rng.gen_range(0.1..0.3);
        let mut prev = 0.0f64;
        let mut hist = [0.0f64; 3];
        for j in 0..len {
            let w: f64 = rng.sample(StandardNormal);
            let d = w - prev;
            prev = w;
            hist = [d, hist[0], hist[1]];
            let gate = 0.5 - 0.5 * (2.0 * PI * j as f64 / len as f64).cos();
            x[start + j] += gain * gate * (hist[0] + hist[1] + hist[2]) / 3.0;
        }
    }

    let peak = x.iter().fold(0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PEAK / peak } else { 0.0 };
    Waveform::mono(x.iter().map(|v| (v * scale) as f32).collect(), rate_hz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub rate_hz: u32,
    pub gains_db: Vec<f64>,
    pub delays: Vec<usize>,
    /// Per-channel SNR; `None` adds no noise.
    pub snr_db: Vec<Option<f64>>,
    /// Channels whose speech is removed (noise only).
    pub failed: Vec<bool>,
}

impl SceneSpec {
    pub fn clean(channels: usize, rate_hz: u32) -> Self {
        Self {
            rate_hz,
            gains_db: vec![0.0; channels],
            delays: vec![0; channels],
            snr_db: vec![None; channels],
            failed: vec![false; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gains_db.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c == 0 || self.delays.len() != c || self.snr_db.len() != c || self.failed.len() != c {
            return Err(Error::Config("scene fields must all have one entry per channel".into()));
        }
        if self.snr_db.iter().flatten().any(|s| !s.is_finite()) || self.gains_db.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("scene gains and SNRs must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub mixture: Waveform,
    /// Speech image at channel 0.
    pub reference: Waveform,
    /// Speech image at every channel.
    pub images: Waveform,
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

pub fn spatialize_and_mix(clean: &Waveform, spec: &SceneSpec, rng: &mut impl Rng) -> Result<Scene> {
    spec.validate()?;
    if clean.channels() != 1 {
        return Err(Error::Config("scene source must be single-channel".into()));
    }
    if clean.rate_hz() != spec.rate_hz {
        return Err(Error::RateMismatch(clean.rate_hz(), spec.rate_hz));
    }
    let n = clean.len();
    let src: Vec<f64> = clean.samples().iter().map(|&v| v as f64).collect();
    let mut mix = Vec::with_capacity(spec.channels());
    let mut imgs = Vec::with_capacity(spec.channels());
    for c in 0..spec.channels() {
        let g = 10f64.powf(spec.gains_db[c] / 20.0);
        let d = spec.delays[c];
        let direct: Vec<f64> = (0..n).map(|i| if i >= d { g * src[i - d] } else { 0.0 }).collect();
        let p_speech = power(&direct);
        let image = if spec.failed[c] { vec![0.0; n] } else { direct };
        let mut channel = image.clone();
        if let Some(snr) = spec.snr_db[c] {
            let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let p_noise = power(&noise);
            if p_noise > 0.0 && p_speech > 0.0 {
                let k = (p_speech / 10f64.powf(snr / 10.0) / p_noise).sqrt();
                for (m, w) in channel.iter_mut().zip(&noise) {
                    *m += k * w;
                }
            }
        }
        mix.push(channel.iter().map(|&v| v as f32).collect::<Vec<_>>());
        imgs.push(image.iter().map(|&v| v as f32).collect::<Vec<_>>());
    }
    let images = Waveform::from_channels(&imgs, spec.rate_hz)?;
    Ok(Scene {
        mixture: Waveform::from_channels(&mix, spec.rate_hz)?,
        reference: images.select_channels(&[0])?,
        images,
    })
}

/// One line of a manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub mixture_path: String,
    pub reference_path: String,
    /// Per-channel speech images, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_path: Option<String>,
    pub rate_hz: u32,
    pub channels: usize,
    /// `null` for a noiseless channel.
    pub snr_db: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub mixture: Waveform,
    pub reference: Waveform,
    pub images: Option<Waveform>,
}

impl Utterance {
    /// Clean target for channel `c` as the first channel.
    pub fn target_for(&self, c: usize) -> Result<Waveform> {
        match (&self.images, c) {
            (_, 0) => Ok(self.reference.clone()),
            (Some(img), _) => img.select_channels(&[c]),
            (None, _) => Err(Error::Manifest(format!(
                "{}: no per-channel images, cannot use channel {c} as reference",
                self.id
            ))),
        }
    }
}

pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = fs::File::open(&path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: UtteranceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if r.snr_db.len() != r.channels {
                return Err(Error::Manifest(format!(
                    "{}:{}: {} SNRs for {} channels",
                    path.display(),
                    i + 1,
                    r.snr_db.len(),
                    r.channels
                )));
            }
            records.push(r);
        }
        Ok(Self { path, records })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.path.parent().unwrap_or(Path::new(".")).join(rel)
    }

    /// Loads a record and checks its files against the manifest fields.
    pub fn load(&self, r: &UtteranceRecord) -> Result<Utterance> {
        let mixture = read_wav(self.resolve(&r.mixture_path))?;
        let reference = read_wav(self.resolve(&r.reference_path))?;
        let images = r.images_path.as_ref().map(|p| read_wav(self.resolve(p))).transpose()?;
        let mismatch = |what: String| Err(Error::Manifest(format!("{}: {what}", r.id)));
        if mixture.channels() != r.channels {
            return mismatch(format!("mixture has {} channels, manifest says {}", mixture.channels(), r.channels));
        }
        if mixture.rate_hz() != r.rate_hz || reference.rate_hz() != r.rate_hz {
            return Err(Error::RateMismatch(mixture.rate_hz(), r.rate_hz));
        }
        if reference.len() != mixture.len() || reference.channels() != 1 {
            return mismatch("reference must be one channel of the mixture's length".into());
        }
        if let Some(img) = &images {
            if img.channels() != r.channels || img.len() != mixture.len() {
                return mismatch("images do not match the mixture".into());
            }
        }
        Ok(Utterance {
            id: r.id.clone(),
            mixture,
            reference,
            images,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Utterance>> {
        self.records.iter().map(|r| self.load(r)).collect()
    }
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Manifest paths written by [`build_corpus`], keyed `(subset, split)`.
#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub manifests: Vec<(String, String, PathBuf)>,
}

impl CorpusSummary {
    pub fn manifest(&self, subset: &str, split: &str) -> Option<&Path> {
        self.manifests
            .iter()
            .find(|(a, b, _)| a == subset && b == split)
            .map(|(_, _, p)| p.as_path())
    }
}

pub const RATES: [u32; 2] = [8000, 16000];

/// Random scene for a `channels`-channel utterance: uneven SNRs, small gains and
/// delays, and (for arrays of 3+) an occasional failed non-reference microphone.
pub fn random_scene(channels: usize, rate_hz: u32, rng: &mut impl Rng) -> SceneSpec {
    let max_delay = (rate_hz / 1000) as usize;
    SceneSpec {
        rate_hz,
        gains_db: (0..channels).map(|c| if c == 0 { 0.0 } else { rng.gen_range(-6.0..3.0) }).collect(),
        delays: (0..channels).map(|c| if c == 0 { 0 } else { rng.gen_range(0..=max_delay) }).collect(),
        snr_db: (0..channels).map(|_| Some(rng.gen_range(-5.0..20.0))).collect(),
        failed: (0..channels).map(|c| c > 0 && channels >= 3 && rng.gen_bool(0.15)).collect(),
    }
}

/// Writes float-32 WAVs and `{single,multi}/{train,dev,test}.jsonl` under `out`.
pub fn build_corpus(out: &Path, counts: SplitCounts, seed: u64) -> Result<CorpusSummary> {
    let mut manifests = Vec::new();
    for (si, subset) in ["single", "multi"].into_iter().enumerate() {
        for (pi, (split, count)) in [("train", counts.train), ("dev", counts.dev), ("test", counts.test)]
            .into_iter()
            .enumerate()
        {
            let dir = out.join(subset).join(split);
            fs::create_dir_all(&dir)?;
            let mut records = Vec::with_capacity(count);
            for i in 0..count {
                let mut rng = stream_rng(seed, &[si as u64, pi as u64, i as u64]);
                let rate = *RATES.choose(&mut rng).unwrap();
                let channels = if subset == "single" { 1 } else { rng.gen_range(2..=5) };
                let clean = synthesize_speech_like(rng.gen_range(2.0..4.5), rate, &mut rng)?;
                let spec = random_scene(channels, rate, &mut rng);
                let scene = spatialize_and_mix(&clean, &spec, &mut rng)?;
                let id = format!("{subset}-{split}-{i:04}");
                let rel = |kind: &str| format!("{split}/{id}_{kind}.wav");
                write_wav(dir.join(format!("{id}_mix.wav")), &scene.mixture, WavEncoding::Float32)?;
                write_wav(dir.join(format!("{id}_ref.wav")), &scene.reference, WavEncoding::Float32)?;
                let images = if channels > 1 {
                    write_wav(dir.join(format!("{id}_img.wav")), &scene.images, WavEncoding::Float32)?;
                    Some(rel("img"))
                } else {
                    None
                };
                records.push(UtteranceRecord {
                    mixture_path: rel("mix"),
                    reference_path: rel("ref"),
                    id,
                    images_path: images,
                    rate_hz: rate,
                    channels,
                    snr_db: spec.snr_db.clone(),
                });
            }
            let path = out.join(subset).join(format!("{split}.jsonl"));
            write_manifest(&path, &records)?;
            manifests.push((subset.to_string(), split.to_string(), path));
        }
    }
    Ok(CorpusSummary { manifests })
}
