//! Multichannel waveforms and RIFF WAV I/O (PCM-16 and IEEE float-32).

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::{Error, Result};

/// Channel-major multichannel signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    channels: usize,
    rate_hz: u32,
}

/// On-disk sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

impl Waveform {
    /// Builds a waveform from channel-major samples (`channels` runs of equal length).
    pub fn new(samples: Vec<f32>, channels: usize, rate_hz: u32) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidWaveform("zero channels".into()));
        }
        if rate_hz == 0 {
            return Err(Error::InvalidWaveform("zero sampling rate".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptySignal);
        }
        if samples.len() % channels != 0 {
            return Err(Error::InvalidWaveform(format!(
                "{} samples do not split into {channels} channels",
                samples.len()
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            channels,
            rate_hz,
        })
    }

    pub fn from_channels(channels: &[Vec<f32>], rate_hz: u32) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidWaveform("ragged channels".into()));
        }
        Self::new(channels.concat(), channels.len(), rate_hz)
    }

    pub fn mono(samples: Vec<f32>, rate_hz: u32) -> Result<Self> {
        Self::new(samples, 1, rate_hz)
    }

    pub fn zeros(channels: usize, len: usize, rate_hz: u32) -> Result<Self> {
        Self::new(vec![0.0; channels * len], channels, rate_hz)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rate_hz(&self) -> u32 {
        self.rate_hz
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.rate_hz as f64
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.len();
        &self.samples[c * n..(c + 1) * n]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    /// Keeps the listed channels, in the listed order.
    pub fn select_channels(&self, order: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(order.len() * self.len());
        for &c in order {
            if c >= self.channels {
                return Err(Error::Shape(format!(
                    "channel {c} out of range for {} channels",
                    self.channels
                )));
            }
            out.extend_from_slice(self.channel(c));
        }
        Self::new(out, order.len(), self.rate_hz)
    }

    /// `channels x len` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.samples, (self.channels, self.len()), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, rate_hz: u32) -> Result<Self> {
        let (c, _) = t.dims2()?;
        let samples = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(samples, c, rate_hz)
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::InvalidWaveform(format!(
                "unsupported WAV encoding {fmt:?}/{bits} bit"
            )))
        }
    };
    let len = interleaved.len() / channels.max(1);
    let mut planar = vec![0.0f32; interleaved.len()];
    for (i, frame) in interleaved.chunks_exact(channels).enumerate() {
        for (c, &s) in frame.iter().enumerate() {
            planar[c * len + i] = s;
        }
    }
    Waveform::new(planar, channels, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: wav.channels() as u16,
        sample_rate: wav.rate_hz(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for i in 0..wav.len() {
        for c in 0..wav.channels() {
            let s = wav.channel(c)[i];
            match encoding {
                WavEncoding::Float32 => writer.write_sample(s)?,
                WavEncoding::Pcm16 => {
                    writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?
                }
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(Waveform::mono(vec![], 8000), Err(Error::EmptySignal)));
        assert!(Waveform::new(vec![0.0; 5], 2, 8000).is_err());
        assert!(Waveform::mono(vec![f32::NAN], 8000).is_err());
    }

    #[test]
    fn float_wav_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = Waveform::from_channels(&[vec![0.1, -0.2, 0.3], vec![1.0, 0.0, -1.0]], 16000).unwrap();
        write_wav(&path, &w, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&path).unwrap(), w);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = Waveform::from_channels(&[vec![0.25, -0.5, 0.001], vec![0.9, 0.0, -0.9]], 8000).unwrap();
        write_wav(&path, &w, WavEncoding::Pcm16).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.channels(), 2);
        assert_eq!(r.rate_hz(), 8000);
        for (a, b) in r.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
