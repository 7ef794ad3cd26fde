//! Sampling-frequency-independent STFT front end and the convolutional
//! encoder/decoder between complex spectra and `N`-dimensional T-F embeddings.
//!
//! Window and hop are fixed in physical time (32 ms / 16 ms), so the number of
//! frames for a given duration is the same at every sampling rate and only the
//! number of frequency bins changes. Nothing in the encoder or decoder is shaped
//! by the number of bins.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use candle_core::{DType, Device, Tensor};

use crate::audio::Waveform;
use crate::nn::{Init, LayerNorm, Linear, PRelu, ParamBuilder};
use crate::{Error, Result};

pub const WIN_MS: u32 = 32;
pub const HOP_MS: u32 = 16;

/// Padding applied before framing so frame `t` is centered on sample `t * hop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Mirror the signal around its ends (falls back to zeros for signals no longer than the pad).
    Reflect,
    Zeros,
}

/// A centered, periodic-Hann STFT with `hop` dividing `n_fft`.
#[derive(Debug, Clone)]
pub struct StftPlan {
    pub n_fft: usize,
    pub hop: usize,
    pub pad_mode: PadMode,
    window: Vec<f64>,
}

pub fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// FFT size for a rate, or an error if 32 ms is not a whole number of samples.
pub fn fft_size_for_rate(rate_hz: u32) -> Result<usize> {
    if rate_hz == 0 || (rate_hz as u64 * WIN_MS as u64) % 1000 != 0 {
        return Err(Error::UnsupportedRate(rate_hz));
    }
    Ok((rate_hz as u64 * WIN_MS as u64 / 1000) as usize)
}

impl StftPlan {
    pub fn new(n_fft: usize, hop: usize, pad_mode: PadMode) -> Result<Self> {
        if n_fft < 2 || n_fft % 2 != 0 || hop == 0 || n_fft % hop != 0 {
            return Err(Error::Config(format!(
                "STFT needs an even window divisible by the hop (got {n_fft}/{hop})"
            )));
        }
        Ok(Self {
            n_fft,
            hop,
            pad_mode,
            window: periodic_hann(n_fft),
        })
    }

    /// The model front end: 32 ms window, 16 ms hop, reflection padding.
    pub fn for_rate(rate_hz: u32) -> Result<Self> {
        let n_fft = fft_size_for_rate(rate_hz)?;
        Self::new(n_fft, n_fft / 2, PadMode::Reflect)
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn pad_index(&self, len: usize) -> Vec<u32> {
        let pad = self.n_fft / 2;
        let reflect = self.pad_mode == PadMode::Reflect && len > pad;
        (0..len + 2 * pad)
            .map(|i| {
                let s = i as i64 - pad as i64;
                let idx = if s < 0 {
                    if reflect { -s } else { -1 }
                } else if s >= len as i64 {
                    if reflect { 2 * (len as i64 - 1) - s } else { -1 }
                } else {
                    s
                };
                // Out-of-range zeros are read from an appended zero sample.
                if idx < 0 { len as u32 } else { idx as u32 }
            })
            .collect()
    }

    /// `(C, L)` signal to `(C, 2, F, T)` real/imaginary planes.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, len) = x.dims2()?;
        if len == 0 {
            return Err(Error::EmptySignal);
        }
        let (dtype, dev) = (x.dtype(), x.device());
        let t = self.frames(len);
        let r = self.n_fft / self.hop;
        let idx = Tensor::from_vec(self.pad_index(len), len + self.n_fft, dev)?;
        let xz = Tensor::cat(&[x, &Tensor::zeros((c, 1), dtype, dev)?], 1)?;
        let padded = xz.index_select(&idx, 1)?;
        let chunks = padded
            .narrow(1, 0, (t + r - 1) * self.hop)?
            .reshape((c, t + r - 1, self.hop))?;
        let pieces = (0..r).map(|j| chunks.narrow(1, j, t)).collect::<candle_core::Result<Vec<_>>>()?;
        let frames = Tensor::cat(&pieces, 2)?; // (C, T, n_fft)
        let basis = self.analysis_basis(dtype, dev)?;
        let f = self.bins();
        let spec = frames
            .reshape((c * t, self.n_fft))?
            .matmul(&basis)?
            .reshape((c, t, 2, f))?
            .permute((0, 2, 3, 1))?
            .contiguous()?;
        Ok(spec)
    }

    /// `(C, 2, F, T)` planes to a `(C, out_len)` signal by windowed overlap-add.
    pub fn inverse(&self, spec: &Tensor, out_len: usize) -> Result<Tensor> {
        let (c, two, f, t) = spec.dims4()?;
        if two != 2 || f != self.bins() {
            return Err(Error::Shape(format!(
                "spectrum {:?} does not match an {}-point transform",
                spec.dims(),
                self.n_fft
            )));
        }
        if out_len == 0 || self.frames(out_len) != t {
            return Err(Error::InconsistentLength {
                requested: out_len,
                frames: t,
                hop: self.hop,
            });
        }
        let (dtype, dev) = (spec.dtype(), spec.device());
        let r = self.n_fft / self.hop;
        let frames = spec
            .permute((0, 3, 1, 2))?
            .reshape((c * t, 2 * f))?
            .matmul(&self.synthesis_basis(dtype, dev)?)?
            .reshape((c, t, r, self.hop))?;
        let mut acc: Option<Tensor> = None;
        for j in 0..r {
            let piece = frames.narrow(2, j, 1)?.squeeze(2)?.pad_with_zeros(1, j, r - 1 - j)?;
            acc = Some(match acc {
                None => piece,
                Some(a) => (a + piece)?,
            });
        }
        let total = (t + r - 1) * self.hop;
        let y = acc.unwrap().reshape((c, total))?;
        let env = self.envelope(t);
        let inv: Vec<f64> = env.iter().map(|&e| if e > 1e-10 { 1.0 / e } else { 0.0 }).collect();
        let inv = Tensor::from_vec(inv, (1, total), dev)?.to_dtype(dtype)?;
        Ok(y.broadcast_mul(&inv)?.narrow(1, self.n_fft / 2, out_len)?)
    }

    /// Sum of squared windows at each padded-signal position.
    fn envelope(&self, frames: usize) -> Vec<f64> {
        let r = self.n_fft / self.hop;
        let mut env = vec![0.0; (frames + r - 1) * self.hop];
        for t in 0..frames {
            for (n, w) in self.window.iter().enumerate() {
                env[t * self.hop + n] += w * w;
            }
        }
        env
    }

    fn cached(
        &self,
        synthesis: bool,
        dtype: DType,
        dev: &Device,
        make: impl FnOnce() -> Result<Tensor>,
    ) -> Result<Tensor> {
        type Key = (usize, bool, DType);
        static CACHE: OnceLock<Mutex<HashMap<Key, Tensor>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let key = (self.n_fft, synthesis, dtype);
        if let Some(t) = cache.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let t = make()?.to_device(dev)?;
        cache.lock().unwrap().insert(key, t.clone());
        Ok(t)
    }

    /// `(n_fft, 2F)`: windowed cosine columns then negated windowed sine columns.
    fn analysis_basis(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        self.cached(false, dtype, dev, || self.make_analysis_basis(dtype, dev))
    }

    fn synthesis_basis(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        self.cached(true, dtype, dev, || self.make_synthesis_basis(dtype, dev))
    }

    fn make_analysis_basis(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        let (n, f) = (self.n_fft, self.bins());
        let mut b = vec![0.0f64; n * 2 * f];
        for i in 0..n {
            for k in 0..f {
                let ang = 2.0 * std::f64::consts::PI * ((i * k) % n) as f64 / n as f64;
                b[i * 2 * f + k] = self.window[i] * ang.cos();
                b[i * 2 * f + f + k] = -self.window[i] * ang.sin();
            }
        }
        Ok(Tensor::from_vec(b, (n, 2 * f), dev)?.to_dtype(dtype)?)
    }

    /// `(2F, n_fft)`: real inverse DFT of a one-sided spectrum, times the synthesis window.
    fn make_synthesis_basis(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        let (n, f) = (self.n_fft, self.bins());
        let mut b = vec![0.0f64; 2 * f * n];
        for k in 0..f {
            let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
            for i in 0..n {
                let ang = 2.0 * std::f64::consts::PI * ((i * k) % n) as f64 / n as f64;
                b[k * n + i] = weight * ang.cos() * self.window[i];
                b[(f + k) * n + i] = -weight * ang.sin() * self.window[i];
            }
        }
        Ok(Tensor::from_vec(b, (2 * f, n), dev)?.to_dtype(dtype)?)
    }
}

/// Complex spectrum stored as real/imaginary planes, `(C, 2, F, T)`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    planes: Tensor,
    rate_hz: u32,
}

impl Spectrum {
    pub fn new(planes: Tensor, rate_hz: u32) -> Result<Self> {
        let n_fft = fft_size_for_rate(rate_hz)?;
        let (_, two, f, _) = planes.dims4()?;
        if two != 2 || f != n_fft / 2 + 1 {
            return Err(Error::Shape(format!(
                "planes {:?} do not match {rate_hz} Hz ({} bins)",
                planes.dims(),
                n_fft / 2 + 1
            )));
        }
        Ok(Self { planes, rate_hz })
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn rate_hz(&self) -> u32 {
        self.rate_hz
    }

    pub fn channels(&self) -> usize {
        self.planes.dims()[0]
    }

    pub fn bins(&self) -> usize {
        self.planes.dims()[2]
    }

    pub fn frames(&self) -> usize {
        self.planes.dims()[3]
    }

    pub fn win_ms(&self) -> u32 {
        WIN_MS
    }

    pub fn hop_ms(&self) -> u32 {
        HOP_MS
    }
}

pub fn stft(w: &Waveform) -> Result<Spectrum> {
    let plan = StftPlan::for_rate(w.rate_hz())?;
    let planes = plan.forward(&w.to_tensor(DType::F32)?)?;
    Spectrum::new(planes, w.rate_hz())
}

pub fn istft(s: &Spectrum, out_len: usize) -> Result<Waveform> {
    let plan = StftPlan::for_rate(s.rate_hz())?;
    let y = plan.inverse(s.planes(), out_len)?;
    Waveform::from_tensor(&y, s.rate_hz())
}

/// Embedded T-F representation. Stored channel-first with the embedding last,
/// `(C, F, T, N)`, which is the layout every attention and linear map consumes.
#[derive(Debug, Clone)]
pub struct FeatureTensor(pub Tensor);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub n: usize,
    pub c: usize,
    pub f: usize,
    pub t: usize,
}

impl FeatureTensor {
    pub fn shape(&self) -> Result<FeatureShape> {
        let (c, f, t, n) = self.0.dims4()?;
        Ok(FeatureShape { n, c, f, t })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// 3x3 conv (2 -> N), layer norm over N, 1x1 conv (N -> N). Channels are a batch axis.
#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in_w: Tensor,
    conv_in_b: Tensor,
    norm: LayerNorm,
    conv_out: Linear,
    dim: usize,
}

impl Encoder {
    pub fn new(vb: &ParamBuilder, dim: usize) -> Result<Self> {
        let b = 1.0 / (2.0 * 9.0f64).sqrt();
        let conv = vb.pp("conv_in");
        Ok(Self {
            conv_in_w: conv.get(&[dim, 2, 3, 3], "weight", Init::Uniform(b))?,
            conv_in_b: conv.get(&[dim], "bias", Init::Uniform(b))?,
            norm: LayerNorm::new(&vb.pp("norm"), dim)?,
            conv_out: Linear::new(&vb.pp("conv_out"), dim, dim)?,
            dim,
        })
    }

    pub fn forward(&self, planes: &Tensor) -> Result<FeatureTensor> {
        let (_, two, _, _) = planes.dims4()?;
        if two != 2 {
            return Err(Error::Shape(format!("expected (C, 2, F, T), got {:?}", planes.dims())));
        }
        let y = planes.conv2d(&self.conv_in_w, 1, 1, 1, 1)?;
        let y = crate::kernels::add_broadcast(&y, &self.conv_in_b.reshape((1, self.dim, 1, 1))?)?.permute((0, 2, 3, 1))?;
        let y = self.norm.forward(&y)?;
        Ok(FeatureTensor(self.conv_out.forward(&y)?))
    }

    pub fn param_count(dim: usize) -> usize {
        dim * 2 * 9 + dim + LayerNorm::param_count(dim) + Linear::param_count(dim, dim)
    }

    /// MACs per T-F bin per channel.
    pub fn macs_per_bin(dim: usize) -> usize {
        dim * 2 * 9 + dim * dim
    }
}

/// PReLU, 1x1 conv (N -> N), 3x3 transposed conv (N -> 2) preserving F x T.
#[derive(Debug, Clone)]
pub struct Decoder {
    act: PRelu,
    pointwise: Linear,
    /// Transposed-conv kernel in `(in, out, kh, kw)` layout.
    deconv_w: Tensor,
    deconv_b: Tensor,
}

impl Decoder {
    pub fn new(vb: &ParamBuilder, dim: usize) -> Result<Self> {
        let b = 1.0 / (dim as f64 * 9.0).sqrt();
        let deconv = vb.pp("deconv");
        Ok(Self {
            act: PRelu::new(&vb.pp("act"))?,
            pointwise: Linear::new(&vb.pp("pointwise"), dim, dim)?,
            deconv_w: deconv.get(&[dim, 2, 3, 3], "weight", Init::Uniform(b))?,
            deconv_b: deconv.get(&[2], "bias", Init::Uniform(b))?,
        })
    }

    /// Reference-channel feature `(1, F, T, N)` to `(1, 2, F, T)` planes.
    pub fn forward(&self, f: &FeatureTensor) -> Result<Tensor> {
        let shape = f.shape()?;
        if shape.c != 1 {
            return Err(Error::Shape(format!(
                "decoder takes one reference channel, got {}",
                shape.c
            )));
        }
        let y = self.pointwise.forward(&self.act.forward(f.tensor())?)?;
        let y = y.permute((0, 3, 1, 2))?.contiguous()?;
        // A stride-1 transposed conv with padding 1 equals a padding-1 conv with the
        // spatially flipped, in/out-swapped kernel.
        let dev = y.device();
        let rev = Tensor::new(&[2u32, 1, 0], dev)?;
        let k = self
            .deconv_w
            .index_select(&rev, 2)?
            .index_select(&rev, 3)?
            .transpose(0, 1)?
            .contiguous()?;
        let y = y.conv2d(&k, 1, 1, 1, 1)?;
        Ok(crate::kernels::add_broadcast(&y, &self.deconv_b.reshape((1, 2, 1, 1))?)?)
    }

    pub fn param_count(dim: usize) -> usize {
        1 + Linear::param_count(dim, dim) + dim * 2 * 9 + 2
    }

    pub fn macs_per_bin(dim: usize) -> usize {
        dim * dim + dim * 2 * 9
    }
}
