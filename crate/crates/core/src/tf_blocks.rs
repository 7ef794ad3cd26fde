//! Time-frequency modeling: (shifted-)window transformer layers with a learned
//! 2D relative positional bias, frequency-path and time-path layers, memory
//! tokens, and the two block compositions built from them.
//!
//! Features are `(C, F, T, N)`. None of the parameters here depend on `F` or `T`;
//! the relative bias table depends only on the window size, so a table learned at
//! one sampling rate applies unchanged at another.

use candle_core::{DType, Device, Tensor};

use crate::nn::{BiGru, Init, LayerNorm, Linear, MultiHeadSelfAttention, ParamBuilder};
use crate::{Error, Result};

/// Additive logit for disallowed attention pairs.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    /// Window height in frequency bins.
    pub wf: usize,
    /// Window width in frames.
    pub wt: usize,
    pub shifted: bool,
}

impl WindowSpec {
    pub fn new(wf: usize, wt: usize, shifted: bool) -> Result<Self> {
        if wf == 0 || wt == 0 {
            return Err(Error::Config(format!("window {wf}x{wt} must be at least 1x1")));
        }
        Ok(Self { wf, wt, shifted })
    }

    /// Cyclic shift along (frequency, time).
    pub fn shift(&self) -> (usize, usize) {
        if self.shifted {
            (self.wf / 2, self.wt / 2)
        } else {
            (0, 0)
        }
    }

    pub fn tokens(&self) -> usize {
        self.wf * self.wt
    }
}

/// What `partition_windows` did, so `merge_windows` can undo it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaddingRecord {
    pub channels: usize,
    pub f: usize,
    pub t: usize,
    pub f_padded: usize,
    pub t_padded: usize,
    pub shift_f: usize,
    pub shift_t: usize,
}

impl PaddingRecord {
    pub fn windows_per_channel(&self, spec: &WindowSpec) -> usize {
        (self.f_padded / spec.wf) * (self.t_padded / spec.wt)
    }
}

#[derive(Debug, Clone)]
pub struct WindowPartition {
    /// `(C * nF * nT, wf * wt, N)`, windows in row-major (frequency, time) order per channel.
    pub windows: Tensor,
    pub record: PaddingRecord,
    /// `(nF * nT, L, L)` additive mask separating regions joined by the cyclic shift.
    pub mask: Option<Tensor>,
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

pub fn partition_windows(f: &Tensor, spec: &WindowSpec) -> Result<WindowPartition> {
    let (c, nf_bins, nt_frames, n) = f.dims4()?;
    let (fp, tp) = (round_up(nf_bins, spec.wf), round_up(nt_frames, spec.wt));
    let (sf, st) = spec.shift();
    let mut x = f.pad_with_zeros(1, 0, fp - nf_bins)?.pad_with_zeros(2, 0, tp - nt_frames)?;
    if sf > 0 {
        x = x.roll(-(sf as i32), 1)?;
    }
    if st > 0 {
        x = x.roll(-(st as i32), 2)?;
    }
    let (nwf, nwt) = (fp / spec.wf, tp / spec.wt);
    let windows = x
        .reshape((c, nwf, spec.wf, nwt, spec.wt, n))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((c * nwf * nwt, spec.tokens(), n))?;
    let record = PaddingRecord {
        channels: c,
        f: nf_bins,
        t: nt_frames,
        f_padded: fp,
        t_padded: tp,
        shift_f: sf,
        shift_t: st,
    };
    let mask = if spec.shifted {
        Some(shift_mask(&record, spec, f.dtype(), f.device())?)
    } else {
        None
    };
    Ok(WindowPartition {
        windows,
        record,
        mask,
    })
}

pub fn merge_windows(windows: &Tensor, record: &PaddingRecord, spec: &WindowSpec) -> Result<Tensor> {
    let (b, l, n) = windows.dims3()?;
    let (nwf, nwt) = (record.f_padded / spec.wf, record.t_padded / spec.wt);
    if l != spec.tokens()
        || b != record.channels * nwf * nwt
        || record.f_padded % spec.wf != 0
        || record.t_padded % spec.wt != 0
        || (record.shift_f, record.shift_t) != spec.shift()
    {
        return Err(Error::Shape(format!(
            "windows {:?} inconsistent with padding record {record:?}",
            windows.dims()
        )));
    }
    let mut x = windows
        .reshape((record.channels, nwf, nwt, spec.wf, spec.wt, n))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((record.channels, record.f_padded, record.t_padded, n))?;
    if record.shift_f > 0 {
        x = x.roll(record.shift_f as i32, 1)?;
    }
    if record.shift_t > 0 {
        x = x.roll(record.shift_t as i32, 2)?;
    }
    Ok(x.narrow(1, 0, record.f)?.narrow(2, 0, record.t)?)
}

/// Region label of every padded position in the shifted frame of reference: the
/// last window along each axis holds positions that wrapped around, which must
/// not attend to the rest of their window.
pub fn region_labels(record: &PaddingRecord, spec: &WindowSpec) -> Vec<u32> {
    let axis = |len: usize, w: usize, s: usize, i: usize| -> u32 {
        if i < len - w {
            0
        } else if i < len - s {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0u32; record.f_padded * record.t_padded];
    for fi in 0..record.f_padded {
        for ti in 0..record.t_padded {
            labels[fi * record.t_padded + ti] = axis(record.f_padded, spec.wf, record.shift_f, fi) * 3
                + axis(record.t_padded, spec.wt, record.shift_t, ti);
        }
    }
    labels
}

fn shift_mask(record: &PaddingRecord, spec: &WindowSpec, dtype: DType, dev: &Device) -> Result<Tensor> {
    let labels = region_labels(record, spec);
    let (nwf, nwt) = (record.f_padded / spec.wf, record.t_padded / spec.wt);
    let l = spec.tokens();
    let mut mask = vec![0f64; nwf * nwt * l * l];
    for wf in 0..nwf {
        for wt in 0..nwt {
            let w = wf * nwt + wt;
            let lab = |i: usize| {
                let (fi, ti) = (wf * spec.wf + i / spec.wt, wt * spec.wt + i % spec.wt);
                labels[fi * record.t_padded + ti]
            };
            for i in 0..l {
                for j in 0..l {
                    if lab(i) != lab(j) {
                        mask[(w * l + i) * l + j] = MASKED;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nwf * nwt, l, l), dev)?.to_dtype(dtype)?)
}

/// Learnable bias added to window-attention logits, indexed by the 2D offset
/// between query and key positions.
#[derive(Debug, Clone)]
pub struct RelPosBias {
    /// `(heads, 2 wf - 1, 2 wt - 1)`.
    pub table: Tensor,
    index: Tensor,
    heads: usize,
    tokens: usize,
}

impl RelPosBias {
    pub fn new(vb: &ParamBuilder, heads: usize, wf: usize, wt: usize) -> Result<Self> {
        let table = vb.get(&[heads, 2 * wf - 1, 2 * wt - 1], "table", Init::Uniform(0.02))?;
        let index = Tensor::from_vec(Self::index_map(wf, wt), wf * wt * wf * wt, &Device::Cpu)?;
        Ok(Self {
            table,
            index,
            heads,
            tokens: wf * wt,
        })
    }

    /// Flat table index for every (query, key) pair of a window.
    pub fn index_map(wf: usize, wt: usize) -> Vec<u32> {
        let l = wf * wt;
        let mut idx = Vec::with_capacity(l * l);
        for i in 0..l {
            for j in 0..l {
                let df = (i / wt) as i64 - (j / wt) as i64 + wf as i64 - 1;
                let dt = (i % wt) as i64 - (j % wt) as i64 + wt as i64 - 1;
                idx.push((df * (2 * wt as i64 - 1) + dt) as u32);
            }
        }
        idx
    }

    /// `(heads, L, L)` bias.
    pub fn bias(&self) -> Result<Tensor> {
        Ok(self
            .table
            .flatten_from(1)?
            .index_select(&self.index, 1)?
            .reshape((self.heads, self.tokens, self.tokens))?)
    }

    pub fn param_count(heads: usize, wf: usize, wt: usize) -> usize {
        heads * (2 * wf - 1) * (2 * wt - 1)
    }
}

/// Pre-norm Swin-style layer: windowed multi-head attention with relative bias,
/// then a GELU MLP, each with a residual connection.
#[derive(Debug, Clone)]
pub struct WindowAttentionLayer {
    pub spec: WindowSpec,
    norm1: LayerNorm,
    attn: MultiHeadSelfAttention,
    bias: RelPosBias,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl WindowAttentionLayer {
    pub fn new(vb: &ParamBuilder, dim: usize, heads: usize, mlp_ratio: usize, spec: WindowSpec) -> Result<Self> {
        Ok(Self {
            spec,
            norm1: LayerNorm::new(&vb.pp("norm1"), dim)?,
            attn: MultiHeadSelfAttention::new(&vb.pp("attn"), dim, heads)?,
            bias: RelPosBias::new(&vb.pp("rel_bias"), heads, spec.wf, spec.wt)?,
            norm2: LayerNorm::new(&vb.pp("norm2"), dim)?,
            fc1: Linear::new(&vb.pp("fc1"), dim, mlp_ratio * dim)?,
            fc2: Linear::new(&vb.pp("fc2"), mlp_ratio * dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let part = partition_windows(&h, &self.spec)?;
        let bias = self.bias.bias()?;
        let a = self.attn.forward(&part.windows, Some(&bias), part.mask.as_ref())?;
        let x = (x + merge_windows(&a, &part.record, &self.spec)?)?;
        let m = self.fc2.forward(&crate::kernels::gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?)?;
        Ok((x + m)?)
    }

    pub fn param_count(dim: usize, heads: usize, mlp_ratio: usize, spec: &WindowSpec) -> usize {
        2 * LayerNorm::param_count(dim)
            + MultiHeadSelfAttention::param_count(dim)
            + RelPosBias::param_count(heads, spec.wf, spec.wt)
            + Linear::param_count(dim, mlp_ratio * dim)
            + Linear::param_count(mlp_ratio * dim, dim)
    }

    /// MACs for a `(C, F, T)` grid, counted on the padded grid.
    pub fn macs(dim: usize, mlp_ratio: usize, spec: &WindowSpec, c: usize, f: usize, t: usize) -> u64 {
        let tokens = (c * round_up(f, spec.wf) * round_up(t, spec.wt)) as u64;
        let (d, l) = (dim as u64, spec.tokens() as u64);
        tokens * (4 * d * d + 2 * l * d + 2 * mlp_ratio as u64 * d * d)
    }
}

/// Axis a path layer attends along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathAxis {
    /// Attention across frequency bins, independently per frame.
    Frequency,
    /// Attention across frames, independently per frequency bin.
    Time,
}

/// "Improved transformer" layer on one axis: self-attention, then a
/// bidirectional-GRU feed-forward (`N` per direction, `2N` concatenated) projected
/// back to `N`, each pre-normed with a residual connection.
#[derive(Debug, Clone)]
pub struct PathLayer {
    pub axis: PathAxis,
    norm1: LayerNorm,
    attn: MultiHeadSelfAttention,
    norm2: LayerNorm,
    rnn: BiGru,
    out: Linear,
}

impl PathLayer {
    pub fn new(vb: &ParamBuilder, dim: usize, heads: usize, axis: PathAxis) -> Result<Self> {
        Ok(Self {
            axis,
            norm1: LayerNorm::new(&vb.pp("norm1"), dim)?,
            attn: MultiHeadSelfAttention::new(&vb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&vb.pp("norm2"), dim)?,
            rnn: BiGru::new(&vb.pp("rnn"), dim, dim)?,
            out: Linear::new(&vb.pp("out"), 2 * dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, f, t, n) = x.dims4()?;
        let seq = match self.axis {
            PathAxis::Frequency => x.permute((0, 2, 1, 3))?.reshape((c * t, f, n))?,
            PathAxis::Time => x.reshape((c * f, t, n))?,
        };
        let seq = (&seq + self.attn.forward(&self.norm1.forward(&seq)?, None, None)?)?;
        let ff = self.out.forward(&self.rnn.forward(&self.norm2.forward(&seq)?)?.relu()?)?;
        let seq = (seq + ff)?;
        Ok(match self.axis {
            PathAxis::Frequency => seq.reshape((c, t, f, n))?.permute((0, 2, 1, 3))?.contiguous()?,
            PathAxis::Time => seq.reshape((c, f, t, n))?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * LayerNorm::param_count(dim)
            + MultiHeadSelfAttention::param_count(dim)
            + BiGru::param_count(dim, dim)
            + Linear::param_count(2 * dim, dim)
    }

    /// MACs for `sequences` sequences of length `len`.
    pub fn macs(dim: usize, len: usize, sequences: usize) -> u64 {
        let (d, l) = (dim as u64, len as u64);
        let per_token = 4 * d * d + 2 * l * d + 2 * (3 * d * d + 3 * d * d) + 2 * d * d;
        sequences as u64 * l * per_token
    }
}

/// Learnable `G` memory frames (conceptually `1 x N x 1 x G`), prepended along
/// time and broadcast over channels and frequency bins.
#[derive(Debug, Clone)]
pub struct MemoryTokens {
    /// `(G, N)`.
    pub tokens: Tensor,
}

impl MemoryTokens {
    pub fn new(vb: &ParamBuilder, group: usize, dim: usize) -> Result<Self> {
        if group == 0 {
            return Err(Error::Config("memory group size must be at least 1".into()));
        }
        Ok(Self {
            tokens: vb.get(&[group, dim], "tokens", Init::Uniform(1.0 / (dim as f64).sqrt()))?,
        })
    }

    pub fn group(&self) -> usize {
        self.tokens.dims()[0]
    }

    /// Prepends `G` frames: the learned tokens, or `carry` (`(C, F, G, N)`) from the
    /// previous segment.
    pub fn attach(&self, x: &Tensor, carry: Option<&Tensor>) -> Result<Tensor> {
        let (c, f, _, n) = x.dims4()?;
        let g = self.group();
        let mem = match carry {
            Some(m) => {
                if m.dims() != [c, f, g, n] {
                    return Err(Error::Shape(format!(
                        "memory carry {:?} does not match (C={c}, F={f}, G={g}, N={n})",
                        m.dims()
                    )));
                }
                m.clone()
            }
            None => self.tokens.reshape((1, 1, g, n))?.broadcast_as((c, f, g, n))?.contiguous()?,
        };
        Ok(Tensor::cat(&[&mem, x], 2)?)
    }

    /// Splits off the leading `G` frames: `(features, carry)`.
    pub fn detach(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.group();
        let t = x.dim(2)?;
        if t <= g {
            return Err(Error::Shape(format!("{t} frames cannot hold {g} memory frames")));
        }
        Ok((x.narrow(2, g, t - g)?, x.narrow(2, 0, g)?))
    }
}

/// One time-frequency modeling module.
#[derive(Debug, Clone)]
pub enum TfModule {
    /// Alternating windowed / shift-windowed layers, no memory.
    Swin { layers: Vec<WindowAttentionLayer> },
    /// Window layer, frequency path, then time path with memory frames.
    Comp {
        window: WindowAttentionLayer,
        freq: PathLayer,
        memory: MemoryTokens,
        time: PathLayer,
    },
    /// Frequency path then time path with memory frames.
    DualPath {
        freq: PathLayer,
        memory: MemoryTokens,
        time: PathLayer,
    },
}

impl TfModule {
    pub fn uses_memory(&self) -> bool {
        !matches!(self, TfModule::Swin { .. })
    }

    pub fn transformer_layers(&self) -> usize {
        match self {
            TfModule::Swin { layers } => layers.len(),
            TfModule::Comp { .. } => 3,
            TfModule::DualPath { .. } => 2,
        }
    }

    /// Returns the output and the memory carry for the next segment (if any).
    pub fn forward(&self, x: &Tensor, carry: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
        match self {
            TfModule::Swin { layers } => {
                let mut x = x.clone();
                for l in layers {
                    x = l.forward(&x)?;
                }
                Ok((x, None))
            }
            TfModule::Comp {
                window,
                freq,
                memory,
                time,
            } => {
                let x = freq.forward(&window.forward(x)?)?;
                let (x, mem) = memory.detach(&time.forward(&memory.attach(&x, carry)?)?)?;
                Ok((x, Some(mem)))
            }
            TfModule::DualPath { freq, memory, time } => {
                let x = freq.forward(x)?;
                let (x, mem) = memory.detach(&time.forward(&memory.attach(&x, carry)?)?)?;
                Ok((x, Some(mem)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, f: usize, t: usize, n: usize) -> Tensor {
        let v: Vec<f32> = (0..c * f * t * n).map(|i| i as f32).collect();
        Tensor::from_vec(v, (c, f, t, n), &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn partition_counts_for_8k_grid() {
        let x = Tensor::zeros((1, 129, 251, 4), DType::F32, &Device::Cpu).unwrap();
        let p = partition_windows(&x, &WindowSpec::new(8, 8, false).unwrap()).unwrap();
        assert_eq!((p.record.f_padded, p.record.t_padded), (136, 256));
        assert_eq!(p.windows.dims(), &[17 * 32, 64, 4]);
        assert!(p.mask.is_none());
    }

    #[test]
    fn full_size_window_is_global() {
        let x = ramp(2, 5, 6, 3);
        let p = partition_windows(&x, &WindowSpec::new(5, 6, false).unwrap()).unwrap();
        assert_eq!(p.windows.dims(), &[2, 30, 3]);
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let x = Tensor::randn(0f32, 1.0, (2, 13, 11, 3), &Device::Cpu).unwrap();
        for shifted in [false, true] {
            let spec = WindowSpec::new(4, 3, shifted).unwrap();
            let p = partition_windows(&x, &spec).unwrap();
            let y = merge_windows(&p.windows, &p.record, &spec).unwrap();
            assert_eq!(max_abs_diff(&x, &y), 0.0);
        }
    }

    #[test]
    fn shifted_partition_starts_at_half_window_offset() {
        // Each value encodes its own (f, t) coordinate.
        let (f, t) = (16, 16);
        let v: Vec<f32> = (0..f * t).map(|i| ((i / t) * 100 + i % t) as f32).collect();
        let x = Tensor::from_vec(v, (1, f, t, 1), &Device::Cpu).unwrap();
        let spec = WindowSpec::new(8, 4, true).unwrap();
        assert_eq!(spec.shift(), (4, 2));
        let p = partition_windows(&x, &spec).unwrap();
        let w = p.windows.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // window 0, token 0 -> original (4, 2); token 1 -> (4, 3); token wt -> (5, 2)
        assert_eq!(w[0], 402.0);
        assert_eq!(w[1], 403.0);
        assert_eq!(w[4], 502.0);
        // last window along time wraps: window (0, 3) token 3 came from t = (3*4 + 3 + 2) % 16 = 1
        assert_eq!(w[3 * 32 + 3], 401.0);
    }

    #[test]
    fn shift_mask_blocks_only_wrapped_pairs() {
        let x = Tensor::zeros((1, 8, 8, 1), DType::F32, &Device::Cpu).unwrap();
        let spec = WindowSpec::new(4, 4, true).unwrap();
        let p = partition_windows(&x, &spec).unwrap();
        let m = p.mask.unwrap();
        assert_eq!(m.dims(), &[4, 16, 16]);
        let m = m.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // Window 0 contains no wrapped positions.
        assert!(m[..256].iter().all(|&v| v == 0.0));
        // Last window: four regions of 2x2 tokens; token 0 and token 3 are in different regions.
        let last = &m[3 * 256..];
        assert_eq!(last[0 * 16 + 1], 0.0);
        assert!(last[0 * 16 + 2] < -1e8);
        assert!(last[0 * 16 + 8] < -1e8);
    }

    #[test]
    fn merge_rejects_inconsistent_record() {
        let x = ramp(1, 8, 8, 2);
        let spec = WindowSpec::new(4, 4, false).unwrap();
        let p = partition_windows(&x, &spec).unwrap();
        let mut bad = p.record;
        bad.channels = 2;
        assert!(merge_windows(&p.windows, &bad, &spec).is_err());
        let shifted = WindowSpec::new(4, 4, true).unwrap();
        assert!(merge_windows(&p.windows, &p.record, &shifted).is_err());
    }

    #[test]
    fn relative_bias_table_shape_and_index() {
        let vb = ParamBuilder::create(0, DType::F32);
        let b = RelPosBias::new(&vb, 4, 8, 8).unwrap();
        assert_eq!(b.table.dims(), &[4, 15, 15]);
        let idx = RelPosBias::index_map(8, 8);
        // Zero offset maps to the table center for every token.
        for i in 0..64 {
            assert_eq!(idx[i * 64 + i], 7 * 15 + 7);
        }
        assert_eq!(b.bias().unwrap().dims(), &[4, 64, 64]);
    }

    #[test]
    fn memory_attach_detach_shapes() {
        let vb = ParamBuilder::create(0, DType::F32);
        let mem = MemoryTokens::new(&vb, 4, 8).unwrap();
        let x = Tensor::zeros((1, 3, 251, 8), DType::F32, &Device::Cpu).unwrap();
        let a = mem.attach(&x, None).unwrap();
        assert_eq!(a.dims(), &[1, 3, 255, 8]);
        // No carry: the first frames are the learned tokens.
        let first = a.narrow(2, 0, 4).unwrap().get(0).unwrap().get(2).unwrap();
        assert_eq!(max_abs_diff(&first, &mem.tokens), 0.0);
        let (y, carry) = mem.detach(&a).unwrap();
        assert_eq!(y.dims(), &[1, 3, 251, 8]);
        assert_eq!(carry.dims(), &[1, 3, 4, 8]);
        let again = mem.attach(&y, Some(&carry)).unwrap();
        assert_eq!(max_abs_diff(&again, &a), 0.0);
        let wrong = Tensor::zeros((1, 3, 2, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(mem.attach(&y, Some(&wrong)).is_err());
    }

    #[test]
    fn layers_preserve_shape() {
        let vb = ParamBuilder::create(0, DType::F32);
        let spec = WindowSpec::new(4, 4, true).unwrap();
        let w = WindowAttentionLayer::new(&vb.pp("w"), 8, 2, 2, spec).unwrap();
        let fp = PathLayer::new(&vb.pp("f"), 8, 2, PathAxis::Frequency).unwrap();
        let tp = PathLayer::new(&vb.pp("t"), 8, 2, PathAxis::Time).unwrap();
        for (f, t) in [(9, 7), (17, 3), (1, 1)] {
            let x = Tensor::randn(0f32, 1.0, (2, f, t, 8), &Device::Cpu).unwrap();
            assert_eq!(w.forward(&x).unwrap().dims(), x.dims());
            assert_eq!(fp.forward(&x).unwrap().dims(), x.dims());
            assert_eq!(tp.forward(&x).unwrap().dims(), x.dims());
        }
        let set = vb.params();
        let w_count: usize = set.iter().filter(|e| e.name.starts_with("w.")).map(|e| e.elem_count()).sum();
        assert_eq!(w_count, WindowAttentionLayer::param_count(8, 2, 2, &spec));
        let f_count: usize = set.iter().filter(|e| e.name.starts_with("f.")).map(|e| e.elem_count()).sum();
        assert_eq!(f_count, PathLayer::param_count(8));
    }

    #[test]
    fn heads_must_divide_dim() {
        let vb = ParamBuilder::create(0, DType::F32);
        let spec = WindowSpec::new(2, 2, false).unwrap();
        assert!(WindowAttentionLayer::new(&vb, 6, 4, 2, spec).is_err());
        assert!(PathLayer::new(&vb.pp("p"), 6, 4, PathAxis::Time).is_err());
    }

    #[test]
    fn zero_residual_branches_give_identity() {
        let vb = ParamBuilder::create(0, DType::F32);
        let spec = WindowSpec::new(2, 3, true).unwrap();
        let layer = WindowAttentionLayer::new(&vb, 4, 2, 2, spec).unwrap();
        for e in vb.params().iter() {
            if e.name.starts_with("attn.proj") || e.name.starts_with("fc2") {
                e.var.set(&e.var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::randn(0f32, 1.0, (1, 5, 7, 4), &Device::Cpu).unwrap();
        assert_eq!(max_abs_diff(&layer.forward(&x).unwrap(), &x), 0.0);
    }

    #[test]
    fn path_layers_are_axis_local() {
        let vb = ParamBuilder::create(5, DType::F64);
        let fp = PathLayer::new(&vb.pp("f"), 4, 2, PathAxis::Frequency).unwrap();
        let tp = PathLayer::new(&vb.pp("t"), 4, 2, PathAxis::Time).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 6, 4), &Device::Cpu).unwrap();
        let bump = {
            let mut d = vec![0f64; 5 * 6 * 4];
            d[(2 * 6 + 4) * 4 + 1] = 1.0; // bin 2, frame 4
            Tensor::from_vec(d, (1, 5, 6, 4), &Device::Cpu).unwrap()
        };
        let xp = (&x + &bump).unwrap();
        let (y, yp) = (fp.forward(&x).unwrap(), fp.forward(&xp).unwrap());
        for t in 0..6 {
            let d = max_abs_diff(&y.narrow(2, t, 1).unwrap(), &yp.narrow(2, t, 1).unwrap());
            assert_eq!(d == 0.0, t != 4, "frequency path leaked across frames at t={t}");
        }
        let (y, yp) = (tp.forward(&x).unwrap(), tp.forward(&xp).unwrap());
        for f in 0..5 {
            let d = max_abs_diff(&y.narrow(1, f, 1).unwrap(), &yp.narrow(1, f, 1).unwrap());
            assert_eq!(d == 0.0, f != 2, "time path leaked across bins at f={f}");
        }
    }

    #[test]
    fn window_layers_pass_gradient_check() {
        for shifted in [false, true] {
            for seed in 0..3 {
                let vb = ParamBuilder::create(seed, DType::F64);
                let layer = WindowAttentionLayer::new(&vb, 4, 2, 2, WindowSpec::new(2, 2, shifted).unwrap()).unwrap();
                let x = crate::gradcheck::seeded_input(seed, &[1, 3, 3, 4]).unwrap();
                let r = crate::gradcheck::check(&vb.params(), &x, |x| layer.forward(x), 1e-3, 32).unwrap();
                assert!(r.passes(1e-4), "shifted={shifted} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn path_layers_pass_gradient_check() {
        for axis in [PathAxis::Frequency, PathAxis::Time] {
            for seed in 0..3 {
                let vb = ParamBuilder::create(seed, DType::F64);
                let layer = PathLayer::new(&vb, 4, 2, axis).unwrap();
                let x = crate::gradcheck::seeded_input(seed, &[1, 3, 3, 4]).unwrap();
                let r = crate::gradcheck::check(&vb.params(), &x, |x| layer.forward(x), 1e-3, 32).unwrap();
                assert!(r.passes(1e-4), "{axis:?} seed {seed}: {r:?}");
            }
        }
    }
}
