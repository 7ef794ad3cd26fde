//! Parameter storage and the small differentiable building blocks shared by
//! every module (linear maps, layer norm, PReLU, bidirectional GRU, attention).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    /// Path of the submodule that created the tensor.
    pub owner: String,
    /// Set exactly for tensors that belong to channel modeling modules.
    pub channel_module: bool,
    pub var: Var,
}

impl ParamEntry {
    pub fn dims(&self) -> Vec<usize> {
        self.var.dims().to_vec()
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    pub fn to_vec_f32(&self) -> Result<Vec<f32>> {
        Ok(self.var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Ordered collection of named parameters. Cloning shares the underlying storage.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(ParamEntry::elem_count).sum()
    }

    pub fn dtype(&self) -> Option<DType> {
        self.entries.first().map(|e| e.var.dtype())
    }

    pub fn push(&mut self, entry: ParamEntry) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::Config(format!("duplicate parameter name {}", entry.name)));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParameterSet::default();
        for e in &self.entries {
            out.push(ParamEntry {
                var: Var::from_tensor(&e.var.as_tensor().copy()?)?,
                ..e.clone()
            })?;
        }
        Ok(out)
    }

    /// Overwrites the value of every entry selected by `filter` with fresh random
    /// values drawn from `seed`, keeping the current scale (uniform in ±max|w|, or ±0.5 for
    /// all-constant tensors).
    pub fn rerandomize(&self, seed: u64, filter: impl Fn(&ParamEntry) -> bool) -> Result<()> {
        for e in self.entries.iter().filter(|e| filter(e)) {
            let cur = e.to_vec_f32()?;
            let scale = cur.iter().fold(0f32, |m, v| m.max(v.abs()));
            let scale = if scale > 0.0 { scale } else { 0.5 };
            let mut rng = param_rng(seed, &e.name);
            let vals: Vec<f32> = (0..cur.len()).map(|_| rng.gen_range(-scale..scale)).collect();
            let t = Tensor::from_vec(vals, e.var.shape(), &Device::Cpu)?.to_dtype(e.var.dtype())?;
            e.var.set(&t)?;
        }
        Ok(())
    }

    /// Copies values from `other` by name; shapes must agree.
    pub fn assign_from(&self, other: &ParameterSet) -> Result<()> {
        for e in &self.entries {
            let src = other
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", e.name)))?;
            if src.dims() != e.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    src.dims(),
                    e.dims()
                )));
            }
            e.var.set(&src.var.as_tensor().to_dtype(e.var.dtype())?)?;
        }
        Ok(())
    }
}

/// Stable per-parameter RNG so initialization is independent of construction order.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

/// Decides from `(name, channel_module)` whether a loaded parameter stays on the graph.
type TrackFn = dyn Fn(&str, bool) -> bool;

enum Source {
    Create { seed: u64 },
    Load { from: ParameterSet, track: Rc<TrackFn> },
}

struct BuildState {
    source: Source,
    dtype: DType,
    out: ParameterSet,
}

/// Hierarchical parameter factory. In create mode it initializes and records new
/// parameters; in load mode it hands out tensors from an existing set, either as
/// gradient-tracking variables or detached views sharing the same storage.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuildState>>,
    prefix: String,
    channel_module: bool,
}

impl ParamBuilder {
    pub fn create(seed: u64, dtype: DType) -> Self {
        Self::with_source(Source::Create { seed }, dtype)
    }

    pub fn load(from: &ParameterSet, track_grad: bool) -> Self {
        Self::load_selective(from, move |_, _| track_grad)
    }

    /// Load mode where only parameters accepted by `track(name, channel_module)` are
    /// gradient-tracking; the rest are detached.
    pub fn load_selective(from: &ParameterSet, track: impl Fn(&str, bool) -> bool + 'static) -> Self {
        let dtype = from.dtype().unwrap_or(DType::F32);
        Self::with_source(
            Source::Load {
                from: from.clone(),
                track: Rc::new(track),
            },
            dtype,
        )
    }

    fn with_source(source: Source, dtype: DType) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuildState {
                source,
                dtype,
                out: ParameterSet::default(),
            })),
            prefix: String::new(),
            channel_module: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    /// Child builder under `name`.
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            state: self.state.clone(),
            prefix,
            channel_module: self.channel_module,
        }
    }

    /// Marks everything created below this builder as channel-module parameters.
    pub fn channel_module(&self) -> Self {
        Self {
            channel_module: true,
            ..self.clone()
        }
    }

    pub fn get(&self, dims: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut st = self.state.borrow_mut();
        let dtype = st.dtype;
        let var = match &st.source {
            Source::Create { seed } => {
                let n: usize = dims.iter().product();
                let vals: Vec<f64> = match init {
                    Init::Const(v) => vec![v; n],
                    Init::Uniform(b) => {
                        let mut rng = param_rng(*seed, &full);
                        (0..n).map(|_| rng.gen_range(-b..=b)).collect()
                    }
                };
                let t = Tensor::from_vec(vals, dims, &Device::Cpu)?.to_dtype(dtype)?;
                Var::from_tensor(&t)?
            }
            Source::Load { from, .. } => {
                let e = from
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
                if e.dims() != dims {
                    return Err(Error::Checkpoint(format!(
                        "parameter {full} has shape {:?}, expected {dims:?}",
                        e.dims()
                    )));
                }
                e.var.clone()
            }
        };
        let tensor = match &st.source {
            Source::Load { track, .. } if !track(&full, self.channel_module) => var.as_tensor().detach(),
            _ => var.as_tensor().clone(),
        };
        let entry = ParamEntry {
            name: full,
            owner: self.prefix.clone(),
            channel_module: self.channel_module,
            var,
        };
        st.out.push(entry)?;
        Ok(tensor)
    }

    /// Every parameter handed out so far.
    pub fn params(&self) -> ParameterSet {
        self.state.borrow().out.clone()
    }
}

/// Applies `f` to `x` viewed as `(rows, last)` and restores the leading dims.
fn on_rows(x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| Error::Shape("scalar input".into()))?;
    let rows = x.elem_count() / last.max(1);
    let y = f(&x.reshape((rows, last))?)?;
    let mut out = dims;
    *out.last_mut().unwrap() = y.dim(1)?;
    Ok(y.reshape(out)?)
}

/// Affine map over the last axis. Weight is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let b = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: vb.get(&[d_in, d_out], "weight", Init::Uniform(b))?,
            bias: Some(vb.get(&[d_out], "bias", Init::Uniform(b))?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        on_rows(x, |x2| {
            let y = x2.matmul(&self.weight)?;
            Ok(match &self.bias {
                Some(b) => crate::kernels::add_broadcast(&y, b)?,
                None => y,
            })
        })
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(vb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.get(&[dim], "gamma", Init::Const(1.0))?,
            beta: vb.get(&[dim], "beta", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::kernels::layer_norm(x, &self.gamma, &self.beta, LN_EPS)?)
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }
}

/// PReLU with a single learned slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: Tensor,
}

impl PRelu {
    pub fn new(vb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            slope: vb.get(&[1], "slope", Init::Const(0.25))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pos = x.relu()?;
        let neg = x.neg()?.relu()?;
        Ok(pos.sub(&neg.broadcast_mul(&self.slope)?)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(crate::kernels::softmax_last(x)?)
}

/// Upper bound on attention-logit elements materialized at once.
const ATTN_CHUNK_ELEMS: usize = 1 << 23;

/// Scaled dot-product attention on `(B, heads, L, d)` inputs.
///
/// `bias` broadcasts against `(heads, L, L)`; `mask` is `(G, L, L)` where the batch
/// is laid out as `B = outer * G` and is added to the logits before the softmax.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, h, l, d) = q.dims4()?;
    let scale = 1.0 / (d as f64).sqrt();
    let group = mask.map_or(1, |m| m.dim(0).unwrap_or(1));
    // Chunk along the batch in whole mask groups to bound peak memory.
    let per_item = h * l * l;
    let mut chunk = (ATTN_CHUNK_ELEMS / per_item.max(1)).max(1);
    chunk = (chunk / group).max(1) * group;
    let mut outs = Vec::new();
    let mut start = 0;
    while start < b {
        let n = chunk.min(b - start);
        let (qc, kc, vc) = (q.narrow(0, start, n)?, k.narrow(0, start, n)?, v.narrow(0, start, n)?);
        let mut logits = (qc.matmul(&kc.transpose(2, 3)?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            logits = crate::kernels::add_broadcast(&logits, bias)?;
        }
        if let Some(mask) = mask {
            logits = logits
                .reshape((n / group, group, h, l, l))?
                .broadcast_add(&mask.unsqueeze(1)?)?
                .reshape((n, h, l, l))?;
        }
        outs.push(softmax_last(&logits)?.matmul(&vc)?);
        start += n;
    }
    Ok(if outs.len() == 1 {
        outs.pop().unwrap()
    } else {
        Tensor::cat(&outs, 0)?
    })
}

/// Multi-head self-attention projections (fused QKV + output projection).
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(vb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide embedding dim {dim}")));
        }
        Ok(Self {
            qkv: Linear::new(&vb.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&vb.pp("proj"), dim, dim)?,
            heads,
        })
    }

    /// `x`: `(B, L, dim)`.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let y = attention(&q, &k, &v, bias, mask)?
            .transpose(1, 2)?
            .reshape((b, l, dim))?;
        self.proj.forward(&y)
    }

    pub fn param_count(dim: usize) -> usize {
        Linear::param_count(dim, 3 * dim) + Linear::param_count(dim, dim)
    }
}

/// Bidirectional single-layer GRU; both directions advance in one batched step.
#[derive(Debug, Clone)]
pub struct BiGru {
    /// `(2, in, 3h)` input weights, gate order r|z|n.
    pub w_ih: Tensor,
    /// `(2, h, 3h)` recurrent weights.
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
    pub hidden: usize,
}

impl BiGru {
    pub fn new(vb: &ParamBuilder, d_in: usize, hidden: usize) -> Result<Self> {
        let b = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: vb.get(&[2, d_in, 3 * hidden], "w_ih", Init::Uniform(b))?,
            w_hh: vb.get(&[2, hidden, 3 * hidden], "w_hh", Init::Uniform(b))?,
            b_ih: vb.get(&[2, 1, 3 * hidden], "b_ih", Init::Uniform(b))?,
            b_hh: vb.get(&[2, 1, 3 * hidden], "b_hh", Init::Uniform(b))?,
            hidden,
        })
    }

    /// `x`: `(B, L, in)` to `(B, L, 2h)` (forward states then backward states).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d_in) = x.dims3()?;
        let h = self.hidden;
        let x2 = x.reshape((1, b * l, d_in))?.broadcast_as((2, b * l, d_in))?.contiguous()?;
        // (2, B, L, 3h) with the input bias folded in
        let gi = x2
            .matmul(&self.w_ih)?;
        let gi = crate::kernels::add_broadcast(&gi, &self.b_ih)?
            .reshape((2, b, l, 3 * h))?;
        let y = crate::kernels::bigru_scan(&gi, &self.w_hh, &self.b_hh)?;
        Ok(Tensor::cat(&[y.get(0)?, y.get(1)?], 2)?)
    }

    pub fn param_count(d_in: usize, hidden: usize) -> usize {
        2 * (3 * hidden * d_in + 3 * hidden * hidden + 6 * hidden)
    }
}
