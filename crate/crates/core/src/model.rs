//! Model assembly: configuration, network construction from the block library,
//! forward pass with reference-channel routing and segment-wise memory carry,
//! parameter/MAC accounting, and checkpoint I/O.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::channel_blocks::{AttentionScale, ChannelModule, ChannelModuleKind, ChannelModuleSpec};
use crate::nn::{ParamBuilder, ParameterSet};
use crate::spectral_codec::{fft_size_for_rate, Decoder, Encoder, FeatureTensor, StftPlan, HOP_MS};
use crate::tf_blocks::{
    MemoryTokens, PathAxis, PathLayer, TfModule, WindowAttentionLayer, WindowSpec,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Comp,
    Swin,
    UsesBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Multi-path blocks `K`.
    pub blocks: usize,
    /// Leading blocks that contain a channel module, `K_s`.
    pub channel_blocks: usize,
    /// Embedding dimension `N`.
    pub dim: usize,
    /// Channel-attention projection `H`.
    pub channel_dim: usize,
    pub tac_hidden: usize,
    pub heads: usize,
    pub window_f: usize,
    pub window_t: usize,
    pub mlp_ratio: usize,
    /// Memory frames `G`.
    pub memory_group: usize,
    pub channel_module: ChannelModuleKind,
    pub attention_scale: AttentionScale,
    pub channel_residual: bool,
    pub reference_channel: usize,
    /// Segment length for memory-carrying variants.
    pub segment_seconds: f64,
}

impl ModelConfig {
    pub fn comp() -> Self {
        Self {
            variant: Variant::Comp,
            blocks: 4,
            channel_blocks: 2,
            dim: 128,
            channel_dim: 128,
            tac_hidden: 384,
            heads: 4,
            window_f: 8,
            window_t: 8,
            mlp_ratio: 8,
            memory_group: 2,
            channel_module: ChannelModuleKind::Tattc,
            attention_scale: AttentionScale::HT2,
            channel_residual: true,
            reference_channel: 0,
            segment_seconds: 4.0,
        }
    }

    pub fn swin() -> Self {
        Self {
            variant: Variant::Swin,
            blocks: 3,
            ..Self::comp()
        }
    }

    pub fn uses_baseline() -> Self {
        Self {
            variant: Variant::UsesBaseline,
            blocks: 6,
            channel_blocks: 3,
            channel_module: ChannelModuleKind::Tac,
            ..Self::comp()
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Comp => Self::comp(),
            Variant::Swin => Self::swin(),
            Variant::UsesBaseline => Self::uses_baseline(),
        }
    }

    /// Reads a JSON object whose `variant` selects the defaults and whose other keys
    /// override them.
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("model config must be a JSON object".into()))?;
        let variant: Variant = match obj.get("variant") {
            Some(x) => serde_json::from_value(x.clone())?,
            None => Variant::Comp,
        };
        let mut base = serde_json::to_value(Self::for_variant(variant))?;
        let map = base.as_object_mut().expect("config serializes to an object");
        for (k, val) in obj {
            map.insert(k.clone(), val.clone());
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.channel_blocks == 0 || self.channel_blocks > self.blocks {
            return bad(format!(
                "need 1 <= K_s <= K, got K={} K_s={}",
                self.blocks, self.channel_blocks
            ));
        }
        if self.dim == 0 || self.channel_dim == 0 || self.tac_hidden == 0 || self.mlp_ratio == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("{} heads do not divide N={}", self.heads, self.dim));
        }
        if self.window_f == 0 || self.window_t == 0 || self.memory_group == 0 {
            return bad("window sizes and memory group must be positive".into());
        }
        if self.segment_seconds.is_nan() || self.segment_seconds < HOP_MS as f64 / 1000.0 {
            return bad(format!("segment of {} s is too short", self.segment_seconds));
        }
        Ok(())
    }

    pub fn uses_memory(&self) -> bool {
        self.variant != Variant::Swin
    }

    /// Frames per segment for memory-carrying variants.
    pub fn segment_frames(&self) -> usize {
        (self.segment_seconds * 1000.0 / HOP_MS as f64).round() as usize + 1
    }

    /// Whether block `k` runs its channel module on a `c`-channel input.
    pub fn channel_module_active(&self, k: usize, c: usize) -> bool {
        k < self.channel_blocks && (c > 1 || self.variant == Variant::UsesBaseline)
    }

    pub fn transformer_layers(&self) -> usize {
        self.blocks
            * match self.variant {
                Variant::Swin => 4,
                Variant::Comp => 3,
                Variant::UsesBaseline => 2,
            }
    }

    fn channel_spec(&self) -> ChannelModuleSpec {
        ChannelModuleSpec {
            kind: self.channel_module,
            dim: self.dim,
            hidden: self.channel_dim,
            tac_hidden: self.tac_hidden,
            scale: self.attention_scale,
            residual: self.channel_residual,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub tf: TfModule,
    pub channel: Option<ChannelModule>,
}

/// The network bound to concrete tensors. Built from a [`ParameterSet`] either with
/// gradient tracking (training) or detached (inference).
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub blocks: Vec<Block>,
    pub decoder: Decoder,
}

impl Network {
    pub fn new(vb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.dim;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let bv = vb.pp(format!("blocks.{k}"));
            let tv = bv.pp("tf");
            let window = |shifted| WindowSpec::new(cfg.window_f, cfg.window_t, shifted);
            let tf = match cfg.variant {
                Variant::Swin => TfModule::Swin {
                    layers: (0..4)
                        .map(|i| {
                            WindowAttentionLayer::new(
                                &tv.pp(format!("layers.{i}")),
                                n,
                                cfg.heads,
                                cfg.mlp_ratio,
                                window(i % 2 == 1)?,
                            )
                        })
                        .collect::<Result<_>>()?,
                },
                Variant::Comp => TfModule::Comp {
                    window: WindowAttentionLayer::new(&tv.pp("window"), n, cfg.heads, cfg.mlp_ratio, window(false)?)?,
                    freq: PathLayer::new(&tv.pp("freq"), n, cfg.heads, PathAxis::Frequency)?,
                    memory: MemoryTokens::new(&tv.pp("memory"), cfg.memory_group, n)?,
                    time: PathLayer::new(&tv.pp("time"), n, cfg.heads, PathAxis::Time)?,
                },
                Variant::UsesBaseline => TfModule::DualPath {
                    freq: PathLayer::new(&tv.pp("freq"), n, cfg.heads, PathAxis::Frequency)?,
                    memory: MemoryTokens::new(&tv.pp("memory"), cfg.memory_group, n)?,
                    time: PathLayer::new(&tv.pp("time"), n, cfg.heads, PathAxis::Time)?,
                },
            };
            let channel = if k < cfg.channel_blocks {
                Some(ChannelModule::new(&bv.pp("channel"), &cfg.channel_spec())?)
            } else {
                None
            };
            blocks.push(Block { tf, channel });
        }
        Ok(Self {
            config: cfg.clone(),
            encoder: Encoder::new(&vb.pp("encoder"), n)?,
            blocks,
            decoder: Decoder::new(&vb.pp("decoder"), n)?,
        })
    }

    /// Runs the multi-path blocks over `(C, F, T, N)` features, segment by segment
    /// along time when the variant carries memory.
    pub fn blocks_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, _, t, _) = x.dims4()?;
        let seg = if self.config.uses_memory() {
            self.config.segment_frames()
        } else {
            t
        };
        let mut carries: Vec<Option<Tensor>> = vec![None; self.blocks.len()];
        let mut outs = Vec::with_capacity(t.div_ceil(seg));
        let mut start = 0;
        while start < t {
            let len = seg.min(t - start);
            let mut h = x.narrow(2, start, len)?;
            for (k, block) in self.blocks.iter().enumerate() {
                let (y, carry) = block.tf.forward(&h, carries[k].as_ref())?;
                carries[k] = carry;
                h = match &block.channel {
                    Some(m) if self.config.channel_module_active(k, c) => m.forward(&y)?,
                    _ => y,
                };
            }
            outs.push(h);
            start += len;
        }
        Ok(if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            Tensor::cat(&outs, 2)?
        })
    }

    /// `(C, L)` mixture to `(1, L)` enhanced reference channel.
    pub fn forward_tensor(&self, x: &Tensor, rate_hz: u32) -> Result<Tensor> {
        let (c, len) = x.dims2()?;
        if len == 0 {
            return Err(Error::EmptySignal);
        }
        let r = self.config.reference_channel;
        if r >= c {
            return Err(Error::Config(format!("reference channel {r} not present in {c}-channel input")));
        }
        let plan = StftPlan::for_rate(rate_hz)?;
        let feats = self.encoder.forward(&plan.forward(x)?)?;
        let h = self.blocks_forward(feats.tensor())?;
        let planes = self.decoder.forward(&FeatureTensor(h.narrow(0, r, 1)?))?;
        plan.inverse(&planes, len)
    }
}

/// A parameter set together with the configuration that shapes it.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

/// Deterministic initialization of every parameter of `config`.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    build_with_dtype(config, seed, DType::F32)
}

pub fn build_with_dtype(config: &ModelConfig, seed: u64, dtype: DType) -> Result<ParameterSet> {
    let vb = ParamBuilder::create(seed, dtype);
    Network::new(&vb, config)?;
    Ok(vb.params())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Binds the parameters; `track_grad` keeps them on the autodiff graph.
    pub fn network(&self, track_grad: bool) -> Result<Network> {
        Network::new(&ParamBuilder::load(&self.params, track_grad), &self.config)
    }

    /// Enhances `mixture` into a single-channel waveform of the same rate and length.
    pub fn forward(&self, mixture: &Waveform) -> Result<Waveform> {
        let net = self.network(false)?;
        let dtype = self.params.dtype().unwrap_or(DType::F32);
        let y = net.forward_tensor(&mixture.to_tensor(dtype)?, mixture.rate_hz())?;
        Waveform::from_tensor(&y, mixture.rate_hz())
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.params)
    }
}

pub fn count_params(params: &ParameterSet) -> usize {
    params.count()
}

/// Parameter count implied by a configuration, without building it.
pub fn param_count_for(cfg: &ModelConfig) -> usize {
    let n = cfg.dim;
    let tf = match cfg.variant {
        Variant::Swin => (0..4)
            .map(|i| {
                let spec = WindowSpec {
                    wf: cfg.window_f,
                    wt: cfg.window_t,
                    shifted: i % 2 == 1,
                };
                WindowAttentionLayer::param_count(n, cfg.heads, cfg.mlp_ratio, &spec)
            })
            .sum(),
        Variant::Comp => {
            let spec = WindowSpec {
                wf: cfg.window_f,
                wt: cfg.window_t,
                shifted: false,
            };
            WindowAttentionLayer::param_count(n, cfg.heads, cfg.mlp_ratio, &spec)
                + 2 * PathLayer::param_count(n)
                + cfg.memory_group * n
        }
        Variant::UsesBaseline => 2 * PathLayer::param_count(n) + cfg.memory_group * n,
    };
    Encoder::param_count(n)
        + Decoder::param_count(n)
        + cfg.blocks * tf
        + cfg.channel_blocks * ChannelModule::param_count(&cfg.channel_spec())
}

/// Analytic multiply-accumulate count for `seconds` of `channels`-channel audio.
pub fn count_macs(cfg: &ModelConfig, rate_hz: u32, channels: usize, seconds: f64) -> Result<u64> {
    let n_fft = fft_size_for_rate(rate_hz)?;
    let plan = StftPlan::for_rate(rate_hz)?;
    let len = (seconds * rate_hz as f64).round() as usize;
    if len == 0 || channels == 0 {
        return Err(Error::EmptySignal);
    }
    let (c, f, t, n) = (channels, plan.bins(), plan.frames(len), cfg.dim);
    let bins = (f * t) as u64;
    // Analysis/synthesis transforms (DFT as a matmul against 2F basis rows).
    let mut macs = (c as u64 + 1) * t as u64 * (n_fft * 2 * f) as u64;
    macs += c as u64 * bins * Encoder::macs_per_bin(n) as u64 + bins * Decoder::macs_per_bin(n) as u64;
    let seg = if cfg.uses_memory() { cfg.segment_frames() } else { t };
    let segments: Vec<usize> = (0..t).step_by(seg).map(|s| seg.min(t - s)).collect();
    let (wf, wt) = (cfg.window_f, cfg.window_t);
    let win = WindowSpec { wf, wt, shifted: false };
    for k in 0..cfg.blocks {
        for &ts in &segments {
            macs += match cfg.variant {
                Variant::Swin => 4 * WindowAttentionLayer::macs(n, cfg.mlp_ratio, &win, c, f, ts),
                Variant::Comp => {
                    WindowAttentionLayer::macs(n, cfg.mlp_ratio, &win, c, f, ts)
                        + PathLayer::macs(n, f, c * ts)
                        + PathLayer::macs(n, ts + cfg.memory_group, c * f)
                }
                Variant::UsesBaseline => {
                    PathLayer::macs(n, f, c * ts) + PathLayer::macs(n, ts + cfg.memory_group, c * f)
                }
            };
            if cfg.channel_module_active(k, c) {
                macs += ChannelModule::macs(&cfg.channel_spec(), c, f * ts);
            }
        }
    }
    Ok(macs)
}

/// MACs per second of audio, averaged over a 4 s input.
pub fn macs_per_second(cfg: &ModelConfig, rate_hz: u32, channels: usize) -> Result<f64> {
    Ok(count_macs(cfg, rate_hz, channels, 4.0)? as f64 / 4.0)
}

/// Training progress stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub step: u64,
    pub epoch: u64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    model: ModelConfig,
    stage: CheckpointMeta,
}

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const DTYPE_F32: u8 = 0;

/// Writes `weights.bin`: for each parameter in order, `u32` name length, UTF-8 name,
/// `u8` dtype tag (0 = f32), `u32` rank, `rank` x `u64` dims, then the values as
/// little-endian f32. All integers are little-endian; there is no file header.
pub fn write_weights(path: &Path, params: &ParameterSet) -> Result<()> {
    let mut buf = Vec::new();
    for e in params.iter() {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(DTYPE_F32);
        let dims = e.dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.to_vec_f32()? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// A record read back from `weights.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated or corrupt {what}", self.path.display())))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_weights(path: &Path) -> Result<Vec<WeightRecord>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let nlen = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(nlen, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: parameter name is not UTF-8", path.display())))?;
        let tag = cur.take(1, "dtype")?[0];
        if tag != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")));
        }
        let rank = cur.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64("dims")? as usize);
        }
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| n.checked_mul(4));
        let raw = cur.take(count.unwrap_or(usize::MAX), "values")?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push(WeightRecord { name, dims, values });
    }
    Ok(out)
}

pub fn save_checkpoint(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = ConfigFile {
        model: model.config.clone(),
        stage: meta.clone(),
    };
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;
    write_weights(&dir.join(WEIGHTS_FILE), &model.params)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let text = fs::read_to_string(dir.join(CONFIG_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
    let cfg: ConfigFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("config.json: {e}")))?;
    cfg.model.validate()?;
    let records = read_weights(&dir.join(WEIGHTS_FILE))?;
    let params = build(&cfg.model, 0)?;
    if records.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "weights.bin has {} tensors, configuration needs {}",
            records.len(),
            params.len()
        )));
    }
    for r in records {
        let e = params
            .get(&r.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", r.name)))?;
        if e.dims() != r.dims {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                r.name,
                r.dims,
                e.dims()
            )));
        }
        e.var.set(&Tensor::from_vec(r.values, r.dims, &Device::Cpu)?)?;
    }
    Ok((
        Model {
            config: cfg.model,
            params,
        },
        cfg.stage,
    ))
}
