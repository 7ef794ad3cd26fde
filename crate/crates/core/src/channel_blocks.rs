//! Channel modeling: transform-average-concatenate (TAC), channel-wise attention,
//! and the attention-augmented TAC variant (`TAttC`).
//!
//! Features are `(C, F, T, N)`; every projection acts on the last axis, so no
//! parameter depends on `C`, `F` or `T`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::{softmax_last, LayerNorm, Linear, PRelu, ParamBuilder};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelModuleKind {
    Tac,
    Tattc,
    /// Channel-wise attention block followed by TAC.
    AttTacCascade,
}

/// Divisor of the channel attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(H * T^2)`.
    #[default]
    HT2,
    /// `sqrt(H * F * T)`, the inner dimension of `Q K^T`.
    HFT,
}

impl AttentionScale {
    pub fn divisor(&self, h: usize, f: usize, t: usize) -> f64 {
        match self {
            AttentionScale::HT2 => (h as f64 * (t * t) as f64).sqrt(),
            AttentionScale::HFT => (h as f64 * f as f64 * t as f64).sqrt(),
        }
    }
}

/// Vanilla TAC: per-channel transform, channel mean, average transform,
/// concatenation and output projection with LN, plus a residual.
#[derive(Debug, Clone)]
pub struct Tac {
    transform: Linear,
    act_transform: PRelu,
    average: Linear,
    act_average: PRelu,
    concat: Linear,
    act_concat: PRelu,
    norm: LayerNorm,
}

impl Tac {
    pub fn new(vb: &ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            transform: Linear::new(&vb.pp("transform"), dim, hidden)?,
            act_transform: PRelu::new(&vb.pp("transform_act"))?,
            average: Linear::new(&vb.pp("average"), hidden, hidden)?,
            act_average: PRelu::new(&vb.pp("average_act"))?,
            concat: Linear::new(&vb.pp("concat"), 2 * hidden, dim)?,
            act_concat: PRelu::new(&vb.pp("concat_act"))?,
            norm: LayerNorm::new(&vb.pp("norm"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.act_transform.forward(&self.transform.forward(x)?)?;
        let m = self
            .act_average
            .forward(&self.average.forward(&y.mean_keepdim(0)?)?)?
            .broadcast_as(y.shape())?;
        let z = self.act_concat.forward(&self.concat.forward(&Tensor::cat(&[&y, &m], D::Minus1)?)?)?;
        Ok((x + self.norm.forward(&z)?)?)
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden)
            + Linear::param_count(hidden, hidden)
            + Linear::param_count(2 * hidden, dim)
            + LayerNorm::param_count(dim)
            + 3
    }

    pub fn macs(dim: usize, hidden: usize, c: usize, positions: usize) -> u64 {
        let (n, h, c, p) = (dim as u64, hidden as u64, c as u64, positions as u64);
        c * p * (n * h + 2 * h * n) + p * h * h
    }
}

/// FC -> ReLU -> LN, the projection used for Q, K, V and the attention output.
#[derive(Debug, Clone)]
struct Proj {
    fc: Linear,
    norm: LayerNorm,
}

impl Proj {
    fn new(vb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(&vb.pp("fc"), dim, dim)?,
            norm: LayerNorm::new(&vb.pp("norm"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.fc.forward(x)?.relu()?)
    }

    fn param_count(dim: usize) -> usize {
        Linear::param_count(dim, dim) + LayerNorm::param_count(dim)
    }
}

/// Attention across channels with one `C x C` map shared by every T-F position.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    q: Proj,
    k: Proj,
    v: Proj,
    out: Proj,
    pub scale: AttentionScale,
}

impl ChannelAttention {
    pub fn new(vb: &ParamBuilder, hidden: usize, scale: AttentionScale) -> Result<Self> {
        Ok(Self {
            q: Proj::new(&vb.pp("q"), hidden)?,
            k: Proj::new(&vb.pp("k"), hidden)?,
            v: Proj::new(&vb.pp("v"), hidden)?,
            out: Proj::new(&vb.pp("out"), hidden)?,
            scale,
        })
    }

    /// `(C, C)` attention map for `y` of shape `(C, F, T, H)`.
    pub fn map(&self, y: &Tensor) -> Result<Tensor> {
        let (c, f, t, h) = y.dims4()?;
        let q = self.q.forward(y)?.reshape((c, f * t * h))?;
        let k = self.k.forward(y)?.reshape((c, f * t * h))?;
        let logits = (q.matmul(&k.t()?)? / self.scale.divisor(h, f, t))?;
        softmax_last(&logits)
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let (c, f, t, h) = y.dims4()?;
        let v = self.v.forward(y)?.reshape((c, f * t * h))?;
        let mixed = self.map(y)?.matmul(&v)?.reshape((c, f, t, h))?;
        self.out.forward(&mixed)
    }

    pub fn param_count(hidden: usize) -> usize {
        4 * Proj::param_count(hidden)
    }

    pub fn macs(hidden: usize, c: usize, positions: usize) -> u64 {
        let (h, c, p) = (hidden as u64, c as u64, positions as u64);
        c * p * 4 * h * h + 2 * c * c * p * h
    }
}

/// TAC with channel-wise attention in place of channel averaging.
#[derive(Debug, Clone)]
pub struct TAttC {
    transform: Linear,
    act_transform: PRelu,
    attn: ChannelAttention,
    attend: Linear,
    act_attend: PRelu,
    concat: Linear,
    act_concat: PRelu,
    norm: LayerNorm,
    pub residual: bool,
}

impl TAttC {
    pub fn new(vb: &ParamBuilder, dim: usize, hidden: usize, scale: AttentionScale, residual: bool) -> Result<Self> {
        Ok(Self {
            transform: Linear::new(&vb.pp("transform"), dim, hidden)?,
            act_transform: PRelu::new(&vb.pp("transform_act"))?,
            attn: ChannelAttention::new(&vb.pp("attn"), hidden, scale)?,
            attend: Linear::new(&vb.pp("attend"), hidden, hidden)?,
            act_attend: PRelu::new(&vb.pp("attend_act"))?,
            concat: Linear::new(&vb.pp("concat"), 2 * hidden, dim)?,
            act_concat: PRelu::new(&vb.pp("concat_act"))?,
            norm: LayerNorm::new(&vb.pp("norm"), dim)?,
            residual,
        })
    }

    pub fn attention(&self) -> &ChannelAttention {
        &self.attn
    }

    /// `Y`, the projected feature fed to the channel attention.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.act_transform.forward(&self.transform.forward(x)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.project(x)?;
        let y_bar = self.act_attend.forward(&self.attend.forward(&self.attn.forward(&y)?)?)?;
        let z = self.act_concat.forward(&self.concat.forward(&Tensor::cat(&[&y, &y_bar], D::Minus1)?)?)?;
        let x_hat = self.norm.forward(&z)?;
        if self.residual {
            Ok((x + x_hat)?)
        } else {
            Ok(x_hat)
        }
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden)
            + ChannelAttention::param_count(hidden)
            + Linear::param_count(hidden, hidden)
            + Linear::param_count(2 * hidden, dim)
            + LayerNorm::param_count(dim)
            + 3
    }

    pub fn macs(dim: usize, hidden: usize, c: usize, positions: usize) -> u64 {
        let (n, h, cc, p) = (dim as u64, hidden as u64, c as u64, positions as u64);
        cc * p * (n * h + h * h + 2 * h * n) + ChannelAttention::macs(hidden, c, positions)
    }
}

/// Standalone channel-attention block: project to `H`, attend, project back, residual.
#[derive(Debug, Clone)]
pub struct AttBlock {
    down: Linear,
    act: PRelu,
    attn: ChannelAttention,
    up: Linear,
}

impl AttBlock {
    pub fn new(vb: &ParamBuilder, dim: usize, hidden: usize, scale: AttentionScale) -> Result<Self> {
        Ok(Self {
            down: Linear::new(&vb.pp("down"), dim, hidden)?,
            act: PRelu::new(&vb.pp("act"))?,
            attn: ChannelAttention::new(&vb.pp("attn"), hidden, scale)?,
            up: Linear::new(&vb.pp("up"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.act.forward(&self.down.forward(x)?)?;
        Ok((x + self.up.forward(&self.attn.forward(&y)?)?)?)
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden) + 1 + ChannelAttention::param_count(hidden) + Linear::param_count(hidden, dim)
    }

    pub fn macs(dim: usize, hidden: usize, c: usize, positions: usize) -> u64 {
        let (n, h, cc, p) = (dim as u64, hidden as u64, c as u64, positions as u64);
        cc * p * 2 * n * h + ChannelAttention::macs(hidden, c, positions)
    }
}

#[derive(Debug, Clone)]
pub enum ChannelModule {
    Tac(Tac),
    TAttC(TAttC),
    AttTacCascade(AttBlock, Tac),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModuleSpec {
    pub kind: ChannelModuleKind,
    pub dim: usize,
    /// Projected dimension `H` for attention-based modules.
    pub hidden: usize,
    /// TAC hidden size.
    pub tac_hidden: usize,
    pub scale: AttentionScale,
    pub residual: bool,
}

impl ChannelModule {
    /// Every parameter created here is tagged as a channel-module parameter.
    pub fn new(vb: &ParamBuilder, spec: &ChannelModuleSpec) -> Result<Self> {
        let vb = vb.channel_module();
        Ok(match spec.kind {
            ChannelModuleKind::Tac => ChannelModule::Tac(Tac::new(&vb.pp("tac"), spec.dim, spec.tac_hidden)?),
            ChannelModuleKind::Tattc => ChannelModule::TAttC(TAttC::new(
                &vb.pp("tattc"),
                spec.dim,
                spec.hidden,
                spec.scale,
                spec.residual,
            )?),
            ChannelModuleKind::AttTacCascade => ChannelModule::AttTacCascade(
                AttBlock::new(&vb.pp("att"), spec.dim, spec.hidden, spec.scale)?,
                Tac::new(&vb.pp("tac"), spec.dim, spec.tac_hidden)?,
            ),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ChannelModule::Tac(m) => m.forward(x),
            ChannelModule::TAttC(m) => m.forward(x),
            ChannelModule::AttTacCascade(a, t) => t.forward(&a.forward(x)?),
        }
    }

    pub fn param_count(spec: &ChannelModuleSpec) -> usize {
        match spec.kind {
            ChannelModuleKind::Tac => Tac::param_count(spec.dim, spec.tac_hidden),
            ChannelModuleKind::Tattc => TAttC::param_count(spec.dim, spec.hidden),
            ChannelModuleKind::AttTacCascade => {
                AttBlock::param_count(spec.dim, spec.hidden) + Tac::param_count(spec.dim, spec.tac_hidden)
            }
        }
    }

    pub fn macs(spec: &ChannelModuleSpec, c: usize, positions: usize) -> u64 {
        match spec.kind {
            ChannelModuleKind::Tac => Tac::macs(spec.dim, spec.tac_hidden, c, positions),
            ChannelModuleKind::Tattc => TAttC::macs(spec.dim, spec.hidden, c, positions),
            ChannelModuleKind::AttTacCascade => {
                AttBlock::macs(spec.dim, spec.hidden, c, positions) + Tac::macs(spec.dim, spec.tac_hidden, c, positions)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

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

    fn permute_channels(x: &Tensor, p: &[usize]) -> Tensor {
        let idx = Tensor::from_vec(p.iter().map(|&i| i as u32).collect::<Vec<_>>(), p.len(), &Device::Cpu).unwrap();
        x.index_select(&idx, 0).unwrap()
    }

    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

    #[test]
    fn tac_single_channel_and_equivariance() {
        let vb = ParamBuilder::create(3, DType::F32);
        let tac = Tac::new(&vb, 8, 24).unwrap();
        let x = Tensor::randn(0f32, 1.0, (3, 4, 5, 8), &Device::Cpu).unwrap();
        let y = tac.forward(&x).unwrap();
        assert_eq!(y.dims(), x.dims());
        for p in PERMS {
            let yp = tac.forward(&permute_channels(&x, &p)).unwrap();
            assert!(max_abs_diff(&yp, &permute_channels(&y, &p)) < 1e-5);
        }
        let one = x.narrow(0, 0, 1).unwrap();
        let a = tac.forward(&one).unwrap();
        assert_eq!(max_abs_diff(&a, &tac.forward(&one).unwrap()), 0.0);
        assert_eq!(vb.params().count(), Tac::param_count(8, 24));
    }

    #[test]
    fn attention_map_is_c_by_c_and_row_stochastic() {
        let vb = ParamBuilder::create(4, DType::F32);
        let att = ChannelAttention::new(&vb, 6, AttentionScale::HT2).unwrap();
        for (c, f, t) in [(1, 3, 4), (3, 2, 5), (5, 7, 1)] {
            let y = Tensor::randn(0f32, 1.0, (c, f, t, 6), &Device::Cpu).unwrap();
            let m = att.map(&y).unwrap();
            assert_eq!(m.dims(), &[c, c]);
            for row in m.to_vec2::<f32>().unwrap() {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
            assert_eq!(att.forward(&y).unwrap().dims(), y.dims());
        }
    }

    #[test]
    fn single_channel_attention_is_post_processed_value() {
        let vb = ParamBuilder::create(4, DType::F32);
        let att = ChannelAttention::new(&vb, 6, AttentionScale::HT2).unwrap();
        let y = Tensor::randn(0f32, 1.0, (1, 3, 4, 6), &Device::Cpu).unwrap();
        assert_eq!(att.map(&y).unwrap().to_vec2::<f32>().unwrap(), vec![vec![1.0]]);
        let expected = att.out.forward(&att.v.forward(&y).unwrap()).unwrap();
        assert!(max_abs_diff(&att.forward(&y).unwrap(), &expected) < 1e-6);
    }

    #[test]
    fn duplicated_channel_gives_uniform_map() {
        let vb = ParamBuilder::create(4, DType::F32);
        let att = ChannelAttention::new(&vb, 6, AttentionScale::HT2).unwrap();
        let one = Tensor::randn(0f32, 1.0, (1, 3, 4, 6), &Device::Cpu).unwrap();
        let y = Tensor::cat(&[&one, &one], 0).unwrap();
        for row in att.map(&y).unwrap().to_vec2::<f32>().unwrap() {
            assert!((row[0] - 0.5).abs() < 1e-6 && (row[1] - 0.5).abs() < 1e-6);
        }
        let a = att.forward(&y).unwrap();
        assert_eq!(max_abs_diff(&a.get(0).unwrap(), &a.get(1).unwrap()), 0.0);
    }

    #[test]
    fn tattc_permutation_equivariance_all_orders() {
        let vb = ParamBuilder::create(5, DType::F32);
        let m = TAttC::new(&vb, 8, 8, AttentionScale::HT2, true).unwrap();
        let x = Tensor::randn(0f32, 1.0, (3, 5, 7, 8), &Device::Cpu).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.dims(), x.dims());
        for p in PERMS {
            let yp = m.forward(&permute_channels(&x, &p)).unwrap();
            assert!(max_abs_diff(&yp, &permute_channels(&y, &p)) < 1e-5, "{p:?}");
        }
    }

    #[test]
    fn scale_switch_changes_divisor_only() {
        assert_eq!(AttentionScale::HT2.divisor(4, 9, 3), 6.0);
        assert_eq!(AttentionScale::HFT.divisor(4, 9, 1), 6.0);
    }

    #[test]
    fn channel_module_params_are_flagged() {
        let vb = ParamBuilder::create(0, DType::F32);
        for (i, kind) in [ChannelModuleKind::Tac, ChannelModuleKind::Tattc, ChannelModuleKind::AttTacCascade]
            .into_iter()
            .enumerate()
        {
            let spec = ChannelModuleSpec {
                kind,
                dim: 8,
                hidden: 4,
                tac_hidden: 12,
                scale: AttentionScale::HT2,
                residual: true,
            };
            let before = vb.params().count();
            let m = ChannelModule::new(&vb.pp(i), &spec).unwrap();
            assert_eq!(vb.params().count() - before, ChannelModule::param_count(&spec));
            let x = Tensor::randn(0f32, 1.0, (2, 3, 4, 8), &Device::Cpu).unwrap();
            assert_eq!(m.forward(&x).unwrap().dims(), x.dims());
        }
        assert!(vb.params().iter().all(|e| e.channel_module));
    }

    #[test]
    fn tac_passes_gradient_check() {
        for seed in 0..3 {
            let vb = ParamBuilder::create(seed, DType::F64);
            let tac = Tac::new(&vb, 4, 12).unwrap();
            let x = crate::gradcheck::seeded_input(seed, &[3, 2, 5, 4]).unwrap();
            let r = crate::gradcheck::check(&vb.params(), &x, |x| tac.forward(x), 1e-3, 32).unwrap();
            assert!(r.passes(1e-4), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn tattc_passes_gradient_check() {
        for seed in 0..3 {
            let vb = ParamBuilder::create(seed, DType::F64);
            let m = TAttC::new(&vb, 4, 3, AttentionScale::HT2, true).unwrap();
            let x = crate::gradcheck::seeded_input(seed, &[3, 2, 5, 4]).unwrap();
            let r = crate::gradcheck::check(&vb.params(), &x, |x| m.forward(x), 1e-3, 32).unwrap();
            assert!(r.passes(1e-4), "seed {seed}: {r:?}");
        }
    }
}
