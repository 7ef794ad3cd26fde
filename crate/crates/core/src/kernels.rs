//! Fused CPU kernels with hand-written backward passes: softmax, layer norm, GELU,
//! broadcast bias addition and the bidirectional GRU recurrence. Each replaces a
//! chain of small tensor ops whose generic backward is slow on CPU.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

type CResult<T> = candle_core::Result<T>;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let v = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("fused kernel needs a contiguous input"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// Float ops the kernels need; `f32` uses a polynomial `exp`, `f64` stays exact so
/// gradient checks see the true function.
pub trait Real: Float + WithDType {
    fn fexp(self) -> Self;

    fn fsigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).fexp())
    }

    fn ftanh(self) -> Self;
}

impl Real for f32 {
    fn fexp(self) -> f32 {
        fast_exp(self)
    }

    fn ftanh(self) -> f32 {
        let t = fast_exp(-2.0 * self.abs());
        ((1.0 - t) / (1.0 + t)).copysign(self)
    }
}

impl Real for f64 {
    fn fexp(self) -> f64 {
        self.exp()
    }

    fn ftanh(self) -> f64 {
        self.tanh()
    }
}

/// `exp` with relative error below 3e-7 on the normal `f32` range (saturating
/// outside it), branch-free so loops vectorize.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Adding and removing 1.5 * 2^23 rounds to the nearest integer.
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.3, 88.0);
    let k = (x * LOG2E + ROUND) - ROUND;
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * f32::from_bits(((k as i32 + 127) as u32) << 23)
}

fn softmax_rows<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| Float::max(a, b));
        let mut s = T::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).fexp();
            s = s + *oi;
        }
        let inv = T::one() / s;
        o.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

fn softmax_grad_rows<T: Real>(y: &[T], g: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), o) in y.chunks_exact(width).zip(g.chunks_exact(width)).zip(out.chunks_exact_mut(width)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
        for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
            *oi = yi * (gi - dot);
        }
    }
    out
}

struct Softmax;
struct SoftmaxGrad;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let w = l.dims().last().copied().unwrap_or(1).max(1);
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(softmax_rows(slice::<f32>(s, l)?, w)),
            CpuStorage::F64(_) => CpuStorage::F64(softmax_rows(slice::<f64>(s, l)?, w)),
            _ => candle_core::bail!("softmax kernel supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let w = l1.dims().last().copied().unwrap_or(1).max(1);
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(softmax_grad_rows(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, w))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(softmax_grad_rows(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, w))
            }
            _ => candle_core::bail!("softmax kernel supports f32 and f64"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

/// Sizes of one recurrence: 2 directions, `b` sequences of length `l`, `h` units.
#[derive(Debug, Clone, Copy)]
struct GruDims {
    b: usize,
    l: usize,
    h: usize,
}

impl GruDims {
    fn time(&self, d: usize, s: usize) -> usize {
        if d == 0 {
            s
        } else {
            self.l - 1 - s
        }
    }
}

/// `gh = state W + bias` for every sequence; `w` is `(h, 3h)`.
fn hidden_gates<T: Real>(state: &[T], w: &[T], bias: &[T], dims: GruDims, gh: &mut [T]) {
    let (h, g3) = (dims.h, 3 * dims.h);
    for bi in 0..dims.b {
        let row = &mut gh[bi * g3..(bi + 1) * g3];
        row.copy_from_slice(bias);
        for k in 0..h {
            let hk = state[bi * h + k];
            for (r, &wv) in row.iter_mut().zip(&w[k * g3..(k + 1) * g3]) {
                *r = *r + hk * wv;
            }
        }
    }
}

/// Gate activations `(r, z, n)` for one unit.
#[inline(always)]
fn gates<T: Real>(x: &[T], g: &[T], h: usize, j: usize) -> (T, T, T) {
    let r = (x[j] + g[j]).fsigmoid();
    let z = (x[h + j] + g[h + j]).fsigmoid();
    let n = (x[2 * h + j] + r * g[2 * h + j]).ftanh();
    (r, z, n)
}

fn gru_forward<T: Real>(gi: &[T], w: &[T], bias: &[T], dims: GruDims) -> Vec<T> {
    let GruDims { b, l, h } = dims;
    let g3 = 3 * h;
    let mut out = vec![T::zero(); 2 * b * l * h];
    let mut gh = vec![T::zero(); b * g3];
    for d in 0..2 {
        let (wd, bd) = (&w[d * h * g3..(d + 1) * h * g3], &bias[d * g3..(d + 1) * g3]);
        let mut state = vec![T::zero(); b * h];
        for s in 0..l {
            let t = dims.time(d, s);
            hidden_gates(&state, wd, bd, dims, &mut gh);
            for bi in 0..b {
                let x = &gi[((d * b + bi) * l + t) * g3..][..g3];
                let g = &gh[bi * g3..(bi + 1) * g3];
                for j in 0..h {
                    let (_, z, n) = gates(x, g, h, j);
                    let hp = state[bi * h + j];
                    state[bi * h + j] = n + z * (hp - n);
                }
                out[((d * b + bi) * l + t) * h..][..h].copy_from_slice(&state[bi * h..(bi + 1) * h]);
            }
        }
    }
    out
}

/// Gradients `(gi, w_hh, b_hh)` given the forward outputs `out` and their gradient `dout`.
fn gru_backward<T: Real>(gi: &[T], w: &[T], bias: &[T], out: &[T], dout: &[T], dims: GruDims) -> (Vec<T>, Vec<T>, Vec<T>) {
    let GruDims { b, l, h } = dims;
    let g3 = 3 * h;
    let mut dgi = vec![T::zero(); gi.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); bias.len()];
    let mut gh = vec![T::zero(); b * g3];
    let mut dgh = vec![T::zero(); b * g3];
    let mut prev = vec![T::zero(); b * h];
    // (3h, h) transpose so the state gradient is a row-by-row axpy.
    let mut wt = vec![T::zero(); h * g3];
    for d in 0..2 {
        let (wd, bd) = (&w[d * h * g3..(d + 1) * h * g3], &bias[d * g3..(d + 1) * g3]);
        for k in 0..h {
            for j in 0..g3 {
                wt[j * h + k] = wd[k * g3 + j];
            }
        }
        let mut carry = vec![T::zero(); b * h];
        for s in (0..l).rev() {
            let t = dims.time(d, s);
            for bi in 0..b {
                let dst = &mut prev[bi * h..(bi + 1) * h];
                if s == 0 {
                    dst.iter_mut().for_each(|v| *v = T::zero());
                } else {
                    dst.copy_from_slice(&out[((d * b + bi) * l + dims.time(d, s - 1)) * h..][..h]);
                }
            }
            hidden_gates(&prev, wd, bd, dims, &mut gh);
            for bi in 0..b {
                let base = ((d * b + bi) * l + t) * g3;
                let x = &gi[base..base + g3];
                let g = &gh[bi * g3..(bi + 1) * g3];
                let dg = &mut dgh[bi * g3..(bi + 1) * g3];
                for j in 0..h {
                    let (r, z, n) = gates(x, g, h, j);
                    let hp = prev[bi * h + j];
                    let dh = dout[((d * b + bi) * l + t) * h + j] + carry[bi * h + j];
                    let dn = dh * (T::one() - z);
                    let dz = dh * (hp - n);
                    carry[bi * h + j] = dh * z;
                    let dan = dn * (T::one() - n * n);
                    let dar = dan * g[2 * h + j] * r * (T::one() - r);
                    let daz = dz * z * (T::one() - z);
                    dgi[base + j] = dar;
                    dgi[base + h + j] = daz;
                    dgi[base + 2 * h + j] = dan;
                    dg[j] = dar;
                    dg[h + j] = daz;
                    dg[2 * h + j] = dan * r;
                }
            }
            let dwd = &mut dw[d * h * g3..(d + 1) * h * g3];
            let dbd = &mut db[d * g3..(d + 1) * g3];
            for bi in 0..b {
                let dg = &dgh[bi * g3..(bi + 1) * g3];
                for (acc, &v) in dbd.iter_mut().zip(dg) {
                    *acc = *acc + v;
                }
                for k in 0..h {
                    let hk = prev[bi * h + k];
                    for (acc, &v) in dwd[k * g3..(k + 1) * g3].iter_mut().zip(dg) {
                        *acc = *acc + hk * v;
                    }
                }
                let c = &mut carry[bi * h..(bi + 1) * h];
                for (j, &v) in dg.iter().enumerate() {
                    for (acc, &wv) in c.iter_mut().zip(&wt[j * h..(j + 1) * h]) {
                        *acc = *acc + v * wv;
                    }
                }
            }
        }
    }
    (dgi, dw, db)
}

struct GruScan {
    dims: GruDims,
}

impl CustomOp3 for GruScan {
    fn name(&self) -> &'static str {
        "bigru-scan"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let GruDims { b, l, h } = self.dims;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(gru_forward(
                slice::<f32>(s1, l1)?,
                slice::<f32>(s2, l2)?,
                slice::<f32>(s3, l3)?,
                self.dims,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(gru_forward(
                slice::<f64>(s1, l1)?,
                slice::<f64>(s2, l2)?,
                slice::<f64>(s3, l3)?,
                self.dims,
            )),
            _ => candle_core::bail!("GRU kernel supports f32 and f64"),
        };
        Ok((out, Shape::from((2, b, l, h))))
    }

    fn bwd(
        &self,
        gi: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: Real>(
            gi: &Tensor,
            w: &Tensor,
            bias: &Tensor,
            res: &Tensor,
            grad: &Tensor,
            dims: GruDims,
        ) -> CResult<(Tensor, Tensor, Tensor)> {
            let (a, bw, c) = gru_backward(
                &host::<T>(gi)?,
                &host::<T>(w)?,
                &host::<T>(bias)?,
                &host::<T>(res)?,
                &host::<T>(grad)?,
                dims,
            );
            Ok((
                Tensor::from_vec(a, gi.shape(), gi.device())?,
                Tensor::from_vec(bw, w.shape(), w.device())?,
                Tensor::from_vec(c, bias.shape(), bias.device())?,
            ))
        }
        let (a, b, c) = match gi.dtype() {
            DType::F32 => run::<f32>(gi, w, bias, res, grad, self.dims)?,
            DType::F64 => run::<f64>(gi, w, bias, res, grad, self.dims)?,
            dt => candle_core::bail!("GRU kernel does not support {dt:?}"),
        };
        Ok((Some(a), Some(b), Some(c)))
    }
}

/// Runs both GRU directions. `gi`: input gates `(2, B, L, 3h)` in `[r, z, n]` order,
/// `w_hh`: `(2, h, 3h)`, `b_hh`: `(2, 1, 3h)`. Returns `(2, B, L, h)`, with the
/// backward direction's states stored at their own time index.
pub fn bigru_scan(gi: &Tensor, w_hh: &Tensor, b_hh: &Tensor) -> CResult<Tensor> {
    let (_, b, l, g3) = gi.dims4()?;
    let dims = GruDims { b, l, h: g3 / 3 };
    gi.contiguous()?
        .apply_op3(&w_hh.contiguous()?, &b_hh.contiguous()?, GruScan { dims })
}

fn dispatch_err<T>(name: &str) -> CResult<T> {
    candle_core::bail!("{name} kernel supports f32 and f64")
}

fn layer_norm_fwd<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let d = gamma.len();
    let inv_d = T::from(1.0 / d as f64).unwrap();
    let eps = T::from(eps).unwrap();
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for (((oi, &xi), &g), &b) in o.iter_mut().zip(row).zip(gamma).zip(beta) {
            *oi = (xi - mean) * rstd * g + b;
        }
    }
    out
}

fn layer_norm_bwd<T: Real>(x: &[T], gamma: &[T], dy: &[T], eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let inv_d = T::from(1.0 / d as f64).unwrap();
    let eps = T::from(eps).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    for ((row, g), o) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        let (mut m1, mut m2) = (T::zero(), T::zero());
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            let dxh = g[j] * gamma[j];
            m1 = m1 + dxh;
            m2 = m2 + dxh * xhat[j];
            dgamma[j] = dgamma[j] + g[j] * xhat[j];
            dbeta[j] = dbeta[j] + g[j];
        }
        let (m1, m2) = (m1 * inv_d, m2 * inv_d);
        for j in 0..d {
            o[j] = rstd * (g[j] * gamma[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

struct LayerNormOp {
    eps: f64,
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(layer_norm_fwd(
                slice::<f32>(s1, l1)?,
                slice::<f32>(s2, l2)?,
                slice::<f32>(s3, l3)?,
                self.eps,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(layer_norm_fwd(
                slice::<f64>(s1, l1)?,
                slice::<f64>(s2, l2)?,
                slice::<f64>(s3, l3)?,
                self.eps,
            )),
            _ => return dispatch_err("layer norm"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: Real>(x: &Tensor, gamma: &Tensor, beta: &Tensor, grad: &Tensor, eps: f64) -> CResult<(Tensor, Tensor, Tensor)> {
            let (dx, dg, db) = layer_norm_bwd(&host::<T>(x)?, &host::<T>(gamma)?, &host::<T>(grad)?, eps);
            Ok((
                Tensor::from_vec(dx, x.shape(), x.device())?,
                Tensor::from_vec(dg, gamma.shape(), gamma.device())?,
                Tensor::from_vec(db, beta.shape(), beta.device())?,
            ))
        }
        let (a, b, c) = match x.dtype() {
            DType::F32 => run::<f32>(x, gamma, beta, grad, self.eps)?,
            DType::F64 => run::<f64>(x, gamma, beta, grad, self.eps)?,
            _ => return dispatch_err("layer norm"),
        };
        Ok((Some(a), Some(b), Some(c)))
    }
}

/// Normalizes over the last axis, then scales by `gamma` and shifts by `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: &[T]) -> Vec<T> {
    let (c, a, half) = (T::from(GELU_C).unwrap(), T::from(GELU_A).unwrap(), T::from(0.5).unwrap());
    x.iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).ftanh()))
        .collect()
}

fn gelu_bwd<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
    let (c, a, half) = (T::from(GELU_C).unwrap(), T::from(GELU_A).unwrap(), T::from(0.5).unwrap());
    let three = T::from(3.0).unwrap();
    x.iter()
        .zip(g)
        .map(|(&v, &gi)| {
            let t = (c * (v + a * v * v * v)).ftanh();
            let du = c * (T::one() + three * a * v * v);
            gi * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
        })
        .collect()
}

struct Gelu;
struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(gelu_fwd(slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(gelu_fwd(slice::<f64>(s, l)?)),
            _ => return dispatch_err("gelu"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(gelu_bwd(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?)),
            CpuStorage::F64(_) => CpuStorage::F64(gelu_bwd(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?)),
            _ => return dispatch_err("gelu"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

/// `x` viewed as three groups of axes; `b` is indexed with `stride` per group
/// (0 where it is broadcast).
#[derive(Debug, Clone, Copy)]
struct BiasView {
    groups: [usize; 3],
    stride: [usize; 3],
}

impl BiasView {
    fn of(x: &[usize], b: &[usize]) -> Option<Self> {
        if b.len() > x.len() {
            return None;
        }
        let pad = x.len() - b.len();
        let mut groups: Vec<(bool, usize)> = Vec::new();
        for (i, &xd) in x.iter().enumerate() {
            let bd = if i < pad { 1 } else { b[i - pad] };
            if bd != xd && bd != 1 {
                return None;
            }
            if xd == 1 {
                continue;
            }
            let kept = bd == xd;
            match groups.last_mut() {
                Some((k, size)) if *k == kept => *size *= xd,
                _ => groups.push((kept, xd)),
            }
        }
        if groups.len() > 3 {
            return None;
        }
        while groups.len() < 3 {
            groups.insert(0, (false, 1));
        }
        let mut stride = [0; 3];
        let mut run = 1;
        for i in (0..3).rev() {
            if groups[i].0 {
                stride[i] = run;
                run *= groups[i].1;
            }
        }
        Some(Self {
            groups: [groups[0].1, groups[1].1, groups[2].1],
            stride,
        })
    }

    fn add<T: Real>(&self, x: &[T], b: &[T]) -> Vec<T> {
        let [g0, g1, g2] = self.groups;
        let [s0, s1, s2] = self.stride;
        let mut out = x.to_vec();
        for i0 in 0..g0 {
            for i1 in 0..g1 {
                let o = &mut out[(i0 * g1 + i1) * g2..][..g2];
                let off = i0 * s0 + i1 * s1;
                if s2 == 1 {
                    for (v, &bv) in o.iter_mut().zip(&b[off..off + g2]) {
                        *v = *v + bv;
                    }
                } else {
                    let bv = b[off];
                    o.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        out
    }

    fn reduce<T: Real>(&self, g: &[T], len: usize) -> Vec<T> {
        let [g0, g1, g2] = self.groups;
        let [s0, s1, s2] = self.stride;
        let mut db = vec![T::zero(); len];
        for i0 in 0..g0 {
            for i1 in 0..g1 {
                let src = &g[(i0 * g1 + i1) * g2..][..g2];
                let off = i0 * s0 + i1 * s1;
                if s2 == 1 {
                    for (acc, &v) in db[off..off + g2].iter_mut().zip(src) {
                        *acc = *acc + v;
                    }
                } else {
                    db[off] = src.iter().fold(db[off], |a, &v| a + v);
                }
            }
        }
        db
    }
}

struct AddBias {
    view: BiasView,
}

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "add-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.view.add(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?)),
            CpuStorage::F64(_) => CpuStorage::F64(self.view.add(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?)),
            _ => return dispatch_err("bias"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let n = b.elem_count();
        let db = match grad.dtype() {
            DType::F32 => Tensor::from_vec(self.view.reduce(&host::<f32>(grad)?, n), b.shape(), b.device())?,
            DType::F64 => Tensor::from_vec(self.view.reduce(&host::<f64>(grad)?, n), b.shape(), b.device())?,
            _ => return dispatch_err("bias"),
        };
        Ok((Some(grad.clone()), Some(db)))
    }
}

/// `x + b` with numpy-style broadcasting of `b`. Falls back to the generic op when
/// the broadcast pattern needs more than three axis groups.
pub fn add_broadcast(x: &Tensor, b: &Tensor) -> CResult<Tensor> {
    match BiasView::of(x.dims(), b.dims()) {
        Some(view) if matches!(x.dtype(), DType::F32 | DType::F64) => {
            x.contiguous()?.apply_op2(&b.contiguous()?, AddBias { view })
        }
        _ => x.broadcast_add(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn reference_softmax(x: &Tensor) -> Tensor {
        let e = x.broadcast_sub(&x.max_keepdim(D::Minus1).unwrap()).unwrap().exp().unwrap();
        e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap()
    }

    #[test]
    fn softmax_matches_composed_ops_with_gradients() {
        let x = Var::from_tensor(&crate::gradcheck::seeded_input(1, &[3, 5, 7]).unwrap()).unwrap();
        let w = crate::gradcheck::seeded_input(2, &[3, 5, 7]).unwrap();
        let a = softmax_last(x.as_tensor()).unwrap();
        let b = reference_softmax(x.as_tensor());
        let diff = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-14);
        let ga = (a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let (ga, gb) = (ga.get(x.as_tensor()).unwrap(), gb.get(x.as_tensor()).unwrap());
        let diff = (ga - gb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-14);
    }

    /// Step-by-step recurrence from plain tensor ops.
    fn reference_gru(gi: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
        let (_, b, l, g3) = gi.dims4().unwrap();
        let h = g3 / 3;
        let mut dirs = Vec::new();
        for d in 0..2 {
            let mut state = Tensor::zeros((b, h), gi.dtype(), &Device::Cpu).unwrap();
            let mut outs = vec![None; l];
            for s in 0..l {
                let t = if d == 0 { s } else { l - 1 - s };
                let x = gi.get(d).unwrap().narrow(1, t, 1).unwrap().squeeze(1).unwrap();
                let g = state.matmul(&w.get(d).unwrap()).unwrap().broadcast_add(&bias.get(d).unwrap()).unwrap();
                let sig = |v: Tensor| (v.neg().unwrap().exp().unwrap() + 1.0).unwrap().recip().unwrap();
                let r = sig((x.narrow(1, 0, h).unwrap() + g.narrow(1, 0, h).unwrap()).unwrap());
                let z = sig((x.narrow(1, h, h).unwrap() + g.narrow(1, h, h).unwrap()).unwrap());
                let n = (x.narrow(1, 2 * h, h).unwrap() + (r * g.narrow(1, 2 * h, h).unwrap()).unwrap())
                    .unwrap()
                    .tanh()
                    .unwrap();
                state = (&n + (z * (&state - &n).unwrap()).unwrap()).unwrap();
                outs[t] = Some(state.clone());
            }
            let outs: Vec<Tensor> = outs.into_iter().map(Option::unwrap).collect();
            dirs.push(Tensor::stack(&outs, 1).unwrap());
        }
        Tensor::stack(&dirs, 0).unwrap()
    }

    #[test]
    fn gru_scan_matches_step_by_step_recurrence() {
        let gi = Var::from_tensor(&crate::gradcheck::seeded_input(3, &[2, 3, 6, 12]).unwrap()).unwrap();
        let w = Var::from_tensor(&crate::gradcheck::seeded_input(4, &[2, 4, 12]).unwrap()).unwrap();
        let bias = Var::from_tensor(&crate::gradcheck::seeded_input(5, &[2, 1, 12]).unwrap()).unwrap();
        let probe = crate::gradcheck::seeded_input(6, &[2, 3, 6, 4]).unwrap();
        let a = bigru_scan(gi.as_tensor(), w.as_tensor(), bias.as_tensor()).unwrap();
        let b = reference_gru(gi.as_tensor(), w.as_tensor(), bias.as_tensor());
        let max = |t: Tensor| t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(max((&a - &b).unwrap()) < 1e-14);
        let ga = (a * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&gi, &w, &bias] {
            let d = (ga.get(v.as_tensor()).unwrap() - gb.get(v.as_tensor()).unwrap()).unwrap();
            assert!(max(d) < 1e-12);
        }
    }

    fn max_abs(t: Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    /// Compares values and input gradients of two functions of the same variables.
    fn same_with_grads(vars: &[&Var], probe: &Tensor, a: Tensor, b: Tensor, tol: f64) {
        assert!(max_abs((&a - &b).unwrap()) < tol);
        let ga = (a * probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in vars {
            let d = (ga.get(v.as_tensor()).unwrap() - gb.get(v.as_tensor()).unwrap()).unwrap();
            assert!(max_abs(d) < tol);
        }
    }

    #[test]
    fn layer_norm_matches_composed_ops() {
        let x = Var::from_tensor(&crate::gradcheck::seeded_input(7, &[4, 3, 6]).unwrap()).unwrap();
        let g = Var::from_tensor(&crate::gradcheck::seeded_input(8, &[6]).unwrap()).unwrap();
        let b = Var::from_tensor(&crate::gradcheck::seeded_input(9, &[6]).unwrap()).unwrap();
        let probe = crate::gradcheck::seeded_input(10, &[4, 3, 6]).unwrap();
        let xt = x.as_tensor();
        let mean = xt.mean_keepdim(D::Minus1).unwrap();
        let c = xt.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let reference = c
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(g.as_tensor())
            .unwrap()
            .broadcast_add(b.as_tensor())
            .unwrap();
        let fused = layer_norm(xt, g.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        same_with_grads(&[&x, &g, &b], &probe, fused, reference, 1e-13);
    }

    #[test]
    fn gelu_matches_composed_tanh_form() {
        let x = Var::from_tensor(&(crate::gradcheck::seeded_input(11, &[5, 40]).unwrap() * 4.0).unwrap()).unwrap();
        let probe = crate::gradcheck::seeded_input(12, &[5, 40]).unwrap();
        let fused = gelu(x.as_tensor()).unwrap();
        let xt = x.as_tensor();
        let u = ((xt + (xt.powf(3.0).unwrap() * GELU_A).unwrap()).unwrap() * GELU_C).unwrap();
        let reference = ((xt * 0.5).unwrap() * (u.tanh().unwrap() + 1.0).unwrap()).unwrap();
        assert!(max_abs((&reference - xt.gelu().unwrap()).unwrap()) < 1e-13);
        same_with_grads(&[&x], &probe, fused, reference, 1e-13);
    }

    #[test]
    fn broadcast_add_matches_generic_op() {
        let cases: [(&[usize], &[usize]); 6] = [
            (&[2, 3, 4, 5], &[5]),
            (&[2, 3, 4, 5], &[3, 1, 1]),
            (&[2, 3, 4, 5], &[1, 3, 4, 1]),
            (&[2, 3, 4, 5], &[2, 1, 1, 5]),
            (&[2, 1, 4, 5], &[4, 5]),
            (&[3, 4], &[3, 4]),
        ];
        for (k, (xd, bd)) in cases.iter().enumerate() {
            let seed = 20 + 3 * k as u64;
            let x = Var::from_tensor(&crate::gradcheck::seeded_input(seed, xd).unwrap()).unwrap();
            let b = Var::from_tensor(&crate::gradcheck::seeded_input(seed + 1, bd).unwrap()).unwrap();
            let probe = crate::gradcheck::seeded_input(seed + 2, xd).unwrap();
            assert!(BiasView::of(xd, bd).is_some());
            let fused = add_broadcast(x.as_tensor(), b.as_tensor()).unwrap();
            let reference = x.as_tensor().broadcast_add(b.as_tensor()).unwrap();
            same_with_grads(&[&x, &b], &probe, fused, reference, 1e-13);
        }
        assert!(BiasView::of(&[2, 3, 4, 5], &[2, 1, 4, 1]).is_none());
    }

    #[test]
    fn fast_exp_relative_error() {
        let mut worst = 0.0f64;
        for i in 0..=200_000 {
            let x = -87.0 + 175.0 * i as f64 / 200_000.0;
            let exact = (x as f32 as f64).exp();
            worst = worst.max((fast_exp(x as f32) as f64 - exact).abs() / exact);
        }
        assert!(worst < 3e-7, "{worst}");
    }
}
