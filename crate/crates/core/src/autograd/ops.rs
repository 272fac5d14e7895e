//! Elementwise, broadcasting, matmul, reduction and normalization ops.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, strides, Tensor};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Default epsilon of [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Floor applied to the norm in [`Tape::l2_normalize`].
pub const L2_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Gelu,
    Softplus,
    Sigmoid,
    Exp,
    Abs,
    Scale(f64),
    AddScalar(f64),
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => gelu(x),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => gelu_grad(x),
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
        }
    }
}

struct UnaryBackward(Unary);

impl Backward for UnaryBackward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0].data();
        let y = output.data();
        let data = g.data().iter().enumerate().map(|(i, &gi)| gi * self.0.derivative(x[i], y[i])).collect();
        Ok(vec![Some(Tensor::new(g.shape(), data)?)])
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// For every output element, the flat index of the broadcast source element.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let src_strides = strides(src);
    // Stride of each output axis into `src`; zero on broadcast axes.
    let mut eff = vec![0usize; rank];
    for ax in 0..rank {
        let off = rank - src.len();
        if ax >= off && src[ax - off] != 1 {
            eff[ax] = src_strides[ax - off];
        }
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= eff[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sums `full` (laid out in the broadcast shape) back down to `shape`.
fn reduce_to(full: &[f64], out_shape: &[usize], shape: &[usize]) -> Result<Tensor> {
    if out_shape == shape {
        return Tensor::new(shape, full.to_vec());
    }
    let map = broadcast_map(shape, out_shape);
    let mut acc = vec![0.0; shape.iter().product()];
    for (v, &m) in full.iter().zip(&map) {
        acc[m] += v;
    }
    Tensor::new(shape, acc)
}

struct BinaryBackward {
    op: Binary,
    out_shape: Vec<usize>,
}

impl Backward for BinaryBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let same = a.shape() == self.out_shape.as_slice() && b.shape() == self.out_shape.as_slice();
        let (amap, bmap) = if same {
            (Vec::new(), Vec::new())
        } else {
            (broadcast_map(a.shape(), &self.out_shape), broadcast_map(b.shape(), &self.out_shape))
        };
        let av = |i: usize| if same { a.data()[i] } else { a.data()[amap[i]] };
        let bv = |i: usize| if same { b.data()[i] } else { b.data()[bmap[i]] };
        let gd = g.data();
        let n = gd.len();
        let mut ga = None;
        let mut gb = None;
        if needs[0] {
            let full: Vec<f64> = match self.op {
                Binary::Add | Binary::Sub => gd.to_vec(),
                Binary::Mul => (0..n).map(|i| gd[i] * bv(i)).collect(),
                Binary::Div => (0..n).map(|i| gd[i] / bv(i)).collect(),
            };
            ga = Some(reduce_to(&full, &self.out_shape, a.shape())?);
        }
        if needs[1] {
            let full: Vec<f64> = match self.op {
                Binary::Add => gd.to_vec(),
                Binary::Sub => gd.iter().map(|v| -v).collect(),
                Binary::Mul => (0..n).map(|i| gd[i] * av(i)).collect(),
                Binary::Div => (0..n)
                    .map(|i| {
                        let bi = bv(i);
                        -gd[i] * av(i) / (bi * bi)
                    })
                    .collect(),
            };
            gb = Some(reduce_to(&full, &self.out_shape, b.shape())?);
        }
        Ok(vec![ga, gb])
    }
}

/// `C = op(A) · op(B)` for row-major buffers, optionally accumulating into C.
///
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths cover every element addressed by the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

struct MatmulBackward {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatmulBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let &MatmulBackward { batch, m, k, n } = self;
        let mut ga = needs[0].then(|| vec![0.0; batch * m * k]);
        let mut gb = needs[1].then(|| vec![0.0; batch * k * n]);
        for t in 0..batch {
            let gs = &g.data()[t * m * n..(t + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                let bs = &b.data()[t * k * n..(t + 1) * k * n];
                gemm(m, n, k, gs, false, bs, true, &mut ga[t * m * k..(t + 1) * m * k], false);
            }
            if let Some(gb) = gb.as_mut() {
                let as_ = &a.data()[t * m * k..(t + 1) * m * k];
                gemm(k, m, n, as_, true, gs, false, &mut gb[t * k * n..(t + 1) * k * n], false);
            }
        }
        Ok(vec![ga.map(|d| Tensor::new(a.shape(), d)).transpose()?, gb.map(|d| Tensor::new(b.shape(), d)).transpose()?])
    }
}

struct SumBackward;

impl Backward for SumBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g.item()?))])
    }
}

struct MeanBackward;

impl Backward for MeanBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let n = inputs[0].numel() as f64;
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g.item()? / n))])
    }
}

struct AvgPoolBackward;

impl Backward for AvgPoolBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0].shape();
        let hw = s[2] * s[3];
        let inv = 1.0 / hw as f64;
        let mut out = vec![0.0; inputs[0].numel()];
        for (bc, chunk) in out.chunks_mut(hw).enumerate() {
            let v = g.data()[bc] * inv;
            chunk.iter_mut().for_each(|o| *o = v);
        }
        Ok(vec![Some(Tensor::new(s, out)?)])
    }
}

struct LayerNormBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    dim: usize,
}

impl Backward for LayerNormBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let d = self.dim;
        let gam = gamma.data();
        let mut dx = vec![0.0; x.numel()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let inv_d = 1.0 / d as f64;
        for (r, gr) in g.data().chunks(d).enumerate() {
            let xh = &self.xhat[r * d..(r + 1) * d];
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..d {
                let dxh = gr[j] * gam[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
                dgamma[j] += gr[j] * xh[j];
                dbeta[j] += gr[j];
            }
            mean_dxh *= inv_d;
            mean_dxh_xh *= inv_d;
            let is = self.inv_std[r];
            for j in 0..d {
                dx[r * d + j] = is * (gr[j] * gam[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(x.shape(), dx)).transpose()?,
            needs[1].then(|| Tensor::new(&[d], dgamma)).transpose()?,
            needs[2].then(|| Tensor::new(&[d], dbeta)).transpose()?,
        ])
    }
}

struct L2NormBackward {
    norms: Vec<f64>,
    dim: usize,
}

impl Backward for L2NormBackward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let d = self.dim;
        let mut dx = vec![0.0; g.numel()];
        for (r, (gr, yr)) in g.data().chunks(d).zip(output.data().chunks(d)).enumerate() {
            let n = self.norms[r];
            if n > L2_NORM_EPS {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                }
            } else {
                for j in 0..d {
                    dx[r * d + j] = gr[j] / L2_NORM_EPS;
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), dx)?)])
    }
}

impl Tape {
    fn unary(&mut self, x: Var, op: Unary) -> Var {
        let value = self.value(x).map(|v| op.apply(v));
        self.push_op(value, &[x], UnaryBackward(op))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Scale(-1.0))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(c))
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let f = |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let am = broadcast_map(av.shape(), &out_shape);
            let bm = broadcast_map(bv.shape(), &out_shape);
            am.iter().zip(&bm).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect()
        };
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(value, &[a, b], BinaryBackward { op, out_shape }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n, vec![*b1, *m, *n]),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            gemm(m, k, n, &ad[t * m * k..], false, &bd[t * k * n..], false, &mut out[t * m * n..(t + 1) * m * n], false);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push_op(value, &[a, b], MatmulBackward { batch, m, k, n }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(value, &[x], SumBackward)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push_op(value, &[x], MeanBackward)
    }

    /// `[B,C,H,W] -> [B,C,1,1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(&[s[0], s[1], 1, 1], data)?;
        Ok(self.push_op(value, &[x], AvgPoolBackward))
    }

    /// Normalizes over the last axis with learnable `gamma`/`beta` of that
    /// axis' length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("scale/shift must be [{d}], got {:?} and {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let rows = self.value(x).numel() / d;
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for (r, xr) in self.value(x).data().chunks(d).enumerate() {
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gam[j] + bet[j];
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push_op(value, &[x, gamma, beta], LayerNormBackward { xhat, inv_std, dim: d }))
    }

    /// Divides every last-axis row by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("l2_normalize", "rank-0 input"))?;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let denom = n.max(L2_NORM_EPS);
            out.extend(row.iter().map(|v| v / denom));
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push_op(value, &[x], L2NormBackward { norms, dim: d }))
    }
}
