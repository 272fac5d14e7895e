//! Independent reference implementations used as test oracles.
//!
//! Everything here is written in the most direct form possible (nested loops,
//! full sorts, explicit sums) and shares no code with the library kernels.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use std::collections::BTreeMap;

use evmamba_core::autograd::gradcheck::{check, GradCheck, GradReport};
use evmamba_core::params::{Bound, ParamStore};
use evmamba_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1)`.
pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn rand_in(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, r)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct cross-correlation with zero padding, `[B,Cin,H,W] * [Cout,Cin/g,kH,kW]`.
pub fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let at = |bi: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[((bi * cin + c) * h + i as usize) * w + j as usize]
        }
    };
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for o in 0..cout {
            let g = o / cout_g;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let i = (oi * stride + a) as isize - pad as isize;
                                let j = (oj * stride + bb) as isize - pad as isize;
                                let wv = k.data()[((o * cin_g + ci) * kh + a) * kw + bb];
                                acc += wv * at(bi, g * cin_g + ci, i, j);
                            }
                        }
                    }
                    out[((bi * cout + o) * ho + oi) * wo + oj] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out).unwrap()
}

pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Indices of the `min(k, n)` largest values, best first, via a full stable
/// sort: stability keeps lower indices ahead among equal values.
pub fn topk_oracle(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    idx.truncate(k.min(values.len()));
    idx
}

/// Softmax over the entries in `keep`, others zero, with the sum taken in
/// compensated arithmetic.
pub fn softmax_oracle(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = logits.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().zip(keep).map(|(v, &k)| if k { (v - max).exp() } else { 0.0 }).collect();
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in &e {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    e.iter().map(|v| v / sum).collect()
}

/// Dense scores, all but the top `k` per row dropped, softmax over the kept
/// entries, then a weighted sum of value rows. `q [h,N,d]`, `k [h,M,d]`,
/// `v [h,M,dv]`.
pub fn masked_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, topk: usize, temp: &[f64]) -> Tensor {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (m, dv) = (k.shape()[1], v.shape()[2]);
    let mut out = vec![0.0; h * n * dv];
    for head in 0..h {
        for r in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| {
                    let dot: f64 = (0..d).map(|c| q.data()[(head * n + r) * d + c] * k.data()[(head * m + j) * d + c]).sum();
                    temp[head] * dot
                })
                .collect();
            let mut keep = vec![false; m];
            for j in topk_oracle(&logits, topk) {
                keep[j] = true;
            }
            let p = softmax_oracle(&logits, &keep);
            for c in 0..dv {
                out[(head * n + r) * dv + c] = (0..m).map(|j| p[j] * v.data()[(head * m + j) * dv + c]).sum();
            }
        }
    }
    Tensor::new(&[h, n, dv], out).unwrap()
}

/// Standard softmax attention over every key.
pub fn dense_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, temp: &[f64]) -> Tensor {
    masked_attention_oracle(q, k, v, usize::MAX, temp)
}

/// Sequential recurrence with explicit `Ā = exp(ΔA)` and `B̄ = (Ā − 1)/A · B`.
/// `x, delta [L,C]`, `a [C,N]`, `b, c [L,N]`, `d [C]`.
pub fn naive_scan(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Tensor {
    let (l, ch, n) = (x.shape()[0], x.shape()[1], a.shape()[1]);
    let mut y = vec![0.0; l * ch];
    for k in 0..ch {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let xv = x.data()[t * ch + k];
            let dt = delta.data()[t * ch + k];
            let mut acc = d.data()[k] * xv;
            for s in 0..n {
                let av = a.data()[k * n + s];
                let abar = (dt * av).exp();
                let bbar = (abar - 1.0) / av * b.data()[t * n + s];
                h[s] = abar * h[s] + bbar * xv;
                acc += c.data()[t * n + s] * h[s];
            }
            y[t * ch + k] = acc;
        }
    }
    Tensor::new(&[l, ch], y).unwrap()
}

/// Recurrence with given coefficients: `abar, bbar [L,C,N]`.
pub fn naive_scan_discretized(x: &Tensor, abar: &Tensor, bbar: &Tensor, c: &Tensor, d: &Tensor) -> Tensor {
    let (l, ch, n) = (x.shape()[0], x.shape()[1], c.shape()[1]);
    let mut y = vec![0.0; l * ch];
    for k in 0..ch {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let xv = x.data()[t * ch + k];
            let mut acc = d.data()[k] * xv;
            for s in 0..n {
                let i = (t * ch + k) * n + s;
                h[s] = abar.data()[i] * h[s] + bbar.data()[i] * xv;
                acc += c.data()[t * n + s] * h[s];
            }
            y[t * ch + k] = acc;
        }
    }
    Tensor::new(&[l, ch], y).unwrap()
}

/// Random scan problem with `A ∈ [-2, -0.1]`, `Δ ∈ [0.01, 1]`.
pub struct ScanCase {
    pub x: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

impl ScanCase {
    pub fn random(l: usize, ch: usize, n: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        Self {
            x: rand_in(&[l, ch], -1.0, 1.0, &mut r),
            delta: rand_in(&[l, ch], 0.01, 1.0, &mut r),
            a: rand_in(&[ch, n], -2.0, -0.1, &mut r),
            b: rand_in(&[l, n], -1.0, 1.0, &mut r),
            c: rand_in(&[l, n], -1.0, 1.0, &mut r),
            d: rand_in(&[ch], -1.0, 1.0, &mut r),
        }
    }

    pub fn inputs(&self) -> [Tensor; 6] {
        [self.x.clone(), self.delta.clone(), self.a.clone(), self.b.clone(), self.c.clone(), self.d.clone()]
    }
}

/// Direct (non-separable) Gaussian-window SSIM averaged over every valid
/// window position of a single `[H,W]` plane.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let r = (WIN / 2) as f64;
    let mut kern = vec![0.0; WIN * WIN];
    for i in 0..WIN {
        for j in 0..WIN {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            kern[i * WIN + j] = (-(di * di + dj * dj) / (2.0 * SIGMA * SIGMA)).exp();
        }
    }
    let total: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|k| *k /= total);
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - WIN {
        for x in 0..=w - WIN {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let g = kern[i * WIN + j];
                    let (va, vb) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// `sum(out ⊙ weights)`: a scalar whose gradient exercises every output entry
/// with a different weight.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> evmamba_core::Result<Var> {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Gradient check of a parameterized module with respect to all of its
/// parameters and the extra inputs. `f` receives the bound parameters and the
/// extra input handles.
pub fn check_module<F>(store: &ParamStore, extra: &[Tensor], opts: GradCheck, f: F) -> GradReport
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> evmamba_core::Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut inputs: Vec<Tensor> = extra.to_vec();
    inputs.extend(store.tensors().values().cloned());
    check(
        &inputs,
        |tape, vars| {
            let (x, params) = vars.split_at(extra.len());
            let bound = Bound::new(names.iter().cloned().zip(params.iter().copied()).collect::<BTreeMap<_, _>>());
            f(tape, &bound, x)
        },
        opts,
    )
    .unwrap()
}

/// Replaces every parameter with uniform values in `[-scale, scale)`.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in store.tensors_mut().values_mut() {
        *t = Tensor::rand_uniform(t.shape(), -scale, scale, &mut r);
    }
}

/// Convolution oracle plus the `[Cout,1,1]` bias stored under `{name}.bias`.
pub fn conv_layer_oracle(store: &ParamStore, name: &str, x: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    let y = conv_oracle(x, w, stride, pad, groups);
    let plane = y.shape()[2] * y.shape()[3];
    let data = y.data().iter().enumerate().map(|(i, v)| v + b.data()[(i / plane) % b.numel()]).collect();
    Tensor::new(y.shape(), data).unwrap()
}

pub fn add_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x + y).unwrap()
}
