//! Cross-modal top-k sparse attention.
//!
//! Queries come from image features, keys and values from event features.
//! Each query keeps only its `k` most similar keys; the softmax runs over
//! those and every other key gets probability exactly zero.

use crate::autograd::{select_top_k, Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Initializer, ParamStore};
use crate::tensor::Tensor;

/// How attention probabilities are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Gather over the retained keys of each row.
    #[default]
    Sparse,
    /// Full score matrix, top-k mask, masked softmax, full matmul.
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsamConfig {
    pub channels: usize,
    pub heads: usize,
    /// Retained keys per query; clamped to the token count at run time.
    pub k: usize,
    pub residual: bool,
    pub mode: AttentionMode,
}

impl TsamConfig {
    pub fn new(channels: usize, heads: usize, k: usize) -> Result<Self> {
        let cfg = Self { channels, heads, k, residual: true, mode: AttentionMode::Sparse };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "tsam_config",
                format!("channels {} must be a positive multiple of heads {}", self.channels, self.heads),
            ));
        }
        if self.k == 0 {
            return Err(Error::invalid("tsam_config", "k must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

fn check_qkv(q: &[usize], k: &[usize], v: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (q, k, v) {
        ([h, n, d], [h2, m, d2], [h3, m2, dv]) if h == h2 && h == h3 && d == d2 && m == m2 => Ok((*h, *n, *m, *d.max(dv))),
        _ => Err(Error::shape("sparse_attention", format!("q {q:?}, k {k:?}, v {v:?}"))),
    }
}

/// Per-head retained key indices and probabilities, `rows × kk` each.
struct Support {
    kk: usize,
    idx: Vec<usize>,
    prob: Vec<f64>,
    /// Unscaled similarity `q·k` of each retained pair.
    sim: Vec<f64>,
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, topk: usize, temperature: &[f64]) -> Result<(Tensor, Vec<Support>)> {
    let (h, n, m, _) = check_qkv(q.shape(), k.shape(), v.shape())?;
    let (d, dv) = (q.shape()[2], v.shape()[2]);
    if topk == 0 {
        return Err(Error::invalid("sparse_attention", "k must be at least 1"));
    }
    if temperature.len() != h {
        return Err(Error::shape("sparse_attention", format!("{} temperatures for {h} heads", temperature.len())));
    }
    let kk = topk.min(m);
    let mut out = vec![0.0; h * n * dv];
    let mut supports = Vec::with_capacity(h);
    let mut scores = vec![0.0; n * m];
    for head in 0..h {
        let qh = &q.data()[head * n * d..(head + 1) * n * d];
        let kh = &k.data()[head * m * d..(head + 1) * m * d];
        let vh = &v.data()[head * m * dv..(head + 1) * m * dv];
        crate::autograd::gemm(n, d, m, qh, false, kh, true, &mut scores, false);
        let tau = temperature[head];
        let mut sup = Support { kk, idx: Vec::with_capacity(n * kk), prob: vec![0.0; n * kk], sim: Vec::with_capacity(n * kk) };
        let mut logits = vec![0.0; m];
        for r in 0..n {
            let row = &scores[r * m..(r + 1) * m];
            for (l, s) in logits.iter_mut().zip(row) {
                *l = tau * s;
            }
            let kept = select_top_k(&logits, kk)?;
            let max = logits[kept[0]];
            let probs = &mut sup.prob[r * kk..(r + 1) * kk];
            let mut total = 0.0;
            for (p, &j) in probs.iter_mut().zip(&kept) {
                *p = (logits[j] - max).exp();
                total += *p;
            }
            let orow = &mut out[(head * n + r) * dv..(head * n + r + 1) * dv];
            for (p, &j) in probs.iter_mut().zip(&kept) {
                *p /= total;
                for (o, vv) in orow.iter_mut().zip(&vh[j * dv..(j + 1) * dv]) {
                    *o += *p * vv;
                }
                sup.sim.push(row[j]);
            }
            sup.idx.extend(kept);
        }
        supports.push(sup);
    }
    Ok((Tensor::new(&[h, n, dv], out)?, supports))
}

/// Top-k sparse attention on tensors: `q [h,N,d]`, `k [h,M,d]`, `v [h,M,dv]`,
/// one temperature per head. Returns `[h,N,dv]`.
pub fn sparse_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, topk: usize, temperature: &[f64]) -> Result<Tensor> {
    attend(q, k, v, topk, temperature).map(|(out, _)| out)
}

struct SparseAttentionBackward {
    supports: Vec<Support>,
}

impl Backward for SparseAttentionBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (q, k, v, temp) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (h, n, m, _) = check_qkv(q.shape(), k.shape(), v.shape())?;
        let (d, dv) = (q.shape()[2], v.shape()[2]);
        let mut dq = vec![0.0; q.numel()];
        let mut dk = vec![0.0; k.numel()];
        let mut dvv = vec![0.0; v.numel()];
        let mut dtemp = vec![0.0; h];
        let mut dp = Vec::new();
        for (head, sup) in self.supports.iter().enumerate() {
            let tau = temp.data()[head];
            let kk = sup.kk;
            let (qo, ko, vo) = (head * n * d, head * m * d, head * m * dv);
            for r in 0..n {
                let grow = &g.data()[(head * n + r) * dv..(head * n + r + 1) * dv];
                let idx = &sup.idx[r * kk..(r + 1) * kk];
                let prob = &sup.prob[r * kk..(r + 1) * kk];
                dp.clear();
                for (&j, &p) in idx.iter().zip(prob) {
                    let vrow = vo + j * dv;
                    let mut dot = 0.0;
                    for c in 0..dv {
                        dot += grow[c] * v.data()[vrow + c];
                        dvv[vrow + c] += p * grow[c];
                    }
                    dp.push(dot);
                }
                let mean: f64 = prob.iter().zip(&dp).map(|(p, x)| p * x).sum();
                let qrow = qo + r * d;
                for (s, (&j, &p)) in idx.iter().zip(prob).enumerate() {
                    let dl = p * (dp[s] - mean);
                    dtemp[head] += dl * sup.sim[r * kk + s];
                    let ds = dl * tau;
                    let krow = ko + j * d;
                    for c in 0..d {
                        dq[qrow + c] += ds * k.data()[krow + c];
                        dk[krow + c] += ds * q.data()[qrow + c];
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(q.shape(), dq)?),
            Some(Tensor::new(k.shape(), dk)?),
            Some(Tensor::new(v.shape(), dvv)?),
            Some(Tensor::new(temp.shape(), dtemp)?),
        ])
    }
}

/// Recorded version of [`sparse_attention_forward`]; `temperature` is `[h]`.
pub fn sparse_attention(tape: &mut Tape, q: Var, k: Var, v: Var, topk: usize, temperature: Var) -> Result<Var> {
    if tape.shape(temperature).len() != 1 {
        return Err(Error::shape("sparse_attention", format!("temperature must be [h], got {:?}", tape.shape(temperature))));
    }
    let (out, supports) = attend(tape.value(q), tape.value(k), tape.value(v), topk, tape.value(temperature).data())?;
    Ok(tape.push_op(out, &[q, k, v, temperature], SparseAttentionBackward { supports }))
}

/// The same attention composed from generic tape ops over the full
/// `[h,N,M]` score matrix.
pub fn dense_masked_attention(tape: &mut Tape, q: Var, k: Var, v: Var, topk: usize, temperature: Var) -> Result<Var> {
    let (h, ..) = check_qkv(tape.shape(q), tape.shape(k), tape.shape(v))?;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let sim = tape.matmul(q, kt)?;
    let tau = tape.reshape(temperature, &[h, 1, 1])?;
    let logits = tape.mul(sim, tau)?;
    let (_, mask) = tape.top_k_mask(logits, topk, 2)?;
    let probs = tape.softmax_axis(logits, 2, Some(&mask))?;
    tape.matmul(probs, v)
}

/// Parameterized attention block with named parameters under `prefix`.
#[derive(Clone, Debug)]
pub struct Tsam {
    pub cfg: TsamConfig,
    q_pw: Conv,
    q_dw: Conv,
    kv_pw: Conv,
    kv_dw: Conv,
    out: Conv,
    temperature: String,
}

impl Tsam {
    pub fn new(prefix: &str, cfg: TsamConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            q_pw: Conv::pointwise(format!("{prefix}.q_pw"), c, c),
            q_dw: Conv::depthwise(format!("{prefix}.q_dw"), c, 3),
            kv_pw: Conv::pointwise(format!("{prefix}.kv_pw"), c, 2 * c),
            kv_dw: Conv::depthwise(format!("{prefix}.kv_dw"), 2 * c, 3),
            out: Conv::pointwise(format!("{prefix}.out"), c, c),
            temperature: format!("{prefix}.temperature"),
            cfg,
        })
    }

    pub fn temperature_name(&self) -> &str {
        &self.temperature
    }

    pub fn init(&self, init: &mut Initializer, store: &mut ParamStore) -> Result<()> {
        for conv in [&self.q_pw, &self.q_dw, &self.kv_pw, &self.kv_dw, &self.out] {
            conv.init(init, store)?;
        }
        let t0 = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        store.insert(self.temperature.clone(), Tensor::full(&[self.cfg.heads], t0))
    }

    /// `[1,C,H,W] -> [h, HW, C/h]`, channel `head·d + j` going to head `head`.
    fn to_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let hw = s[2] * s[3];
        let r = tape.reshape(x, &[self.cfg.heads, self.cfg.head_dim(), hw])?;
        tape.permute(r, &[0, 2, 1])
    }

    fn check_inputs(&self, tape: &Tape, image: Var, event: Var) -> Result<()> {
        let (si, se) = (tape.shape(image), tape.shape(event));
        if si.len() != 4 || si[0] != 1 || si[1] != self.cfg.channels || si != se {
            return Err(Error::shape(
                "tsam",
                format!("expected two [1,{},H,W] features, got {si:?} and {se:?}", self.cfg.channels),
            ));
        }
        Ok(())
    }

    /// Queries from the image branch, keys and values from the event branch,
    /// each `[h, HW, C/h]`. Queries and keys are L2-normalized per token.
    pub fn project_qkv(&self, tape: &mut Tape, p: &Bound, image: Var, event: Var) -> Result<(Var, Var, Var)> {
        self.check_inputs(tape, image, event)?;
        let c = self.cfg.channels;
        let q = self.q_pw.forward(tape, p, image)?;
        let q = self.q_dw.forward(tape, p, q)?;
        let kv = self.kv_pw.forward(tape, p, event)?;
        let kv = self.kv_dw.forward(tape, p, kv)?;
        let parts = tape.split(kv, 1, &[c, c])?;
        let q = self.to_heads(tape, q)?;
        let k = self.to_heads(tape, parts[0])?;
        let v = self.to_heads(tape, parts[1])?;
        let q = tape.l2_normalize(q)?;
        let k = tape.l2_normalize(k)?;
        Ok((q, k, v))
    }

    /// Attention output `[h, HW, C/h]` for the configured mode.
    pub fn attention(&self, tape: &mut Tape, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let temp = p.get(&self.temperature)?;
        match self.cfg.mode {
            AttentionMode::Sparse => sparse_attention(tape, q, k, v, self.cfg.k, temp),
            AttentionMode::Dense => dense_masked_attention(tape, q, k, v, self.cfg.k, temp),
        }
    }

    /// `[1,C,H,W]` image and event features to `[1,C,H,W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var, event: Var) -> Result<Var> {
        let (q, k, v) = self.project_qkv(tape, p, image, event)?;
        let att = self.attention(tape, p, q, k, v)?;
        let shape = tape.shape(image).to_vec();
        let heads = tape.permute(att, &[0, 2, 1])?;
        let merged = tape.reshape(heads, &shape)?;
        let y = self.out.forward(tape, p, merged)?;
        if self.cfg.residual {
            tape.add(y, image)
        } else {
            Ok(y)
        }
    }
}
