//! Gated state-space block: multi-scale depth-wise enhancement, a selective
//! scan over four flattenings of the feature map, and a nonlinear gated unit.

mod scan;

pub use scan::{discretize, scan_discretized, selective_scan, selective_scan_forward, SERIES_THRESHOLD};

use crate::autograd::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Initializer, ParamStore};
use crate::tensor::Tensor;

/// Token orders of the four scans over an `h × w` map, as indices into the
/// row-major flattening: rows forward, rows backward, columns forward,
/// columns backward.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let rows: Vec<usize> = (0..h * w).collect();
    let cols: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
    let rows_rev = rows.iter().rev().copied().collect();
    let cols_rev = cols.iter().rev().copied().collect();
    [rows, rows_rev, cols, cols_rev]
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &tok) in order.iter().enumerate() {
        inv[tok] = pos;
    }
    inv
}

#[derive(Clone, Debug, PartialEq)]
pub struct GssmConfig {
    pub channels: usize,
    /// Hidden state size N per channel.
    pub state: usize,
    /// Depth-wise kernel sizes of the multi-scale stage; all odd.
    pub kernels: Vec<usize>,
    /// GeLU on the gate branch; identity when off.
    pub gate_nonlinear: bool,
    /// Spatial average of the gate; identity when off.
    pub gate_pool: bool,
    pub residual: bool,
}

impl GssmConfig {
    pub fn new(channels: usize, state: usize) -> Result<Self> {
        let cfg = Self { channels, state, kernels: vec![3, 5, 7], gate_nonlinear: true, gate_pool: true, residual: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.state == 0 {
            return Err(Error::invalid("gssm_config", "channels and state size must be positive"));
        }
        if self.kernels.is_empty() {
            return Err(Error::invalid("gssm_config", "need at least one multi-scale kernel"));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::invalid("gssm_config", format!("kernel size {k} is even")));
        }
        Ok(())
    }
}

/// Parameter names of the scan stage.
#[derive(Clone, Debug)]
struct SsmNames {
    dt_weight: String,
    dt_bias: String,
    b_weight: String,
    c_weight: String,
    a_log: String,
    d: String,
}

#[derive(Clone, Debug)]
pub struct Gssm {
    pub cfg: GssmConfig,
    multiscale: Vec<Conv>,
    fuse: Conv,
    proj: Conv,
    ln_gamma: String,
    ln_beta: String,
    ssm: SsmNames,
    expand: Conv,
    project: Conv,
}

/// Step-size bias range; Δ at init is log-uniform in it.
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 0.1;

impl Gssm {
    pub fn new(prefix: &str, cfg: GssmConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let multiscale = cfg.kernels.iter().map(|&k| Conv::depthwise(format!("{prefix}.ms{k}"), c, k)).collect();
        let ssm = SsmNames {
            dt_weight: format!("{prefix}.ssm.dt_weight"),
            dt_bias: format!("{prefix}.ssm.dt_bias"),
            b_weight: format!("{prefix}.ssm.b_weight"),
            c_weight: format!("{prefix}.ssm.c_weight"),
            a_log: format!("{prefix}.ssm.a_log"),
            d: format!("{prefix}.ssm.d"),
        };
        Ok(Self {
            multiscale,
            fuse: Conv::pointwise(format!("{prefix}.ms_fuse"), c, c),
            proj: Conv::pointwise(format!("{prefix}.proj"), c, c),
            ln_gamma: format!("{prefix}.ln.gamma"),
            ln_beta: format!("{prefix}.ln.beta"),
            ssm,
            expand: Conv::pointwise(format!("{prefix}.gate_expand"), c, 2 * c),
            project: Conv::pointwise(format!("{prefix}.gate_project"), c, c),
            cfg,
        })
    }

    pub fn init(&self, init: &mut Initializer, store: &mut ParamStore) -> Result<()> {
        let (c, n) = (self.cfg.channels, self.cfg.state);
        for conv in self.multiscale.iter().chain([&self.fuse, &self.proj]) {
            conv.init(init, store)?;
        }
        store.insert(self.ln_gamma.clone(), Tensor::ones(&[c]))?;
        store.insert(self.ln_beta.clone(), Tensor::zeros(&[c]))?;
        store.insert(self.ssm.dt_weight.clone(), init.fan_in_uniform(&[c, c], c))?;
        let dt = init.uniform(&[c], DT_MIN.ln(), DT_MAX.ln()).map(|u| {
            let dt = u.exp();
            // Inverse of softplus.
            dt + (-(-dt).exp_m1()).ln()
        });
        store.insert(self.ssm.dt_bias.clone(), dt)?;
        store.insert(self.ssm.b_weight.clone(), init.fan_in_uniform(&[c, n], c))?;
        store.insert(self.ssm.c_weight.clone(), init.fan_in_uniform(&[c, n], c))?;
        let a_log = (0..c).flat_map(|_| (0..n).map(|s| ((s + 1) as f64).ln())).collect();
        store.insert(self.ssm.a_log.clone(), Tensor::new(&[c, n], a_log)?)?;
        store.insert(self.ssm.d.clone(), Tensor::ones(&[c]))?;
        self.expand.init(init, store)?;
        self.project.init(init, store)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(usize, usize)> {
        match tape.shape(x) {
            &[1, c, h, w] if c == self.cfg.channels => Ok((h, w)),
            s => Err(Error::shape("gssm", format!("expected [1,{},H,W], got {s:?}", self.cfg.channels))),
        }
    }

    /// Sum of the depth-wise convolutions, fused pointwise, plus the input.
    pub fn multiscale_enhance(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut acc = self.multiscale[0].forward(tape, p, x)?;
        for conv in &self.multiscale[1..] {
            let y = conv.forward(tape, p, x)?;
            acc = tape.add(acc, y)?;
        }
        let fused = self.fuse.forward(tape, p, acc)?;
        tape.add(fused, x)
    }

    /// `[1,C,H,W] -> [HW,C]`.
    pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[s[1], s[2] * s[3]])?;
        tape.transpose(flat)
    }

    /// `[HW,C] -> [1,C,H,W]`.
    pub fn from_tokens(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var> {
        let c = tape.shape(t)[1];
        let tr = tape.transpose(t)?;
        tape.reshape(tr, &[1, c, h, w])
    }

    /// Scan inputs derived from tokens `[L,C]`: `(Δ [L,C], A [C,N], B [L,N], C [L,N], D [C])`.
    pub fn ssm_inputs(&self, tape: &mut Tape, p: &Bound, tokens: Var) -> Result<[Var; 5]> {
        let w_dt = p.get(&self.ssm.dt_weight)?;
        let pre = tape.matmul(tokens, w_dt)?;
        let b_dt = p.get(&self.ssm.dt_bias)?;
        let pre = tape.add(pre, b_dt)?;
        let delta = tape.softplus(pre);
        let a_log = p.get(&self.ssm.a_log)?;
        let a_pos = tape.exp(a_log);
        let a = tape.neg(a_pos);
        let w_b = p.get(&self.ssm.b_weight)?;
        let b = tape.matmul(tokens, w_b)?;
        let w_c = p.get(&self.ssm.c_weight)?;
        let c = tape.matmul(tokens, w_c)?;
        let d = p.get(&self.ssm.d)?;
        Ok([delta, a, b, c, d])
    }

    /// One directional scan over tokens `[L,C]` taken in `order`, returned
    /// in the original token order.
    pub fn directional_scan(&self, tape: &mut Tape, p: &Bound, tokens: Var, order: &[usize]) -> Result<Var> {
        let [delta, a, b, c, d] = self.ssm_inputs(tape, p, tokens)?;
        self.scan_with(tape, [tokens, delta, a, b, c, d], order)
    }

    fn scan_with(&self, tape: &mut Tape, [x, delta, a, b, c, d]: [Var; 6], order: &[usize]) -> Result<Var> {
        let xs = tape.index_select(x, order)?;
        let ds = tape.index_select(delta, order)?;
        let bs = tape.index_select(b, order)?;
        let cs = tape.index_select(c, order)?;
        let y = selective_scan(tape, xs, ds, a, bs, cs, d)?;
        tape.index_select(y, &inverse(order))
    }

    /// Mean of the four directional scans of `x [1,C,H,W]`. The token
    /// projections are shared by all directions.
    pub fn cross_scan_2d(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (h, w) = self.check_input(tape, x)?;
        let tokens = Self::to_tokens(tape, x)?;
        let [delta, a, b, c, d] = self.ssm_inputs(tape, p, tokens)?;
        let mut total: Option<Var> = None;
        for order in scan_orders(h, w) {
            let y = self.scan_with(tape, [tokens, delta, a, b, c, d], &order)?;
            total = Some(match total {
                Some(t) => tape.add(t, y)?,
                None => y,
            });
        }
        let mean = tape.scale(total.expect("four directions"), 0.25);
        Self::from_tokens(tape, mean, h, w)
    }

    /// `f ⊙ gate` before the output projection, where `[f, g]` is the
    /// pointwise expansion of `x` and `gate = Pool(GeLU(g))`.
    pub fn gated_product(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let c = self.cfg.channels;
        let fg = self.expand.forward(tape, p, x)?;
        let parts = tape.split(fg, 1, &[c, c])?;
        let mut gate = parts[1];
        if self.cfg.gate_nonlinear {
            gate = tape.gelu(gate);
        }
        if self.cfg.gate_pool {
            gate = tape.global_avg_pool(gate)?;
        }
        tape.mul(parts[0], gate)
    }

    pub fn nonlinear_gated_unit(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.gated_product(tape, p, x)?;
        self.project.forward(tape, p, y)
    }

    /// Layer norm over channels at every spatial site.
    pub fn channel_norm(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (h, w) = self.check_input(tape, x)?;
        let t = Self::to_tokens(tape, x)?;
        let (g, b) = (p.get(&self.ln_gamma)?, p.get(&self.ln_beta)?);
        let n = tape.layer_norm(t, g, b, LAYER_NORM_EPS)?;
        Self::from_tokens(tape, n, h, w)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.multiscale_enhance(tape, p, x)?;
        let y = self.proj.forward(tape, p, y)?;
        let y = self.channel_norm(tape, p, y)?;
        let y = self.cross_scan_2d(tape, p, y)?;
        let y = self.nonlinear_gated_unit(tape, p, y)?;
        if self.cfg.residual {
            tape.add(y, x)
        } else {
            Ok(y)
        }
    }
}
