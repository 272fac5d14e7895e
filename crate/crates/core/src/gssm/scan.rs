//! Zero-order-hold discretization and the selective scan recurrence.

use crate::autograd::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this `|A·Δ|` the input coefficient switches to its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

// The derivative of the input coefficient with respect to A cancels
// catastrophically much earlier than the coefficient itself.
const DERIVATIVE_SERIES_THRESHOLD: f64 = 1e-3;

fn check_params(a: f64, delta: f64) -> Result<()> {
    if !(a < 0.0) || !a.is_finite() {
        return Err(Error::invalid("discretize", format!("A must be negative and finite, got {a}")));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid("discretize", format!("step must be positive and finite, got {delta}")));
    }
    Ok(())
}

/// `(Ā, g)` with `Ā = exp(ΔA)` and `g = (Ā − 1)/A`, so that `B̄ = g·B`.
fn coefficients(a: f64, delta: f64) -> (f64, f64) {
    let z = a * delta;
    if z.abs() < SERIES_THRESHOLD {
        (z.exp(), delta * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))))
    } else {
        (z.exp(), z.exp_m1() / a)
    }
}

/// `∂g/∂A`; `∂g/∂Δ` is simply `Ā`.
fn coefficient_grad_a(a: f64, delta: f64, abar: f64, g: f64) -> f64 {
    let z = a * delta;
    if z.abs() < DERIVATIVE_SERIES_THRESHOLD {
        const C: [f64; 6] = [1.0 / 2.0, 1.0 / 3.0, 1.0 / 8.0, 1.0 / 30.0, 1.0 / 144.0, 1.0 / 840.0];
        delta * delta * C.iter().rev().fold(0.0, |acc, c| acc * z + c)
    } else {
        (delta * abar - g) / a
    }
}

/// Zero-order hold of `h' = A h + B x` over a step `Δ`: returns `(Ā, B̄)`.
pub fn discretize(a: f64, delta: f64, b: f64) -> Result<(f64, f64)> {
    check_params(a, delta)?;
    let (abar, g) = coefficients(a, delta);
    Ok((abar, g * b))
}

struct Dims {
    l: usize,
    c: usize,
    n: usize,
}

fn scan_dims(x: &[usize], delta: &[usize], a: &[usize], b: &[usize], cm: &[usize], d: &[usize]) -> Result<Dims> {
    let bad = || Error::shape("selective_scan", format!("x {x:?}, delta {delta:?}, A {a:?}, B {b:?}, C {cm:?}, D {d:?}"));
    let ([l, c], [cc, n]) = (x, a) else { return Err(bad()) };
    if delta != x || *cc != *c || b != [*l, *n] || cm != [*l, *n] || d != [*c] {
        return Err(bad());
    }
    Ok(Dims { l: *l, c: *c, n: *n })
}

/// Forward values kept for the backward pass, each `[L,C,N]`.
struct Trace {
    states: Vec<f64>,
    abar: Vec<f64>,
    coef: Vec<f64>,
}

/// Runs the recurrence and returns `y [L,C]` with its trace.
fn run(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, cm: &Tensor, d: &Tensor) -> Result<(Tensor, Trace)> {
    let Dims { l, c, n } = scan_dims(x.shape(), delta.shape(), a.shape(), b.shape(), cm.shape(), d.shape())?;
    for &av in a.data() {
        check_params(av, 1.0)?;
    }
    for &dv in delta.data() {
        check_params(-1.0, dv)?;
    }
    let (xd, dd, ad, bd, cd, skip) = (x.data(), delta.data(), a.data(), b.data(), cm.data(), d.data());
    let mut trace = Trace { states: vec![0.0; l * c * n], abar: vec![0.0; l * c * n], coef: vec![0.0; l * c * n] };
    let mut y = vec![0.0; l * c];
    let mut h = vec![0.0; c * n];
    for t in 0..l {
        let (bt, ct) = (&bd[t * n..(t + 1) * n], &cd[t * n..(t + 1) * n]);
        for ch in 0..c {
            let xv = xd[t * c + ch];
            let dt = dd[t * c + ch];
            let hs = &mut h[ch * n..(ch + 1) * n];
            let base = (t * c + ch) * n;
            let mut acc = skip[ch] * xv;
            for s in 0..n {
                let (abar, g) = coefficients(ad[ch * n + s], dt);
                trace.abar[base + s] = abar;
                trace.coef[base + s] = g;
                hs[s] = abar * hs[s] + g * bt[s] * xv;
                acc += ct[s] * hs[s];
            }
            y[t * c + ch] = acc;
        }
        trace.states[t * c * n..(t + 1) * c * n].copy_from_slice(&h);
    }
    Ok((Tensor::new(&[l, c], y)?, trace))
}

/// Selective scan with per-token step `delta [L,C]`, diagonal state matrix
/// `a [C,N]` (all entries negative), per-token `b`, `c` of `[L,N]`, and skip
/// `d [C]`. Starting from `h₀ = 0`:
///
/// `h_t = Ā_t h_{t−1} + B̄_t x_t`, `y_t = C_t·h_t + D x_t`, channel by channel.
pub fn selective_scan_forward(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    run(x, delta, a, b, c, d).map(|(y, _)| y)
}

/// The recurrence with already discretized coefficients: `abar` and `bbar`
/// are `[L,C,N]`, `c` is `[L,N]`, `d` is `[C]`.
pub fn scan_discretized(x: &Tensor, abar: &Tensor, bbar: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let [l, ch] = x.shape()[..] else {
        return Err(Error::shape("scan_discretized", format!("x must be [L,C], got {:?}", x.shape())));
    };
    let n = c.shape().get(1).copied().unwrap_or(0);
    if abar.shape() != [l, ch, n] || bbar.shape() != [l, ch, n] || c.shape() != [l, n] || d.shape() != [ch] {
        return Err(Error::shape(
            "scan_discretized",
            format!("x {:?}, abar {:?}, bbar {:?}, c {:?}, d {:?}", x.shape(), abar.shape(), bbar.shape(), c.shape(), d.shape()),
        ));
    }
    let mut h = vec![0.0; ch * n];
    let mut y = vec![0.0; l * ch];
    for t in 0..l {
        for k in 0..ch {
            let xv = x.data()[t * ch + k];
            let mut acc = d.data()[k] * xv;
            for s in 0..n {
                let i = (t * ch + k) * n + s;
                h[k * n + s] = abar.data()[i] * h[k * n + s] + bbar.data()[i] * xv;
                acc += c.data()[t * n + s] * h[k * n + s];
            }
            y[t * ch + k] = acc;
        }
    }
    Tensor::new(&[l, ch], y)
}

struct ScanBackward {
    trace: Trace,
}

impl Backward for ScanBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, gy: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let [x, delta, a, b, cm, d] = inputs[..] else {
            return Err(Error::Backward("selective_scan expects 6 inputs".into()));
        };
        let Dims { l, c, n } = scan_dims(x.shape(), delta.shape(), a.shape(), b.shape(), cm.shape(), d.shape())?;
        let (xd, dd, ad, bd, cd, skip, g) = (x.data(), delta.data(), a.data(), b.data(), cm.data(), d.data(), gy.data());
        let mut dx = vec![0.0; l * c];
        let mut ddelta = vec![0.0; l * c];
        let mut da = vec![0.0; c * n];
        let mut db = vec![0.0; l * n];
        let mut dc = vec![0.0; l * n];
        let mut dd_skip = vec![0.0; c];
        // Gradient reaching h_t from later steps.
        let mut carry = vec![0.0; c * n];
        let zeros = vec![0.0; c * n];
        for t in (0..l).rev() {
            let states = &self.trace.states;
            let h_t = &states[t * c * n..(t + 1) * c * n];
            let h_prev = if t > 0 { &states[(t - 1) * c * n..t * c * n] } else { &zeros[..] };
            for ch in 0..c {
                let gv = g[t * c + ch];
                let xv = xd[t * c + ch];
                let dt = dd[t * c + ch];
                dd_skip[ch] += gv * xv;
                let mut gx = gv * skip[ch];
                let mut gdt = 0.0;
                for s in 0..n {
                    let k = ch * n + s;
                    let av = ad[k];
                    let bv = bd[t * n + s];
                    dc[t * n + s] += gv * h_t[k];
                    let dh = carry[k] + gv * cd[t * n + s];
                    let (abar, coef) = (self.trace.abar[t * c * n + k], self.trace.coef[t * c * n + k]);
                    let d_abar = dh * h_prev[k];
                    let d_coef = dh * bv * xv;
                    db[t * n + s] += dh * coef * xv;
                    gx += dh * coef * bv;
                    gdt += d_abar * av * abar + d_coef * abar;
                    da[k] += d_abar * dt * abar + d_coef * coefficient_grad_a(av, dt, abar, coef);
                    carry[k] = dh * abar;
                }
                dx[t * c + ch] = gx;
                ddelta[t * c + ch] = gdt;
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape(), dx)?),
            Some(Tensor::new(delta.shape(), ddelta)?),
            Some(Tensor::new(a.shape(), da)?),
            Some(Tensor::new(b.shape(), db)?),
            Some(Tensor::new(cm.shape(), dc)?),
            Some(Tensor::new(d.shape(), dd_skip)?),
        ])
    }
}

/// Recorded version of [`selective_scan_forward`], differentiable in all six
/// inputs.
pub fn selective_scan(tape: &mut Tape, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
    let (y, trace) = run(tape.value(x), tape.value(delta), tape.value(a), tape.value(b), tape.value(c), tape.value(d))?;
    Ok(tape.push_op(y, &[x, delta, a, b, c, d], ScanBackward { trace }))
}
