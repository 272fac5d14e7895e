use super::topk::{axis_split, Mask};
use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct SoftmaxBackward {
    axis: usize,
}

impl Backward for SoftmaxBackward {
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (outer, len, inner) = axis_split(y.shape(), self.axis, "softmax_axis")?;
        let mut dx = vec![0.0; y.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let dot: f64 = (0..len).map(|j| y.data()[base + j * inner] * g.data()[base + j * inner]).sum();
                for j in 0..len {
                    let p = base + j * inner;
                    dx[p] = y.data()[p] * (g.data()[p] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::new(y.shape(), dx)?)])
    }
}

/// Softmax of one slice restricted to the entries flagged in `keep`.
/// Excluded entries get probability exactly zero.
pub(crate) fn masked_softmax_slice(logits: &[f64], keep: impl Fn(usize) -> bool, out: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("softmax_axis", "slice has no retained entries"));
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in logits.iter().zip(out.iter_mut()).enumerate() {
        *o = if keep(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    Ok(())
}

impl Tape {
    /// Max-shifted softmax along `axis`.
    ///
    /// With a mask, only flagged entries take part: the others behave as
    /// `-inf` logits and come out as exact zeros. A slice with nothing
    /// flagged is an error.
    pub fn softmax_axis(&mut self, x: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(Error::shape("softmax_axis", format!("mask {:?} vs input {shape:?}", m.shape())));
            }
        }
        let (outer, len, inner) = axis_split(&shape, axis, "softmax_axis")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let mut logits = vec![0.0; len];
        let mut probs = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = xd[base + j * inner];
                }
                let keep = |j: usize| mask.is_none_or(|m| m.keep()[base + j * inner]);
                masked_softmax_slice(&logits, keep, &mut probs)?;
                for (j, p) in probs.iter().enumerate() {
                    out[base + j * inner] = *p;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push_op(value, &[x], SoftmaxBackward { axis }))
    }
}
