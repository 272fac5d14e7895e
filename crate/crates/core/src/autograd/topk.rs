//! Hard top-k selection with deterministic tie-breaking.

use std::cmp::Ordering;

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boolean support of a tensor, e.g. the entries kept by a top-k selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: &[usize], keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::shape(
                "mask",
                format!("{shape:?} needs {} flags, got {}", shape.iter().product::<usize>(), keep.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), keep })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Orders by value descending, then by index ascending.
fn rank_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Indices of the `min(k, n)` largest entries, best first. Among equal
/// values the lower index ranks higher.
pub fn select_top_k(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("top_k", "k must be at least 1"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("top_k input".into()));
    }
    let n = values.len();
    let k = k.min(n);
    if k <= 16 && k < n {
        // Insertion into a short sorted buffer; a candidate only enters if it
        // strictly beats the current tail, so earlier indices win ties.
        let mut best: Vec<usize> = Vec::with_capacity(k + 1);
        for i in 0..n {
            if best.len() == k && values[i] <= values[best[k - 1]] {
                continue;
            }
            let pos = best.partition_point(|&b| values[b] >= values[i]);
            best.insert(pos, i);
            best.truncate(k);
        }
        return Ok(best);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(values, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(values, a, b));
    Ok(idx)
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Mask of the top-`k` entries of every slice along `axis`.
pub fn top_k_support(x: &Tensor, k: usize, axis: usize) -> Result<Mask> {
    let (outer, len, inner) = axis_split(x.shape(), axis, "top_k_mask")?;
    let mut keep = vec![false; x.numel()];
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data()[base + j * inner];
            }
            for j in select_top_k(&buf, k)? {
                keep[base + j * inner] = true;
            }
        }
    }
    Mask::new(x.shape(), keep)
}

struct MaskBackward {
    keep: Vec<bool>,
}

impl Backward for MaskBackward {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let data = g.data().iter().zip(&self.keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
        Ok(vec![Some(Tensor::new(g.shape(), data)?)])
    }
}

impl Tape {
    /// Keeps the `min(k, n)` largest entries of each slice along `axis` and
    /// zeroes the rest. The gradient flows through kept entries only.
    ///
    /// The returned [`Mask`] is the kept support; pass it to
    /// [`softmax_axis`](Tape::softmax_axis) so that kept entries whose value
    /// happens to be zero are still normalized over.
    pub fn top_k_mask(&mut self, x: Var, k: usize, axis: usize) -> Result<(Var, Mask)> {
        let mask = top_k_support(self.value(x), k, axis)?;
        let data = self.value(x).data().iter().zip(mask.keep()).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let var = self.push_op(value, &[x], MaskBackward { keep: mask.keep().to_vec() });
        Ok((var, mask))
    }
}
