//! Data-movement ops: reshape, permute, concat/split, row gathers, upsampling.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

struct ReshapeBackward;

impl Backward for ReshapeBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.reshape(inputs[0].shape())?)])
    }
}

/// Gathers `src` through a flat index map: `out[i] = src[map[i]]`.
struct GatherBackward {
    map: Vec<usize>,
}

impl Backward for GatherBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut out = vec![0.0; inputs[0].numel()];
        for (gi, &m) in g.data().iter().zip(&self.map) {
            out[m] += gi;
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), out)?)])
    }
}

struct ConcatBackward {
    axis: usize,
}

impl Backward for ConcatBackward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let os = output.shape();
        let outer: usize = os[..self.axis].iter().product();
        let inner: usize = os[self.axis + 1..].iter().product();
        let total = os[self.axis] * inner;
        let mut offset = 0;
        let mut res = Vec::with_capacity(inputs.len());
        for (inp, &need) in inputs.iter().zip(needs) {
            let len = inp.shape()[self.axis] * inner;
            if need {
                let mut d = Vec::with_capacity(inp.numel());
                for o in 0..outer {
                    d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + len]);
                }
                res.push(Some(Tensor::new(inp.shape(), d)?));
            } else {
                res.push(None);
            }
            offset += len;
        }
        Ok(res)
    }
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(value, &[x], ReshapeBackward))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = map.iter().map(|&m| src[m]).collect();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push_op(value, &[x], GatherBackward { map }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of rank {}", s.len())));
        }
        let in_strides = strides(&s);
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n: usize = s.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; s.len()];
        let mut pos = 0usize;
        for _ in 0..n {
            map.push(pos);
            for ax in (0..s.len()).rev() {
                idx[ax] += 1;
                pos += eff[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                pos -= eff[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        self.gather(x, out_shape, map)
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    /// Selects rows of axis 0 in the given order; indices may repeat.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("index_select", "rank-0 input"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid("index_select", format!("index {bad} out of range {}", s[0])));
        }
        let row: usize = s[1..].iter().product();
        let map = indices.iter().flat_map(|&i| i * row..(i + 1) * row).collect();
        let mut shape = s.clone();
        shape[0] = indices.len();
        self.gather(x, shape, map)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid("narrow", format!("axis {axis}, [{start}, {}) of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            map.extend(base..base + len * inner);
        }
        let mut shape = s;
        shape[axis] = len;
        self.gather(x, shape, map)
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let s = self.shape(x);
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(Error::invalid("split", format!("sizes {sizes:?} along axis {axis} of {s:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Joins along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push_op(value, xs, ConcatBackward { axis }))
    }

    /// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::shape("upsample_nearest2x", format!("expected rank 4, got {s:?}")));
        };
        let (h2, w2) = (2 * h, 2 * w);
        let mut map = Vec::with_capacity(b * c * h2 * w2);
        for bc in 0..b * c {
            for i in 0..h2 {
                for j in 0..w2 {
                    map.push(bc * h * w + (i / 2) * w + j / 2);
                }
            }
        }
        self.gather(x, vec![b, c, h2, w2], map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn permute_matches_transpose() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(tape.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[1, 1, 2], &[9., 8.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4., 9., 8.]);
        let parts = tape.split(c, 1, &[2, 1]).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
        assert!(tape.split(c, 1, &[2, 2]).is_err());
    }

    #[test]
    fn concat_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 2]));
        let b = tape.constant(Tensor::ones(&[3, 3]));
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1., 2.]));
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }

    #[test]
    fn index_select_gradient_scatters() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 1], &[1., 2., 3.]));
        let y = tape.index_select(x, &[2, 2, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 3., 1.]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 0., 2.]);
        assert!(tape.index_select(x, &[3]).is_err());
    }
}
