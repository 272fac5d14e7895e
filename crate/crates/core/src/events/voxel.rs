//! Temporal voxel grid with bilinear binning.

use super::EventStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Signed event mass in `bins` temporal slices, as a `[B,H,W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub data: Tensor,
}

impl VoxelGrid {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::shape("voxel_grid", format!("expected [B,H,W], got {:?}", data.shape())));
        }
        Ok(Self { bins: data.shape()[0], data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn total(&self) -> f64 {
        self.data.sum()
    }
}

/// Bins each event at normalized time `t* = (t − t_start)/(t_end − t_start)·(B−1)`,
/// splitting its polarity between bins `⌊t*⌋` and `⌈t*⌉` in proportion to
/// proximity. Total mass equals the stream's polarity sum.
pub fn voxelize(stream: &EventStream, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::invalid("voxelize", "bins must be at least 1"));
    }
    if stream.t_end <= stream.t_start {
        return Err(Error::invalid("voxelize", format!("degenerate time range [{}, {}]", stream.t_start, stream.t_end)));
    }
    let (h, w) = (stream.height, stream.width);
    let mut grid = vec![0.0; bins * h * w];
    let span = (stream.t_end - stream.t_start) as f64;
    let scale = (bins - 1) as f64;
    for e in &stream.events {
        if e.t < stream.t_start || e.t > stream.t_end || e.x as usize >= w || e.y as usize >= h {
            return Err(Error::invalid("voxelize", format!("event {e:?} outside the stream bounds")));
        }
        let ts = (e.t - stream.t_start) as f64 / span * scale;
        let lo = (ts.floor() as usize).min(bins - 1);
        let frac = ts - lo as f64;
        let pix = e.y as usize * w + e.x as usize;
        let p = e.p.sign();
        grid[lo * h * w + pix] += p * (1.0 - frac);
        if frac > 0.0 {
            grid[(lo + 1) * h * w + pix] += p * frac;
        }
    }
    Ok(VoxelGrid { bins, data: Tensor::new(&[bins, h, w], grid)? })
}
