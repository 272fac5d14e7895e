use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::VoxelGrid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentFlags {
    /// Each enabled flip is applied with probability 1/2.
    pub fn sample(seed: u64, allow_h: bool, allow_v: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.random_bool(0.5);
        let v = rng.random_bool(0.5);
        Self { hflip: allow_h && h, vflip: allow_v && v }
    }
}

fn spatial(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [.., h, w] if t.rank() >= 2 => Ok((*h, *w)),
        s => Err(Error::shape("augment", format!("need at least [H,W], got {s:?}"))),
    }
}

/// Mirrors the last axis: column `x` moves to `W−1−x`.
pub fn flip_h(t: &Tensor) -> Result<Tensor> {
    let (_, w) = spatial(t)?;
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Mirrors the second-to-last axis: row `y` moves to `H−1−y`.
pub fn flip_v(t: &Tensor) -> Result<Tensor> {
    let (h, w) = spatial(t)?;
    let mut out = t.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
    Ok(out)
}

/// Applies the same flips to an image and its voxel grid.
pub fn augment(image: &Tensor, voxel: &VoxelGrid, flags: AugmentFlags) -> Result<(Tensor, VoxelGrid)> {
    let (h, w) = spatial(image)?;
    if (voxel.height(), voxel.width()) != (h, w) {
        return Err(Error::shape("augment", format!("image is {h}x{w}, voxel grid is {}x{}", voxel.height(), voxel.width())));
    }
    let mut img = image.clone();
    let mut vox = voxel.data.clone();
    if flags.hflip {
        img = flip_h(&img)?;
        vox = flip_h(&vox)?;
    }
    if flags.vflip {
        img = flip_v(&img)?;
        vox = flip_v(&vox)?;
    }
    Ok((img, VoxelGrid { bins: voxel.bins, data: vox }))
}
