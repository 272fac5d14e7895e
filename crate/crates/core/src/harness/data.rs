//! Synthetic motion-blur pairs and their on-disk layout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, DataConfig, Pattern};
use crate::error::{Error, Result};
use crate::etsr::{self, Precision};
use crate::events::{inject_noise, read_events, simulate_events, voxelize, write_events, EventStream, VoxelGrid};
use crate::tensor::Tensor;

const TAG_NOISE: u64 = 0x6e6f;

/// A blurry/sharp pair with the events recorded during the exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    /// Temporal mean of all frames, `[1,H,W]`.
    pub blurry: Tensor,
    /// Middle frame, `[1,H,W]`.
    pub sharp: Tensor,
    pub stream: EventStream,
}

/// A training or evaluation sample: images are `[C,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub blurry: Tensor,
    pub sharp: Tensor,
    pub stream: EventStream,
    pub voxel: VoxelGrid,
}

impl Sample {
    /// Voxelizes the stream and repeats grayscale images to `channels`.
    pub fn from_pair(pair: SyntheticPair, bins: usize, channels: usize) -> Result<Self> {
        let voxel = voxelize(&pair.stream, bins)?;
        Ok(Self {
            blurry: repeat_channels(&pair.blurry, channels)?,
            sharp: repeat_channels(&pair.sharp, channels)?,
            stream: pair.stream,
            voxel,
        })
    }
}

fn repeat_channels(img: &Tensor, channels: usize) -> Result<Tensor> {
    let s = img.shape();
    if s[0] == channels {
        return Ok(img.clone());
    }
    if s[0] != 1 {
        return Err(Error::shape("sample", format!("cannot expand {s:?} to {channels} channels")));
    }
    let data = (0..channels).flat_map(|_| img.data().iter().copied()).collect();
    Tensor::new(&[channels, s[1], s[2]], data)
}

/// Intensity field over continuous coordinates, values in (0, 1).
enum Field {
    Blobs(Vec<(f64, f64, f64, f64)>, f64),
    Edge { nx: f64, ny: f64, offset: f64, lo: f64, hi: f64 },
}

impl Field {
    fn random(pattern: Pattern, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        match pattern {
            Pattern::Smooth => {
                let blobs = (0..8)
                    .map(|_| {
                        let cx = rng.random_range(-0.25 * s..1.25 * s);
                        let cy = rng.random_range(-0.25 * s..1.25 * s);
                        let sigma = rng.random_range(0.08 * s..0.2 * s);
                        let amp = rng.random_range(-3.0..3.0);
                        (cx, cy, sigma, amp)
                    })
                    .collect();
                Field::Blobs(blobs, rng.random_range(-0.5..0.5))
            }
            Pattern::StepEdge => {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let offset = rng.random_range(-0.15 * s..0.15 * s);
                Field::Edge { nx: theta.cos(), ny: theta.sin(), offset, lo: 0.2, hi: 0.8 }
            }
        }
    }

    /// Intensity at image position `(x, y)` relative to the image center.
    fn at(&self, x: f64, y: f64, center: f64) -> f64 {
        match self {
            Field::Blobs(blobs, bias) => {
                let mut v = *bias;
                for &(cx, cy, sigma, amp) in blobs {
                    let (dx, dy) = (x - cx, y - cy);
                    v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
                0.05 + 0.9 / (1.0 + (-v).exp())
            }
            Field::Edge { nx, ny, offset, lo, hi } => {
                if (x - center) * nx + (y - center) * ny > *offset {
                    *hi
                } else {
                    *lo
                }
            }
        }
    }
}

/// Renders a random pattern translating at `motion` px/frame in a random
/// direction, averages the frames into the blurry image, takes the middle
/// frame as sharp, and simulates (then corrupts) the events. Deterministic
/// in `seed`.
pub fn make_synthetic_pair(cfg: &DataConfig, seed: u64) -> Result<SyntheticPair> {
    if cfg.frames < 2 {
        return Err(Error::invalid("make_synthetic_pair", "need at least 2 frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size;
    let field = Field::random(cfg.pattern, n, &mut rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (vx, vy) = (cfg.motion * theta.cos(), cfg.motion * theta.sin());
    let mid = cfg.frames / 2;
    let center = (n as f64 - 1.0) / 2.0;
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let shift = f as f64 - mid as f64;
        let (ox, oy) = (shift * vx, shift * vy);
        let data = (0..n * n).map(|i| field.at((i % n) as f64 - ox, (i / n) as f64 - oy, center)).collect();
        frames.push(Tensor::new(&[n, n], data)?);
    }
    // Running mean, so identical frames give a bit-identical average.
    let mut mean = frames[0].clone();
    for (k, f) in frames.iter().enumerate().skip(1) {
        let w = 1.0 / (k + 1) as f64;
        mean = mean.zip_map(f, |m, v| m + (v - m) * w)?;
    }
    let timestamps: Vec<u64> = (0..cfg.frames as u64).map(|f| f * cfg.frame_interval_us).collect();
    let clean = simulate_events(&frames, &timestamps, cfg.threshold)?;
    let stream = inject_noise(&clean, &cfg.noise_model(), derive_seed(seed, TAG_NOISE, 0))?;
    Ok(SyntheticPair { blurry: mean.reshape(&[1, n, n])?, sharp: frames[mid].reshape(&[1, n, n])?, stream })
}

/// Per-pair metadata kept next to the event file.
#[derive(Serialize, Deserialize)]
struct PairMeta {
    width: usize,
    height: usize,
    t_start: u64,
    t_end: u64,
}

fn pair_dir(root: &Path, i: usize) -> std::path::PathBuf {
    root.join(format!("pair_{i:03}"))
}

/// Writes `pair_NNN/{blurry,sharp,voxel}.etsr`, `events.csv` and `meta.toml`
/// for every sample.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let dir = pair_dir(root, i);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        etsr::write(&dir.join("blurry.etsr"), &s.blurry, Precision::F32)?;
        etsr::write(&dir.join("sharp.etsr"), &s.sharp, Precision::F32)?;
        etsr::write(&dir.join("voxel.etsr"), &s.voxel.data, Precision::F32)?;
        write_events(&dir.join("events.csv"), &s.stream)?;
        let meta = PairMeta { width: s.stream.width, height: s.stream.height, t_start: s.stream.t_start, t_end: s.stream.t_end };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join("meta.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads every `pair_NNN` directory under `root` in index order. Voxel grids
/// are rebuilt from the events with `bins` bins.
pub fn load_dataset(root: &Path, bins: usize, channels: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    loop {
        let dir = pair_dir(root, out.len());
        if !dir.is_dir() {
            break;
        }
        let meta_path = dir.join("meta.toml");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: PairMeta = toml::from_str(&text).map_err(|e| Error::Format { path: meta_path.clone(), msg: e.to_string() })?;
        let stream = read_events(&dir.join("events.csv"), meta.width, meta.height, Some((meta.t_start, meta.t_end)))?;
        let blurry = etsr::read(&dir.join("blurry.etsr"))?;
        let sharp = etsr::read(&dir.join("sharp.etsr"))?;
        if blurry.shape() != sharp.shape() || blurry.rank() != 3 || blurry.shape()[1..] != [meta.height, meta.width] {
            return Err(Error::Format {
                path: dir.clone(),
                msg: format!(
                    "images {:?}/{:?} do not match {}x{} events",
                    blurry.shape(),
                    sharp.shape(),
                    meta.width,
                    meta.height
                ),
            });
        }
        let voxel = voxelize(&stream, bins)?;
        out.push(Sample {
            blurry: repeat_channels(&blurry, channels)?,
            sharp: repeat_channels(&sharp, channels)?,
            stream,
            voxel,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no pair_000 directory under {}", root.display())));
    }
    Ok(out)
}

/// `cfg.pairs` samples, pair `i` drawn from `derive_seed(seed, TAG_DATA, i)`.
pub fn synthetic_dataset(cfg: &DataConfig, seed: u64, bins: usize, channels: usize) -> Result<Vec<Sample>> {
    (0..cfg.pairs)
        .map(|i| Sample::from_pair(make_synthetic_pair(cfg, derive_seed(seed, TAG_DATA, i as u64))?, bins, channels))
        .collect()
}

pub(crate) const TAG_DATA: u64 = 0x6461;
