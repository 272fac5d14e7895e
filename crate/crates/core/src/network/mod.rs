//! The UNet that fuses image and event features, its loss, and checkpoints.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::gssm::{Gssm, GssmConfig};
use crate::params::{Bound, Conv, Initializer, ParamStore};
use crate::tensor::Tensor;
use crate::tsam::{AttentionMode, Tsam, TsamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    /// Channel width of each level; doubles from one level to the next.
    pub widths: Vec<usize>,
    /// Retained keys per query, per level.
    pub k: Vec<usize>,
    /// Attention heads per level.
    pub heads: Vec<usize>,
    /// Hidden state size of the scans.
    pub state: usize,
    /// Temporal bins of the event voxel grid.
    pub bins: usize,
    pub image_channels: usize,
    /// Conv + ReLU blocks in each residual local feature block.
    pub rlfb_depth: usize,
    /// Repetitions of attention → state space → local block per encoder level.
    pub blocks_per_level: usize,
    pub tsam_residual: bool,
    pub gssm_residual: bool,
    pub gate_nonlinear: bool,
    pub gate_pool: bool,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            widths: vec![16, 32, 64],
            k: vec![4; 3],
            heads: vec![2; 3],
            state: 8,
            bins: 6,
            image_channels: 1,
            rlfb_depth: 3,
            blocks_per_level: 1,
            tsam_residual: true,
            gssm_residual: true,
            gate_nonlinear: true,
            gate_pool: true,
            attention: AttentionMode::Sparse,
        }
    }
}

impl ModelConfig {
    /// A one-level model of the given width; handy for small checks.
    pub fn single_level(width: usize) -> Self {
        Self { levels: 1, widths: vec![width], k: vec![4], heads: vec![2], ..Self::default() }
    }

    /// Same model with `k` retained keys at every level.
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = vec![k; self.levels];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        for (name, len) in [("widths", self.widths.len()), ("k", self.k.len()), ("heads", self.heads.len())] {
            if len != self.levels {
                return bad(format!("{name} has {len} entries for {} levels", self.levels));
            }
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad(format!("widths {:?} must start positive and double per level", self.widths));
        }
        if self.k.contains(&0) {
            return bad("k must be at least 1 at every level".into());
        }
        for (w, h) in self.widths.iter().zip(&self.heads) {
            if *h == 0 || w % h != 0 {
                return bad(format!("width {w} is not divisible by {h} heads"));
            }
        }
        if self.state == 0 || self.bins == 0 || self.image_channels == 0 || self.rlfb_depth == 0 || self.blocks_per_level == 0 {
            return bad("state, bins, image_channels, rlfb_depth and blocks_per_level must be positive".into());
        }
        Ok(())
    }

    /// Spatial extents must survive `levels − 1` halvings.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.levels - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::invalid("unet", format!("{h}x{w} is not divisible by {f} ({} levels)", self.levels)));
        }
        Ok(())
    }
}

/// Residual local feature block: `depth` (3×3 conv → ReLU) stages plus a
/// skip from input to output.
#[derive(Clone, Debug)]
pub struct Rlfb {
    convs: Vec<Conv>,
}

impl Rlfb {
    pub fn new(prefix: &str, channels: usize, depth: usize) -> Self {
        Self { convs: (0..depth).map(|i| Conv::new(format!("{prefix}.conv{i}"), channels, channels, 3)).collect() }
    }

    pub fn convs(&self) -> &[Conv] {
        &self.convs
    }

    pub fn init(&self, init: &mut Initializer, store: &mut ParamStore) -> Result<()> {
        self.convs.iter().try_for_each(|c| c.init(init, store))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut y = x;
        for conv in &self.convs {
            let z = conv.forward(tape, p, y)?;
            y = tape.relu(z);
        }
        tape.add(y, x)
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    tsam: Tsam,
    gssm: Gssm,
    rlfb: Rlfb,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    blocks: Vec<EncoderBlock>,
    down_image: Option<Conv>,
    down_event: Option<Conv>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    fuse: Conv,
    rlfb: Rlfb,
}

/// Encoder-decoder restoration network. Events are fused in the encoder
/// only; the decoder works on the image path with skip connections.
#[derive(Clone, Debug)]
pub struct Unet {
    pub cfg: ModelConfig,
    stem_image: Conv,
    stem_event: Conv,
    encoder: Vec<EncoderLevel>,
    /// Ordered from the deepest level upwards.
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

impl Unet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let mut encoder = Vec::new();
        for lvl in 0..cfg.levels {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                let pre = format!("enc{lvl}.block{b}");
                let mut tc = TsamConfig::new(w[lvl], cfg.heads[lvl], cfg.k[lvl])?;
                tc.residual = cfg.tsam_residual;
                tc.mode = cfg.attention;
                let mut gc = GssmConfig::new(w[lvl], cfg.state)?;
                gc.gate_nonlinear = cfg.gate_nonlinear;
                gc.gate_pool = cfg.gate_pool;
                gc.residual = cfg.gssm_residual;
                blocks.push(EncoderBlock {
                    tsam: Tsam::new(&format!("{pre}.tsam"), tc)?,
                    gssm: Gssm::new(&format!("{pre}.gssm"), gc)?,
                    rlfb: Rlfb::new(&format!("{pre}.rlfb"), w[lvl], cfg.rlfb_depth),
                });
            }
            let last = lvl + 1 == cfg.levels;
            encoder.push(EncoderLevel {
                blocks,
                down_image: (!last).then(|| Conv::new(format!("down{lvl}.image"), w[lvl], w[lvl + 1], 3).strided(2)),
                down_event: (!last).then(|| Conv::new(format!("down{lvl}.event"), w[lvl], w[lvl + 1], 3).strided(2)),
            });
        }
        let decoder = (0..cfg.levels.saturating_sub(1))
            .rev()
            .map(|lvl| DecoderLevel {
                up: Conv::new(format!("dec{lvl}.up"), w[lvl + 1], w[lvl], 3),
                fuse: Conv::pointwise(format!("dec{lvl}.fuse"), 2 * w[lvl], w[lvl]),
                rlfb: Rlfb::new(&format!("dec{lvl}.rlfb"), w[lvl], cfg.rlfb_depth),
            })
            .collect();
        Ok(Self {
            stem_image: Conv::new("stem.image", cfg.image_channels, w[0], 3),
            stem_event: Conv::new("stem.event", cfg.bins, w[0], 3),
            head: Conv::new("head", w[0], cfg.image_channels, 3),
            encoder,
            decoder,
            cfg,
        })
    }

    /// Fresh parameters. The output head starts at zero so the network
    /// initially maps its input image to itself.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        self.stem_image.init(&mut init, &mut store)?;
        self.stem_event.init(&mut init, &mut store)?;
        for level in &self.encoder {
            for b in &level.blocks {
                b.tsam.init(&mut init, &mut store)?;
                b.gssm.init(&mut init, &mut store)?;
                b.rlfb.init(&mut init, &mut store)?;
            }
            if let (Some(di), Some(de)) = (&level.down_image, &level.down_event) {
                di.init(&mut init, &mut store)?;
                de.init(&mut init, &mut store)?;
            }
        }
        for level in &self.decoder {
            level.up.init(&mut init, &mut store)?;
            level.fuse.init(&mut init, &mut store)?;
            level.rlfb.init(&mut init, &mut store)?;
        }
        self.head.init_zero(&mut store)?;
        Ok(store)
    }

    /// `image [1,Ci,H,W]` and `voxel [1,B,H,W]` to the restored `[1,Ci,H,W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var, voxel: Var) -> Result<Var> {
        let (si, sv) = (tape.shape(image).to_vec(), tape.shape(voxel).to_vec());
        if si.len() != 4 || si[0] != 1 || si[1] != self.cfg.image_channels {
            return Err(Error::shape("unet", format!("image must be [1,{},H,W], got {si:?}", self.cfg.image_channels)));
        }
        if sv.len() != 4 || sv[0] != 1 || sv[1] != self.cfg.bins || sv[2..] != si[2..] {
            return Err(Error::shape("unet", format!("voxel {sv:?} does not match image {si:?} with {} bins", self.cfg.bins)));
        }
        self.cfg.check_resolution(si[2], si[3])?;

        let mut x = self.stem_image.forward(tape, p, image)?;
        let e = self.stem_event.forward(tape, p, voxel)?;
        let mut e = tape.gelu(e);
        let mut skips = Vec::new();
        for level in &self.encoder {
            for b in &level.blocks {
                x = b.tsam.forward(tape, p, x, e)?;
                x = b.gssm.forward(tape, p, x)?;
                x = b.rlfb.forward(tape, p, x)?;
            }
            if let (Some(di), Some(de)) = (&level.down_image, &level.down_event) {
                skips.push(x);
                x = di.forward(tape, p, x)?;
                let ed = de.forward(tape, p, e)?;
                e = tape.gelu(ed);
            }
        }
        for level in &self.decoder {
            let up = tape.upsample_nearest2x(x)?;
            let up = level.up.forward(tape, p, up)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = tape.concat(&[up, skip], 1)?;
            let fused = level.fuse.forward(tape, p, cat)?;
            x = level.rlfb.forward(tape, p, fused)?;
        }
        let out = self.head.forward(tape, p, x)?;
        tape.add(out, image)
    }

    /// Forward on plain tensors: `image [Ci,H,W]` plus its voxel grid.
    pub fn restore(&self, params: &ParamStore, image: &Tensor, voxel: &VoxelGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let (iv, vv) = self.inputs(&mut tape, image, voxel)?;
        let out = self.forward(&mut tape, &p, iv, vv)?;
        tape.value(out).reshape(image.shape())
    }

    /// Places `image [Ci,H,W]` and `voxel` on the tape as batch-of-one constants.
    pub fn inputs(&self, tape: &mut Tape, image: &Tensor, voxel: &VoxelGrid) -> Result<(Var, Var)> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape("unet", format!("image must be [C,H,W], got {s:?}")));
        }
        if (voxel.height(), voxel.width()) != (s[1], s[2]) {
            return Err(Error::shape(
                "unet",
                format!("voxel grid is {}x{}, image is {}x{}", voxel.height(), voxel.width(), s[1], s[2]),
            ));
        }
        let img = tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?);
        let vox = tape.constant(voxel.data.reshape(&[1, voxel.bins, s[1], s[2]])?);
        Ok((img, vox))
    }
}

/// Mean absolute error between two tensors of identical shape.
pub fn l1_loss(tape: &mut Tape, restored: Var, target: Var) -> Result<Var> {
    if tape.shape(restored) != tape.shape(target) {
        return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", tape.shape(restored), tape.shape(target))));
    }
    let d = tape.sub(restored, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Total number of scalar parameters.
pub fn param_count(params: &ParamStore) -> usize {
    params.param_count()
}
