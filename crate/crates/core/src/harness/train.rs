//! Deterministic training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{derive_seed, RunConfig};
use super::data::Sample;
use super::metrics::psnr;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::events::{augment, flip_h, flip_v, AugmentFlags, VoxelGrid};
use crate::network::{l1_loss, Checkpoint, Unet};
use crate::optim::Adam;
use crate::tensor::Tensor;

const TAG_INIT: u64 = 0x696e;
const TAG_STEP: u64 = 0x7374;

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    /// Mean L1 loss of the batch.
    pub l1: f64,
    /// Mean PSNR of the batch outputs against their targets.
    pub psnr: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean batch loss of every step run, in order.
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub start_step: usize,
    pub end_step: usize,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn render(&self) -> String {
        let mut s = format!("steps {}..{} in {:.2}s\n", self.start_step, self.end_step, self.wall_clock_secs);
        s.push_str("step\tl1\tpsnr_db\tlr\n");
        for e in &self.log {
            s.push_str(&format!("{}\t{:.6}\t{:.3}\t{:.3e}\n", e.step, e.l1, e.psnr, e.lr));
        }
        s
    }
}

/// Square window `[.., y0..y0+n, x0..x0+n]` of a `[C,H,W]` tensor.
fn crop(t: &Tensor, y0: usize, x0: usize, n: usize) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::shape("crop", format!("expected [C,H,W], got {:?}", t.shape())));
    };
    if y0 + n > h || x0 + n > w {
        return Err(Error::shape("crop", format!("{n}x{n} at ({y0},{x0}) exceeds {h}x{w}")));
    }
    let mut out = Vec::with_capacity(c * n * n);
    for ch in 0..c {
        for y in y0..y0 + n {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&t.data()[row + x0..row + x0 + n]);
        }
    }
    Tensor::new(&[c, n, n], out)
}

/// Owns the model, its parameters and optimizer state.
pub struct Trainer {
    cfg: RunConfig,
    net: Unet,
    state: Checkpoint,
}

impl Trainer {
    /// Fresh parameters drawn from the run seed.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Unet::new(cfg.model.clone())?;
        let params = net.init(derive_seed(cfg.seed, TAG_INIT, 0))?;
        let state = Checkpoint {
            config: cfg.model.clone(),
            params,
            optimizer: Adam::new(cfg.adam(), cfg.schedule()),
            seed: cfg.seed,
            run_config: Some(cfg.to_toml()?),
        };
        Ok(Self { cfg: cfg.clone(), net, state })
    }

    /// Continues from `ckpt`, which must come from a run with the same model
    /// and seed. Moments and step count are kept; the optimizer settings and
    /// learning-rate schedule come from `cfg`.
    pub fn resume(cfg: &RunConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.config != cfg.model {
            return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
        }
        if ckpt.seed != cfg.seed {
            return Err(Error::Config(format!("checkpoint seed {} differs from run seed {}", ckpt.seed, cfg.seed)));
        }
        let net = Unet::new(cfg.model.clone())?;
        ckpt.check_compatible(&net)?;
        let mut state = ckpt;
        state.optimizer.config = cfg.adam();
        state.optimizer.schedule = cfg.schedule();
        state.run_config = Some(cfg.to_toml()?);
        Ok(Self { cfg: cfg.clone(), net, state })
    }

    pub fn net(&self) -> &Unet {
        &self.net
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn step_count(&self) -> usize {
        self.state.optimizer.step
    }

    /// Batch members, flips and crop offsets of update `step`.
    fn plan(&self, step: usize, n: usize, size: usize) -> Vec<(usize, AugmentFlags, usize, usize)> {
        let t = &self.cfg.train;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, TAG_STEP, step as u64));
        let members: Vec<usize> =
            if t.batch_size >= n { (0..n).collect() } else { sample_indices(&mut rng, n, t.batch_size).into_vec() };
        members
            .into_iter()
            .map(|i| {
                let flags = AugmentFlags { hflip: t.hflip && rng.random_bool(0.5), vflip: t.vflip && rng.random_bool(0.5) };
                let span = size - t.crop.min(size);
                let (y0, x0) = (rng.random_range(0..=span), rng.random_range(0..=span));
                (i, flags, y0, x0)
            })
            .collect()
    }

    /// One optimizer update; returns the batch `(mean L1, mean PSNR)`.
    pub fn step(&mut self, data: &[Sample]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::invalid("train", "no training samples"));
        }
        let size = data[0].sharp.shape()[1];
        let crop_n = self.cfg.train.crop.min(size);
        let step = self.state.optimizer.step;
        let plan = self.plan(step, data.len(), size);
        let mut grads: Option<BTreeMap<String, Tensor>> = None;
        let (mut loss_sum, mut psnr_sum) = (0.0, 0.0);
        for &(i, flags, y0, x0) in &plan {
            let s = &data[i];
            let blurry = crop(&s.blurry, y0, x0, crop_n)?;
            let voxel = VoxelGrid::from_tensor(crop(&s.voxel.data, y0, x0, crop_n)?)?;
            let mut sharp = crop(&s.sharp, y0, x0, crop_n)?;
            let (blurry, voxel) = augment(&blurry, &voxel, flags)?;
            if flags.hflip {
                sharp = flip_h(&sharp)?;
            }
            if flags.vflip {
                sharp = flip_v(&sharp)?;
            }
            let mut tape = Tape::new();
            let p = self.state.params.bind(&mut tape);
            let (iv, vv) = self.net.inputs(&mut tape, &blurry, &voxel)?;
            let out = self.net.forward(&mut tape, &p, iv, vv)?;
            let target = tape.constant(sharp.reshape(tape.shape(out))?);
            let loss = l1_loss(&mut tape, out, target)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("loss {lv} at step {step}, sample {i}")));
            }
            tape.backward(loss)?;
            loss_sum += lv;
            psnr_sum += psnr(tape.value(out), tape.value(target), 1.0)?;
            let g = p.grads(&tape);
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (name, t) in g {
                        acc.get_mut(&name).expect("same parameter set").add_assign(&t)?;
                    }
                }
            }
        }
        let b = plan.len() as f64;
        let mut grads = grads.expect("non-empty batch");
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v /= b);
        }
        self.state.optimizer.step(self.state.params.tensors_mut(), &grads)?;
        Ok((loss_sum / b, psnr_sum / b))
    }

    /// Runs updates until `until` steps have been applied in total.
    /// `on_checkpoint` sees the state every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        data: &[Sample],
        until: usize,
        mut on_log: impl FnMut(&LogEntry),
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<TrainReport> {
        let start = Instant::now();
        let mut report = TrainReport { start_step: self.step_count(), ..TrainReport::default() };
        let (log_every, ckpt_every) = (self.cfg.train.log_every, self.cfg.train.checkpoint_every);
        while self.step_count() < until {
            let step = self.step_count();
            let lr = self.state.optimizer.current_rate();
            let (l1, ps) = self.step(data)?;
            report.losses.push(l1);
            if log_every > 0 && (step.is_multiple_of(log_every) || step + 1 == until) {
                let e = LogEntry { step, l1, psnr: ps, lr };
                on_log(&e);
                report.log.push(e);
            }
            if ckpt_every > 0 && self.step_count().is_multiple_of(ckpt_every) && self.step_count() < until {
                on_checkpoint(&self.state)?;
            }
        }
        report.end_step = self.step_count();
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Trains a fresh model for `cfg.train.steps` updates.
pub fn train(cfg: &RunConfig, data: &[Sample]) -> Result<(Checkpoint, TrainReport)> {
    let mut trainer = Trainer::new(cfg)?;
    let report = trainer.run(data, cfg.train.steps, |_| {}, |_| Ok(()))?;
    Ok((trainer.into_checkpoint(), report))
}
