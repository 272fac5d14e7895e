use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use evmamba_core::etsr::{self, Precision};
use evmamba_core::harness::{
    ablate_k, evaluate, load_dataset, render_ablation, save_dataset, synthetic_dataset, RunConfig, Sample, Trainer, SEED_ENV,
};
use evmamba_core::network::{param_count, Checkpoint, Unet};

#[derive(Parser)]
#[command(name = "evmamba", version, about = "Event-guided image restoration on synthetic motion blur")]
struct Cli {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic blurry/sharp pairs with their events.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the restoration network.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory; pairs are synthesized when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on a dataset and dump the restored images.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per k and tabulate PSNR, step time and parameter count.
    AblateK {
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Simulate { out } => {
            cfg.out_dir = out.or(cfg.out_dir);
            simulate(&cfg)
        }
        Command::Train { out, data, resume, steps } => {
            cfg.out_dir = out.or(cfg.out_dir);
            cfg.data_dir = data.or(cfg.data_dir);
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            train(&cfg, resume.as_deref())
        }
        Command::Eval { ckpt, data, out } => {
            cfg.checkpoint = ckpt.or(cfg.checkpoint);
            cfg.data_dir = data.or(cfg.data_dir);
            cfg.out_dir = out.or(cfg.out_dir);
            eval(&cfg)
        }
        Command::AblateK { k, data, out, steps } => {
            cfg.out_dir = out.or(cfg.out_dir);
            cfg.data_dir = data.or(cfg.data_dir);
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            ablate(&cfg, &k)
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out_dir.as_deref().context("no output directory: pass --out or set out_dir")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes `body` preceded by the effective configuration as comment lines.
fn write_report(path: &Path, cfg: &RunConfig, body: &str) -> Result<()> {
    let mut text = String::from("# effective configuration\n");
    for line in cfg.to_toml()?.lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(body);
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let (bins, channels) = (cfg.model.bins, cfg.model.image_channels);
    Ok(match &cfg.data_dir {
        Some(dir) => load_dataset(dir, bins, channels).with_context(|| format!("loading dataset {}", dir.display()))?,
        None => synthetic_dataset(&cfg.data, cfg.seed, bins, channels)?,
    })
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let data = synthetic_dataset(&cfg.data, cfg.seed, cfg.model.bins, cfg.model.image_channels)?;
    save_dataset(dir, &data)?;
    let mut body = String::from("pair\tevents\tpolarity_sum\n");
    for (i, s) in data.iter().enumerate() {
        body.push_str(&format!("{i}\t{}\t{}\n", s.stream.len(), s.stream.polarity_sum()));
    }
    write_report(&dir.join("simulate_report.txt"), cfg, &body)?;
    println!("wrote {} pairs to {}", data.len(), dir.display());
    Ok(())
}

fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let dir = out_dir(cfg)?.to_path_buf();
    let data = dataset(cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::resume(cfg, ckpt)?
        }
        None => Trainer::new(cfg)?,
    };
    println!("{} parameters, starting at step {}", param_count(&trainer.checkpoint().params), trainer.step_count());
    let report = trainer.run(
        &data,
        cfg.train.steps,
        |e| println!("step {:>6}  l1 {:.6}  psnr {:.3} dB  lr {:.3e}", e.step, e.l1, e.psnr, e.lr),
        |ck| {
            let path = dir.join(format!("step_{:06}.ckpt", ck.step()));
            ck.save(&path)
        },
    )?;
    let path = dir.join("model.ckpt");
    trainer.checkpoint().save(&path)?;
    let mut body = report.render();
    body.push_str("loss curve\n");
    for (i, l) in report.losses.iter().enumerate() {
        body.push_str(&format!("{}\t{l:.6}\n", report.start_step + i));
    }
    write_report(&dir.join("train_report.txt"), cfg, &body)?;
    println!("saved {}", path.display());
    Ok(())
}

/// Evaluates with the model stored in the checkpoint; its configuration
/// replaces the configured one in the report.
fn eval(cfg: &RunConfig) -> Result<()> {
    let path = cfg.checkpoint.as_deref().context("no checkpoint: pass --ckpt or set checkpoint")?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let net = Unet::new(ckpt.config.clone())?;
    ckpt.check_compatible(&net)?;
    let cfg = RunConfig { model: ckpt.config.clone(), ..cfg.clone() };
    let dir = out_dir(&cfg)?;
    let data = dataset(&cfg)?;
    for s in &data {
        let (c, h, w) = (s.sharp.shape()[0], s.sharp.shape()[1], s.sharp.shape()[2]);
        if c != cfg.model.image_channels {
            bail!("dataset images have {c} channels, checkpoint expects {}", cfg.model.image_channels);
        }
        cfg.model.check_resolution(h, w)?;
    }
    let (report, restored) = evaluate(&net, &ckpt.params, &data)?;
    for (i, img) in restored.iter().enumerate() {
        etsr::write(&dir.join(format!("restored_{i:03}.etsr")), img, Precision::F32)?;
    }
    write_report(&dir.join("eval_report.txt"), &cfg, &report.render())?;
    print!("{}", report.render());
    Ok(())
}

fn ablate(cfg: &RunConfig, ks: &[usize]) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = dataset(cfg)?;
    let rows = ablate_k(cfg, &data, ks)?;
    let table = render_ablation(&rows);
    write_report(&dir.join("ablation.txt"), cfg, &table)?;
    print!("{table}");
    Ok(())
}
