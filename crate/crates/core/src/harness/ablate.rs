use std::time::Instant;

use super::config::RunConfig;
use super::data::Sample;
use super::eval::evaluate;
use super::train::Trainer;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub param_count: usize,
    pub psnr: f64,
    pub baseline_psnr: f64,
    pub final_l1: f64,
    /// Median wall-clock time of one update.
    pub secs_per_step: f64,
}

/// Trains and evaluates one model per `k` (all levels), with the same seed,
/// data and schedule. Fails if any row's parameter count differs.
pub fn ablate_k(cfg: &RunConfig, data: &[Sample], ks: &[usize]) -> Result<Vec<AblationRow>> {
    if ks.is_empty() {
        return Err(Error::invalid("ablate_k", "empty k list"));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut run = cfg.clone();
        run.model = run.model.with_k(k);
        let mut trainer = Trainer::new(&run)?;
        let mut times = Vec::with_capacity(run.train.steps);
        for _ in 0..run.train.steps {
            let start = Instant::now();
            trainer.step(data)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let ckpt = trainer.checkpoint();
        let (report, _) = evaluate(trainer.net(), &ckpt.params, data)?;
        rows.push(AblationRow {
            k,
            param_count: ckpt.params.param_count(),
            psnr: report.mean_psnr,
            baseline_psnr: report.mean_baseline_psnr,
            final_l1: report.mean_l1,
            secs_per_step: median(&mut times),
        });
    }
    if let Some(r) = rows.iter().find(|r| r.param_count != rows[0].param_count) {
        return Err(Error::Config(format!(
            "parameter count changed with k: {} at k={} vs {} at k={}",
            r.param_count, r.k, rows[0].param_count, rows[0].k
        )));
    }
    Ok(rows)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("k\tparams\tpsnr_db\tblurry_psnr_db\tl1\tsecs_per_step\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.6}\t{:.4}\n",
            r.k, r.param_count, r.psnr, r.baseline_psnr, r.final_l1, r.secs_per_step
        ));
    }
    s
}
