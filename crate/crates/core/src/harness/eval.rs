use std::time::Instant;

use super::data::Sample;
use super::metrics::{psnr, ssim};
use crate::error::Result;
use crate::network::Unet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    /// The blurry input scored against the ground truth.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_l1: f64,
    pub mean_baseline_psnr: f64,
    pub mean_baseline_ssim: f64,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, wall_clock_secs: f64) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Self {
            mean_psnr: mean(|s| s.psnr),
            mean_ssim: mean(|s| s.ssim),
            mean_l1: mean(|s| s.l1),
            mean_baseline_psnr: mean(|s| s.baseline_psnr),
            mean_baseline_ssim: mean(|s| s.baseline_ssim),
            samples,
            wall_clock_secs,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::from("sample\tpsnr_db\tssim\tl1\tblurry_psnr_db\tblurry_ssim\n");
        for m in &self.samples {
            s.push_str(&format!(
                "{}\t{:.4}\t{:.5}\t{:.6}\t{:.4}\t{:.5}\n",
                m.index, m.psnr, m.ssim, m.l1, m.baseline_psnr, m.baseline_ssim
            ));
        }
        s.push_str(&format!(
            "mean\t{:.4}\t{:.5}\t{:.6}\t{:.4}\t{:.5}\n",
            self.mean_psnr, self.mean_ssim, self.mean_l1, self.mean_baseline_psnr, self.mean_baseline_ssim
        ));
        s.push_str(&format!("wall_clock_secs\t{:.3}\n", self.wall_clock_secs));
        s
    }
}

fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_map(b, |x, y| (x - y).abs())?.mean())
}

/// Scores `restored` against each sample's sharp image, next to the blurry
/// baseline.
pub fn score(data: &[Sample], restored: &[Tensor]) -> Result<Vec<SampleMetrics>> {
    data.iter()
        .zip(restored)
        .enumerate()
        .map(|(index, (s, r))| {
            Ok(SampleMetrics {
                index,
                psnr: psnr(r, &s.sharp, 1.0)?,
                ssim: ssim(r, &s.sharp, 1.0)?,
                l1: l1(r, &s.sharp)?,
                baseline_psnr: psnr(&s.blurry, &s.sharp, 1.0)?,
                baseline_ssim: ssim(&s.blurry, &s.sharp, 1.0)?,
            })
        })
        .collect()
}

/// Restores every sample at full resolution and scores it.
pub fn evaluate(net: &Unet, params: &ParamStore, data: &[Sample]) -> Result<(MetricsReport, Vec<Tensor>)> {
    let start = Instant::now();
    let restored = data.iter().map(|s| net.restore(params, &s.blurry, &s.voxel)).collect::<Result<Vec<_>>>()?;
    let samples = score(data, &restored)?;
    Ok((MetricsReport::from_samples(samples, start.elapsed().as_secs_f64()), restored))
}
