//! Contrast-threshold event generation from an intensity sequence.

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intensities are clamped to this before taking the log.
pub const INTENSITY_FLOOR: f64 = 1e-3;

// Absorbs rounding in log(exp(c)) so that a change of exactly n·c yields n events.
const CROSSING_TOLERANCE: f64 = 1e-9;

/// Emits an event each time a pixel's log intensity moves by `threshold`
/// from its last reference level.
///
/// Log intensity is interpolated linearly between frames and event times are
/// placed at the interpolated crossing. The reference level persists across
/// frame pairs, so sub-threshold residuals carry over.
pub fn simulate_events(frames: &[Tensor], timestamps: &[u64], threshold: f64) -> Result<EventStream> {
    if frames.is_empty() {
        return Err(Error::invalid("simulate_events", "empty frame list"));
    }
    if frames.len() < 2 || frames.len() != timestamps.len() {
        return Err(Error::invalid(
            "simulate_events",
            format!(
                "need at least 2 frames with one timestamp each, got {} frames and {} timestamps",
                frames.len(),
                timestamps.len()
            ),
        ));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::invalid("simulate_events", format!("threshold must be positive, got {threshold}")));
    }
    if let Some(w) = timestamps.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::invalid("simulate_events", format!("timestamps must increase strictly ({} then {})", w[0], w[1])));
    }
    let [h, w] = frames[0].shape()[..] else {
        return Err(Error::shape("simulate_events", format!("frames must be [H,W], got {:?}", frames[0].shape())));
    };
    if let Some(f) = frames.iter().find(|f| f.shape() != [h, w]) {
        return Err(Error::shape("simulate_events", format!("frame {:?} differs from [{h}, {w}]", f.shape())));
    }
    let log_frame = |f: &Tensor| -> Vec<f64> { f.data().iter().map(|&v| v.max(INTENSITY_FLOOR).ln()).collect() };

    let mut reference = log_frame(&frames[0]);
    let mut prev = reference.clone();
    let mut events = Vec::new();
    for k in 1..frames.len() {
        let cur = log_frame(&frames[k]);
        let (t0, t1) = (timestamps[k - 1], timestamps[k]);
        let span = (t1 - t0) as f64;
        let mut pair_events = Vec::new();
        for pix in 0..h * w {
            let (l0, l1) = (prev[pix], cur[pix]);
            let r = &mut reference[pix];
            loop {
                let diff = l1 - *r;
                if diff.abs() < threshold - CROSSING_TOLERANCE {
                    break;
                }
                let level = *r + threshold.copysign(diff);
                let frac = if l1 != l0 { ((level - l0) / (l1 - l0)).clamp(0.0, 1.0) } else { 1.0 };
                let t = t0 + (frac * span).round() as u64;
                pair_events.push(Event { t: t.min(t1), x: (pix % w) as u32, y: (pix / w) as u32, p: Polarity::from_sign(diff) });
                *r = level;
            }
        }
        pair_events.sort_by_key(|e| e.t);
        events.extend(pair_events);
        prev = cur;
    }
    EventStream::new(w, h, timestamps[0], *timestamps.last().unwrap(), events)
}
