//! Spurious background events and hot pixels.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Expected spurious events per pixel over the whole window.
    pub noise_rate: f64,
    /// Fraction of pixels that are hot.
    pub hot_rate: f64,
    /// Firings of each hot pixel, evenly spaced over the window.
    pub hot_fires: usize,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { noise_rate: 0.0, hot_rate: 0.0, hot_fires: 8 }
    }
}

impl NoiseModel {
    pub fn new(noise_rate: f64, hot_rate: f64) -> Self {
        Self { noise_rate, hot_rate, ..Self::default() }
    }

    pub fn noise_count(&self, pixels: usize) -> usize {
        (self.noise_rate * pixels as f64).round() as usize
    }

    pub fn hot_count(&self, pixels: usize) -> usize {
        ((self.hot_rate * pixels as f64).round() as usize).min(pixels)
    }
}

/// Adds `round(noise_rate·H·W)` uniformly placed events of random polarity
/// and `round(hot_rate·H·W)` distinct hot pixels, each firing `hot_fires`
/// times with a fixed polarity. The result is re-sorted by time (stable, so
/// original events keep their relative order). Deterministic in `seed`.
pub fn inject_noise(stream: &EventStream, model: &NoiseModel, seed: u64) -> Result<EventStream> {
    if !(model.noise_rate >= 0.0) || !(model.hot_rate >= 0.0) {
        return Err(Error::invalid("inject_noise", format!("rates must be non-negative, got {model:?}")));
    }
    let pixels = stream.width * stream.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extra = Vec::new();
    let rand_polarity = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };

    for _ in 0..model.noise_count(pixels) {
        let pix = rng.random_range(0..pixels);
        extra.push(Event {
            t: rng.random_range(stream.t_start..=stream.t_end),
            x: (pix % stream.width) as u32,
            y: (pix / stream.width) as u32,
            p: rand_polarity(&mut rng),
        });
    }

    let n_hot = model.hot_count(pixels);
    if n_hot > 0 && model.hot_fires > 0 {
        let span = (stream.t_end - stream.t_start) as f64;
        let mut hot = sample(&mut rng, pixels, n_hot).into_vec();
        hot.sort_unstable();
        for pix in hot {
            let p = rand_polarity(&mut rng);
            for i in 0..model.hot_fires {
                let frac = (i as f64 + 0.5) / model.hot_fires as f64;
                extra.push(Event {
                    t: stream.t_start + (frac * span).round() as u64,
                    x: (pix % stream.width) as u32,
                    y: (pix / stream.width) as u32,
                    p,
                });
            }
        }
    }

    let mut events = stream.events.clone();
    events.extend(extra);
    events.sort_by_key(|e| e.t);
    EventStream::new(stream.width, stream.height, stream.t_start, stream.t_end, events)
}
