//! Event streams: simulation from frames, noise, voxelization, joint
//! augmentation with images, and the CSV event format.

mod augment;
mod io;
mod noise;
mod simulate;
mod voxel;

pub use augment::{augment, flip_h, flip_v, AugmentFlags};
pub use io::{parse_events, read_events, render_events, write_events, CSV_HEADER};
pub use noise::{inject_noise, NoiseModel};
pub use simulate::{simulate_events, INTENSITY_FLOOR};
pub use voxel::{voxelize, VoxelGrid};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn from_sign(s: f64) -> Self {
        if s >= 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

/// A single brightness change: timestamp in microseconds, pixel, polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

/// Time-ordered events of one sensor of `width × height` pixels over
/// `[t_start, t_end]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    pub t_start: u64,
    pub t_end: u64,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: usize, height: usize, t_start: u64, t_end: u64, events: Vec<Event>) -> Result<Self> {
        let s = Self { width, height, t_start, t_end, events };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(width: usize, height: usize, t_start: u64, t_end: u64) -> Self {
        Self { width, height, t_start, t_end, events: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_start > self.t_end {
            return Err(Error::invalid("event_stream", format!("t_start {} > t_end {}", self.t_start, self.t_end)));
        }
        let mut prev = self.t_start;
        for (i, e) in self.events.iter().enumerate() {
            if e.x as usize >= self.width || e.y as usize >= self.height {
                return Err(Error::invalid(
                    "event_stream",
                    format!("event {i} at ({}, {}) outside {}x{}", e.x, e.y, self.width, self.height),
                ));
            }
            if e.t < prev || e.t > self.t_end {
                return Err(Error::invalid("event_stream", format!("event {i} at t={} breaks time order or range", e.t)));
            }
            prev = e.t;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn polarity_sum(&self) -> f64 {
        self.events.iter().map(|e| e.p.sign()).sum()
    }

    /// Per-pixel sum of polarities, row-major `height × width`.
    pub fn polarity_map(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.width * self.height];
        for e in &self.events {
            m[e.y as usize * self.width + e.x as usize] += e.p.sign();
        }
        m
    }

    /// Per-pixel event count, row-major `height × width`.
    pub fn count_map(&self) -> Vec<usize> {
        let mut m = vec![0; self.width * self.height];
        for e in &self.events {
            m[e.y as usize * self.width + e.x as usize] += 1;
        }
        m
    }
}
