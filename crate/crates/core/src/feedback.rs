//! Running time average of the homodyne record and the cubic control law.

use serde::{Deserialize, Serialize};

/// Uniform time average Y_t = S_t / t of the integrated record S_t = ∫ dy.
///
/// Kept as an explicit cumulative ratio; the equivalent differential form
/// has 1/t coefficients that are singular at t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordAverager {
    pub accumulated_record: f64,
    pub elapsed: f64,
    /// Y_t reads as zero until `elapsed` reaches this value.
    pub warmup: f64,
}

impl RecordAverager {
    pub fn new(warmup: f64) -> Self {
        RecordAverager {
            accumulated_record: 0.0,
            elapsed: 0.0,
            warmup,
        }
    }

    pub fn update(&mut self, dy: f64, dt: f64) {
        debug_assert!(dt > 0.0);
        self.accumulated_record += dy;
        self.elapsed += dt;
    }

    /// Reported average; zero during warmup.
    pub fn value(&self) -> f64 {
        if self.elapsed > 0.0 && self.elapsed >= self.warmup {
            self.accumulated_record / self.elapsed
        } else {
            0.0
        }
    }

    /// Forget the accumulated record but keep the warmup length.
    pub fn reset(&mut self) {
        self.accumulated_record = 0.0;
        self.elapsed = 0.0;
    }
}

pub fn update_average(avg: RecordAverager, dy: f64, dt: f64) -> RecordAverager {
    let mut next = avg;
    next.update(dy, dt);
    next
}

/// u = −k1·Y + k3·Y³ − k0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLaw {
    pub k0: f64,
    pub k1: f64,
    pub k3: f64,
}

impl ControlLaw {
    pub fn new(k0: f64, k1: f64, k3: f64) -> Self {
        ControlLaw { k0, k1, k3 }
    }

    pub fn eval(&self, y: f64) -> f64 {
        control_law(y, self.k0, self.k1, self.k3)
    }
}

pub fn control_law(y: f64, k0: f64, k1: f64, k3: f64) -> f64 {
    -k1 * y + k3 * y * y * y - k0
}
