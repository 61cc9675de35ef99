use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total: u64,
    pub base: f64,
    pub floor: f64,
    pub decay_start: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total: 288_000,
            base: 3e-4,
            floor: 1e-6,
            decay_start: 192_000,
        }
    }
}

impl Schedule {
    /// Constant `base`, then cosine decay to `floor` at `total`; clamped
    /// to `floor` afterwards.
    pub fn lr(&self, t: u64) -> f64 {
        if t >= self.total {
            return self.floor;
        }
        if t < self.decay_start {
            return self.base;
        }
        let span = (self.total - self.decay_start) as f64;
        let phase = (t - self.decay_start) as f64 / span;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

pub fn lr_schedule(t: u64) -> f64 {
    Schedule::default().lr(t)
}
