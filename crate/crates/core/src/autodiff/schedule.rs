use serde::{Deserialize, Serialize};

/// Cosine annealing with warm restarts. Cycle `i` lasts `t0 * t_mult^i`
/// epochs and anneals from `lr_max` down towards `lr_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub t0: usize,
    pub t_mult: usize,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { t0: 10, t_mult: 2, lr_max: 1e-4, lr_min: 0.0 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.t0 < 1 || self.t_mult < 1 {
            return Err(format!("t0 ({}) and t_mult ({}) must be >= 1", self.t0, self.t_mult));
        }
        if !(self.lr_min <= self.lr_max) {
            return Err(format!("lr_min {} exceeds lr_max {}", self.lr_min, self.lr_max));
        }
        Ok(())
    }

    /// Position inside the current cycle as `(t_cur, t_i)`.
    pub fn cycle_position(&self, epoch: usize) -> (usize, usize) {
        let (mut t_cur, mut t_i) = (epoch, self.t0.max(1));
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= self.t_mult.max(1);
        }
        (t_cur, t_i)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let (t_cur, t_i) = self.cycle_position(epoch);
        if t_cur == 0 {
            return self.lr_max;
        }
        let phase = std::f64::consts::PI * t_cur as f64 / t_i as f64;
        self.lr_min + (self.lr_max - self.lr_min) * (1.0 + phase.cos()) / 2.0
    }
}
