//! Linear one-cycle learning-rate schedule: ramp to the peak over the warmup
//! steps, then decay linearly to zero at the last step.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
}

pub fn make_schedule(total_steps: usize, warmup_steps: usize, peak_lr: f64) -> OneCycle {
    assert!(warmup_steps < total_steps, "warmup must be shorter than the run");
    OneCycle { total_steps, warmup_steps, peak_lr }
}

impl OneCycle {
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        self.peak_lr * (self.total_steps - step) as f64
            / (self.total_steps - self.warmup_steps) as f64
    }
}
