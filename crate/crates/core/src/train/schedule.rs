/// Minimum decrease of the moving average that counts as an improvement.
pub const IMPROVEMENT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr_init: f64,
    /// Divisor applied at each reduction.
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub ema_alpha: f64,
    pub max_epochs: usize,
}

/// Plateau learning-rate schedule and early stopping driven by an
/// exponential moving average of the validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub cfg: ScheduleConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub ema: Option<f64>,
    pub best_ema: f64,
    /// Epoch (1-based) at which `best_ema` was reached.
    pub best_epoch: usize,
    pub since_best: usize,
    /// Epochs without improvement since the last improvement or reduction.
    pub since_reduction: usize,
    pub reductions: i32,
}

/// What happened at the end of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpochOutcome {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

impl Schedule {
    pub fn new(cfg: ScheduleConfig) -> Self {
        Schedule {
            cfg,
            epoch: 0,
            ema: None,
            best_ema: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            since_reduction: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_init / self.cfg.lr_factor.powi(self.reductions)
    }

    /// Feeds one epoch's validation loss.
    pub fn update(&mut self, val_loss: f64) -> EpochOutcome {
        self.epoch += 1;
        let a = self.cfg.ema_alpha;
        let ema = match self.ema {
            None => val_loss,
            Some(e) => a * e + (1.0 - a) * val_loss,
        };
        self.ema = Some(ema);
        let mut out = EpochOutcome::default();
        if ema < self.best_ema - IMPROVEMENT_TOL {
            self.best_ema = ema;
            self.best_epoch = self.epoch;
            self.since_best = 0;
            self.since_reduction = 0;
            out.improved = true;
        } else {
            self.since_best += 1;
            self.since_reduction += 1;
            if self.since_reduction == self.cfg.lr_patience {
                self.reductions += 1;
                self.since_reduction = 0;
                out.lr_reduced = true;
            }
        }
        out.stop = self.since_best >= self.cfg.stop_patience || self.epoch >= self.cfg.max_epochs;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig {
            lr_init: 1e-4,
            lr_factor: 5.0,
            lr_patience: 30,
            stop_patience: 60,
            ema_alpha: 0.95,
            max_epochs: 500,
        }
    }

    #[test]
    fn one_ema_step() {
        let mut s = Schedule::new(cfg());
        s.update(1.0);
        s.update(0.0);
        assert!((s.ema.unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn decreasing_losses_never_reduce() {
        let mut s = Schedule::new(cfg());
        for e in 0..500 {
            let o = s.update(1.0 / (e + 1) as f64);
            assert!(!o.lr_reduced);
            assert_eq!(o.stop, e == 499);
        }
        assert_eq!(s.lr(), 1e-4);
    }

    #[test]
    fn constant_losses() {
        let mut s = Schedule::new(cfg());
        let mut reductions = Vec::new();
        let mut stop = None;
        for e in 1..=100 {
            let o = s.update(0.5);
            if o.lr_reduced {
                reductions.push(e);
            }
            if o.stop {
                stop = Some(e);
                break;
            }
        }
        assert_eq!(reductions, vec![31, 61]);
        assert_eq!(stop, Some(61));
        assert_eq!(s.lr(), 1e-4 / 25.0);
    }
}
