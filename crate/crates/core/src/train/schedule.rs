/// Divides the learning rate by `factor` after `patience` consecutive
/// epochs without a strict improvement of the best loss, never going
/// below `min_lr`.
///
/// The first epoch only establishes the best loss and counts as a
/// non-improving epoch, so `patience` identical losses trigger a decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: Option<f64>,
    stale: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if loss < b => {
                self.best = Some(loss);
                self.stale = 0;
                return lr;
            }
            Some(_) => self.stale += 1,
            None => {
                self.best = Some(loss);
                self.stale = 1;
            }
        }
        if self.stale >= self.patience {
            self.stale = 0;
            (lr / self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new(10.0, 10, 1e-6)
    }
}

/// Replays `history` through the default schedule starting at `lr`.
pub fn lr_schedule(history: &[f64], lr: f64) -> f64 {
    let mut p = Plateau::default();
    history.iter().fold(lr, |lr, &l| p.observe(l, lr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_flat_epochs_decay_once() {
        assert!((lr_schedule(&[1.0; 10], 0.01) - 0.001).abs() < 1e-15);
        assert_eq!(lr_schedule(&[1.0; 9], 0.01), 0.01);
    }

    #[test]
    fn improving_losses_keep_lr() {
        let h: Vec<f64> = (0..200).map(|e| 100.0 - e as f64).collect();
        assert_eq!(lr_schedule(&h, 0.01), 0.01);
    }

    #[test]
    fn decay_floors_at_minimum() {
        assert_eq!(lr_schedule(&[1.0; 200], 0.01), 1e-6);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut h = vec![1.0; 9];
        h.push(0.5);
        h.extend([0.5; 9]);
        assert_eq!(lr_schedule(&h, 0.01), 0.01);
        h.push(0.5);
        assert!((lr_schedule(&h, 0.01) - 0.001).abs() < 1e-15);
    }
}
