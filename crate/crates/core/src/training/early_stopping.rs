/// Minimum decrease in dev loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// New best loss; this epoch's weights should be kept.
    Improved,
    Stagnant,
    /// `patience` consecutive epochs without improvement.
    Stop,
}

/// Tracks the best dev loss and counts epochs without improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    /// Records the dev loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, best)) => loss < best - MIN_IMPROVEMENT,
        };
        if improved {
            self.best = Some((epoch, loss));
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Stagnant
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

/// Runs the rule over a fixed loss sequence, returning the epoch at which
/// training halts (or the last epoch) and the best epoch.
pub fn trace(patience: usize, losses: &[f64]) -> (usize, Option<usize>) {
    let mut es = EarlyStopping::new(patience);
    for (i, &l) in losses.iter().enumerate() {
        if es.observe(i + 1, l) == StopDecision::Stop {
            return (i + 1, es.best_epoch());
        }
    }
    (losses.len(), es.best_epoch())
}
