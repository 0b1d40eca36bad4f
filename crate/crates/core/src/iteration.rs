//! Bookkeeping shared by the outer fixed-point loops.

use crate::error::TransportError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Status {
    Continue,
    Converged,
    Diverged,
}

/// Tracks sup-norm gaps between successive iterates. A loop is converged
/// once the gap is below `tol` and, when the observed contraction rate is
/// available, the implied distance to the fixed point `gap·q/(1-q)` is below
/// `tol` as well.
#[derive(Clone, Debug)]
pub(crate) struct GapMonitor {
    tol: f64,
    divergence_streak: Option<usize>,
    streak: usize,
    pub history: Vec<f64>,
}

impl GapMonitor {
    pub fn new(tol: f64, divergence_streak: Option<usize>) -> Self {
        GapMonitor {
            tol,
            divergence_streak,
            streak: 0,
            history: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<f64> {
        self.history.last().copied()
    }

    pub fn push(&mut self, gap: f64) -> Status {
        let prev = self.last();
        self.history.push(gap);
        match prev {
            Some(p) if gap > p => self.streak += 1,
            _ => self.streak = 0,
        }
        if let Some(limit) = self.divergence_streak {
            if self.streak >= limit {
                return Status::Diverged;
            }
        }
        if !gap.is_finite() {
            return Status::Diverged;
        }
        if gap == 0.0 {
            return Status::Converged;
        }
        if gap >= self.tol {
            return Status::Continue;
        }
        match prev {
            None => Status::Converged,
            Some(p) => {
                let q = gap / p;
                if q < 1.0 && gap * q / (1.0 - q) < self.tol {
                    Status::Converged
                } else {
                    Status::Continue
                }
            }
        }
    }

    #[cfg(test)]
    pub fn streak(&self) -> usize {
        self.streak
    }

    pub fn convergence_error(self, what: &'static str) -> TransportError {
        TransportError::Convergence {
            what,
            iterations: self.history.len(),
            last_gap: self.last().unwrap_or(f64::NAN),
            history: self.history,
        }
    }

    pub fn divergence_error(self, what: &'static str) -> TransportError {
        TransportError::Divergence {
            what,
            streak: self.streak,
            last_gap: self.last().unwrap_or(f64::NAN),
            history: self.history,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_sequence_converges_on_estimate() {
        let mut m = GapMonitor::new(1e-3, Some(5));
        // q = 0.9: gap below tol is not enough until gap·9 < tol
        let mut gap = 1.0;
        let mut steps = 0;
        loop {
            steps += 1;
            if m.push(gap) == Status::Converged {
                break;
            }
            gap *= 0.9;
        }
        assert!(gap * 9.0 < 1e-3 * (1.0 + 1e-12));
        assert!(steps > 66);
    }

    #[test]
    fn five_increases_diverge() {
        let mut m = GapMonitor::new(1e-6, Some(5));
        let mut status = Status::Continue;
        for k in 0..6 {
            status = m.push(1.0 + k as f64);
        }
        assert_eq!(status, Status::Diverged);
        assert_eq!(m.streak(), 5);
    }
}
