/// Patience-based stopper on a metric where larger is better.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_index: usize,
    seen: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            best_index: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> Progress {
        let index = self.seen;
        self.seen += 1;
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.best_index = index;
            return Progress::Improved;
        }
        if index - self.best_index >= self.patience.max(1) {
            Progress::Stop
        } else {
            Progress::Stalled
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 0-based index of the best observation.
    pub fn best_index(&self) -> usize {
        self.best_index
    }
}

/// Stops the search when the mask size is near the target and validation
/// AUC has stopped improving.
///
/// The AUC has stopped improving when the best of the last `evals`
/// evaluations beats the best evaluation before them by less than `tol`.
#[derive(Clone, Debug)]
pub struct SearchStopper {
    window: usize,
    tol: f64,
    evals: usize,
    history: Vec<f64>,
}

impl SearchStopper {
    pub fn new(window: usize, tol: f64, evals: usize) -> Self {
        SearchStopper {
            window,
            tol,
            evals: evals.max(1),
            history: Vec::new(),
        }
    }

    pub fn observe(&mut self, count: usize, target: usize, auc: f64) -> bool {
        self.history.push(auc);
        count.abs_diff(target) <= self.window && self.plateaued()
    }

    fn plateaued(&self) -> bool {
        let n = self.history.len();
        if n <= self.evals {
            return false;
        }
        let (before, recent) = self.history.split_at(n - self.evals);
        let best_before = before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best_recent = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        best_recent - best_before < self.tol
    }
}
