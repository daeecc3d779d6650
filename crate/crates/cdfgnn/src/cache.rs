//! Historical-embedding cache that suppresses per-vertex sync messages.
//!
//! Every sync slot (one per layer and direction) keeps three tables per
//! worker: the last value each replica contributed (`local_snapshot`), the
//! master-side running estimate of the global row (`aggregate`, which on
//! mirrors holds the copy received from the master), and the last row the
//! master broadcast (`broadcast_snapshot`). A replica re-sends only when its
//! current row drifts past `eps` relative to the snapshot, so unchanged
//! vertices cost nothing after the first epoch.
//!
//! Exact mode is the same protocol with eps pinned to zero and the controller
//! frozen; there is no separate code path. Vertices with a single replica
//! bypass the cache entirely, so their synced rows equal their local rows
//! bitwise.

use crate::tensor::{self, DenseMatrix, Scalar};

/// Drift test: resend when ||cur - snap||_inf > eps * ||snap||_inf.
/// Strict, so eps = 0 resends on any change and zero drift never sends.
pub fn should_send<T: Scalar>(cur: &[T], snap: &[T], eps: f64) -> bool {
    debug_assert_eq!(cur.len(), snap.len());
    let mut drift = T::zero();
    for (&c, &s) in cur.iter().zip(snap) {
        let d = (c - s).abs();
        if d > drift {
            drift = d;
        }
    }
    drift.to_f64() > eps * tensor::linf_norm_slice(snap).to_f64()
}

/// How the master pushes synced aggregates back to mirrors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScatterMode {
    /// Send aggregate - broadcast_snapshot; mirrors accumulate.
    Delta,
    /// Send the full aggregate row; mirrors overwrite.
    Replace,
}

/// Cache state for one sync slot on one worker. Rows are local vertex ids.
#[derive(Clone, Debug)]
pub struct CacheTable<T: Scalar> {
    local_snapshot: DenseMatrix<T>,
    aggregate: DenseMatrix<T>,
    broadcast_snapshot: DenseMatrix<T>,
}

impl<T: Scalar> CacheTable<T> {
    /// All snapshots start at zero, so the first pass sends every nonzero row.
    pub fn new(num_local: usize, width: usize) -> CacheTable<T> {
        CacheTable {
            local_snapshot: DenseMatrix::zeros(num_local, width),
            aggregate: DenseMatrix::zeros(num_local, width),
            broadcast_snapshot: DenseMatrix::zeros(num_local, width),
        }
    }

    pub fn width(&self) -> usize {
        self.local_snapshot.cols()
    }

    /// Mirror-side gather step for one vertex: if the local partial drifted,
    /// snapshot it and return the delta to ship to the master. The snapshot
    /// becomes the current row even when the caller later quantizes the
    /// delta; quantization error is not fed back.
    pub fn mirror_pass(&mut self, v: usize, cur: &[T], eps: f64) -> Option<Vec<T>> {
        let snap = self.local_snapshot.row(v);
        if !should_send(cur, snap, eps) {
            return None;
        }
        let delta: Vec<T> = cur.iter().zip(snap).map(|(&c, &s)| c - s).collect();
        self.local_snapshot.row_mut(v).copy_from_slice(cur);
        Some(delta)
    }

    /// Master-side application of one received gather delta.
    pub fn apply_gather(&mut self, v: usize, delta: &[T]) {
        for (a, &d) in self.aggregate.row_mut(v).iter_mut().zip(delta) {
            *a = *a + d;
        }
    }

    /// Master-side own-contribution step, run after all received deltas for
    /// the slot are applied. No message is sent; the master folds its own
    /// drift straight into the aggregate.
    pub fn master_own_pass(&mut self, v: usize, cur: &[T], eps: f64) {
        let snap = self.local_snapshot.row(v);
        if !should_send(cur, snap, eps) {
            return;
        }
        for i in 0..cur.len() {
            let d = cur[i] - self.local_snapshot.get(v, i);
            let a = self.aggregate.get(v, i);
            self.aggregate.set(v, i, a + d);
        }
        self.local_snapshot.row_mut(v).copy_from_slice(cur);
    }

    /// Master-side scatter step: if the synced aggregate drifted from what
    /// mirrors last received, return the payload for them.
    pub fn scatter_pass(&mut self, v: usize, eps: f64, mode: ScatterMode) -> Option<Vec<T>> {
        let cur: Vec<T> = self.aggregate.row(v).to_vec();
        let snap = self.broadcast_snapshot.row(v);
        if !should_send(&cur, snap, eps) {
            return None;
        }
        let payload = match mode {
            ScatterMode::Delta => cur.iter().zip(snap).map(|(&c, &s)| c - s).collect(),
            ScatterMode::Replace => cur.clone(),
        };
        self.broadcast_snapshot.row_mut(v).copy_from_slice(&cur);
        Some(payload)
    }

    /// Mirror-side application of a scatter payload.
    pub fn apply_scatter(&mut self, v: usize, payload: &[T], mode: ScatterMode) {
        match mode {
            ScatterMode::Delta => {
                for (a, &d) in self.aggregate.row_mut(v).iter_mut().zip(payload) {
                    *a = *a + d;
                }
            }
            ScatterMode::Replace => self.aggregate.row_mut(v).copy_from_slice(payload),
        }
    }

    /// The synced row for a replicated vertex.
    pub fn synced_row(&self, v: usize) -> &[T] {
        self.aggregate.row(v)
    }
}

// ---------------------------------------------------------------------------
// Adaptive threshold controller
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonConfig {
    /// Accuracy-drop margin that triggers loosening.
    pub mu1: f64,
    /// Accuracy-gain margin that triggers tightening.
    pub mu2: f64,
    /// Upper bound on eps.
    pub nu1: f64,
    /// Lower bound on eps.
    pub nu2: f64,
    /// Additive step bound.
    pub xi: f64,
    /// Multiplicative loosening factor.
    pub lambda1: f64,
    /// Multiplicative tightening factor.
    pub lambda2: f64,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        EpsilonConfig {
            mu1: 0.001,
            mu2: 0.02,
            nu1: 0.3,
            nu2: 0.001,
            xi: 0.01,
            lambda1: 1.05,
            lambda2: 0.9,
        }
    }
}

/// Adjusts eps once per epoch from validation accuracy. A drop below the
/// running mean loosens the threshold (the model is near a plateau, staleness
/// is cheap); a clear gain tightens it (fresh values still pay off). The
/// running mean is an exponential average with weight 0.2 on the new point.
#[derive(Clone, Debug)]
pub struct EpsilonController {
    eps: f64,
    cfg: EpsilonConfig,
    mean_acc: f64,
    epochs_seen: u64,
    frozen: bool,
}

impl EpsilonController {
    pub fn new(eps_init: f64, cfg: EpsilonConfig, frozen: bool) -> EpsilonController {
        EpsilonController { eps: eps_init, cfg, mean_acc: 0.0, epochs_seen: 0, frozen }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Feeds one epoch's accuracy. The first epoch only seeds the mean.
    pub fn observe(&mut self, acc: f64) {
        if self.frozen {
            return;
        }
        self.epochs_seen += 1;
        if self.epochs_seen == 1 {
            self.mean_acc = acc;
            return;
        }
        let c = self.cfg;
        if acc < self.mean_acc - c.mu1 && self.eps < c.nu1 {
            self.eps = (c.lambda1 * self.eps).min(self.eps + c.xi);
        } else if acc > self.mean_acc + c.mu2 && self.eps > c.nu2 {
            self.eps = (c.lambda2 * self.eps).max(self.eps - c.xi);
        }
        // The step rule alone can overshoot the bounds near them, so the
        // result is clamped into [nu2, nu1].
        self.eps = self.eps.clamp(c.nu2, c.nu1);
        self.mean_acc = 0.8 * self.mean_acc + 0.2 * acc;
    }
}
