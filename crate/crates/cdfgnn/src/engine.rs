//! Model parameters and the local per-worker compute steps of GCN training.
//!
//! Layer l maps H^(l-1) through the normalized adjacency and a weight matrix:
//! the worker computes its partial aggregate P = A_local * H * W, the runtime
//! synchronizes partials into Z across replicas, and the activation produces
//! H^(l). Hidden layers use ReLU; the final layer is linear and feeds a fused
//! softmax cross entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{self, CsrMatrix, DenseMatrix, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar> {
    /// weights[l] maps layer l inputs to layer l+1 width.
    pub weights: Vec<DenseMatrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.weights.iter().map(|w| (w.rows(), w.cols())).collect()
    }
}

/// Glorot uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
/// sampled in f64 layer by layer from one seeded stream.
pub fn glorot_init<T: Scalar>(dims: &[usize], seed: u64) -> ModelParams<T> {
    assert!(dims.len() >= 2, "need at least input and output dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = DenseMatrix::zeros(fan_in, fan_out);
        for value in w.values_mut() {
            let u: f64 = rand::Rng::gen_range(&mut rng, -a..a);
            *value = T::from_f64(u);
        }
        weights.push(w);
    }
    ModelParams { weights }
}

/// Partial pre-activation of one layer: P = A_local * H, Z_partial = P * W.
/// P is returned for reuse in the weight gradient.
pub fn forward_local<T: Scalar>(
    adj: &CsrMatrix<T>,
    h: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
) -> (DenseMatrix<T>, DenseMatrix<T>) {
    let p = tensor::spmm(adj, h);
    let z = tensor::matmul(&p, w);
    (p, z)
}

/// Activation for layer `layer` of `num_layers`: ReLU on hidden layers,
/// identity on the last.
pub fn activate<T: Scalar>(z: &DenseMatrix<T>, layer: usize, num_layers: usize) -> DenseMatrix<T> {
    if layer < num_layers {
        tensor::relu(z)
    } else {
        z.clone()
    }
}

/// Fused softmax cross entropy over the given rows.
///
/// Returns `scale * sum_r CE(softmax(z_r), label_r)` plus the matching output
/// gradient, which is `scale * (softmax(z_r) - onehot_r)` on the listed rows
/// and zero elsewhere. The caller picks `scale` (the trainer passes
/// 1/N_train over all workers so the objective is the global mean).
pub fn loss_and_output_grad<T: Scalar>(
    z: &DenseMatrix<T>,
    labels: &[u32],
    rows: &[usize],
    scale: T,
) -> (T, DenseMatrix<T>) {
    let probs = tensor::softmax_rows(z);
    let mut grad = DenseMatrix::zeros(z.rows(), z.cols());
    let mut loss = T::zero();
    for &r in rows {
        let label = labels[r] as usize;
        let p = probs.get(r, label);
        // ln of a softmax entry is finite unless the entry underflows to 0.
        loss = loss - p.ln();
        for c in 0..z.cols() {
            let indicator = if c == label { T::one() } else { T::zero() };
            grad.set(r, c, scale * (probs.get(r, c) - indicator));
        }
    }
    (scale * loss, grad)
}

/// Counts argmax(z_r) == label_r over the given rows; ties resolve to the
/// lowest class index.
pub fn accuracy_counts<T: Scalar>(z: &DenseMatrix<T>, labels: &[u32], rows: &[usize]) -> u64 {
    let mut correct = 0;
    for &r in rows {
        let row = z.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == labels[r] as usize {
            correct += 1;
        }
    }
    correct
}

/// Backward partial for layer l-1 given the synchronized delta of layer l:
/// delta_partial = A_local * (delta * W^T), masked by the ReLU derivative at
/// Z^(l-1). The adjacency is symmetric, so no transpose is needed.
pub fn backward_local<T: Scalar>(
    adj: &CsrMatrix<T>,
    delta: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    z_prev: &DenseMatrix<T>,
) -> DenseMatrix<T> {
    let back = tensor::matmul_a_bt(delta, w);
    let agg = tensor::spmm(adj, &back);
    let mask = tensor::relu_grad(z_prev);
    tensor::hadamard(&agg, &mask)
}

/// Local weight gradient for layer l: (A_local * H^(l-1))^T * delta^(l),
/// reusing the cached forward partial P.
pub fn param_grad<T: Scalar>(p: &DenseMatrix<T>, delta: &DenseMatrix<T>) -> DenseMatrix<T> {
    tensor::matmul_at_b(p, delta)
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub enum OptimizerState<T: Scalar> {
    Sgd,
    Adam {
        step: u64,
        m: Vec<DenseMatrix<T>>,
        v: Vec<DenseMatrix<T>>,
    },
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: &ModelParams<T>) -> OptimizerState<T> {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                step: 0,
                m: params.weights.iter().map(|w| DenseMatrix::zeros(w.rows(), w.cols())).collect(),
                v: params.weights.iter().map(|w| DenseMatrix::zeros(w.rows(), w.cols())).collect(),
            },
        }
    }
}

/// Applies one layer's update in place without advancing the step counter,
/// so updates may land layer by layer during the backward pass or all at
/// once at the end of the epoch with bitwise-identical results.
pub fn optimizer_apply_layer<T: Scalar>(
    params: &mut ModelParams<T>,
    layer: usize,
    grad: &DenseMatrix<T>,
    state: &mut OptimizerState<T>,
    lr: T,
) {
    match state {
        OptimizerState::Sgd => {
            let w = &mut params.weights[layer];
            for (wv, gv) in w.values_mut().iter_mut().zip(grad.values()) {
                *wv = *wv - lr * *gv;
            }
        }
        OptimizerState::Adam { step, m, v } => {
            let t = (*step + 1) as i32;
            let b1 = T::from_f64(ADAM_BETA1);
            let b2 = T::from_f64(ADAM_BETA2);
            let eps = T::from_f64(ADAM_EPS);
            let bias1 = T::one() - b1.powi(t);
            let bias2 = T::one() - b2.powi(t);
            let mw = &mut m[layer];
            let vw = &mut v[layer];
            let w = &mut params.weights[layer];
            for i in 0..grad.values().len() {
                let gv = grad.values()[i];
                let mi = b1 * mw.values()[i] + (T::one() - b1) * gv;
                let vi = b2 * vw.values()[i] + (T::one() - b2) * gv * gv;
                mw.values_mut()[i] = mi;
                vw.values_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                w.values_mut()[i] = w.values()[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Advances the shared step counter; call exactly once per epoch after every
/// layer's update has been applied.
pub fn optimizer_advance<T: Scalar>(state: &mut OptimizerState<T>) {
    if let OptimizerState::Adam { step, .. } = state {
        *step += 1;
    }
}

/// Applies one update over all layers in place. Every worker runs this on
/// the same summed gradients, so parameters stay replicated without a
/// broadcast.
pub fn optimizer_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[DenseMatrix<T>],
    state: &mut OptimizerState<T>,
    lr: T,
) {
    assert_eq!(params.weights.len(), grads.len());
    for (layer, grad) in grads.iter().enumerate() {
        optimizer_apply_layer(params, layer, grad, state, lr);
    }
    optimizer_advance(state);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn glorot_bounds_and_determinism() {
        let p: ModelParams<f64> = glorot_init(&[8, 4, 3], 42);
        assert_eq!(p.layer_dims(), vec![(8, 4), (4, 3)]);
        let a0 = (6.0 / 12.0f64).sqrt();
        for &v in p.weights[0].values() {
            assert!(v.abs() < a0);
        }
        let q: ModelParams<f64> = glorot_init(&[8, 4, 3], 42);
        assert_eq!(p, q);
        let r: ModelParams<f64> = glorot_init(&[8, 4, 3], 43);
        assert_ne!(p, r);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        // Zero logits over 4 classes: per-row CE is ln 4.
        let z: DenseMatrix<f64> = DenseMatrix::zeros(3, 4);
        let labels = vec![0u32, 2, 3];
        let rows = vec![0usize, 1, 2];
        let scale = 1.0 / 3.0;
        let (loss, grad) = loss_and_output_grad(&z, &labels, &rows, scale);
        assert_relative_eq!(loss, 4.0f64.ln(), epsilon = 1e-12);
        // Gradient rows: scale * (1/4 - onehot).
        assert_relative_eq!(grad.get(0, 0), scale * (0.25 - 1.0), epsilon = 1e-12);
        assert_relative_eq!(grad.get(0, 1), scale * 0.25, epsilon = 1e-12);
        // Each gradient row sums to zero.
        for r in 0..3 {
            let s: f64 = grad.row(r).iter().sum();
            assert_relative_eq!(s, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn loss_skips_unlisted_rows() {
        let z = DenseMatrix::from_rows(&[&[5.0f64, 0.0], &[0.0, 5.0]]);
        let labels = vec![1u32, 1];
        let (loss_all, _) = loss_and_output_grad(&z, &labels, &[0, 1], 1.0);
        let (loss_one, grad_one) = loss_and_output_grad(&z, &labels, &[1], 1.0);
        assert!(loss_one < loss_all);
        assert_eq!(grad_one.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn accuracy_ties_pick_lowest_class() {
        let z = DenseMatrix::from_rows(&[&[1.0f64, 1.0], &[0.0, 2.0]]);
        let labels = vec![0u32, 1];
        assert_eq!(accuracy_counts(&z, &labels, &[0, 1]), 2);
        let labels2 = vec![1u32, 1];
        assert_eq!(accuracy_counts(&z, &labels2, &[0, 1]), 1);
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut params =
            ModelParams { weights: vec![DenseMatrix::from_rows(&[&[1.0f64, 2.0]])] };
        let grads = vec![DenseMatrix::from_rows(&[&[0.5f64, -1.0]])];
        let mut state = OptimizerState::new(OptimizerKind::Sgd, &params);
        optimizer_step(&mut params, &grads, &mut state, 0.1);
        assert_relative_eq!(params.weights[0].get(0, 0), 0.95, epsilon = 1e-12);
        assert_relative_eq!(params.weights[0].get(0, 1), 2.1, epsilon = 1e-12);
    }

    #[test]
    fn adam_first_step_matches_scalar_formula() {
        // One scalar parameter, gradient g: after step 1, m_hat = g and
        // v_hat = g^2, so the update is lr * g / (|g| + eps).
        let g = 0.3f64;
        let mut params = ModelParams { weights: vec![DenseMatrix::from_rows(&[&[1.0f64]])] };
        let grads = vec![DenseMatrix::from_rows(&[&[g]])];
        let mut state = OptimizerState::new(OptimizerKind::Adam, &params);
        optimizer_step(&mut params, &grads, &mut state, 0.01);
        let expected = 1.0 - 0.01 * g / (g.abs() + ADAM_EPS);
        assert_relative_eq!(params.weights[0].get(0, 0), expected, epsilon = 1e-14);

        // Second step with the same gradient, tracked by hand.
        optimizer_step(&mut params, &grads, &mut state, 0.01);
        let m2 = 0.9 * (0.1 * g) + 0.1 * g;
        let v2 = 0.999 * (0.001 * g * g) + 0.001 * g * g;
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let expected2 = expected - 0.01 * m_hat / (v_hat.sqrt() + ADAM_EPS);
        assert_relative_eq!(params.weights[0].get(0, 0), expected2, epsilon = 1e-14);
    }

    #[test]
    fn layerwise_and_batched_adam_updates_match_bitwise() {
        let dims = [5usize, 4, 3];
        let grads: Vec<DenseMatrix<f64>> = {
            let g: ModelParams<f64> = glorot_init(&dims, 99);
            g.weights
        };
        let mut batched: ModelParams<f64> = glorot_init(&dims, 7);
        let mut layered = batched.clone();
        let mut st_b = OptimizerState::new(OptimizerKind::Adam, &batched);
        let mut st_l = OptimizerState::new(OptimizerKind::Adam, &layered);
        for _ in 0..5 {
            optimizer_step(&mut batched, &grads, &mut st_b, 0.01);
            // Reverse layer order on the layered side: per-layer updates are
            // independent, so order must not matter.
            for layer in (0..grads.len()).rev() {
                optimizer_apply_layer(&mut layered, layer, &grads[layer], &mut st_l, 0.01);
            }
            optimizer_advance(&mut st_l);
        }
        assert_eq!(batched, layered);
    }

    #[test]
    fn three_vertex_forward_backward_by_hand() {
        // Path 0-1-2 with unit degrees-normalized weights: d = [1, 2, 1],
        // A[0][1] = 1/sqrt(2), A[1][0] = A[1][2] = 1/sqrt(2), A[2][1] = 1/sqrt(2).
        let s = 1.0 / 2.0f64.sqrt();
        let adj = CsrMatrix::from_rows(
            3,
            &[vec![(1, s)], vec![(0, s), (2, s)], vec![(1, s)]],
        );
        let h = DenseMatrix::from_rows(&[&[1.0f64], &[2.0], &[3.0]]);
        let w = DenseMatrix::from_rows(&[&[2.0f64]]);
        let (p, z) = forward_local(&adj, &h, &w);
        assert_relative_eq!(p.get(0, 0), 2.0 * s, epsilon = 1e-12);
        assert_relative_eq!(p.get(1, 0), 4.0 * s, epsilon = 1e-12);
        assert_relative_eq!(p.get(2, 0), 2.0 * s, epsilon = 1e-12);
        assert_relative_eq!(z.get(1, 0), 8.0 * s, epsilon = 1e-12);

        // Weight gradient against delta of ones: sum of P entries.
        let delta = DenseMatrix::from_rows(&[&[1.0f64], &[1.0], &[1.0]]);
        let g = param_grad(&p, &delta);
        assert_relative_eq!(g.get(0, 0), 8.0 * s, epsilon = 1e-12);

        // Backward through the same layer with all-positive z_prev: the ReLU
        // mask is 1, so delta_prev = A * (delta * w^T) = 2 * A * ones.
        let z_prev = DenseMatrix::from_rows(&[&[1.0f64], &[1.0], &[1.0]]);
        let d_prev = backward_local(&adj, &delta, &w, &z_prev);
        assert_relative_eq!(d_prev.get(0, 0), 2.0 * s, epsilon = 1e-12);
        assert_relative_eq!(d_prev.get(1, 0), 4.0 * s, epsilon = 1e-12);
    }
}
