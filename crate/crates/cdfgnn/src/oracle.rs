//! Single-device reference trainer.
//!
//! Runs the full graph through the same kernels the distributed runtime uses,
//! with no partitioning, caching, or quantization anywhere. Distributed runs
//! are checked against this module, and this module is checked against finite
//! differences, hand examples, and structural properties.

use crate::engine::{
    self, accuracy_counts, loss_and_output_grad, ModelParams, OptimizerKind, OptimizerState,
};
use crate::graph::{FeatureMatrix, Graph, LabelSet, Mask};
use crate::tensor::{CsrMatrix, DenseMatrix, Scalar};

/// Everything one forward/backward pass produces.
pub struct ForwardBackward<T: Scalar> {
    /// Pre-activations Z^(1)..Z^(L).
    pub zs: Vec<DenseMatrix<T>>,
    /// Activations H^(0)..H^(L); the last equals the final Z.
    pub hs: Vec<DenseMatrix<T>>,
    pub loss: T,
    /// Weight gradients, one per layer.
    pub grads: Vec<DenseMatrix<T>>,
}

/// Mean cross entropy over the training rows and gradients for every layer.
/// `scale` multiplies both the loss and the output gradient; the trainer
/// passes 1/|train| to express the mean objective.
pub fn forward_backward<T: Scalar>(
    adj: &CsrMatrix<T>,
    features: &FeatureMatrix<T>,
    labels: &[u32],
    train_rows: &[usize],
    params: &ModelParams<T>,
    scale: T,
) -> ForwardBackward<T> {
    let num_layers = params.num_layers();
    let mut hs = vec![features.clone()];
    let mut zs = Vec::with_capacity(num_layers);
    let mut ps = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let (p, z) = engine::forward_local(adj, &hs[l - 1], &params.weights[l - 1]);
        hs.push(engine::activate(&z, l, num_layers));
        zs.push(z);
        ps.push(p);
    }

    let (loss, mut delta) = loss_and_output_grad(&zs[num_layers - 1], labels, train_rows, scale);
    let mut grads = vec![DenseMatrix::zeros(0, 0); num_layers];
    for l in (1..=num_layers).rev() {
        grads[l - 1] = engine::param_grad(&ps[l - 1], &delta);
        if l >= 2 {
            delta = engine::backward_local(adj, &delta, &params.weights[l - 1], &zs[l - 2]);
        }
    }
    ForwardBackward { zs, hs, loss, grads }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub struct OracleRun<T: Scalar> {
    pub records: Vec<TrainRecord>,
    /// Per-epoch weight gradients, recorded when requested.
    pub grad_trace: Vec<Vec<DenseMatrix<T>>>,
    pub params: ModelParams<T>,
}

pub fn mask_rows(labels: &LabelSet, mask: Mask) -> Vec<usize> {
    labels
        .masks
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == mask)
        .map(|(r, _)| r)
        .collect()
}

fn ratio(correct: u64, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Full-batch training loop. Metrics for epoch e are computed from the
/// parameters as of the start of the epoch; the update lands afterwards.
#[allow(clippy::too_many_arguments)]
pub fn oracle_train<T: Scalar>(
    graph: &Graph,
    features: &FeatureMatrix<T>,
    labels: &LabelSet,
    dims: &[usize],
    seed: u64,
    optimizer: OptimizerKind,
    lr: f64,
    epochs: u64,
    record_grads: bool,
) -> OracleRun<T> {
    let adj: CsrMatrix<T> = graph.normalize();
    let train_rows = mask_rows(labels, Mask::Train);
    let val_rows = mask_rows(labels, Mask::Val);
    let scale = T::from_f64(1.0 / train_rows.len().max(1) as f64);
    let mut params: ModelParams<T> = engine::glorot_init(dims, seed);
    let mut opt = OptimizerState::new(optimizer, &params);
    let mut records = Vec::with_capacity(epochs as usize);
    let mut grad_trace = Vec::new();

    for _ in 0..epochs {
        let fb = forward_backward(&adj, features, &labels.labels, &train_rows, &params, scale);
        let z_out = &fb.zs[params.num_layers() - 1];
        let train_correct = accuracy_counts(z_out, &labels.labels, &train_rows);
        let val_correct = accuracy_counts(z_out, &labels.labels, &val_rows);
        records.push(TrainRecord {
            loss: fb.loss.to_f64(),
            train_acc: ratio(train_correct, train_rows.len()),
            val_acc: ratio(val_correct, val_rows.len()),
        });
        if record_grads {
            grad_trace.push(fb.grads.clone());
        }
        engine::optimizer_step(&mut params, &fb.grads, &mut opt, T::from_f64(lr));
    }
    OracleRun { records, grad_trace, params }
}

/// Central-difference gradient of the training loss with respect to one
/// layer's weights. Slow and only for small fixtures.
pub fn finite_difference_grad(
    adj: &CsrMatrix<f64>,
    features: &FeatureMatrix<f64>,
    labels: &[u32],
    train_rows: &[usize],
    params: &ModelParams<f64>,
    scale: f64,
    layer: usize,
    step: f64,
) -> DenseMatrix<f64> {
    let loss_at = |params: &ModelParams<f64>| -> f64 {
        forward_backward(adj, features, labels, train_rows, params, scale).loss
    };
    let w = &params.weights[layer];
    let mut out = DenseMatrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let mut plus = params.clone();
            let v = plus.weights[layer].get(r, c);
            plus.weights[layer].set(r, c, v + step);
            let mut minus = params.clone();
            minus.weights[layer].set(r, c, v - step);
            out.set(r, c, (loss_at(&plus) - loss_at(&minus)) / (2.0 * step));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_planted_features, gen_power_law};
    use crate::tensor;
    use approx::assert_relative_eq;

    fn small_fixture() -> (Graph, FeatureMatrix<f64>, LabelSet) {
        let graph = gen_power_law(24, 2, 3);
        let (features, labels) = gen_planted_features(&graph, 3, 6, 0.4, 9);
        (graph, features, labels)
    }

    #[test]
    fn finite_differences_agree_on_small_fixture() {
        let (graph, features, labels) = small_fixture();
        let adj: CsrMatrix<f64> = graph.normalize();
        let train_rows = mask_rows(&labels, Mask::Train);
        let scale = 1.0 / train_rows.len() as f64;
        let params: ModelParams<f64> = engine::glorot_init(&[6, 5, 3], 17);
        let fb = forward_backward(&adj, &features, &labels.labels, &train_rows, &params, scale);
        for layer in 0..2 {
            let fd = finite_difference_grad(
                &adj,
                &features,
                &labels.labels,
                &train_rows,
                &params,
                scale,
                layer,
                1e-6,
            );
            let diff = tensor::sub(&fb.grads[layer], &fd);
            let rel = tensor::linf_norm(&diff)
                / tensor::linf_norm(&fb.grads[layer]).max(1e-12);
            assert!(rel < 1e-6, "layer {layer}: rel err {rel}");
        }
    }

    #[test]
    fn permuting_vertices_permutes_outputs() {
        let (graph, features, labels) = small_fixture();
        let n = graph.num_vertices();
        // Deterministic nontrivial permutation.
        let perm: Vec<usize> = (0..n).map(|v| (v * 7 + 3) % n).collect();
        let mut inv = vec![0usize; n];
        for (v, &pv) in perm.iter().enumerate() {
            inv[pv] = v;
        }
        let edges_p: Vec<(u32, u32)> = graph
            .edges()
            .iter()
            .map(|&(u, v)| (perm[u as usize] as u32, perm[v as usize] as u32))
            .collect();
        let graph_p = Graph::from_edges(n, &edges_p).unwrap();
        let mut feat_p = DenseMatrix::zeros(n, features.cols());
        let mut labels_p = vec![0u32; n];
        for v in 0..n {
            feat_p.row_mut(perm[v]).copy_from_slice(features.row(v));
            labels_p[perm[v]] = labels.labels[v];
        }
        let train_rows = mask_rows(&labels, Mask::Train);
        let train_rows_p: Vec<usize> = {
            let mut rows: Vec<usize> = train_rows.iter().map(|&r| perm[r]).collect();
            rows.sort_unstable();
            rows
        };

        let params: ModelParams<f64> = engine::glorot_init(&[6, 5, 3], 5);
        let scale = 1.0 / train_rows.len() as f64;
        let adj: CsrMatrix<f64> = graph.normalize();
        let adj_p: CsrMatrix<f64> = graph_p.normalize();
        let a = forward_backward(&adj, &features, &labels.labels, &train_rows, &params, scale);
        let b = forward_backward(&adj_p, &feat_p, &labels_p, &train_rows_p, &params, scale);

        assert_relative_eq!(a.loss, b.loss, max_relative = 1e-12);
        for layer in 0..2 {
            let diff = tensor::sub(&a.grads[layer], &b.grads[layer]);
            let scale_ref = tensor::linf_norm(&a.grads[layer]).max(1e-12);
            assert!(tensor::linf_norm(&diff) / scale_ref < 1e-11);
        }
        // Output rows are carried along by the permutation.
        let za = &a.zs[1];
        let zb = &b.zs[1];
        for v in 0..n {
            for c in 0..za.cols() {
                assert_relative_eq!(
                    za.get(v, c),
                    zb.get(perm[v], c),
                    max_relative = 1e-11,
                    epsilon = 1e-13
                );
            }
        }
    }

    #[test]
    fn doubling_scale_doubles_loss_and_grads_exactly() {
        // Power-of-two scaling commutes with every rounding step, so this
        // holds bitwise, not just approximately.
        let (graph, features, labels) = small_fixture();
        let adj: CsrMatrix<f64> = graph.normalize();
        let train_rows = mask_rows(&labels, Mask::Train);
        let params: ModelParams<f64> = engine::glorot_init(&[6, 5, 3], 2);
        let a = forward_backward(&adj, &features, &labels.labels, &train_rows, &params, 0.25);
        let b = forward_backward(&adj, &features, &labels.labels, &train_rows, &params, 0.5);
        assert_eq!(2.0 * a.loss, b.loss);
        for layer in 0..2 {
            let doubled: Vec<f64> = a.grads[layer].values().iter().map(|&g| 2.0 * g).collect();
            assert_eq!(doubled.as_slice(), b.grads[layer].values());
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let graph = gen_power_law(120, 3, 11);
        let (features, labels) = gen_planted_features::<f64>(&graph, 4, 12, 0.3, 11);
        let dims = [12, 16, 4];
        let run1 =
            oracle_train(&graph, &features, &labels, &dims, 7, OptimizerKind::Adam, 0.01, 60, false);
        let run2 =
            oracle_train(&graph, &features, &labels, &dims, 7, OptimizerKind::Adam, 0.01, 60, false);
        assert_eq!(run1.params, run2.params);
        assert_eq!(run1.records, run2.records);
        let first = run1.records.first().unwrap();
        let last = run1.records.last().unwrap();
        assert!(last.loss < first.loss, "loss did not drop: {first:?} -> {last:?}");
        assert!(last.train_acc > 0.8, "train acc stuck at {}", last.train_acc);
    }

    #[test]
    fn grad_trace_records_every_epoch() {
        let (graph, features, labels) = small_fixture();
        let run = oracle_train(
            &graph,
            &features,
            &labels,
            &[6, 5, 3],
            1,
            OptimizerKind::Sgd,
            0.01,
            4,
            true,
        );
        assert_eq!(run.grad_trace.len(), 4);
        assert_eq!(run.grad_trace[0].len(), 2);
    }
}
