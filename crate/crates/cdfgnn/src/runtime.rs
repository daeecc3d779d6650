//! Bulk-synchronous distributed training runtime.
//!
//! One thread per worker, connected by channels. Each epoch runs a fixed
//! phase schedule; every worker executes the same schedule, so a shared
//! phase counter identifies messages. Sync phases end with a marker from
//! every peer: channels deliver each sender's messages in order, so holding
//! a peer's marker proves all of its payloads for the phase arrived. Workers
//! can run at most one phase ahead of a peer, and early messages wait in a
//! pending buffer.
//!
//! Determinism does not rely on scheduling: received deltas are applied in
//! (vertex, sender) order, gradient and loss reductions sum in rank order,
//! and all randomness is seeded.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::{CacheTable, EpsilonController};
use crate::config::TrainConfig;
use crate::engine::{self, ModelParams, OptimizerState};
use crate::error::{Error, Result};
use crate::graph::{FeatureMatrix, Graph, LabelSet, Mask};
use crate::metrics::{
    self, CommTally, EpochMetrics, TrainSummary, GLOBAL_BYTES, REPORT_BYTES,
};
use crate::partition::PartitionPlan;
use crate::quant::{quantize, QuantizedVector};
use crate::tensor::{CsrMatrix, DenseMatrix, Scalar};

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Payload<T: Scalar> {
    Raw(Vec<T>),
    Quant { bytes: Vec<u8>, len: usize },
}

impl<T: Scalar> Payload<T> {
    fn encode(values: Vec<T>, quant_bits: Option<u8>) -> Payload<T> {
        match quant_bits {
            None => Payload::Raw(values),
            Some(b) => {
                let q = quantize(&values, b);
                Payload::Quant { bytes: q.to_bytes(), len: values.len() }
            }
        }
    }

    fn decode(&self) -> Result<Vec<T>> {
        match self {
            Payload::Raw(v) => Ok(v.clone()),
            Payload::Quant { bytes, len } => {
                Ok(crate::quant::dequantize(&QuantizedVector::<T>::from_bytes(bytes, *len)?))
            }
        }
    }
}

enum Msg<T: Scalar> {
    Vertex { seq: u64, vertex: u32, src: u32, payload: Payload<T> },
    PhaseEnd { seq: u64, src: u32 },
    GradPartial { seq: u64, src: u32, values: Vec<T> },
    GradSum { seq: u64, values: Vec<T> },
    AccReport { seq: u64, src: u32, loss: f64, train_correct: u64, val_correct: u64 },
    AccGlobal { seq: u64, loss: f64, train_acc: f64, val_acc: f64 },
    Counts { seq: u64, train: u64, val: u64 },
    CountsGlobal { seq: u64, train: u64, val: u64 },
    Stats { seq: u64, src: u32, tally: CommTally, gather: Vec<u64>, scatter: Vec<u64> },
}

impl<T: Scalar> Msg<T> {
    fn seq(&self) -> u64 {
        match self {
            Msg::Vertex { seq, .. }
            | Msg::PhaseEnd { seq, .. }
            | Msg::GradPartial { seq, .. }
            | Msg::GradSum { seq, .. }
            | Msg::AccReport { seq, .. }
            | Msg::AccGlobal { seq, .. }
            | Msg::Counts { seq, .. }
            | Msg::CountsGlobal { seq, .. }
            | Msg::Stats { seq, .. } => *seq,
        }
    }
}

/// Worker-to-driver reporting.
enum DriverMsg<T: Scalar> {
    Epoch { metrics: EpochMetrics, scatter_sends: u64 },
    GradEpoch(Vec<DenseMatrix<T>>),
    Final { rank: u32, params: ModelParams<T> },
}

// ---------------------------------------------------------------------------
// Mailbox
// ---------------------------------------------------------------------------

/// Receives this worker's messages, parking messages from future phases
/// until the worker gets there.
struct Mailbox<T: Scalar> {
    rx: mpsc::Receiver<Msg<T>>,
    pending: BTreeMap<u64, VecDeque<Msg<T>>>,
    timeout: Duration,
}

impl<T: Scalar> Mailbox<T> {
    fn new(rx: mpsc::Receiver<Msg<T>>, timeout: Duration) -> Mailbox<T> {
        Mailbox { rx, pending: BTreeMap::new(), timeout }
    }

    fn next_for(&mut self, seq: u64) -> Result<Msg<T>> {
        if let Some(q) = self.pending.get_mut(&seq) {
            if let Some(m) = q.pop_front() {
                if q.is_empty() {
                    self.pending.remove(&seq);
                }
                return Ok(m);
            }
        }
        loop {
            let msg = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => Error::protocol(format!(
                    "barrier timeout after {:?} waiting for phase {seq}",
                    self.timeout
                )),
                mpsc::RecvTimeoutError::Disconnected => {
                    Error::protocol(format!("peers hung up before phase {seq}"))
                }
            })?;
            let mseq = msg.seq();
            if mseq == seq {
                return Ok(msg);
            }
            if mseq < seq {
                return Err(Error::protocol(format!(
                    "stale message for phase {mseq} while in phase {seq}"
                )));
            }
            self.pending.entry(mseq).or_default().push_back(msg);
        }
    }

    /// Drains the phase until every peer's PhaseEnd arrives; returns the
    /// payload messages. Sender-order delivery makes the marker count a
    /// barrier.
    fn collect_until_markers(&mut self, seq: u64, markers: usize) -> Result<Vec<Msg<T>>> {
        let mut out = Vec::new();
        let mut seen = 0u64;
        let mut seen_srcs = 0u64;
        while seen < markers as u64 {
            match self.next_for(seq)? {
                Msg::PhaseEnd { src, .. } => {
                    let bit = 1u64 << src;
                    if seen_srcs & bit != 0 {
                        return Err(Error::protocol(format!(
                            "worker {src} sent two markers for phase {seq}"
                        )));
                    }
                    seen_srcs |= bit;
                    seen += 1;
                }
                other => out.push(other),
            }
        }
        Ok(out)
    }

    /// Collects exactly `n` payload messages of the phase.
    fn collect_payloads(&mut self, seq: u64, n: usize) -> Result<Vec<Msg<T>>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            match self.next_for(seq)? {
                Msg::PhaseEnd { .. } => {
                    return Err(Error::protocol(format!(
                        "unexpected phase marker in reduction phase {seq}"
                    )))
                }
                other => out.push(other),
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Worker-local data
// ---------------------------------------------------------------------------

/// One worker's materialized inputs, extracted from the plan.
struct WorkerData<T: Scalar> {
    rank: u32,
    local_to_global: Vec<u32>,
    /// Local adjacency over local ids with globally normalized weights.
    adj: CsrMatrix<T>,
    features: DenseMatrix<T>,
    labels: Vec<u32>,
    master: Vec<bool>,
    /// More than one replica exists, so the vertex goes through the cache.
    replicated: Vec<bool>,
    /// Owner rank per local vertex.
    owner_rank: Vec<u32>,
    /// Mirror ranks per local vertex; populated only for masters.
    mirror_ranks: Vec<Vec<u32>>,
    /// Local rows that are training/validation masters.
    train_rows: Vec<usize>,
    val_rows: Vec<usize>,
}

fn materialize_worker<T: Scalar>(
    plan: &PartitionPlan,
    graph: &Graph,
    features: &FeatureMatrix<T>,
    labels: &LabelSet,
    rank: u32,
) -> WorkerData<T> {
    let part = &plan.parts[rank as usize];
    let n_local = part.local_to_global.len();

    let mut rows: Vec<Vec<(u32, T)>> = vec![Vec::new(); n_local];
    for &(lu, lv) in &part.edges {
        let gu = part.local_to_global[lu as usize];
        let gv = part.local_to_global[lv as usize];
        // Same expression as Graph::normalize, so a single-worker run builds
        // a bitwise-identical adjacency.
        let du = graph.degree(gu) as f64;
        let dv = graph.degree(gv) as f64;
        let w = T::from_f64(1.0 / (du * dv).sqrt());
        rows[lu as usize].push((lv, w));
        rows[lv as usize].push((lu, w));
    }
    for r in rows.iter_mut() {
        r.sort_unstable_by_key(|&(c, _)| c);
    }
    let adj = CsrMatrix::from_rows(n_local, &rows);

    let mut feat = DenseMatrix::zeros(n_local, features.cols());
    let mut lab = Vec::with_capacity(n_local);
    let mut train_rows = Vec::new();
    let mut val_rows = Vec::new();
    let mut replicated = Vec::with_capacity(n_local);
    let mut owner_rank = Vec::with_capacity(n_local);
    let mut mirror_ranks = Vec::with_capacity(n_local);
    for (l, &g) in part.local_to_global.iter().enumerate() {
        feat.row_mut(l).copy_from_slice(features.row(g as usize));
        lab.push(labels.labels[g as usize]);
        if part.master[l] {
            match labels.masks[g as usize] {
                Mask::Train => train_rows.push(l),
                Mask::Val => val_rows.push(l),
                _ => {}
            }
        }
        replicated.push(plan.replica_count(g) > 1);
        owner_rank.push(plan.owner[g as usize]);
        mirror_ranks.push(if part.master[l] {
            plan.mirrors[g as usize].clone()
        } else {
            Vec::new()
        });
    }

    WorkerData {
        rank,
        local_to_global: part.local_to_global.clone(),
        adj,
        features: feat,
        labels: lab,
        master: part.master.clone(),
        replicated,
        owner_rank,
        mirror_ranks,
        train_rows,
        val_rows,
    }
}

// ---------------------------------------------------------------------------
// Worker
// ---------------------------------------------------------------------------

struct Worker<T: Scalar> {
    data: WorkerData<T>,
    cfg: TrainConfig,
    p: u32,
    senders: Vec<mpsc::Sender<Msg<T>>>,
    mailbox: Mailbox<T>,
    driver: mpsc::Sender<DriverMsg<T>>,
    params: ModelParams<T>,
    opt: OptimizerState<T>,
    tables: Vec<CacheTable<T>>,
    controller: EpsilonController,
    seq: u64,
    tally: CommTally,
    gather_sends: Vec<u64>,
    scatter_sends: Vec<u64>,
    jitter: Option<ChaCha8Rng>,
    scale: T,
    train_total: u64,
    val_total: u64,
    record_grads: bool,
}

impl<T: Scalar> Worker<T> {
    fn rank(&self) -> u32 {
        self.data.rank
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn fwd_slot(&self, layer: usize) -> usize {
        layer - 1
    }

    fn bwd_slot(&self, layer: usize) -> usize {
        self.cfg.num_layers + layer - 1
    }

    fn send(&mut self, dst: u32, msg: Msg<T>) -> Result<()> {
        if let Some(rng) = self.jitter.as_mut() {
            let us = rng.gen_range(0..=120u64);
            if us > 0 {
                thread::sleep(Duration::from_micros(us));
            }
        }
        self.senders[dst as usize]
            .send(msg)
            .map_err(|_| Error::protocol(format!("worker {dst} is gone")))
    }

    /// Bills one sent payload message to the cost tally.
    fn bill(&mut self, dst: u32, bytes: u64) {
        if dst == self.rank() {
            return;
        }
        let shape = crate::partition::ClusterShape::new(self.cfg.num_hosts, self.cfg.gpus_per_host);
        if shape.host_of(dst) == shape.host_of(self.rank()) {
            self.tally.add_inner(bytes);
        } else {
            self.tally.add_outer(bytes);
        }
    }

    fn broadcast_marker(&mut self, seq: u64) -> Result<()> {
        for dst in 0..self.p {
            if dst != self.rank() {
                self.send(dst, Msg::PhaseEnd { seq, src: self.rank() })?;
            }
        }
        Ok(())
    }

    /// One gather + scatter round for a sync slot. `cur` holds every local
    /// vertex's partial row; the result holds every local vertex's synced
    /// row. Single-replica vertices pass through untouched.
    fn sync_slot(
        &mut self,
        slot: usize,
        cur: &DenseMatrix<T>,
        eps: f64,
    ) -> Result<DenseMatrix<T>> {
        let n_local = self.data.local_to_global.len();
        let width = cur.cols();
        let payload_bytes = metrics::vertex_payload_bytes(width, T::BITS, self.cfg.quant_bits);

        // Gather: mirrors push drifted partials to masters.
        let gseq = self.next_seq();
        for v in 0..n_local {
            if !self.data.replicated[v] || self.data.master[v] {
                continue;
            }
            if let Some(delta) = self.tables[slot].mirror_pass(v, cur.row(v), eps) {
                self.gather_sends[slot] += 1;
                let dst = self.data.owner_rank[v];
                self.bill(dst, payload_bytes);
                let payload = Payload::encode(delta, self.cfg.quant_bits);
                let vertex = self.data.local_to_global[v];
                self.send(dst, Msg::Vertex { seq: gseq, vertex, src: self.rank(), payload })?;
            }
        }
        self.broadcast_marker(gseq)?;
        let mut msgs = self.mailbox.collect_until_markers(gseq, self.p as usize - 1)?;
        msgs.sort_by_key(|m| match m {
            Msg::Vertex { vertex, src, .. } => (*vertex, *src),
            _ => (u32::MAX, u32::MAX),
        });
        for m in msgs {
            let Msg::Vertex { vertex, payload, .. } = m else {
                return Err(Error::protocol("non-vertex message in a gather phase"));
            };
            let v = self.local_of(vertex)?;
            let values = payload.decode()?;
            self.tables[slot].apply_gather(v, &values);
        }
        for v in 0..n_local {
            if self.data.replicated[v] && self.data.master[v] {
                self.tables[slot].master_own_pass(v, cur.row(v), eps);
            }
        }

        // Scatter: masters push drifted aggregates to mirrors.
        let sseq = self.next_seq();
        for v in 0..n_local {
            if !(self.data.replicated[v] && self.data.master[v]) {
                continue;
            }
            if let Some(values) = self.tables[slot].scatter_pass(v, eps, self.cfg.scatter_mode) {
                let payload = Payload::encode(values, self.cfg.quant_bits);
                let vertex = self.data.local_to_global[v];
                let mirrors = self.data.mirror_ranks[v].clone();
                self.scatter_sends[slot] += mirrors.len() as u64;
                for dst in mirrors {
                    self.bill(dst, payload_bytes);
                    self.send(
                        dst,
                        Msg::Vertex { seq: sseq, vertex, src: self.rank(), payload: payload.clone() },
                    )?;
                }
            }
        }
        self.broadcast_marker(sseq)?;
        let mut msgs = self.mailbox.collect_until_markers(sseq, self.p as usize - 1)?;
        msgs.sort_by_key(|m| match m {
            Msg::Vertex { vertex, src, .. } => (*vertex, *src),
            _ => (u32::MAX, u32::MAX),
        });
        for m in msgs {
            let Msg::Vertex { vertex, payload, .. } = m else {
                return Err(Error::protocol("non-vertex message in a scatter phase"));
            };
            let v = self.local_of(vertex)?;
            let values = payload.decode()?;
            self.tables[slot].apply_scatter(v, &values, self.cfg.scatter_mode);
        }

        let mut out = DenseMatrix::zeros(n_local, width);
        for v in 0..n_local {
            if self.data.replicated[v] {
                out.row_mut(v).copy_from_slice(self.tables[slot].synced_row(v));
            } else {
                out.row_mut(v).copy_from_slice(cur.row(v));
            }
        }
        Ok(out)
    }

    fn local_of(&self, vertex: u32) -> Result<usize> {
        self.data
            .local_to_global
            .binary_search(&vertex)
            .map_err(|_| Error::protocol(format!("vertex {vertex} is not local to this worker")))
    }

    /// Sums one layer's gradient across workers at rank 0, in rank order,
    /// and hands the sum back to everyone.
    fn reduce_layer(&mut self, grad: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let seq = self.next_seq();
        let bytes = (grad.values().len() as u64 * T::BITS as u64).div_ceil(8);
        if self.rank() == 0 {
            let msgs = self.mailbox.collect_payloads(seq, self.p as usize - 1)?;
            let mut partials = Vec::with_capacity(msgs.len());
            for m in msgs {
                let Msg::GradPartial { src, values, .. } = m else {
                    return Err(Error::protocol("non-gradient message in a reduce phase"));
                };
                partials.push((src, values));
            }
            partials.sort_by_key(|&(src, _)| src);
            let mut sum = grad.clone();
            for (_, values) in &partials {
                if values.len() != sum.values().len() {
                    return Err(Error::protocol("gradient shape mismatch in reduction"));
                }
                for (s, &v) in sum.values_mut().iter_mut().zip(values) {
                    *s = *s + v;
                }
            }
            for dst in 1..self.p {
                self.bill(dst, bytes);
                self.send(dst, Msg::GradSum { seq, values: sum.values().to_vec() })?;
            }
            Ok(sum)
        } else {
            self.bill(0, bytes);
            self.send(
                0,
                Msg::GradPartial { seq, src: self.rank(), values: grad.values().to_vec() },
            )?;
            let msg = self.mailbox.collect_payloads(seq, 1)?.pop().unwrap();
            let Msg::GradSum { values, .. } = msg else {
                return Err(Error::protocol("expected a gradient sum"));
            };
            let mut sum = DenseMatrix::zeros(grad.rows(), grad.cols());
            sum.values_mut().copy_from_slice(&values);
            Ok(sum)
        }
    }

    /// One-time exchange of global train/val master counts.
    fn setup_counts(&mut self) -> Result<()> {
        let seq = self.next_seq();
        let (train, val) = (self.data.train_rows.len() as u64, self.data.val_rows.len() as u64);
        if self.rank() == 0 {
            let msgs = self.mailbox.collect_payloads(seq, self.p as usize - 1)?;
            let (mut t, mut v) = (train, val);
            for m in msgs {
                let Msg::Counts { train, val, .. } = m else {
                    return Err(Error::protocol("expected count reports"));
                };
                t += train;
                v += val;
            }
            for dst in 1..self.p {
                self.send(dst, Msg::CountsGlobal { seq, train: t, val: v })?;
            }
            self.train_total = t;
            self.val_total = v;
        } else {
            self.send(0, Msg::Counts { seq, train, val })?;
            let msg = self.mailbox.collect_payloads(seq, 1)?.pop().unwrap();
            let Msg::CountsGlobal { train, val, .. } = msg else {
                return Err(Error::protocol("expected global counts"));
            };
            self.train_total = train;
            self.val_total = val;
        }
        if self.train_total == 0 {
            return Err(Error::data("no training vertices anywhere"));
        }
        self.scale = T::from_f64(1.0 / self.train_total as f64);
        Ok(())
    }

    /// Reduces loss and accuracy; returns (mean loss, train acc, val acc).
    fn acc_phase(&mut self, loss: f64, tc: u64, vc: u64) -> Result<(f64, f64, f64)> {
        let seq = self.next_seq();
        if self.rank() == 0 {
            let msgs = self.mailbox.collect_payloads(seq, self.p as usize - 1)?;
            let mut reports = Vec::with_capacity(msgs.len());
            for m in msgs {
                let Msg::AccReport { src, loss, train_correct, val_correct, .. } = m else {
                    return Err(Error::protocol("expected accuracy reports"));
                };
                reports.push((src, loss, train_correct, val_correct));
            }
            reports.sort_by_key(|&(src, ..)| src);
            let mut total_loss = loss;
            let (mut t, mut v) = (tc, vc);
            for &(_, l, rtc, rvc) in &reports {
                total_loss += l;
                t += rtc;
                v += rvc;
            }
            let train_acc = t as f64 / self.train_total as f64;
            let val_acc = if self.val_total == 0 { 0.0 } else { v as f64 / self.val_total as f64 };
            for dst in 1..self.p {
                self.bill(dst, GLOBAL_BYTES);
                self.send(dst, Msg::AccGlobal { seq, loss: total_loss, train_acc, val_acc })?;
            }
            Ok((total_loss, train_acc, val_acc))
        } else {
            self.bill(0, REPORT_BYTES);
            self.send(
                0,
                Msg::AccReport { seq, src: self.rank(), loss, train_correct: tc, val_correct: vc },
            )?;
            let msg = self.mailbox.collect_payloads(seq, 1)?.pop().unwrap();
            let Msg::AccGlobal { loss, train_acc, val_acc, .. } = msg else {
                return Err(Error::protocol("expected a global accuracy record"));
            };
            Ok((loss, train_acc, val_acc))
        }
    }

    /// Ships per-worker counters to rank 0, which assembles the epoch row.
    fn metrics_phase(
        &mut self,
        epoch: u64,
        loss: f64,
        train_acc: f64,
        val_acc: f64,
        eps: f64,
        wall_s: f64,
    ) -> Result<()> {
        let seq = self.next_seq();
        let tally = self.tally;
        let gather = self.gather_sends.clone();
        let scatter = self.scatter_sends.clone();
        if self.rank() == 0 {
            let msgs = self.mailbox.collect_payloads(seq, self.p as usize - 1)?;
            let mut tallies = vec![CommTally::default(); self.p as usize];
            tallies[0] = tally;
            let num_slots = 2 * self.cfg.num_layers;
            let mut gather_tot = gather;
            let mut scatter_tot = scatter;
            for m in msgs {
                let Msg::Stats { src, tally, gather, scatter, .. } = m else {
                    return Err(Error::protocol("expected stats reports"));
                };
                tallies[src as usize] = tally;
                for s in 0..num_slots {
                    gather_tot[s] += gather[s];
                    scatter_tot[s] += scatter[s];
                }
            }
            let mut inner_bytes = 0;
            let mut outer_bytes = 0;
            for t in &tallies {
                inner_bytes += t.inner_bytes;
                outer_bytes += t.outer_bytes;
            }
            let l = self.cfg.num_layers;
            let row = EpochMetrics {
                epoch,
                loss,
                train_acc,
                val_acc,
                eps,
                fwd_sends: gather_tot[..l].to_vec(),
                bwd_sends: gather_tot[l..].to_vec(),
                inner_bytes,
                outer_bytes,
                modeled_comm_s: self.cfg.cost.epoch_time(&tallies),
                wall_s,
            };
            let scatter_sends: u64 = scatter_tot.iter().sum();
            self.driver
                .send(DriverMsg::Epoch { metrics: row, scatter_sends })
                .map_err(|_| Error::protocol("driver is gone"))?;
        } else {
            self.send(
                0,
                Msg::Stats { seq, src: self.rank(), tally, gather, scatter },
            )?;
        }
        self.tally = CommTally::default();
        self.gather_sends.iter_mut().for_each(|c| *c = 0);
        self.scatter_sends.iter_mut().for_each(|c| *c = 0);
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        self.setup_counts()?;
        let num_layers = self.cfg.num_layers;
        let lr = T::from_f64(self.cfg.lr);

        for epoch in 1..=self.cfg.epochs {
            let epoch_start = Instant::now();
            let eps = self.controller.eps();

            // Forward.
            let mut hs: Vec<DenseMatrix<T>> = vec![self.data.features.clone()];
            let mut ps: Vec<DenseMatrix<T>> = Vec::with_capacity(num_layers);
            let mut z_synced: Vec<DenseMatrix<T>> = Vec::with_capacity(num_layers);
            for l in 1..=num_layers {
                let (p, z_partial) =
                    engine::forward_local(&self.data.adj, &hs[l - 1], &self.params.weights[l - 1]);
                let z = self.sync_slot(self.fwd_slot(l), &z_partial, eps)?;
                hs.push(engine::activate(&z, l, num_layers));
                ps.push(p);
                z_synced.push(z);
            }

            // Loss, output gradient, and accuracies on master rows.
            let z_out = &z_synced[num_layers - 1];
            let (local_loss, delta_out) = engine::loss_and_output_grad(
                z_out,
                &self.data.labels,
                &self.data.train_rows,
                self.scale,
            );
            let tc = engine::accuracy_counts(z_out, &self.data.labels, &self.data.train_rows);
            let vc = engine::accuracy_counts(z_out, &self.data.labels, &self.data.val_rows);
            let (loss, train_acc, val_acc) = self.acc_phase(local_loss.to_f64(), tc, vc)?;

            // Backward.
            let mut epoch_grads: Vec<Option<DenseMatrix<T>>> = vec![None; num_layers];
            let mut delta_partial = delta_out;
            let mut pending: Vec<Option<DenseMatrix<T>>> = vec![None; num_layers];
            for l in (1..=num_layers).rev() {
                let delta = self.sync_slot(self.bwd_slot(l), &delta_partial, eps)?;
                let grad = engine::param_grad(&ps[l - 1], &delta);
                if l >= 2 {
                    delta_partial = engine::backward_local(
                        &self.data.adj,
                        &delta,
                        &self.params.weights[l - 1],
                        &z_synced[l - 2],
                    );
                }
                if self.cfg.per_layer_update {
                    let sum = self.reduce_layer(&grad)?;
                    engine::optimizer_apply_layer(
                        &mut self.params,
                        l - 1,
                        &sum,
                        &mut self.opt,
                        lr,
                    );
                    epoch_grads[l - 1] = Some(sum);
                } else {
                    pending[l - 1] = Some(grad);
                }
            }
            if !self.cfg.per_layer_update {
                for l in 0..num_layers {
                    let grad = pending[l].take().unwrap();
                    let sum = self.reduce_layer(&grad)?;
                    engine::optimizer_apply_layer(&mut self.params, l, &sum, &mut self.opt, lr);
                    epoch_grads[l] = Some(sum);
                }
            }
            engine::optimizer_advance(&mut self.opt);

            if self.record_grads && self.rank() == 0 {
                let grads: Vec<DenseMatrix<T>> =
                    epoch_grads.into_iter().map(|g| g.unwrap()).collect();
                self.driver
                    .send(DriverMsg::GradEpoch(grads))
                    .map_err(|_| Error::protocol("driver is gone"))?;
            }

            let wall_s =
                if self.cfg.timing { epoch_start.elapsed().as_secs_f64() } else { 0.0 };
            self.metrics_phase(epoch, loss, train_acc, val_acc, eps, wall_s)?;
            self.controller.observe(val_acc);
        }

        self.driver
            .send(DriverMsg::Final { rank: self.rank(), params: self.params.clone() })
            .map_err(|_| Error::protocol("driver is gone"))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

pub struct TrainOutcome<T: Scalar> {
    pub metrics: Vec<EpochMetrics>,
    pub summary: TrainSummary,
    /// Reduced (summed) gradients per epoch and layer when recording was
    /// requested; empty otherwise.
    pub grad_trace: Vec<Vec<DenseMatrix<T>>>,
    /// Rank 0's final parameters.
    pub final_params: ModelParams<T>,
    /// Every rank's final parameters, by rank; all entries should agree.
    pub final_params_all: Vec<ModelParams<T>>,
}

/// Runs full-batch distributed training over the plan with one thread per
/// worker. Deterministic for a fixed config: reruns produce identical
/// metrics, gradients, and parameters.
pub fn train<T: Scalar>(
    graph: &Graph,
    features: &FeatureMatrix<T>,
    labels: &LabelSet,
    plan: &PartitionPlan,
    cfg: &TrainConfig,
    record_grads: bool,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if plan.shape.num_hosts != cfg.num_hosts || plan.shape.gpus_per_host != cfg.gpus_per_host {
        return Err(Error::usage(format!(
            "plan is for {}x{} but the config says {}x{}",
            plan.shape.num_hosts, plan.shape.gpus_per_host, cfg.num_hosts, cfg.gpus_per_host
        )));
    }
    if plan.num_vertices != graph.num_vertices() || plan.num_edges != graph.num_edges() {
        return Err(Error::data("plan does not match the graph"));
    }
    if features.rows() != graph.num_vertices() {
        return Err(Error::data("feature row count does not match the graph"));
    }
    if labels.labels.len() != graph.num_vertices() {
        return Err(Error::data("label count does not match the graph"));
    }

    let p = plan.shape.num_workers();
    let dims = cfg.layer_dims(features.cols(), labels.num_classes);
    let init_params: ModelParams<T> = engine::glorot_init(&dims, cfg.seed);

    let mut txs = Vec::with_capacity(p as usize);
    let mut rxs = Vec::with_capacity(p as usize);
    for _ in 0..p {
        let (tx, rx) = mpsc::channel::<Msg<T>>();
        txs.push(tx);
        rxs.push(rx);
    }
    let (driver_tx, driver_rx) = mpsc::channel::<DriverMsg<T>>();

    let mut workers: Vec<Worker<T>> = Vec::with_capacity(p as usize);
    for (rank, rx) in rxs.into_iter().enumerate() {
        let rank = rank as u32;
        let data = materialize_worker(plan, graph, features, labels, rank);
        let num_slots = 2 * cfg.num_layers;
        let n_local = data.local_to_global.len();
        let tables: Vec<CacheTable<T>> =
            (0..num_slots).map(|s| CacheTable::new(n_local, dims[slot_width_dim(s, cfg.num_layers)])).collect();
        let controller = if cfg.cache_enabled {
            EpsilonController::new(cfg.eps_init, cfg.eps_cfg, false)
        } else {
            EpsilonController::new(0.0, cfg.eps_cfg, true)
        };
        workers.push(Worker {
            data,
            cfg: cfg.clone(),
            p,
            senders: txs.clone(),
            mailbox: Mailbox::new(rx, Duration::from_secs_f64(cfg.barrier_timeout_s)),
            driver: driver_tx.clone(),
            params: init_params.clone(),
            opt: OptimizerState::new(cfg.optimizer, &init_params),
            tables,
            controller,
            seq: 0,
            tally: CommTally::default(),
            gather_sends: vec![0; num_slots],
            scatter_sends: vec![0; num_slots],
            jitter: cfg
                .sched_jitter
                .map(|s| ChaCha8Rng::seed_from_u64(s.wrapping_mul(0x9e3779b9).wrapping_add(rank as u64))),
            scale: T::one(),
            train_total: 0,
            val_total: 0,
            record_grads,
        });
    }
    drop(txs);
    drop(driver_tx);

    let mut metrics_rows: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs as usize);
    let mut grad_trace: Vec<Vec<DenseMatrix<T>>> = Vec::new();
    let mut finals: Vec<Option<ModelParams<T>>> = vec![None; p as usize];
    let mut scatter_total = 0u64;

    let joined: Vec<Result<()>> = thread::scope(|s| {
        let handles: Vec<_> = workers
            .into_iter()
            .map(|mut w| s.spawn(move || w.run()))
            .collect();

        for msg in driver_rx.iter() {
            match msg {
                DriverMsg::Epoch { metrics, scatter_sends } => {
                    scatter_total += scatter_sends;
                    metrics_rows.push(metrics);
                }
                DriverMsg::GradEpoch(grads) => grad_trace.push(grads),
                DriverMsg::Final { rank, params } => finals[rank as usize] = Some(params),
            }
        }

        handles
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r,
                Err(_) => Err(Error::protocol("a worker thread panicked")),
            })
            .collect()
    });
    for r in joined {
        r?;
    }
    let final_params_all: Vec<ModelParams<T>> = finals
        .into_iter()
        .enumerate()
        .map(|(rank, p)| {
            p.ok_or_else(|| Error::protocol(format!("worker {rank} never reported parameters")))
        })
        .collect::<Result<_>>()?;

    metrics_rows.sort_by_key(|r| r.epoch);
    let gather_sends: u64 = metrics_rows
        .iter()
        .map(|r| r.fwd_sends.iter().sum::<u64>() + r.bwd_sends.iter().sum::<u64>())
        .sum();
    // A zero-epoch run is legal (it writes a header-only metrics file), so
    // the summary falls back to zeros instead of failing.
    let (final_loss, final_train_acc, final_val_acc, final_eps) = match metrics_rows.last() {
        Some(last) => (last.loss, last.train_acc, last.val_acc, last.eps),
        None => (0.0, 0.0, 0.0, cfg.eps_init),
    };
    let summary = TrainSummary {
        epochs: cfg.epochs,
        final_loss,
        final_train_acc,
        final_val_acc,
        final_eps,
        gather_sends,
        scatter_sends: scatter_total,
        inner_bytes: metrics_rows.iter().map(|r| r.inner_bytes).sum(),
        outer_bytes: metrics_rows.iter().map(|r| r.outer_bytes).sum(),
        modeled_comm_s: metrics_rows.iter().map(|r| r.modeled_comm_s).sum(),
        wall_s: metrics_rows.iter().map(|r| r.wall_s).sum(),
    };
    Ok(TrainOutcome {
        metrics: metrics_rows,
        summary,
        grad_trace,
        final_params: final_params_all[0].clone(),
        final_params_all,
    })
}

/// Width (in the dims array) of a sync slot: forward slot l-1 and backward
/// slot L+l-1 both carry rows of dims[l].
fn slot_width_dim(slot: usize, num_layers: usize) -> usize {
    if slot < num_layers {
        slot + 1
    } else {
        slot - num_layers + 1
    }
}
