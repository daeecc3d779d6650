//! Per-epoch training metrics, the CSV format, and the modeled network cost.
//!
//! Metrics are written with `{}` float formatting (shortest round-trip), so
//! identical runs produce byte-identical files. Wall time is recorded only
//! when timing is explicitly enabled; otherwise the column is 0 so reruns
//! stay reproducible.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modeled interconnect. Same-host transfers ride the fast links, cross-host
/// transfers the slow ones; every message also pays a fixed latency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub inner_bytes_per_s: f64,
    pub outer_bytes_per_s: f64,
    pub inner_latency_s: f64,
    pub outer_latency_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            inner_bytes_per_s: 22.70e9,
            outer_bytes_per_s: 8.27e9,
            inner_latency_s: 1.0e-6,
            outer_latency_s: 5.0e-6,
        }
    }
}

/// One worker's sent traffic for one epoch, split by link class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommTally {
    pub inner_bytes: u64,
    pub inner_msgs: u64,
    pub outer_bytes: u64,
    pub outer_msgs: u64,
}

impl CommTally {
    pub fn add_inner(&mut self, bytes: u64) {
        self.inner_bytes += bytes;
        self.inner_msgs += 1;
    }

    pub fn add_outer(&mut self, bytes: u64) {
        self.outer_bytes += bytes;
        self.outer_msgs += 1;
    }

    pub fn merge(&mut self, other: &CommTally) {
        self.inner_bytes += other.inner_bytes;
        self.inner_msgs += other.inner_msgs;
        self.outer_bytes += other.outer_bytes;
        self.outer_msgs += other.outer_msgs;
    }
}

impl CostModel {
    /// Epoch communication time under BSP: every worker pushes its traffic in
    /// parallel, so the epoch is gated by the slowest sender.
    pub fn epoch_time(&self, per_worker: &[CommTally]) -> f64 {
        per_worker
            .iter()
            .map(|t| {
                t.inner_bytes as f64 / self.inner_bytes_per_s
                    + t.inner_msgs as f64 * self.inner_latency_s
                    + t.outer_bytes as f64 / self.outer_bytes_per_s
                    + t.outer_msgs as f64 * self.outer_latency_s
            })
            .fold(0.0, f64::max)
    }
}

/// Fixed modeled size of the per-epoch accuracy/loss report a worker sends
/// to rank 0 (counts plus the local loss term).
pub const REPORT_BYTES: u64 = 48;
/// Fixed modeled size of the broadcast global accuracy/loss record.
pub const GLOBAL_BYTES: u64 = 32;

/// Bytes on the wire for one vertex-row payload: quantized rows carry packed
/// codes plus the two range scalars, raw rows carry plain scalars.
pub fn vertex_payload_bytes(width: usize, scalar_bits: u32, quant_bits: Option<u8>) -> u64 {
    let bits = match quant_bits {
        Some(b) => crate::quant::message_size_bits(width, b, scalar_bits),
        None => crate::quant::raw_size_bits(width, scalar_bits),
    };
    bits.div_ceil(8) as u64
}

// ---------------------------------------------------------------------------
// Epoch metrics and CSV
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Cache threshold in force during this epoch.
    pub eps: f64,
    /// Gather-side vertex sends per layer (mirror decisions), forward pass.
    pub fwd_sends: Vec<u64>,
    /// Gather-side vertex sends per layer, backward pass.
    pub bwd_sends: Vec<u64>,
    /// Total same-host bytes sent this epoch, all workers.
    pub inner_bytes: u64,
    /// Total cross-host bytes sent this epoch, all workers.
    pub outer_bytes: u64,
    /// Modeled slowest-worker communication time for the epoch in seconds.
    pub modeled_comm_s: f64,
    /// Measured wall time; 0 unless timing was enabled.
    pub wall_s: f64,
}

pub fn csv_header(num_layers: usize) -> String {
    let mut cols = vec![
        "epoch".to_string(),
        "loss".to_string(),
        "train_acc".to_string(),
        "val_acc".to_string(),
        "eps".to_string(),
    ];
    for l in 1..=num_layers {
        cols.push(format!("fwd_sends_l{l}"));
    }
    for l in 1..=num_layers {
        cols.push(format!("bwd_sends_l{l}"));
    }
    cols.extend(
        ["inner_bytes", "outer_bytes", "modeled_comm_s", "wall_s"].map(str::to_string),
    );
    cols.join(",")
}

pub fn format_metrics_csv(rows: &[EpochMetrics], num_layers: usize) -> String {
    let mut out = csv_header(num_layers);
    out.push('\n');
    for r in rows {
        assert_eq!(r.fwd_sends.len(), num_layers);
        assert_eq!(r.bwd_sends.len(), num_layers);
        let mut cols = vec![
            r.epoch.to_string(),
            format!("{}", r.loss),
            format!("{}", r.train_acc),
            format!("{}", r.val_acc),
            format!("{}", r.eps),
        ];
        cols.extend(r.fwd_sends.iter().map(u64::to_string));
        cols.extend(r.bwd_sends.iter().map(u64::to_string));
        cols.push(r.inner_bytes.to_string());
        cols.push(r.outer_bytes.to_string());
        cols.push(format!("{}", r.modeled_comm_s));
        cols.push(format!("{}", r.wall_s));
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics], num_layers: usize) -> Result<()> {
    fs::write(path, format_metrics_csv(rows, num_layers))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    parse_metrics_csv(&text)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::data("empty metrics file"))?;
    let num_layers = header.split(',').filter(|c| c.starts_with("fwd_sends_l")).count();
    if header != csv_header(num_layers) {
        return Err(Error::data("unrecognized metrics header"));
    }
    let expected_cols = 9 + 2 * num_layers;
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != expected_cols {
            return Err(Error::data(format!(
                "metrics line {}: {} columns, expected {expected_cols}",
                idx + 2,
                cols.len()
            )));
        }
        let bad =
            |c: &str| Error::data(format!("metrics line {}: bad value {c:?}", idx + 2));
        let f = |c: &str| c.parse::<f64>().map_err(|_| bad(c));
        let u = |c: &str| c.parse::<u64>().map_err(|_| bad(c));
        rows.push(EpochMetrics {
            epoch: u(cols[0])?,
            loss: f(cols[1])?,
            train_acc: f(cols[2])?,
            val_acc: f(cols[3])?,
            eps: f(cols[4])?,
            fwd_sends: cols[5..5 + num_layers].iter().map(|c| u(c)).collect::<Result<_>>()?,
            bwd_sends: cols[5 + num_layers..5 + 2 * num_layers]
                .iter()
                .map(|c| u(c))
                .collect::<Result<_>>()?,
            inner_bytes: u(cols[5 + 2 * num_layers])?,
            outer_bytes: u(cols[6 + 2 * num_layers])?,
            modeled_comm_s: f(cols[7 + 2 * num_layers])?,
            wall_s: f(cols[8 + 2 * num_layers])?,
        });
    }
    Ok(rows)
}

/// End-of-run roll-up written alongside the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: u64,
    pub final_loss: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub final_eps: f64,
    /// Gather-side vertex sends over all epochs and layers.
    pub gather_sends: u64,
    /// Scatter-side vertex sends over all epochs and layers.
    pub scatter_sends: u64,
    pub inner_bytes: u64,
    pub outer_bytes: u64,
    pub modeled_comm_s: f64,
    pub wall_s: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_time_takes_slowest_worker() {
        let model = CostModel {
            inner_bytes_per_s: 100.0,
            outer_bytes_per_s: 10.0,
            inner_latency_s: 0.5,
            outer_latency_s: 1.0,
        };
        let mut a = CommTally::default();
        a.add_inner(200); // 2 s + 0.5 s
        let mut b = CommTally::default();
        b.add_outer(10); // 1 s + 1 s
        assert!((model.epoch_time(&[a, b]) - 2.5).abs() < 1e-12);
        assert_eq!(model.epoch_time(&[]), 0.0);
    }

    #[test]
    fn payload_byte_sizes() {
        // 64 f32 lanes quantized to 4 bits: 64 * 4 + 2 * 32 = 320 bits = 40 bytes.
        assert_eq!(vertex_payload_bytes(64, 32, Some(4)), 40);
        // Raw: 64 * 32 = 2048 bits = 256 bytes.
        assert_eq!(vertex_payload_bytes(64, 32, None), 256);
        // Non-multiple of 8 rounds up: 3 lanes at 1 bit + 2 * 64 = 131 bits.
        assert_eq!(vertex_payload_bytes(3, 64, Some(1)), 17);
    }

    fn sample_rows() -> Vec<EpochMetrics> {
        vec![
            EpochMetrics {
                epoch: 1,
                loss: 1.3862943611198906,
                train_acc: 0.25,
                val_acc: 0.5,
                eps: 0.01,
                fwd_sends: vec![10, 8],
                bwd_sends: vec![7, 9],
                inner_bytes: 1024,
                outer_bytes: 2048,
                modeled_comm_s: 1.5e-6,
                wall_s: 0.0,
            },
            EpochMetrics {
                epoch: 2,
                loss: 0.9,
                train_acc: 0.75,
                val_acc: 0.7,
                eps: 0.0105,
                fwd_sends: vec![3, 2],
                bwd_sends: vec![1, 0],
                inner_bytes: 100,
                outer_bytes: 0,
                modeled_comm_s: 2e-7,
                wall_s: 0.0,
            },
        ]
    }

    #[test]
    fn csv_round_trip() {
        let rows = sample_rows();
        let text = format_metrics_csv(&rows, 2);
        assert!(text.starts_with(
            "epoch,loss,train_acc,val_acc,eps,fwd_sends_l1,fwd_sends_l2,\
             bwd_sends_l1,bwd_sends_l2,inner_bytes,outer_bytes,modeled_comm_s,wall_s\n"
        ));
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back, rows);
        // Shortest round-trip formatting is itself stable.
        assert_eq!(format_metrics_csv(&back, 2), text);
    }

    #[test]
    fn csv_rejects_column_mismatch() {
        let rows = sample_rows();
        let mut text = format_metrics_csv(&rows, 2);
        text.push_str("3,0.5\n");
        assert!(parse_metrics_csv(&text).is_err());
    }
}
