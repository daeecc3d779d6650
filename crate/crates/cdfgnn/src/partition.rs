//! Streaming vertex-cut partitioner with hierarchy-aware evaluation.
//!
//! Edges stream one at a time (order fixed by a seed) and each lands on the
//! worker minimizing a cost that charges new device replicas, new host
//! replicas, and load imbalance. The first worker to see a vertex becomes its
//! master; later workers hold mirrors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

pub const PLAN_FORMAT_VERSION: u32 = 1;

/// Workers are ranked 0..p; rank r lives on host r / gpus_per_host.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterShape {
    pub num_hosts: u32,
    pub gpus_per_host: u32,
}

impl ClusterShape {
    pub fn new(num_hosts: u32, gpus_per_host: u32) -> ClusterShape {
        assert!(num_hosts >= 1 && gpus_per_host >= 1, "cluster must have workers");
        ClusterShape { num_hosts, gpus_per_host }
    }

    pub fn num_workers(&self) -> u32 {
        self.num_hosts * self.gpus_per_host
    }

    pub fn host_of(&self, worker: u32) -> u32 {
        worker / self.gpus_per_host
    }
}

/// Hyperparameters of the evaluation function.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvaParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for EvaParams {
    fn default() -> Self {
        EvaParams { alpha: 1.0, beta: 1.0, gamma: 0.1 }
    }
}

/// Mutable state of the streaming pass. Replica sets are worker/host
/// bitmasks, so at most 64 workers and hosts.
pub struct PartitionerState {
    shape: ClusterShape,
    params: EvaParams,
    device_reps: Vec<u64>,
    host_reps: Vec<u64>,
    edge_counts: Vec<u64>,
    vertex_counts: Vec<u64>,
    owner: Vec<i64>,
    total_edges: u64,
    total_vertices: u64,
}

impl PartitionerState {
    pub fn new(
        shape: ClusterShape,
        params: EvaParams,
        total_vertices: usize,
        total_edges: usize,
    ) -> PartitionerState {
        let p = shape.num_workers() as usize;
        assert!(p <= 64, "replica bitmasks support up to 64 workers");
        assert!(shape.num_hosts <= 64, "host bitmasks support up to 64 hosts");
        PartitionerState {
            shape,
            params,
            device_reps: vec![0; total_vertices],
            host_reps: vec![0; total_vertices],
            edge_counts: vec![0; p],
            vertex_counts: vec![0; p],
            owner: vec![-1; total_vertices],
            total_edges: total_edges as u64,
            total_vertices: total_vertices as u64,
        }
    }

    /// Evaluation of placing edge (u, v) on `worker`: replication terms
    /// weighted (1 - gamma) per missing device replica and gamma per missing
    /// host replica, plus alpha and beta load terms normalized by the
    /// balanced share.
    pub fn eva(&self, u: u32, v: u32, worker: u32) -> f64 {
        let p = self.shape.num_workers() as f64;
        let wbit = 1u64 << worker;
        let hbit = 1u64 << self.shape.host_of(worker);
        let missing_dev = (self.device_reps[u as usize] & wbit == 0) as u32
            + (self.device_reps[v as usize] & wbit == 0) as u32;
        let missing_host = (self.host_reps[u as usize] & hbit == 0) as u32
            + (self.host_reps[v as usize] & hbit == 0) as u32;
        let edge_load =
            self.edge_counts[worker as usize] as f64 / (self.total_edges as f64 / p);
        let vertex_load =
            self.vertex_counts[worker as usize] as f64 / (self.total_vertices as f64 / p);
        (1.0 - self.params.gamma) * missing_dev as f64
            + self.params.gamma * missing_host as f64
            + self.params.alpha * edge_load
            + self.params.beta * vertex_load
    }

    /// Lowest-eva worker; ties break to the lowest rank.
    pub fn best_worker(&self, u: u32, v: u32) -> u32 {
        let mut best = 0u32;
        let mut best_score = f64::INFINITY;
        for i in 0..self.shape.num_workers() {
            let s = self.eva(u, v, i);
            if s < best_score {
                best_score = s;
                best = i;
            }
        }
        best
    }

    /// Records edge (u, v) on `worker`, creating replicas and masters as
    /// needed.
    pub fn assign(&mut self, u: u32, v: u32, worker: u32) {
        self.edge_counts[worker as usize] += 1;
        for w in [u, v] {
            self.place_replica(w, worker);
        }
    }

    fn place_replica(&mut self, vertex: u32, worker: u32) {
        let wbit = 1u64 << worker;
        if self.device_reps[vertex as usize] & wbit == 0 {
            self.device_reps[vertex as usize] |= wbit;
            self.vertex_counts[worker as usize] += 1;
            if self.owner[vertex as usize] < 0 {
                self.owner[vertex as usize] = worker as i64;
            }
        }
        self.host_reps[vertex as usize] |= 1u64 << self.shape.host_of(worker);
    }
}

// ---------------------------------------------------------------------------
// Plan
// ---------------------------------------------------------------------------

/// One worker's slice of the plan. Local vertex ids are positions in
/// `local_to_global`, which is strictly ascending, so ascending local order
/// equals ascending global order.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerPart {
    pub local_to_global: Vec<u32>,
    pub master: Vec<bool>,
    /// Assigned undirected edges in local ids, ascending.
    pub edges: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub shape: ClusterShape,
    pub num_vertices: usize,
    /// Global undirected edge count.
    pub num_edges: usize,
    /// Master worker per global vertex.
    pub owner: Vec<u32>,
    /// Mirror workers per global vertex, ascending, owner excluded.
    pub mirrors: Vec<Vec<u32>>,
    pub parts: Vec<WorkerPart>,
}

impl PartitionPlan {
    /// Validates per-worker parts and derives the owner and mirror tables.
    pub fn from_parts(
        shape: ClusterShape,
        num_vertices: usize,
        num_edges: usize,
        parts: Vec<WorkerPart>,
    ) -> Result<PartitionPlan> {
        if parts.len() != shape.num_workers() as usize {
            return Err(Error::data(format!(
                "plan holds {} worker parts but the shape has {} workers",
                parts.len(),
                shape.num_workers()
            )));
        }
        let mut owner: Vec<i64> = vec![-1; num_vertices];
        let mut mirrors: Vec<Vec<u32>> = vec![Vec::new(); num_vertices];
        let mut assigned_edges = 0usize;
        for (w, part) in parts.iter().enumerate() {
            if part.master.len() != part.local_to_global.len() {
                return Err(Error::data(format!(
                    "worker {w}: master flags do not cover the local vertices"
                )));
            }
            let mut prev: Option<u32> = None;
            for (&g, &is_master) in part.local_to_global.iter().zip(&part.master) {
                if g as usize >= num_vertices {
                    return Err(Error::data(format!(
                        "worker {w}: global vertex {g} out of range"
                    )));
                }
                if let Some(p) = prev {
                    if g <= p {
                        return Err(Error::data(format!(
                            "worker {w}: local_to_global must be strictly ascending"
                        )));
                    }
                }
                prev = Some(g);
                if is_master {
                    if owner[g as usize] >= 0 {
                        return Err(Error::data(format!(
                            "vertex {g} has masters on workers {} and {w}",
                            owner[g as usize]
                        )));
                    }
                    owner[g as usize] = w as i64;
                } else {
                    mirrors[g as usize].push(w as u32);
                }
            }
            let local_n = part.local_to_global.len() as u32;
            for &(lu, lv) in &part.edges {
                if lu >= local_n || lv >= local_n {
                    return Err(Error::data(format!(
                        "worker {w}: edge ({lu}, {lv}) outside its local vertex range"
                    )));
                }
                if lu == lv {
                    return Err(Error::data(format!("worker {w}: local self loop on {lu}")));
                }
            }
            assigned_edges += part.edges.len();
        }
        if assigned_edges != num_edges {
            return Err(Error::data(format!(
                "plan assigns {assigned_edges} edges but declares {num_edges}"
            )));
        }
        let owner: Vec<u32> = owner
            .into_iter()
            .enumerate()
            .map(|(g, o)| {
                if o < 0 {
                    Err(Error::data(format!("vertex {g} has no master replica")))
                } else {
                    Ok(o as u32)
                }
            })
            .collect::<Result<_>>()?;
        Ok(PartitionPlan { shape, num_vertices, num_edges, owner, mirrors, parts })
    }

    /// Replica count of a global vertex.
    pub fn replica_count(&self, g: u32) -> usize {
        1 + self.mirrors[g as usize].len()
    }
}

/// Summary statistics of a plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    /// Sum of per-worker replica counts over the vertex count.
    pub replication_factor: f64,
    /// Max worker edge count over the balanced share |E|/p.
    pub edge_imbalance: f64,
    /// Max worker replica count over the balanced share of all replicas.
    pub vertex_imbalance: f64,
    /// Max per-worker count of same-host gather+scatter messages per sync.
    pub inner_max: u64,
    /// Max per-worker count of cross-host gather+scatter messages per sync.
    pub outer_max: u64,
    pub inner_total: u64,
    pub outer_total: u64,
}

/// Streams the graph's edges in seeded random order.
pub fn partition(
    graph: &Graph,
    shape: ClusterShape,
    params: EvaParams,
    order_seed: u64,
) -> PartitionPlan {
    let mut edges = graph.edges();
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    edges.shuffle(&mut rng);
    partition_with_order(graph, shape, params, &edges)
}

/// Streams the given edges in their given order. Exposed so the greedy rule
/// can be checked against an independent reimplementation.
pub fn partition_with_order(
    graph: &Graph,
    shape: ClusterShape,
    params: EvaParams,
    edges: &[(u32, u32)],
) -> PartitionPlan {
    let n = graph.num_vertices();
    let p = shape.num_workers() as usize;
    let mut state = PartitionerState::new(shape, params, n, graph.num_edges());
    let mut assigned: Vec<Vec<(u32, u32)>> = vec![Vec::new(); p];
    for &(u, v) in edges {
        let w = state.best_worker(u, v);
        state.assign(u, v, w);
        assigned[w as usize].push((u.min(v), u.max(v)));
    }
    // Vertices untouched by any edge still need a home: masters are placed on
    // the emptiest worker so they participate in the loss like everyone else.
    for g in 0..n {
        if state.device_reps[g] == 0 {
            let w = (0..p as u32).min_by_key(|&i| (state.vertex_counts[i as usize], i)).unwrap();
            state.place_replica(g as u32, w);
        }
    }

    let mut parts = Vec::with_capacity(p);
    for w in 0..p {
        let wbit = 1u64 << w;
        let local_to_global: Vec<u32> =
            (0..n as u32).filter(|&g| state.device_reps[g as usize] & wbit != 0).collect();
        let global_to_local: BTreeMap<u32, u32> = local_to_global
            .iter()
            .enumerate()
            .map(|(l, &g)| (g, l as u32))
            .collect();
        let master: Vec<bool> =
            local_to_global.iter().map(|&g| state.owner[g as usize] == w as i64).collect();
        let mut edges: Vec<(u32, u32)> = assigned[w]
            .iter()
            .map(|&(u, v)| (global_to_local[&u], global_to_local[&v]))
            .collect();
        edges.sort_unstable();
        parts.push(WorkerPart { local_to_global, master, edges });
    }
    PartitionPlan::from_parts(shape, n, graph.num_edges(), parts)
        .expect("streaming produced an invalid plan")
}

/// Replication factor, balance, and per-sync communication pair counts.
pub fn compute_stats(plan: &PartitionPlan) -> PartitionStats {
    let p = plan.shape.num_workers() as usize;
    let replicas: Vec<u64> =
        plan.parts.iter().map(|part| part.local_to_global.len() as u64).collect();
    let edge_counts: Vec<u64> = plan.parts.iter().map(|part| part.edges.len() as u64).collect();
    let total_replicas: u64 = replicas.iter().sum();

    let mut inner = vec![0u64; p];
    let mut outer = vec![0u64; p];
    for g in 0..plan.num_vertices as u32 {
        let m = plan.owner[g as usize];
        for &j in &plan.mirrors[g as usize] {
            // Gather j -> m and scatter m -> j: one sent message each.
            if plan.shape.host_of(j) == plan.shape.host_of(m) {
                inner[j as usize] += 1;
                inner[m as usize] += 1;
            } else {
                outer[j as usize] += 1;
                outer[m as usize] += 1;
            }
        }
    }

    let edge_share = plan.num_edges as f64 / p as f64;
    let replica_share = total_replicas as f64 / p as f64;
    PartitionStats {
        replication_factor: total_replicas as f64 / plan.num_vertices as f64,
        edge_imbalance: if plan.num_edges == 0 {
            1.0
        } else {
            edge_counts.iter().copied().max().unwrap_or(0) as f64 / edge_share
        },
        vertex_imbalance: if total_replicas == 0 {
            1.0
        } else {
            replicas.iter().copied().max().unwrap_or(0) as f64 / replica_share
        },
        inner_max: inner.iter().copied().max().unwrap_or(0),
        outer_max: outer.iter().copied().max().unwrap_or(0),
        inner_total: inner.iter().sum(),
        outer_total: outer.iter().sum(),
    }
}

// ---------------------------------------------------------------------------
// Plan directory
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WorkerManifest {
    vertices: usize,
    edges: usize,
}

#[derive(Serialize, Deserialize)]
struct PlanManifest {
    format_version: u32,
    num_hosts: u32,
    gpus_per_host: u32,
    num_vertices: usize,
    num_edges: usize,
    workers: Vec<WorkerManifest>,
    stats: PartitionStats,
}

/// Writes `manifest.json` plus per-worker `worker<i>.map` (one
/// `global master_flag` line per local vertex) and `worker<i>.edges`
/// (local `u v` pairs).
pub fn write_plan(plan: &PartitionPlan, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = PlanManifest {
        format_version: PLAN_FORMAT_VERSION,
        num_hosts: plan.shape.num_hosts,
        gpus_per_host: plan.shape.gpus_per_host,
        num_vertices: plan.num_vertices,
        num_edges: plan.num_edges,
        workers: plan
            .parts
            .iter()
            .map(|p| WorkerManifest { vertices: p.local_to_global.len(), edges: p.edges.len() })
            .collect(),
        stats: compute_stats(plan),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::protocol(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;

    for (w, part) in plan.parts.iter().enumerate() {
        let map = fs::File::create(dir.join(format!("worker{w}.map")))?;
        let mut map = BufWriter::new(map);
        for (&g, &m) in part.local_to_global.iter().zip(&part.master) {
            writeln!(map, "{g} {}", m as u8)?;
        }
        map.flush()?;
        let edges = fs::File::create(dir.join(format!("worker{w}.edges")))?;
        let mut edges_w = BufWriter::new(edges);
        for &(u, v) in &part.edges {
            writeln!(edges_w, "{u} {v}")?;
        }
        edges_w.flush()?;
    }
    Ok(())
}

pub fn load_plan(dir: &Path) -> Result<PartitionPlan> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: PlanManifest =
        serde_json::from_str(&json).map_err(|e| Error::data(format!("bad manifest: {e}")))?;
    if manifest.format_version != PLAN_FORMAT_VERSION {
        return Err(Error::data(format!(
            "plan format version {} unsupported",
            manifest.format_version
        )));
    }
    let shape = ClusterShape::new(manifest.num_hosts, manifest.gpus_per_host);
    if manifest.workers.len() != shape.num_workers() as usize {
        return Err(Error::data("manifest worker list does not match the cluster shape"));
    }

    let mut parts = Vec::with_capacity(manifest.workers.len());
    for (w, wm) in manifest.workers.iter().enumerate() {
        let map_path = dir.join(format!("worker{w}.map"));
        let file = fs::File::open(&map_path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", map_path.display())))?;
        let mut local_to_global = Vec::with_capacity(wm.vertices);
        let mut master = Vec::with_capacity(wm.vertices);
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let mut tok = line.split_whitespace();
            let g: u32 = tok
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::data(format!("worker{w}.map line {}: bad entry", idx + 1)))?;
            let flag: u8 = tok
                .next()
                .and_then(|t| t.parse().ok())
                .filter(|&f| f <= 1)
                .ok_or_else(|| Error::data(format!("worker{w}.map line {}: bad flag", idx + 1)))?;
            local_to_global.push(g);
            master.push(flag == 1);
        }
        if local_to_global.len() != wm.vertices {
            return Err(Error::data(format!(
                "worker{w}.map holds {} vertices, manifest says {}",
                local_to_global.len(),
                wm.vertices
            )));
        }
        let edges_path = dir.join(format!("worker{w}.edges"));
        let file = fs::File::open(&edges_path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", edges_path.display())))?;
        let mut edges = Vec::with_capacity(wm.edges);
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let mut tok = line.split_whitespace();
            let parse = |t: Option<&str>| -> Result<u32> {
                t.and_then(|t| t.parse().ok()).ok_or_else(|| {
                    Error::data(format!("worker{w}.edges line {}: bad pair", idx + 1))
                })
            };
            let u = parse(tok.next())?;
            let v = parse(tok.next())?;
            edges.push((u, v));
        }
        if edges.len() != wm.edges {
            return Err(Error::data(format!(
                "worker{w}.edges holds {} edges, manifest says {}",
                edges.len(),
                wm.edges
            )));
        }
        parts.push(WorkerPart { local_to_global, master, edges });
    }
    PartitionPlan::from_parts(shape, manifest.num_vertices, manifest.num_edges, parts)
}
