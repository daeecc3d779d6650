//! Graph storage, normalization, file formats, and synthetic fixtures.
//!
//! Graphs are undirected and simple: no self loops, duplicate edges collapse.
//! The normalized adjacency keeps the topology as-is (no self-loop
//! augmentation); entry (u, v) carries 1/sqrt(deg(u) deg(v)).

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, DenseMatrix, Scalar};

pub type FeatureMatrix<T> = DenseMatrix<T>;

pub const FEATURE_MAGIC: &[u8; 4] = b"CDFG";

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// Undirected simple graph in CSR form (both directions stored, neighbor
/// lists ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_vertices: usize,
    num_edges: usize,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl Graph {
    /// Builds a graph from an edge list. Duplicates collapse; self loops are
    /// rejected.
    pub fn from_edges(num_vertices: usize, edges: &[(u32, u32)]) -> Result<Graph> {
        if num_vertices == 0 {
            return Err(Error::data("graph must have at least one vertex"));
        }
        let mut canon: Vec<(u32, u32)> = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u == v {
                return Err(Error::data(format!("self loop on vertex {u}")));
            }
            if u as usize >= num_vertices || v as usize >= num_vertices {
                return Err(Error::data(format!(
                    "edge ({u}, {v}) references a vertex >= {num_vertices}"
                )));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        canon.dedup();

        let mut degrees = vec![0usize; num_vertices];
        for &(u, v) in &canon {
            degrees[u as usize] += 1;
            degrees[v as usize] += 1;
        }
        let mut offsets = Vec::with_capacity(num_vertices + 1);
        offsets.push(0);
        for d in &degrees {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut cursor = offsets.clone();
        let mut neighbors = vec![0u32; 2 * canon.len()];
        for &(u, v) in &canon {
            neighbors[cursor[u as usize]] = v;
            cursor[u as usize] += 1;
            neighbors[cursor[v as usize]] = u;
            cursor[v as usize] += 1;
        }
        for u in 0..num_vertices {
            neighbors[offsets[u]..offsets[u + 1]].sort_unstable();
        }
        Ok(Graph { num_vertices, num_edges: canon.len(), offsets, neighbors })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn degree(&self, u: u32) -> usize {
        self.offsets[u as usize + 1] - self.offsets[u as usize]
    }

    pub fn neighbors(&self, u: u32) -> &[u32] {
        &self.neighbors[self.offsets[u as usize]..self.offsets[u as usize + 1]]
    }

    /// Undirected edges, ascending by (u, v) with u < v.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.num_edges);
        for u in 0..self.num_vertices as u32 {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Symmetric degree-normalized adjacency: entry (u, v) is
    /// 1/sqrt(deg(u) deg(v)). Isolated vertices yield empty rows.
    pub fn normalize<T: Scalar>(&self) -> CsrMatrix<T> {
        let rows: Vec<Vec<(u32, T)>> = (0..self.num_vertices as u32)
            .map(|u| {
                let du = self.degree(u) as f64;
                self.neighbors(u)
                    .iter()
                    .map(|&v| {
                        let dv = self.degree(v) as f64;
                        (v, T::from_f64(1.0 / (du * dv).sqrt()))
                    })
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(self.num_vertices, &rows)
    }
}

// ---------------------------------------------------------------------------
// Labels and masks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Train,
    Val,
    Test,
    None,
}

impl Mask {
    pub fn as_char(self) -> char {
        match self {
            Mask::Train => 't',
            Mask::Val => 'v',
            Mask::Test => 's',
            Mask::None => 'n',
        }
    }

    pub fn from_char(c: char) -> Option<Mask> {
        match c {
            't' => Some(Mask::Train),
            'v' => Some(Mask::Val),
            's' => Some(Mask::Test),
            'n' => Some(Mask::None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub masks: Vec<Mask>,
}

impl LabelSet {
    pub fn new(labels: Vec<u32>, num_classes: usize, masks: Vec<Mask>) -> Result<LabelSet> {
        if labels.len() != masks.len() {
            return Err(Error::data("labels and masks must cover the same vertices"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::data(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(LabelSet { labels, num_classes, masks })
    }

    pub fn count(&self, mask: Mask) -> usize {
        self.masks.iter().filter(|&&m| m == mask).count()
    }
}

// ---------------------------------------------------------------------------
// Text edge list
// ---------------------------------------------------------------------------

/// Reads a whitespace edge list: optional `n <count>` header, one `u v` pair
/// per line, `#` comments and blank lines skipped.
pub fn load_edge_list(path: &Path) -> Result<Graph> {
    let file = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut declared_n: Option<usize> = None;
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut max_id: Option<u32> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let body = match line.find('#') {
            Some(p) => &line[..p],
            None => &line[..],
        };
        let mut tokens = body.split_whitespace();
        let Some(first) = tokens.next() else { continue };
        if first == "n" {
            if declared_n.is_some() || !edges.is_empty() {
                return Err(Error::data(format!(
                    "line {lineno}: header must be the first content line"
                )));
            }
            let n: usize = tokens
                .next()
                .ok_or_else(|| Error::data(format!("line {lineno}: header missing count")))?
                .parse()
                .map_err(|_| Error::data(format!("line {lineno}: bad vertex count")))?;
            if tokens.next().is_some() {
                return Err(Error::data(format!("line {lineno}: trailing tokens after header")));
            }
            declared_n = Some(n);
            continue;
        }
        let u: u32 = first
            .parse()
            .map_err(|_| Error::data(format!("line {lineno}: bad vertex id {first:?}")))?;
        let vtok = tokens
            .next()
            .ok_or_else(|| Error::data(format!("line {lineno}: edge missing second endpoint")))?;
        let v: u32 = vtok
            .parse()
            .map_err(|_| Error::data(format!("line {lineno}: bad vertex id {vtok:?}")))?;
        if tokens.next().is_some() {
            return Err(Error::data(format!("line {lineno}: trailing tokens after edge")));
        }
        if u == v {
            return Err(Error::data(format!("line {lineno}: self loop on vertex {u}")));
        }
        max_id = Some(max_id.map_or(u.max(v), |m| m.max(u).max(v)));
        edges.push((u, v));
    }

    let n = match declared_n {
        Some(n) => n,
        None => match max_id {
            Some(m) => m as usize + 1,
            None => return Err(Error::data("edge list is empty and has no header")),
        },
    };
    Graph::from_edges(n, &edges)
}

/// Writes the `n <count>` header and the ascending undirected edge list.
pub fn write_edge_list(graph: &Graph, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "n {}", graph.num_vertices())?;
    for (u, v) in graph.edges() {
        writeln!(w, "{u} {v}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary features
// ---------------------------------------------------------------------------

/// Writes features as: magic "CDFG", u32 vertex count, u32 dim, u8 dtype
/// (0 = f32, 1 = f64), then row-major little-endian values.
pub fn write_features<T: Scalar>(features: &FeatureMatrix<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + features.values().len() * (T::BITS as usize / 8));
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    buf.push(T::DTYPE_TAG);
    for &v in features.values() {
        v.write_le(&mut buf);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_features<T: Scalar>(path: &Path) -> Result<FeatureMatrix<T>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut header = [0u8; 13];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::data("feature file shorter than its header"))?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(Error::data("feature file magic mismatch"));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let dtype = header[12];
    if dtype != T::DTYPE_TAG {
        return Err(Error::data(format!(
            "feature dtype tag {dtype} does not match the requested precision"
        )));
    }
    let elem = T::BITS as usize / 8;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != n * dim * elem {
        return Err(Error::data(format!(
            "feature file body holds {} bytes, expected {}",
            body.len(),
            n * dim * elem
        )));
    }
    let mut values = Vec::with_capacity(n * dim);
    for chunk in body.chunks_exact(elem) {
        values.push(T::read_le(chunk));
    }
    Ok(DenseMatrix::from_vec(n, dim, values))
}

// ---------------------------------------------------------------------------
// Text labels
// ---------------------------------------------------------------------------

/// Writes one `label mask_char` pair per line; the line index is the vertex.
pub fn write_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for (l, m) in labels.labels.iter().zip(&labels.masks) {
        writeln!(w, "{l} {}", m.as_char())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let file = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let mut tokens = line.split_whitespace();
        let Some(ltok) = tokens.next() else {
            return Err(Error::data(format!("line {lineno}: empty label line")));
        };
        let label: u32 = ltok
            .parse()
            .map_err(|_| Error::data(format!("line {lineno}: bad label {ltok:?}")))?;
        let mtok = tokens
            .next()
            .ok_or_else(|| Error::data(format!("line {lineno}: missing mask")))?;
        let mask = mtok
            .chars()
            .next()
            .and_then(Mask::from_char)
            .filter(|_| mtok.len() == 1)
            .ok_or_else(|| Error::data(format!("line {lineno}: bad mask {mtok:?}")))?;
        if tokens.next().is_some() {
            return Err(Error::data(format!("line {lineno}: trailing tokens")));
        }
        labels.push(label);
        masks.push(mask);
    }
    if labels.is_empty() {
        return Err(Error::data("label file is empty"));
    }
    let num_classes = *labels.iter().max().unwrap() as usize + 1;
    LabelSet::new(labels, num_classes, masks)
}

// ---------------------------------------------------------------------------
// Synthetic fixtures
// ---------------------------------------------------------------------------

/// Preferential-attachment generator. Vertices below `edges_per_vertex` join
/// a clique-like seed; every later vertex attaches to `edges_per_vertex`
/// distinct existing vertices sampled proportionally to degree. The result
/// is connected with a heavy-tailed degree distribution.
pub fn gen_power_law(n: usize, edges_per_vertex: usize, seed: u64) -> Graph {
    assert!(edges_per_vertex >= 1, "each vertex must attach at least one edge");
    assert!(n >= edges_per_vertex + 1, "need more vertices than attachments");
    let m = edges_per_vertex;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(m * n);
    // Each edge endpoint lands here once, so uniform sampling from this list
    // is degree-proportional sampling.
    let mut endpoints: Vec<u32> = Vec::with_capacity(2 * m * n);

    for t in 1..m.min(n) {
        for u in 0..t {
            edges.push((u as u32, t as u32));
            endpoints.push(u as u32);
            endpoints.push(t as u32);
        }
    }
    let mut targets: Vec<u32> = Vec::with_capacity(m);
    for t in m..n {
        targets.clear();
        while targets.len() < m {
            let cand = endpoints[rng.gen_range(0..endpoints.len())];
            if cand != t as u32 && !targets.contains(&cand) {
                targets.push(cand);
            }
        }
        targets.sort_unstable();
        for &u in &*targets {
            edges.push((u, t as u32));
            endpoints.push(u);
            endpoints.push(t as u32);
        }
    }
    Graph::from_edges(n, &edges).expect("generator produced an invalid graph")
}

/// Per-coordinate standard deviation of the planted class centroids.
pub const CENTROID_SCALE: f64 = 24.0;

/// Plants labels by balanced multi-source BFS (round-robin frontier growth
/// from `num_classes` seed vertices), then draws per-class Gaussian centroids
/// and features `centroid[label] + noise * N(0, 1)`. Masks split 60/20/20 by
/// seeded shuffle. Labels follow graph proximity, so neighborhood averaging
/// preserves class signal.
pub fn gen_planted_features<T: Scalar>(
    graph: &Graph,
    num_classes: usize,
    feature_dim: usize,
    noise: f64,
    seed: u64,
) -> (FeatureMatrix<T>, LabelSet) {
    assert!(num_classes >= 2, "need at least two classes");
    assert!(feature_dim >= 1, "need at least one feature dimension");
    let n = graph.num_vertices();
    assert!(n >= num_classes, "need at least one vertex per class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Distinct seed vertices.
    let mut seeds: Vec<u32> = Vec::with_capacity(num_classes);
    while seeds.len() < num_classes {
        let cand = rng.gen_range(0..n as u32);
        if !seeds.contains(&cand) {
            seeds.push(cand);
        }
    }

    let mut labels: Vec<i64> = vec![-1; n];
    let mut frontiers: Vec<VecDeque<u32>> = Vec::with_capacity(num_classes);
    for (c, &s) in seeds.iter().enumerate() {
        labels[s as usize] = c as i64;
        frontiers.push(VecDeque::from([s]));
    }
    let mut remaining = n - num_classes;
    while remaining > 0 {
        let mut progressed = false;
        for c in 0..num_classes {
            // Claim one unlabeled neighbor for this class, if any remain
            // reachable from its frontier.
            while let Some(v) = frontiers[c].pop_front() {
                let mut claimed = None;
                for &w in graph.neighbors(v) {
                    if labels[w as usize] < 0 {
                        claimed = Some(w);
                        break;
                    }
                }
                if let Some(w) = claimed {
                    labels[w as usize] = c as i64;
                    frontiers[c].push_back(w);
                    frontiers[c].push_front(v);
                    remaining -= 1;
                    progressed = true;
                    break;
                }
            }
            if remaining == 0 {
                break;
            }
        }
        if !progressed {
            // Disconnected leftovers: deterministic round-robin.
            for (v, l) in labels.iter_mut().enumerate() {
                if *l < 0 {
                    *l = (v % num_classes) as i64;
                    remaining -= 1;
                }
            }
        }
    }
    let labels: Vec<u32> = labels.into_iter().map(|l| l as u32).collect();

    // Centroid scale sets how fast gradient descent moves at a given
    // learning rate (logit magnitudes grow with feature magnitudes). Scaled
    // standard normal lets full-batch SGD at lr 0.01 reach its plateau well
    // inside a 200-epoch budget while noise stays a small relative perturbation.
    let mut centroids = vec![0.0f64; num_classes * feature_dim];
    for c in centroids.iter_mut() {
        let draw: f64 = StandardNormal.sample(&mut rng);
        *c = CENTROID_SCALE * draw;
    }
    let mut values: Vec<T> = Vec::with_capacity(n * feature_dim);
    for v in 0..n {
        let base = labels[v] as usize * feature_dim;
        for d in 0..feature_dim {
            let eps: f64 = StandardNormal.sample(&mut rng);
            values.push(T::from_f64(centroids[base + d] + noise * eps));
        }
    }
    let features = DenseMatrix::from_vec(n, feature_dim, values);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut masks = vec![Mask::Test; n];
    for &v in &order[..n_train] {
        masks[v] = Mask::Train;
    }
    for &v in &order[n_train..n_train + n_val] {
        masks[v] = Mask::Val;
    }
    let labels = LabelSet::new(labels, num_classes, masks).expect("generated labels are valid");
    (features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn from_edges_dedups_and_sorts() {
        let g = Graph::from_edges(4, &[(2, 1), (1, 2), (0, 3), (3, 0), (0, 1)]).unwrap();
        assert_eq!(g.num_edges(), 3);
        assert_eq!(g.neighbors(0), &[1, 3]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        let total_degree: usize = (0..4).map(|u| g.degree(u)).sum();
        assert_eq!(total_degree, 2 * g.num_edges());
    }

    #[test]
    fn self_loop_rejected() {
        assert!(Graph::from_edges(3, &[(1, 1)]).is_err());
    }

    #[test]
    fn star_normalization_weight() {
        // Star: center 0 with leaves 1..3. Weight = 1/sqrt(3 * 1).
        let g = Graph::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let a = g.normalize::<f64>();
        let w = 1.0 / 3.0f64.sqrt();
        for (c, got) in a.row_entries(0) {
            assert!((got - w).abs() < 1e-15, "weight to leaf {c}");
        }
        assert!((w - 0.577_350_269_189_625_8).abs() < 1e-15);
    }

    #[test]
    fn isolated_vertex_has_empty_row() {
        let g = Graph::from_edges(3, &[(0, 1)]).unwrap();
        let a = g.normalize::<f64>();
        assert_eq!(a.row_entries(2).count(), 0);
    }

    #[test]
    fn edge_list_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.txt");
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
        write_edge_list(&g, &path).unwrap();
        let back = load_edge_list(&path).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn edge_list_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "n 4\n0 1\n2 x\n").unwrap();
        let err = load_edge_list(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "got: {err}");

        fs::write(&path, "0 1\n1 1\n").unwrap();
        let err = load_edge_list(&path).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("self loop"), "got: {err}");
    }

    #[test]
    fn edge_list_header_and_comments() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.txt");
        fs::write(&path, "# fixture\nn 6\n\n0 1 # pair\n4 5\n").unwrap();
        let g = load_edge_list(&path).unwrap();
        assert_eq!(g.num_vertices(), 6);
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn feature_file_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let f = DenseMatrix::from_rows(&[&[1.0f64, -2.5], &[0.0, 3.25]]);
        write_features(&f, &path).unwrap();
        let back: FeatureMatrix<f64> = load_features(&path).unwrap();
        assert_eq!(back, f);

        // Wrong precision is an error, not a silent cast.
        assert!(load_features::<f32>(&path).is_err());

        // Truncation is an error, not partial data.
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_features::<f64>(&path).is_err());
    }

    #[test]
    fn label_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.txt");
        let ls = LabelSet::new(
            vec![0, 2, 1, 1],
            3,
            vec![Mask::Train, Mask::Val, Mask::Test, Mask::None],
        )
        .unwrap();
        write_labels(&ls, &path).unwrap();
        let back = load_labels(&path).unwrap();
        assert_eq!(back, ls);
    }

    #[test]
    fn power_law_edge_count_and_connectivity() {
        let g = gen_power_law(1000, 3, 1);
        // Seed phase contributes m(m-1)/2 edges, each later vertex m more.
        assert_eq!(g.num_edges(), 3 + (1000 - 3) * 3);
        // Connected: BFS from 0 reaches everything.
        let mut seen = vec![false; 1000];
        let mut queue = VecDeque::from([0u32]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in g.neighbors(v) {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        assert_eq!(count, 1000);
    }

    #[test]
    fn power_law_heavy_tail() {
        let g = gen_power_law(1000, 3, 7);
        let mut degrees: Vec<usize> = (0..1000).map(|u| g.degree(u)).collect();
        degrees.sort_unstable();
        let median = degrees[500] as f64;
        let max = *degrees.last().unwrap() as f64;
        assert!(
            max > 10.0 * median,
            "expected a heavy tail, got max {max} median {median}"
        );
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(gen_power_law(200, 2, 9), gen_power_law(200, 2, 9));
        let g = gen_power_law(200, 2, 9);
        let (f1, l1) = gen_planted_features::<f64>(&g, 3, 8, 0.1, 4);
        let (f2, l2) = gen_planted_features::<f64>(&g, 3, 8, 0.1, 4);
        assert_eq!(f1, f2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn planted_features_linearly_separable() {
        // Nearest-centroid (a linear classifier) on raw features must clear
        // 90% train accuracy for the fixture to be trustworthy.
        let g = gen_power_law(2000, 3, 42);
        let (features, labels) = gen_planted_features::<f64>(&g, 4, 32, 0.1, 42);
        let dim = features.cols();
        let mut means = vec![0.0f64; 4 * dim];
        let mut counts = [0usize; 4];
        for v in 0..g.num_vertices() {
            if labels.masks[v] == Mask::Train {
                let c = labels.labels[v] as usize;
                counts[c] += 1;
                for (d, &x) in features.row(v).iter().enumerate() {
                    means[c * dim + d] += x;
                }
            }
        }
        for c in 0..4 {
            for d in 0..dim {
                means[c * dim + d] /= counts[c] as f64;
            }
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for v in 0..g.num_vertices() {
            if labels.masks[v] != Mask::Train {
                continue;
            }
            total += 1;
            let row = features.row(v);
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..4 {
                let dist: f64 = row
                    .iter()
                    .zip(&means[c * dim..(c + 1) * dim])
                    .map(|(&x, &m)| (x - m) * (x - m))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if best.1 == labels.labels[v] as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.9, "raw-feature probe accuracy {acc}");
    }

    #[test]
    fn planted_masks_split_60_20_20() {
        let g = gen_power_law(1000, 3, 3);
        let (_, labels) = gen_planted_features::<f64>(&g, 4, 8, 0.1, 3);
        assert_eq!(labels.count(Mask::Train), 600);
        assert_eq!(labels.count(Mask::Val), 200);
        assert_eq!(labels.count(Mask::Test), 200);
    }
}
