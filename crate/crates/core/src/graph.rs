//! Directed sensor graph: Gaussian-kernel adjacency, degree views, and the
//! transition and energy operators derived from them.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// One directed route between two sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub from: String,
    pub to: String,
    /// Travel distance in meters.
    pub dist: f64,
}

/// Kernel bandwidth for [`build_adjacency`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma {
    /// Population standard deviation of every provided distance.
    Auto,
    Value(f64),
}

impl std::str::FromStr for Sigma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Sigma::Auto);
        }
        s.parse::<f64>()
            .map(Sigma::Value)
            .map_err(|_| Error::invalid(format!("sigma must be `auto` or a number, got `{s}`")))
    }
}

/// Directed weighted adjacency over `N` sensors.
///
/// Both `A` and `Aᵀ` are stored so row-major products are available for
/// either direction.
#[derive(Debug, Clone)]
pub struct WeightedDigraph {
    node_ids: Vec<String>,
    adjacency: CsrMatrix,
    adjacency_t: CsrMatrix,
    out_degree: Vec<f64>,
    in_degree: Vec<f64>,
    sigma: Option<f64>,
    kappa: Option<f64>,
}

impl WeightedDigraph {
    /// Wraps an adjacency matrix, checking the weight invariants.
    pub fn from_adjacency(node_ids: Vec<String>, adjacency: CsrMatrix) -> Result<Self> {
        let n = node_ids.len();
        if adjacency.shape() != (n, n) {
            return Err(Error::shape(format!(
                "adjacency is {:?} but there are {n} nodes",
                adjacency.shape()
            )));
        }
        for (i, j, w) in adjacency.triplets() {
            if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!("edge ({i}, {j}) has weight {w} outside [0, 1]")));
            }
            if i == j {
                return Err(Error::invalid(format!("self-loop at node {i}")));
            }
        }
        let mut seen = HashMap::with_capacity(n);
        for (i, id) in node_ids.iter().enumerate() {
            if seen.insert(id.as_str(), i).is_some() {
                return Err(Error::invalid(format!("duplicate node id `{id}`")));
            }
        }
        let adjacency_t = adjacency.transpose();
        let out_degree = adjacency.row_sums();
        let in_degree = adjacency_t.row_sums();
        Ok(WeightedDigraph {
            node_ids,
            adjacency,
            adjacency_t,
            out_degree,
            in_degree,
            sigma: None,
            kappa: None,
        })
    }

    /// Graph with anonymous ids `"0".."N-1"` from `(from, to, weight)` edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let ids = (0..n).map(|i| i.to_string()).collect();
        WeightedDigraph::from_adjacency(ids, CsrMatrix::from_triplets(n, n, edges))
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|x| x == id)
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn adjacency_t(&self) -> &CsrMatrix {
        &self.adjacency_t
    }

    pub fn out_degree(&self) -> &[f64] {
        &self.out_degree
    }

    pub fn in_degree(&self) -> &[f64] {
        &self.in_degree
    }

    pub fn total_degree(&self) -> Vec<f64> {
        self.out_degree
            .iter()
            .zip(&self.in_degree)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz()
    }

    /// Kernel bandwidth used at construction, when built from distances.
    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn kappa(&self) -> Option<f64> {
        self.kappa
    }

    /// Nodes with no incident edge in either direction.
    pub fn isolated_nodes(&self) -> Vec<usize> {
        self.total_degree()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency == self.adjacency_t
    }

    /// Subgraph induced by `nodes` (in the given order) with degrees recomputed.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> WeightedDigraph {
        let adjacency = self.adjacency.submatrix(nodes, nodes);
        let ids = nodes.iter().map(|&i| self.node_ids[i].clone()).collect();
        let mut g = WeightedDigraph::from_adjacency(ids, adjacency)
            .expect("induced subgraph of a valid graph is valid");
        g.sigma = self.sigma;
        g.kappa = self.kappa;
        g
    }

    /// Relabels nodes so that new node `k` is old node `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> WeightedDigraph {
        assert_eq!(order.len(), self.len());
        self.induced_subgraph(order)
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            node_ids: self.node_ids.clone(),
            sigma: self.sigma,
            kappa: self.kappa,
            edges: self.adjacency.triplets().collect(),
        }
    }

    pub fn from_file(file: GraphFile) -> Result<Self> {
        let n = file.node_ids.len();
        if let Some(&(i, j, _)) = file.edges.iter().find(|(i, j, _)| *i >= n || *j >= n) {
            return Err(Error::invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        let mut g =
            WeightedDigraph::from_adjacency(file.node_ids, CsrMatrix::from_triplets(n, n, &file.edges))?;
        g.sigma = file.sigma;
        g.kappa = file.kappa;
        Ok(g)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())
            .map_err(|e| Error::invalid(format!("graph serialisation: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GraphFile = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        WeightedDigraph::from_file(file)
    }
}

/// Serialised graph: node order plus the nonzero adjacency entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphFile {
    pub node_ids: Vec<String>,
    pub sigma: Option<f64>,
    pub kappa: Option<f64>,
    pub edges: Vec<(usize, usize, f64)>,
}

/// Population standard deviation of the finite entries.
pub fn population_std(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Builds `A_ij = exp(-d_ij² / σ²)` for every listed route with `d_ij ≤ κ`.
///
/// `kappa = None` disables thresholding. Self-pairs are accepted but never
/// produce an edge.
pub fn build_adjacency(
    node_ids: &[String],
    distances: &[DistanceRecord],
    sigma: Sigma,
    kappa: Option<f64>,
) -> Result<WeightedDigraph> {
    if distances.is_empty() {
        return Err(Error::invalid("distance list is empty"));
    }
    if let Some(k) = kappa {
        if !(k > 0.0) {
            return Err(Error::invalid(format!("kappa must be positive, got {k}")));
        }
    }
    let index: HashMap<&str, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if index.len() != node_ids.len() {
        return Err(Error::invalid("node universe contains duplicate ids"));
    }

    let mut pairs: HashMap<(usize, usize), f64> = HashMap::with_capacity(distances.len());
    for (k, rec) in distances.iter().enumerate() {
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("distance row {k}: unknown node id `{id}`")))
        };
        let (i, j) = (lookup(&rec.from)?, lookup(&rec.to)?);
        if !(rec.dist >= 0.0) || !rec.dist.is_finite() {
            return Err(Error::invalid(format!(
                "distance row {k}: distance {} is not a finite nonnegative number",
                rec.dist
            )));
        }
        if let Some(prev) = pairs.insert((i, j), rec.dist) {
            return Err(Error::invalid(format!(
                "duplicate route {} -> {} (distances {prev} and {})",
                rec.from, rec.to, rec.dist
            )));
        }
    }

    let sigma = match sigma {
        Sigma::Value(s) => s,
        Sigma::Auto => population_std(distances.iter().map(|r| r.dist)),
    };
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }

    let mut trips: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .filter(|&((i, j), d)| i != j && kappa.is_none_or(|k| d <= k))
        .map(|((i, j), d)| (i, j, (-(d * d) / (sigma * sigma)).exp()))
        .collect();
    trips.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let n = node_ids.len();
    let mut g = WeightedDigraph::from_adjacency(node_ids.to_vec(), CsrMatrix::from_triplets(n, n, &trips))?;
    g.sigma = Some(sigma);
    g.kappa = kappa;
    let isolated = g.isolated_nodes();
    if !isolated.is_empty() {
        log::warn!("{} isolated node(s) in graph: {:?}", isolated.len(), isolated);
    }
    Ok(g)
}

/// Which operator a [`TransitionMatrix`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    /// `(D_o + D_I)^{-1} (A + Aᵀ)`
    Coupled,
    /// `(D_o + D_I)^{-1} A`, pulls from downstream neighbours.
    Congestion,
    /// `(D_o + D_I)^{-1} Aᵀ`, pulls from upstream neighbours.
    FreeFlow,
    /// `D^{-1/2} (A + Aᵀ) D^{-1/2}` with `D = D_o + D_I`.
    SymNormalized,
}

#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pub kind: TransitionKind,
    pub matrix: CsrMatrix,
}

fn inverse_total_degree(g: &WeightedDigraph) -> Vec<f64> {
    let deg = g.total_degree();
    let zero: Vec<usize> = (0..deg.len()).filter(|&i| deg[i] == 0.0).collect();
    if !zero.is_empty() {
        log::warn!("zero-degree nodes get empty transition rows: {zero:?}");
    }
    deg.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect()
}

pub fn transition_coupled(g: &WeightedDigraph) -> TransitionMatrix {
    let inv = inverse_total_degree(g);
    let sym = g.adjacency().add_scaled(1.0, g.adjacency_t());
    TransitionMatrix {
        kind: TransitionKind::Coupled,
        matrix: sym.scale_rows(&inv),
    }
}

/// Returns `(congestion, free_flow)`; their sum is [`transition_coupled`].
pub fn transition_decoupled(g: &WeightedDigraph) -> (TransitionMatrix, TransitionMatrix) {
    let inv = inverse_total_degree(g);
    (
        TransitionMatrix {
            kind: TransitionKind::Congestion,
            matrix: g.adjacency().scale_rows(&inv),
        },
        TransitionMatrix {
            kind: TransitionKind::FreeFlow,
            matrix: g.adjacency_t().scale_rows(&inv),
        },
    )
}

pub fn transition_sym_normalized(g: &WeightedDigraph) -> TransitionMatrix {
    let inv_sqrt: Vec<f64> = g
        .total_degree()
        .iter()
        .map(|&d| if d > 0.0 { d.sqrt().recip() } else { 0.0 })
        .collect();
    let sym = g.adjacency().add_scaled(1.0, g.adjacency_t());
    let trips: Vec<_> = sym
        .triplets()
        .map(|(i, j, v)| (i, j, v * inv_sqrt[i] * inv_sqrt[j]))
        .collect();
    TransitionMatrix {
        kind: TransitionKind::SymNormalized,
        matrix: CsrMatrix::from_triplets(g.len(), g.len(), &trips),
    }
}

/// `P = (D_o + D_I) − (A + Aᵀ)`, the Hessian of the directed Dirichlet energy.
pub fn energy_operator(g: &WeightedDigraph) -> CsrMatrix {
    let n = g.len();
    let deg = g.total_degree();
    let diag: Vec<_> = (0..n).map(|i| (i, i, deg[i])).collect();
    let d = CsrMatrix::from_triplets(n, n, &diag);
    d.add_scaled(-1.0, &g.adjacency().add_scaled(1.0, g.adjacency_t()))
}

/// Split of the node set into observed (boundary) and unobserved nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePartition {
    n: usize,
    observed: Vec<usize>,
    unobserved: Vec<usize>,
    is_observed: Vec<bool>,
}

impl NodePartition {
    pub fn new(n: usize, observed: &[usize]) -> Result<Self> {
        let mut is_observed = vec![false; n];
        for &i in observed {
            if i >= n {
                return Err(Error::invalid(format!("observed index {i} out of range for {n} nodes")));
            }
            is_observed[i] = true;
        }
        let observed: Vec<usize> = (0..n).filter(|&i| is_observed[i]).collect();
        if observed.is_empty() {
            return Err(Error::invalid("observed set is empty"));
        }
        let unobserved = (0..n).filter(|&i| !is_observed[i]).collect();
        Ok(NodePartition {
            n,
            observed,
            unobserved,
            is_observed,
        })
    }

    pub fn from_mask(is_observed: &[bool]) -> Result<Self> {
        let obs: Vec<usize> = (0..is_observed.len()).filter(|&i| is_observed[i]).collect();
        NodePartition::new(is_observed.len(), &obs)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn unobserved(&self) -> &[usize] {
        &self.unobserved
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.is_observed[i]
    }

    pub fn observed_mask(&self) -> &[bool] {
        &self.is_observed
    }

    /// Observed indices first, then unobserved.
    pub fn permutation(&self) -> Vec<usize> {
        self.observed.iter().chain(&self.unobserved).copied().collect()
    }
}

/// Blocks `(P^{uo}, P^{uu})` of the energy operator.
pub fn partition_blocks(g: &WeightedDigraph, part: &NodePartition) -> Result<(CsrMatrix, CsrMatrix)> {
    if part.len() != g.len() {
        return Err(Error::shape(format!(
            "partition covers {} nodes, graph has {}",
            part.len(),
            g.len()
        )));
    }
    if part.observed().is_empty() {
        return Err(Error::invalid("observed set is empty"));
    }
    let p = energy_operator(g);
    Ok((
        p.submatrix(part.unobserved(), part.observed()),
        p.submatrix(part.unobserved(), part.unobserved()),
    ))
}

pub fn read_node_csv(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == "id")
        .ok_or_else(|| Error::parse(path, 1, "missing `id` column"))?;
    let mut ids = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id = rec
            .get(col)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::parse(path, line, "empty id"))?;
        ids.push(id.to_string());
    }
    Ok(ids)
}

pub fn read_distance_csv(path: &Path) -> Result<Vec<DistanceRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    for h in ["from", "to", "dist"] {
        if !headers.iter().any(|x| x == h) {
            return Err(Error::parse(path, 1, format!("missing `{h}` column")));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<DistanceRecord>() {
        out.push(rec.map_err(|e| csv_err(path, e))?);
    }
    Ok(out)
}

pub fn write_node_csv(path: &Path, ids: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["id"]).map_err(|e| csv_err(path, e))?;
    for id in ids {
        w.write_record([id]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_distance_csv(path: &Path, rows: &[DistanceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::parse(path, line, format!("{kind:?}")),
    }
}
