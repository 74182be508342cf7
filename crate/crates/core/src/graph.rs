//! Sensor graph and the K-hop locality mask used by the decoder.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_MASK_HOPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorGraph {
    node_ids: Vec<String>,
    adjacency: Matrix<f64>,
}

impl SensorGraph {
    pub fn new(node_ids: Vec<String>, adjacency: Matrix<f64>) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::Data("graph has no nodes".into()));
        }
        if adjacency.shape() != (n, n) {
            return Err(Error::Format(format!(
                "adjacency is {}x{} but there are {n} nodes",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        if let Some(bad) = adjacency
            .as_slice()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Data(format!(
                "adjacency entry {bad} is not a finite non-negative number"
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = node_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate node id {dup:?}")));
        }
        Ok(SensorGraph {
            node_ids,
            adjacency,
        })
    }

    /// Graph with ids `0..n` as strings.
    pub fn with_default_ids(adjacency: Matrix<f64>) -> Result<Self> {
        let ids = (0..adjacency.rows()).map(|i| i.to_string()).collect();
        Self::new(ids, adjacency)
    }

    /// Undirected path `0 – 1 – … – n-1` with unit weights.
    pub fn path(node_ids: Vec<String>) -> Result<Self> {
        let n = node_ids.len();
        let adjacency = Matrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 });
        Self::new(node_ids, adjacency)
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn adjacency(&self) -> &Matrix<f64> {
        &self.adjacency
    }

    fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(j, _)| j)
    }

    /// Writes the adjacency as CSV with a header row of node ids.
    pub fn to_csv(&self) -> String {
        let mut out = self.node_ids.join(",");
        out.push('\n');
        for r in 0..self.node_count() {
            let row: Vec<String> = self
                .adjacency
                .row(r)
                .iter()
                .map(|v| v.to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Boolean attention mask: `allowed[i][j]` iff `j` is within `hops` of `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KHopMask {
    n: usize,
    hops: usize,
    allowed: Vec<bool>,
}

impl KHopMask {
    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }

    /// Whether every pair allowed here is also allowed in `other`.
    pub fn is_subset_of(&self, other: &KHopMask) -> bool {
        self.n == other.n
            && self
                .allowed
                .iter()
                .zip(&other.allowed)
                .all(|(a, b)| !a || *b)
    }

    pub fn permuted(&self, perm: &[usize]) -> KHopMask {
        let n = self.n;
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = self.allowed(perm[i], perm[j]);
            }
        }
        KHopMask {
            n,
            hops: self.hops,
            allowed,
        }
    }
}

/// Nonzero pattern of `I + A + A² + … + A^hops`, computed by frontier
/// expansion: each hop ORs the neighbour rows of the newly reached nodes.
pub fn build_khop_mask(graph: &SensorGraph, hops: usize) -> Result<KHopMask> {
    if hops < 1 {
        return Err(Error::InvalidParameter(
            "mask hops must be at least 1".into(),
        ));
    }
    let n = graph.node_count();
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| graph.neighbours(i).collect()).collect();
    let mut allowed = vec![false; n * n];
    for src in 0..n {
        let row = &mut allowed[src * n..(src + 1) * n];
        row[src] = true;
        let mut frontier = vec![src];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in &neighbours[u] {
                    if !row[v] {
                        row[v] = true;
                        next.push(v);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
    }
    Ok(KHopMask { n, hops, allowed })
}

/// Parses an `N×N` comma-separated table, with an optional header row of
/// node ids. Without a header, ids default to `0..N`.
pub fn parse_adjacency(text: &str) -> Result<SensorGraph> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let Some(first) = lines.first() else {
        return Err(Error::Format("adjacency table is empty".into()));
    };
    let first_fields: Vec<&str> = first.split(',').map(str::trim).collect();
    let has_header = first_fields.iter().any(|f| f.parse::<f64>().is_err());
    let (ids, body) = if has_header {
        (
            Some(
                first_fields
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>(),
            ),
            &lines[1..],
        )
    } else {
        (None, &lines[..])
    };
    let n = body.len();
    let mut values = Vec::with_capacity(n * n);
    for (r, line) in body.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n {
            return Err(Error::Format(format!(
                "adjacency row {r} has {} columns, expected {n} (table must be square)",
                fields.len()
            )));
        }
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Format(format!("adjacency entry {f:?} is not a number")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Data(format!(
                    "adjacency entry {f:?} must be finite and non-negative"
                )));
            }
            values.push(v);
        }
    }
    let adjacency = Matrix::from_vec(n, n, values)?;
    match ids {
        Some(ids) if ids.len() != n => Err(Error::Format(format!(
            "header names {} nodes but table has {n} rows",
            ids.len()
        ))),
        Some(ids) => SensorGraph::new(ids, adjacency),
        None => SensorGraph::with_default_ids(adjacency),
    }
}

pub fn load_adjacency(path: &Path) -> Result<SensorGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_adjacency(&text)
}
