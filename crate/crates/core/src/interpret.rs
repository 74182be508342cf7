//! Attention-matrix analysis: scaling, node importance, influential nodes,
//! per-node influencer ranking and comparison across time periods.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Min-max rescaling of every entry into `[0, 1]`.
pub fn scale_unit_interval<S: Scalar>(matrix: &Matrix<S>) -> Result<Matrix<f64>> {
    if !matrix.is_finite() {
        return Err(Error::Data(
            "attention matrix has non-finite entries".into(),
        ));
    }
    let (lo, hi) = matrix
        .min_max()
        .ok_or_else(|| Error::Data("cannot rescale an empty matrix".into()))?;
    let (lo, hi) = (lo.as_f64(), hi.as_f64());
    if hi <= lo {
        return Err(Error::DegenerateScale(lo));
    }
    let m = matrix.cast::<f64>();
    Ok(m.map(|x| (x - lo) / (hi - lo)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Src,
    Tgt,
    Mem,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Src => "src",
            AttentionKind::Tgt => "tgt",
            AttentionKind::Mem => "mem",
        }
    }
}

/// A recorded attention layer; `layer: None` is the last one of its kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelector {
    pub kind: AttentionKind,
    /// 1-based.
    pub layer: Option<usize>,
}

impl Default for LayerSelector {
    fn default() -> Self {
        LayerSelector {
            kind: AttentionKind::Mem,
            layer: None,
        }
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{}-{l}", self.kind.name()),
            None => write!(f, "{}-last", self.kind.name()),
        }
    }
}

impl FromStr for LayerSelector {
    type Err = Error;

    /// `mem`, `mem-last`, `src-3`, ...
    fn from_str(s: &str) -> Result<Self> {
        let (kind, layer) = s.split_once('-').unwrap_or((s, "last"));
        let kind = match kind {
            "src" => AttentionKind::Src,
            "tgt" => AttentionKind::Tgt,
            "mem" => AttentionKind::Mem,
            _ => {
                return Err(Error::Config(format!(
                    "unknown attention kind in layer selector {s:?}"
                )))
            }
        };
        let layer = match layer {
            "last" => None,
            n => Some(
                n.parse::<usize>()
                    .ok()
                    .filter(|&l| l >= 1)
                    .ok_or_else(|| Error::Config(format!("bad layer number in selector {s:?}")))?,
            ),
        };
        Ok(LayerSelector { kind, layer })
    }
}

impl LayerSelector {
    /// Resolves to a concrete 1-based layer and its matrix.
    pub fn select<'a, S>(&self, record: &'a AttentionRecord<S>) -> Result<(usize, &'a Matrix<S>)> {
        let layers = match self.kind {
            AttentionKind::Src => &record.src,
            AttentionKind::Tgt => &record.tgt,
            AttentionKind::Mem => &record.mem,
        };
        if layers.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "this model records no {} attention",
                self.kind.name()
            )));
        }
        let l = self.layer.unwrap_or(layers.len());
        if l == 0 || l > layers.len() {
            return Err(Error::InvalidParameter(format!(
                "layer {l} requested, {} {} layers recorded",
                layers.len(),
                self.kind.name()
            )));
        }
        Ok((l, &layers[l - 1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub values: Vec<f64>,
    pub kind: AttentionKind,
    /// 1-based.
    pub layer: usize,
}

/// `I_k` = sum of column `k` plus sum of row `k` (the diagonal counts twice).
pub fn node_importance<S: Scalar>(matrix: &Matrix<S>) -> Result<Vec<f64>> {
    let n = matrix.rows();
    if matrix.cols() != n {
        return Err(Error::Shape(format!(
            "importance needs a square matrix, got {:?}",
            matrix.shape()
        )));
    }
    let cols = matrix.column_sums();
    let rows = matrix.row_sums();
    Ok((0..n)
        .map(|k| cols[(0, k)].as_f64() + rows[k].as_f64())
        .collect())
}

/// Nodes with `I_k > mean + std` (population std).
pub fn influential_nodes(importance: &[f64]) -> Vec<usize> {
    if importance.is_empty() {
        return Vec::new();
    }
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    let var = importance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + var.sqrt();
    (0..importance.len())
        .filter(|&k| importance[k] > threshold)
        .collect()
}

/// How influence onto a target node is read from an attention matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranking {
    /// `A[i][target]`: row `i` acting on column `target`.
    #[default]
    Column,
    /// `A[i][target] + A[target][i]`.
    RowPlusColumn,
}

impl FromStr for Ranking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(Ranking::Column),
            "row-plus-column" => Ok(Ranking::RowPlusColumn),
            _ => Err(Error::Config(format!(
                "unknown ranking {s:?} (column, row-plus-column)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfluenceQuery {
    pub target: usize,
    pub layer: LayerSelector,
    pub k: usize,
    pub ranking: Ranking,
}

impl InfluenceQuery {
    pub fn new(target: usize) -> Self {
        InfluenceQuery {
            target,
            layer: LayerSelector::default(),
            k: 10,
            ranking: Ranking::Column,
        }
    }
}

/// The `k` strongest influencers of `target` other than itself, strongest
/// first, ties broken by lower node index.
pub fn top_influencers<S: Scalar>(
    matrix: &Matrix<S>,
    target: usize,
    k: usize,
    ranking: Ranking,
) -> Result<Vec<(usize, f64)>> {
    let n = matrix.rows();
    if matrix.cols() != n {
        return Err(Error::Shape(format!(
            "influence needs a square matrix, got {:?}",
            matrix.shape()
        )));
    }
    if target >= n {
        return Err(Error::InvalidParameter(format!(
            "target node {target} out of range for {n} nodes"
        )));
    }
    let k = if k >= n {
        log::warn!("k = {k} exceeds the {} other nodes; truncating", n - 1);
        n - 1
    } else {
        k
    };
    let mut scored: Vec<(usize, f64)> = (0..n)
        .filter(|&i| i != target)
        .map(|i| {
            let w = match ranking {
                Ranking::Column => matrix[(i, target)].as_f64(),
                Ranking::RowPlusColumn => {
                    matrix[(i, target)].as_f64() + matrix[(target, i)].as_f64()
                }
            };
            (i, w)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodInfluencers {
    pub period: String,
    pub layer: usize,
    pub influencers: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodOverlap {
    pub first: String,
    pub second: String,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodComparison {
    pub query: InfluenceQuery,
    pub periods: Vec<PeriodInfluencers>,
    /// One entry per unordered pair of periods.
    pub overlaps: Vec<PeriodOverlap>,
}

/// Top influencers per period and the Jaccard overlap of every pair of
/// influencer sets.
pub fn compare_periods<S: Scalar>(
    records: &[(String, AttentionRecord<S>)],
    query: &InfluenceQuery,
) -> Result<PeriodComparison> {
    if records.len() < 2 {
        return Err(Error::InvalidParameter(
            "comparing periods needs at least two".into(),
        ));
    }
    let mut periods = Vec::with_capacity(records.len());
    let mut size = None;
    for (label, record) in records {
        let (layer, matrix) = query.layer.select(record)?;
        match size {
            None => size = Some(matrix.rows()),
            Some(n) if n != matrix.rows() => {
                return Err(Error::Data(format!(
                    "period {label} has {} nodes, earlier periods have {n}",
                    matrix.rows()
                )))
            }
            Some(_) => {}
        }
        periods.push(PeriodInfluencers {
            period: label.clone(),
            layer,
            influencers: top_influencers(matrix, query.target, query.k, query.ranking)?,
        });
    }
    let sets: Vec<BTreeSet<usize>> = periods
        .iter()
        .map(|p| p.influencers.iter().map(|&(i, _)| i).collect())
        .collect();
    let mut overlaps = Vec::new();
    for a in 0..periods.len() {
        for b in a + 1..periods.len() {
            overlaps.push(PeriodOverlap {
                first: periods[a].period.clone(),
                second: periods[b].period.clone(),
                jaccard: jaccard(&sets[a], &sets[b]),
            });
        }
    }
    Ok(PeriodComparison {
        query: *query,
        periods,
        overlaps,
    })
}

/// Importance and influential nodes for one recorded layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub importance: ImportanceVector,
    pub influential: Vec<usize>,
}

pub fn layer_report<S: Scalar>(
    kind: AttentionKind,
    layer: usize,
    matrix: &Matrix<S>,
) -> Result<LayerReport> {
    let values = node_importance(matrix)?;
    let influential = influential_nodes(&values);
    Ok(LayerReport {
        importance: ImportanceVector {
            values,
            kind,
            layer,
        },
        influential,
    })
}

/// Comma-separated rows, full precision.
pub fn matrix_to_csv<S: Scalar>(matrix: &Matrix<S>) -> String {
    let mut out = String::new();
    for r in 0..matrix.rows() {
        let row: Vec<String> = matrix
            .row(r)
            .iter()
            .map(|v| format!("{}", v.as_f64()))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePoint {
    pub node: usize,
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub importance: f64,
    pub influential: bool,
}

/// Reads an `id,lon,lat` table (optional header).
pub fn parse_coordinates(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "coordinates line {}: expected id,lon,lat",
                i + 1
            )));
        }
        match (fields[1].parse::<f64>(), fields[2].parse::<f64>()) {
            (Ok(lon), Ok(lat)) => out.push((fields[0].to_string(), lon, lat)),
            _ if i == 0 => continue,
            _ => {
                return Err(Error::Format(format!(
                    "coordinates line {}: bad number",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn load_coordinates(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coordinates(&text)
}

/// Joins node ids to coordinates. Nodes without coordinates are skipped.
pub fn join_coordinates(
    node_ids: &[String],
    coordinates: &[(String, f64, f64)],
    report: &LayerReport,
) -> Vec<NodePoint> {
    node_ids
        .iter()
        .enumerate()
        .filter_map(|(k, id)| {
            coordinates
                .iter()
                .find(|(c, _, _)| c == id)
                .map(|&(_, lon, lat)| NodePoint {
                    node: k,
                    id: id.clone(),
                    lon,
                    lat,
                    importance: report.importance.values[k],
                    influential: report.influential.contains(&k),
                })
        })
        .collect()
}
