//! Exact nearest-neighbour retrieval and the recall protocols built on it.

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use crate::losses::Distance as Metric;
use crate::protocol;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("cannot build an index from zero descriptors")]
    Empty,
    #[error("descriptor {index} has dimension {got}, expected {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error("k = {k} outside 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("no query has a database entry within the success radius")]
    NoValidQueries,
    #[error("entry {0} has no timestamp")]
    MissingTimestamps(u64),
    #[error("pairwise evaluation needs at least 2 runs, got {0}")]
    InsufficientRuns(usize),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: u64,
    pub descriptor: Vec<f64>,
    pub position: [f64; 3],
    pub timestamp: Option<f64>,
}

/// Immutable exact-search index. Entries are stored sorted by id so results
/// do not depend on insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    metric: Metric,
    entries: Vec<IndexEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    /// Position of the entry inside the index.
    pub slot: usize,
    pub distance: f64,
}

pub fn build_index(mut entries: Vec<IndexEntry>, metric: Metric) -> Result<RetrievalIndex> {
    let first = entries.first().ok_or(RetrievalError::Empty)?;
    let dim = first.descriptor.len();
    for (i, e) in entries.iter().enumerate() {
        if e.descriptor.len() != dim {
            return Err(RetrievalError::DimMismatch {
                index: i,
                expected: dim,
                got: e.descriptor.len(),
            });
        }
    }
    entries.sort_by_key(|e| e.id);
    Ok(RetrievalIndex { dim, metric, entries })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// The `k` nearest entries, ascending distance, ties broken by lower id.
    pub fn query_knn(&self, q: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.query_knn_filtered(q, k, |_| true)
    }

    /// Like [`query_knn`](Self::query_knn) over the entries accepted by
    /// `keep`; `k` is checked against the full index size and the result
    /// may be shorter when fewer entries pass.
    pub fn query_knn_filtered(&self, q: &[f64], k: usize, keep: impl Fn(&IndexEntry) -> bool) -> Result<Vec<Neighbor>> {
        if q.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                index: 0,
                expected: self.dim,
                got: q.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(RetrievalError::InvalidK { k, n: self.len() });
        }
        let mut all: Vec<Neighbor> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| keep(e))
            .map(|(slot, e)| Neighbor {
                id: e.id,
                slot,
                distance: self.metric.eval(q, &e.descriptor),
            })
            .collect();
        let by = |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id));
        if all.len() > k {
            all.select_nth_unstable_by(k - 1, by);
            all.truncate(k);
        }
        all.sort_by(by);
        Ok(all)
    }

    /// SHA-256 over the index contents.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update([matches!(self.metric, Metric::L1) as u8]);
        for e in &self.entries {
            h.update(e.id.to_le_bytes());
            for v in e.descriptor.iter().chain(&e.position) {
                h.update(v.to_le_bytes());
            }
            h.update(e.timestamp.unwrap_or(f64::NAN).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub descriptor: Vec<f64>,
    pub position: [f64; 3],
    pub timestamp: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    pub success_radius_m: f64,
    /// `Some(gap)` restricts each query's candidates to entries older than
    /// the query by more than `gap` seconds.
    pub revisit_min_gap_s: Option<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            success_radius_m: protocol::SUCCESS_RADIUS_M,
            revisit_min_gap_s: None,
        }
    }
}

impl EvalProtocol {
    pub fn kitti() -> Self {
        Self {
            revisit_min_gap_s: Some(protocol::REVISIT_MIN_GAP_S),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius_m > 0.0) {
            return Err(RetrievalError::InvalidProtocol("success radius must be positive".into()));
        }
        Ok(())
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Keeps candidates strictly older than `t0` by more than `min_gap_s`.
pub fn kitti_revisit_filter(t0: f64, candidates: &[(u64, Option<f64>)], min_gap_s: f64) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for &(id, t) in candidates {
        let t = t.ok_or(RetrievalError::MissingTimestamps(id))?;
        if t < t0 && t0 - t > min_gap_s {
            out.push(id);
        }
    }
    Ok(out)
}

fn revisit_ok(entry: &IndexEntry, t0: f64, gap: f64) -> bool {
    entry.timestamp.is_some_and(|t| t < t0 && t0 - t > gap)
}

/// Rank (0-based) of the first in-radius candidate for every query, `None`
/// for queries without any in-radius candidate (excluded from recall).
fn first_hit_ranks(queries: &[Query], index: &RetrievalIndex, protocol: &EvalProtocol) -> Result<Vec<Option<Option<usize>>>> {
    protocol.validate()?;
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let keep = |e: &IndexEntry| match (protocol.revisit_min_gap_s, q.timestamp) {
            (None, _) => true,
            (Some(gap), Some(t0)) => revisit_ok(e, t0, gap),
            (Some(_), None) => false,
        };
        if protocol.revisit_min_gap_s.is_some() {
            if q.timestamp.is_none() {
                return Err(RetrievalError::MissingTimestamps(u64::MAX));
            }
            if let Some(e) = index.entries.iter().find(|e| e.timestamp.is_none()) {
                return Err(RetrievalError::MissingTimestamps(e.id));
            }
        }
        let valid = index
            .entries
            .iter()
            .any(|e| keep(e) && dist3(&e.position, &q.position) <= protocol.success_radius_m);
        if !valid {
            out.push(None);
            continue;
        }
        let ranked = index.query_knn_filtered(&q.descriptor, index.len(), keep)?;
        let hit = ranked
            .iter()
            .position(|n| dist3(&index.entries[n.slot].position, &q.position) <= protocol.success_radius_m);
        out.push(Some(hit));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub recall: f64,
    pub valid_queries: usize,
    pub excluded_queries: usize,
}

fn recall_from_ranks(ranks: &[Option<Option<usize>>], k: usize) -> Result<Recall> {
    let valid: Vec<Option<usize>> = ranks.iter().filter_map(|r| *r).collect();
    if valid.is_empty() {
        return Err(RetrievalError::NoValidQueries);
    }
    let hits = valid.iter().filter(|r| r.is_some_and(|r| r < k)).count();
    Ok(Recall {
        recall: hits as f64 / valid.len() as f64,
        valid_queries: valid.len(),
        excluded_queries: ranks.len() - valid.len(),
    })
}

/// Fraction of valid queries whose top `k` holds an entry within the
/// success radius of the query position.
pub fn recall_at_k(queries: &[Query], index: &RetrievalIndex, protocol: &EvalProtocol, k: usize) -> Result<Recall> {
    if k == 0 || k > index.len() {
        return Err(RetrievalError::InvalidK { k, n: index.len() });
    }
    let ranks = first_hit_ranks(queries, index, protocol)?;
    let r = recall_from_ranks(&ranks, k)?;
    if r.excluded_queries > 0 {
        log::info!("recall: {} queries without an in-radius entry excluded", r.excluded_queries);
    }
    Ok(r)
}

pub fn one_percent_k(n: usize) -> usize {
    n.div_ceil(100).max(1)
}

pub fn recall_at_one_percent(queries: &[Query], index: &RetrievalIndex, protocol: &EvalProtocol) -> Result<Recall> {
    recall_at_k(queries, index, protocol, one_percent_k(index.len()))
}

/// Recall for `k = 1..=min(max_k, N)` from a single ranking pass.
pub fn recall_curve(queries: &[Query], index: &RetrievalIndex, protocol: &EvalProtocol, max_k: usize) -> Result<Vec<(usize, f64)>> {
    let ranks = first_hit_ranks(queries, index, protocol)?;
    (1..=max_k.min(index.len()))
        .map(|k| recall_from_ranks(&ranks, k).map(|r| (k, r.recall)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecallSpec {
    K(usize),
    OnePercent,
}

impl RecallSpec {
    pub fn label(&self) -> String {
        match self {
            RecallSpec::K(k) => k.to_string(),
            RecallSpec::OnePercent => "1pct".into(),
        }
    }

    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            RecallSpec::K(k) => k,
            RecallSpec::OnePercent => one_percent_k(n),
        }
    }
}

impl std::str::FromStr for RecallSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "1pct" => Ok(RecallSpec::OnePercent),
            t => match t.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(RecallSpec::K(k)),
                _ => Err(format!("bad recall spec `{s}` (expected a positive integer or 1pct)")),
            },
        }
    }
}

pub fn evaluate(queries: &[Query], index: &RetrievalIndex, protocol: &EvalProtocol, specs: &[RecallSpec]) -> Result<Vec<(RecallSpec, f64)>> {
    let ranks = first_hit_ranks(queries, index, protocol)?;
    specs
        .iter()
        .map(|s| {
            let k = s.resolve(index.len());
            if k > index.len() {
                return Err(RetrievalError::InvalidK { k, n: index.len() });
            }
            recall_from_ranks(&ranks, k).map(|r| (*s, r.recall))
        })
        .collect()
}

/// Indices of trajectory frames picked every `interval_m` of travelled
/// distance, starting once `offset_m` has been covered.
pub fn sample_by_distance(positions: &[[f64; 3]], interval_m: f64, offset_m: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut travelled = 0.0;
    let mut next = offset_m;
    for (i, p) in positions.iter().enumerate() {
        if i > 0 {
            travelled += dist3(&positions[i - 1], p);
        }
        if travelled >= next {
            out.push(i);
            while next <= travelled {
                next += interval_m;
            }
        }
    }
    out
}

/// Database and query frame indices for the KITTI protocol.
pub fn kitti_sampling(positions: &[[f64; 3]]) -> (Vec<usize>, Vec<usize>) {
    (
        sample_by_distance(positions, protocol::KITTI_SAMPLING_INTERVAL_M, 0.0),
        sample_by_distance(positions, protocol::KITTI_SAMPLING_INTERVAL_M, protocol::KITTI_SAMPLING_OFFSET_M),
    )
}

#[derive(Clone, Debug)]
pub struct EvalRun {
    pub name: String,
    pub queries: Vec<Query>,
    pub database: RetrievalIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseTable {
    /// `(query run, database run, recalls)` for every evaluated pair.
    pub pairs: Vec<(String, String, Vec<(RecallSpec, f64)>)>,
    pub mean: Vec<(RecallSpec, f64)>,
}

/// Every ordered pair of distinct runs, queries restricted by `region`,
/// recalls averaged without weighting. Pairs without a valid query are
/// skipped.
pub fn oxford_pairwise_eval(
    runs: &[EvalRun],
    region: impl Fn(&[f64; 3]) -> bool,
    protocol: &EvalProtocol,
    specs: &[RecallSpec],
) -> Result<PairwiseTable> {
    if runs.len() < 2 {
        return Err(RetrievalError::InsufficientRuns(runs.len()));
    }
    let mut pairs = Vec::new();
    for (i, q) in runs.iter().enumerate() {
        let queries: Vec<Query> = q.queries.iter().filter(|x| region(&x.position)).cloned().collect();
        for (j, db) in runs.iter().enumerate() {
            if i == j {
                continue;
            }
            match evaluate(&queries, &db.database, protocol, specs) {
                Ok(r) => pairs.push((q.name.clone(), db.name.clone(), r)),
                Err(RetrievalError::NoValidQueries) => {
                    log::warn!("pair {} -> {} has no valid queries; skipped", q.name, db.name)
                }
                Err(e) => return Err(e),
            }
        }
    }
    if pairs.is_empty() {
        return Err(RetrievalError::NoValidQueries);
    }
    let mean = specs
        .iter()
        .enumerate()
        .map(|(s, spec)| (*spec, pairs.iter().map(|p| p.2[s].1).sum::<f64>() / pairs.len() as f64))
        .collect();
    Ok(PairwiseTable { pairs, mean })
}

pub fn render_results_csv(rows: &[(String, String, f64)]) -> String {
    let mut s = String::from("protocol,k,recall\n");
    for (p, k, r) in rows {
        s.push_str(&format!("{p},{k},{r}\n"));
    }
    s
}

pub fn render_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("k,recall\n");
    for (k, r) in curve {
        s.push_str(&format!("{k},{r}\n"));
    }
    s
}
