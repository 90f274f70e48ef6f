//! Exact cosine top-k search over the visual gallery, and Recall@K.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalized, Embedding, VideoId};
use crate::error::{Error, Result};

/// Default cutoffs, in reporting order.
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];

/// Immutable gallery of unit-norm rows in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    ids: Vec<VideoId>,
    rows: Array2<f64>,
}

pub fn build_index(entries: impl IntoIterator<Item = (VideoId, Embedding)>) -> Result<Index> {
    let mut map = BTreeMap::new();
    let mut dim = None;
    for (id, e) in entries {
        match dim {
            None => dim = Some(e.dim()),
            Some(d) if d != e.dim() => {
                return Err(Error::ShapeError(format!("entry {id} has dimension {}, expected {d}", e.dim())))
            }
            _ => {}
        }
        if map.insert(id, e).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    let dim = dim.ok_or(Error::EmptyIndex)?;
    let mut rows = Array2::zeros((map.len(), dim));
    let mut ids = Vec::with_capacity(map.len());
    for (i, (id, e)) in map.into_iter().enumerate() {
        rows.row_mut(i).assign(&normalized(e.view())?);
        ids.push(id);
    }
    Ok(Index { ids, rows })
}

impl Index {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn ids(&self) -> &[VideoId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> Embedding {
        Embedding::new(self.rows.row(i).to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: VideoId,
    /// `(id, score)` with scores non-increasing; ties by ascending id.
    pub hits: Vec<(VideoId, f64)>,
}

impl RankedResult {
    /// 1-based rank of `id`, if retrieved.
    pub fn rank_of(&self, id: VideoId) -> Option<usize> {
        self.hits.iter().position(|(h, _)| *h == id).map(|p| p + 1)
    }
}

/// Heap entry ordered so that the *worst* retained hit is on top.
#[derive(PartialEq)]
struct Candidate {
    score: f64,
    id: VideoId,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // better = higher score, then lower id; invert for a max-heap of worst
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact top-`k` by cosine similarity. `exclude` drops one id from the
/// gallery (self-exclusion).
pub fn top_k(index: &Index, query_id: VideoId, query: &Embedding, k: usize, exclude: Option<VideoId>) -> Result<RankedResult> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if query.dim() != index.dim() {
        return Err(Error::ShapeError(format!(
            "query has dimension {}, index has {}",
            query.dim(),
            index.dim()
        )));
    }
    let q = normalized(query.view())?;
    let scores = index.rows.dot(&q);
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (&id, &score) in index.ids.iter().zip(scores.iter()) {
        if Some(id) == exclude {
            continue;
        }
        let score = score.clamp(-1.0, 1.0);
        heap.push(Candidate { score, id });
        if heap.len() > k {
            heap.pop();
        }
    }
    // into_sorted_vec is ascending by Ord, i.e. best first
    let hits = heap.into_sorted_vec().into_iter().map(|c| (c.id, c.score)).collect();
    Ok(RankedResult { query: query_id, hits })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    /// Percentage in `[0, 100]`.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub recall: Vec<RecallAt>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subset_recall: Option<Vec<RecallAt>>,
}

fn assert_monotone(recall: &[RecallAt]) {
    let mut sorted = recall.to_vec();
    sorted.sort_by_key(|r| r.k);
    for w in sorted.windows(2) {
        assert!(w[0].value <= w[1].value, "recall must be non-decreasing in k");
    }
    assert!(recall.iter().all(|r| (0.0..=100.0).contains(&r.value)));
}

fn recall_from_ranks(ranks: &[Option<usize>], ks: &[usize]) -> Vec<RecallAt> {
    let n = ranks.len().max(1) as f64;
    let recall: Vec<RecallAt> = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(x) if *x <= k)).count();
            RecallAt { k, value: 100.0 * hits as f64 / n }
        })
        .collect();
    assert_monotone(&recall);
    recall
}

impl MetricsReport {
    pub fn new(queries: usize, recall: Vec<RecallAt>) -> Self {
        assert_monotone(&recall);
        MetricsReport { queries, recall, subset_recall: None }
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// Aligned text table, one column per cutoff in the order given.
    pub fn to_table(&self) -> String {
        let mut header = String::new();
        let mut values = String::new();
        for r in &self.recall {
            let _ = write!(header, "{:>8}", format!("R@{}", r.k));
            let _ = write!(values, "{:>8.2}", r.value);
        }
        if let Some(sub) = &self.subset_recall {
            for r in sub {
                let _ = write!(header, "{:>10}", format!("Rs@{}", r.k));
                let _ = write!(values, "{:>10.2}", r.value);
            }
        }
        format!("{header}\n{values}\n")
    }
}

/// Recall@K for results aligned with their ground-truth targets.
pub fn recall_for_targets(results: &[RankedResult], targets: &[VideoId], ks: &[usize]) -> MetricsReport {
    assert_eq!(results.len(), targets.len());
    let ranks: Vec<Option<usize>> = results.iter().zip(targets).map(|(r, t)| r.rank_of(*t)).collect();
    MetricsReport::new(results.len(), recall_from_ranks(&ranks, ks))
}

pub fn recall_at_k(results: &[RankedResult], truth: &BTreeMap<VideoId, VideoId>, ks: &[usize]) -> Result<MetricsReport> {
    let targets = results
        .iter()
        .map(|r| truth.get(&r.query).copied().ok_or(Error::MissingGroundTruth(r.query)))
        .collect::<Result<Vec<_>>>()?;
    Ok(recall_for_targets(results, &targets, ks))
}

/// Recall after restricting each ranking to its candidate subset, keeping
/// the original score order. Rankings should cover the subset members
/// (full-gallery rankings do).
pub fn subset_recall_for_targets(
    results: &[RankedResult],
    targets: &[VideoId],
    subsets: &[BTreeSet<VideoId>],
    ks: &[usize],
) -> Result<Vec<RecallAt>> {
    let mut ranks = Vec::with_capacity(results.len());
    for ((r, t), subset) in results.iter().zip(targets).zip(subsets) {
        if !subset.contains(t) {
            return Err(Error::InvalidSubset(r.query));
        }
        let rank = r
            .hits
            .iter()
            .filter(|(id, _)| subset.contains(id))
            .position(|(id, _)| id == t)
            .map(|p| p + 1);
        ranks.push(rank);
    }
    Ok(recall_from_ranks(&ranks, ks))
}

pub fn subset_recall(
    results: &[RankedResult],
    truth: &BTreeMap<VideoId, VideoId>,
    subsets: &BTreeMap<VideoId, BTreeSet<VideoId>>,
    ks: &[usize],
) -> Result<Vec<RecallAt>> {
    let mut targets = Vec::with_capacity(results.len());
    let mut subs = Vec::with_capacity(results.len());
    for r in results {
        targets.push(*truth.get(&r.query).ok_or(Error::MissingGroundTruth(r.query))?);
        subs.push(subsets.get(&r.query).cloned().ok_or(Error::InvalidSubset(r.query))?);
    }
    subset_recall_for_targets(results, &targets, &subs, ks)
}
