//! Top-K ranking metrics over the full item catalog, degree-quintile tail
//! reporting, run comparison tables, and the popularity reference ranker.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{InteractionDataset, Split};
use crate::error::{GumeError, Result};

pub const N_GROUPS: usize = 5;

/// Anything that can score (user, all items) batches.
pub trait Scorer: Sync {
    /// Scores for the given users, one row per user, n_items columns.
    fn scores(&self, users: &[usize]) -> Array2<f64>;
}

/// Scores from final user/item embeddings: `y = e_u . e_i`.
pub struct EmbeddingScorer {
    pub user_embed: Array2<f64>,
    pub item_embed: Array2<f64>,
}

impl Scorer for EmbeddingScorer {
    fn scores(&self, users: &[usize]) -> Array2<f64> {
        let mut rows = Array2::zeros((users.len(), self.user_embed.ncols()));
        for (dst, &u) in users.iter().enumerate() {
            rows.row_mut(dst).assign(&self.user_embed.row(u));
        }
        rows.dot(&self.item_embed.t())
    }
}

/// Popularity baseline: every user sees items ranked by train degree.
pub struct PopularityScorer {
    degrees: Vec<f64>,
}

impl PopularityScorer {
    pub fn new(dataset: &InteractionDataset) -> PopularityScorer {
        PopularityScorer {
            degrees: dataset.item_train_degree().iter().map(|&d| d as f64).collect(),
        }
    }
}

impl Scorer for PopularityScorer {
    fn scores(&self, users: &[usize]) -> Array2<f64> {
        let n = self.degrees.len();
        Array2::from_shape_fn((users.len(), n), |(_, i)| self.degrees[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// 1-based group id; group 1 holds the highest-degree items.
    pub group: usize,
    pub item_count: usize,
    /// Users with at least one relevant item in this group.
    pub user_count: usize,
    pub recall20: Option<f64>,
    pub ndcg20: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_k: Vec<KMetrics>,
    pub groups: Vec<GroupMetrics>,
    pub n_users_evaluated: usize,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.per_k.iter().find(|m| m.k == k).map(|m| m.recall)
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.per_k.iter().find(|m| m.k == k).map(|m| m.ndcg)
    }

    /// Flat (name, value) rows for tables.
    pub fn flat_metrics(&self) -> Vec<(String, Option<f64>)> {
        let mut rows = Vec::new();
        for m in &self.per_k {
            rows.push((format!("recall@{}", m.k), Some(m.recall)));
            rows.push((format!("ndcg@{}", m.k), Some(m.ndcg)));
        }
        for g in &self.groups {
            rows.push((format!("group{}_recall@20", g.group), g.recall20));
            rows.push((format!("group{}_ndcg@20", g.group), g.ndcg20));
        }
        rows
    }
}

/// Items sorted by train degree (descending, ties by index) and cut into
/// five near-equal groups; the remainder goes to the last (coldest) group.
pub fn degree_groups(dataset: &InteractionDataset) -> Result<Vec<u8>> {
    let n = dataset.n_items();
    if n < N_GROUPS {
        return Err(GumeError::Config(format!(
            "tail grouping needs at least {N_GROUPS} items, got {n}"
        )));
    }
    let degree = dataset.item_train_degree();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| degree[b].cmp(&degree[a]).then(a.cmp(&b)));
    let per_group = n / N_GROUPS;
    let mut groups = vec![0u8; n];
    for (rank, &item) in order.iter().enumerate() {
        let g = (rank / per_group).min(N_GROUPS - 1);
        groups[item] = g as u8;
    }
    Ok(groups)
}

struct PerUser {
    recall: Vec<f64>,
    dcg_norm: Vec<f64>,
    group_recall: [Option<f64>; N_GROUPS],
    group_ndcg: [Option<f64>; N_GROUPS],
}

fn dcg_weight(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

fn ideal_dcg(n_relevant: usize, k: usize) -> f64 {
    (1..=n_relevant.min(k)).map(dcg_weight).sum()
}

/// Metric evaluation for every user with at least one `target` item. When the
/// target is the test split, validation positives are masked as well; when it
/// is the validation split, only train positives are masked.
pub fn evaluate(
    scorer: &dyn Scorer,
    dataset: &InteractionDataset,
    ks: &[usize],
    target: Split,
) -> Result<MetricsReport> {
    if ks.is_empty() {
        return Err(GumeError::Config("no K values given".into()));
    }
    let groups = degree_groups(dataset)?;
    let max_k = ks.iter().copied().max().unwrap().max(20);
    let users: Vec<usize> = (0..dataset.n_users())
        .filter(|&u| !dataset.user_items(u, target).is_empty())
        .collect();

    let per_user: Vec<PerUser> = users
        .par_chunks(128)
        .flat_map(|chunk| {
            let scores = scorer.scores(chunk);
            chunk
                .iter()
                .enumerate()
                .map(|(row, &u)| {
                    let mut s: Vec<f64> = scores.row(row).to_vec();
                    for &i in dataset.user_items(u, Split::Train) {
                        s[i as usize] = f64::NEG_INFINITY;
                    }
                    if target == Split::Test {
                        for &i in dataset.user_items(u, Split::Valid) {
                            s[i as usize] = f64::NEG_INFINITY;
                        }
                    }
                    let relevant = dataset.user_items(u, target);
                    rank_one_user(&s, relevant, ks, max_k, &groups)
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let n_users_evaluated = per_user.len();
    if n_users_evaluated == 0 {
        return Err(GumeError::Validation(format!(
            "no users carry {target:?} interactions"
        )));
    }

    let per_k = ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| KMetrics {
            k,
            recall: per_user.iter().map(|p| p.recall[ki]).sum::<f64>() / n_users_evaluated as f64,
            ndcg: per_user.iter().map(|p| p.dcg_norm[ki]).sum::<f64>() / n_users_evaluated as f64,
        })
        .collect();

    let mut group_metrics = Vec::new();
    for g in 0..N_GROUPS {
        let item_count = groups.iter().filter(|&&x| x as usize == g).count();
        let users_in_group: Vec<&PerUser> = per_user
            .iter()
            .filter(|p| p.group_recall[g].is_some())
            .collect();
        let user_count = users_in_group.len();
        let (recall20, ndcg20) = if user_count == 0 {
            (None, None)
        } else {
            (
                Some(
                    users_in_group.iter().map(|p| p.group_recall[g].unwrap()).sum::<f64>()
                        / user_count as f64,
                ),
                Some(
                    users_in_group.iter().map(|p| p.group_ndcg[g].unwrap()).sum::<f64>()
                        / user_count as f64,
                ),
            )
        };
        group_metrics.push(GroupMetrics {
            group: g + 1,
            item_count,
            user_count,
            recall20,
            ndcg20,
        });
    }

    Ok(MetricsReport {
        per_k,
        groups: group_metrics,
        n_users_evaluated,
    })
}

fn rank_one_user(
    scores: &[f64],
    relevant: &[u32],
    ks: &[usize],
    max_k: usize,
    groups: &[u8],
) -> PerUser {
    let n = scores.len();
    // Full order: score descending, item index ascending on ties.
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let top_len = max_k.min(n);
    idx.select_nth_unstable_by(top_len.saturating_sub(1), |&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut top: Vec<u32> = idx[..top_len].to_vec();
    top.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });

    let is_relevant = |item: u32| relevant.binary_search(&item).is_ok();

    let mut recall = Vec::with_capacity(ks.len());
    let mut dcg_norm = Vec::with_capacity(ks.len());
    for &k in ks {
        let hits = top.iter().take(k).filter(|&&i| is_relevant(i)).count();
        recall.push(hits as f64 / relevant.len() as f64);
        let dcg: f64 = top
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, &i)| is_relevant(i))
            .map(|(rank, _)| dcg_weight(rank + 1))
            .sum();
        dcg_norm.push(dcg / ideal_dcg(relevant.len(), k));
    }

    let mut group_recall = [None; N_GROUPS];
    let mut group_ndcg = [None; N_GROUPS];
    for g in 0..N_GROUPS {
        let rel_g: Vec<u32> = relevant
            .iter()
            .copied()
            .filter(|&i| groups[i as usize] as usize == g)
            .collect();
        if rel_g.is_empty() {
            continue;
        }
        let hits: Vec<usize> = top
            .iter()
            .take(20)
            .enumerate()
            .filter(|(_, i)| rel_g.binary_search(i).is_ok())
            .map(|(rank, _)| rank + 1)
            .collect();
        group_recall[g] = Some(hits.len() as f64 / rel_g.len() as f64);
        let dcg: f64 = hits.iter().map(|&r| dcg_weight(r)).sum();
        group_ndcg[g] = Some(dcg / ideal_dcg(rel_g.len(), 20));
    }

    PerUser {
        recall,
        dcg_norm,
        group_recall,
        group_ndcg,
    }
}

/// Per-K metrics only (no tail grouping requirements beyond the shared
/// report shape).
pub fn rank_and_score(
    scorer: &dyn Scorer,
    dataset: &InteractionDataset,
    ks: &[usize],
    target: Split,
) -> Result<MetricsReport> {
    evaluate(scorer, dataset, ks, target)
}

/// Degree-quintile metrics at K = 20.
pub fn tail_group_metrics(
    scorer: &dyn Scorer,
    dataset: &InteractionDataset,
    target: Split,
) -> Result<Vec<GroupMetrics>> {
    Ok(evaluate(scorer, dataset, &[20], target)?.groups)
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub values: Vec<Option<f64>>,
    /// Relative deltas vs the first run; None where undefined.
    pub rel_delta: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub labels: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric");
        for l in &self.labels {
            out.push_str(&format!("\t{l}"));
        }
        for l in &self.labels[1..] {
            out.push_str(&format!("\tdelta_{l}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.metric);
            for v in &row.values {
                match v {
                    Some(v) => out.push_str(&format!("\t{v:.6}")),
                    None => out.push_str("\tNA"),
                }
            }
            for d in &row.rel_delta[1..] {
                match d {
                    Some(d) => out.push_str(&format!("\t{d:+.4}")),
                    None => out.push_str("\tNA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Aligned metric table across runs with relative deltas vs the first run.
pub fn compare_runs(runs: &[(String, MetricsReport)]) -> Result<ComparisonTable> {
    if runs.len() < 2 {
        return Err(GumeError::Config(format!(
            "compare_runs needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    let labels: Vec<String> = runs.iter().map(|(l, _)| l.clone()).collect();
    let base = runs[0].1.flat_metrics();
    let mut rows = Vec::new();
    for (metric, _) in &base {
        let values: Vec<Option<f64>> = runs
            .iter()
            .map(|(_, r)| {
                r.flat_metrics()
                    .into_iter()
                    .find(|(m, _)| m == metric)
                    .and_then(|(_, v)| v)
            })
            .collect();
        let base_v = values[0];
        let rel_delta = values
            .iter()
            .map(|v| match (base_v, v) {
                (Some(b), Some(v)) if b != 0.0 => Some((v - b) / b.abs()),
                _ => None,
            })
            .collect();
        rows.push(ComparisonRow {
            metric: metric.clone(),
            values,
            rel_delta,
        });
    }
    Ok(ComparisonTable { labels, rows })
}
