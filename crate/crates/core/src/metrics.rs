//! Leave-one-out ranking evaluation: target ranks with seen-item exclusion,
//! NDCG@K / MRR@K, length-bucketed aggregation, and the ablation workflow.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataBundle, Split};
use crate::model::FindRecModel;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("target item is in the exclusion set")]
    TargetExcluded,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Rank of one user's held-out target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankResult {
    pub user: u32,
    /// 1 = best.
    pub rank: usize,
    /// Candidates removed by the exclusion set.
    pub excluded: usize,
}

/// Rank among candidates `1..n_items` minus exclusions. Rank is 1 plus the
/// number of candidates scoring strictly higher, plus tied candidates with a
/// smaller item id (deterministic tie order).
pub fn rank_of_target(logits: &[f64], target: u32, exclusions: &HashSet<u32>) -> Result<RankResult, MetricsError> {
    if exclusions.contains(&target) || target == 0 {
        return Err(MetricsError::TargetExcluded);
    }
    let target_score = logits[target as usize];
    let mut higher = 0;
    let mut tied_before = 0;
    let mut excluded = 0;
    for (item, &score) in logits.iter().enumerate().skip(1) {
        let item = item as u32;
        if item == target {
            continue;
        }
        if exclusions.contains(&item) {
            excluded += 1;
            continue;
        }
        if score > target_score {
            higher += 1;
        } else if score == target_score && item < target {
            tied_before += 1;
        }
    }
    Ok(RankResult { user: 0, rank: 1 + higher + tied_before, excluded })
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` inside the window, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1 && k >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// `1 / rank` inside the window, else 0.
pub fn mrr_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1 && k >= 1);
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// Aggregates for one user population; `None` metrics mean an empty bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    #[serde(rename = "ndcg@5")]
    pub ndcg5: Option<f64>,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: Option<f64>,
    #[serde(rename = "mrr@5")]
    pub mrr5: Option<f64>,
    #[serde(rename = "mrr@10")]
    pub mrr10: Option<f64>,
    pub n_users: usize,
}

impl BucketMetrics {
    fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return BucketMetrics { ndcg5: None, ndcg10: None, mrr5: None, mrr10: None, n_users: 0 };
        }
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / ranks.len() as f64;
        BucketMetrics {
            ndcg5: Some(mean(&|r| ndcg_at_k(r, 5))),
            ndcg10: Some(mean(&|r| ndcg_at_k(r, 10))),
            mrr5: Some(mean(&|r| mrr_at_k(r, 5))),
            mrr10: Some(mean(&|r| mrr_at_k(r, 10))),
            n_users: ranks.len(),
        }
    }
}

/// Overall plus per-length-bucket metrics. Buckets close as [5,10], (10,30],
/// (30, inf) over the user's full sequence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: BucketMetrics,
    pub buckets: BTreeMap<String, BucketMetrics>,
}

pub fn bucket_label(seq_len: usize) -> &'static str {
    if seq_len <= 10 {
        "5-10"
    } else if seq_len <= 30 {
        "10-30"
    } else {
        ">30"
    }
}

/// Evaluate a model over a split: per user, forward on the context, rank the
/// target with the user's earlier items excluded (toggleable), then average
/// per bucket in ascending-user order.
pub fn evaluate(
    model: &FindRecModel,
    bundle: &DataBundle,
    split: &Split,
    exclude_seen: bool,
    batch_size: usize,
) -> Result<MetricsReport, MetricsError> {
    let max_len = model.cfg.max_len;
    let mut results: Vec<(u32, usize, usize)> = Vec::with_capacity(split.examples.len());

    for chunk in split.examples.chunks(batch_size.max(1)) {
        let sub = Split { examples: chunk.to_vec() };
        let batch = crate::data::make_eval_batch(bundle, &sub, max_len);
        let scores = model.score(&batch)?;
        for (row, ex) in chunk.iter().enumerate() {
            // earlier items minus the target itself: the target must always
            // stay rankable even when the user has interacted with it before
            let exclusions: HashSet<u32> = if exclude_seen {
                ex.context.iter().copied().filter(|&i| i != ex.target).collect()
            } else {
                HashSet::new()
            };
            let r = rank_of_target(&scores[row], ex.target, &exclusions)?;
            let seq_len = bundle.dataset.sequences[ex.user as usize].len();
            results.push((ex.user, r.rank, seq_len));
        }
    }
    // fixed aggregation order for reproducible rounding
    results.sort_by_key(|&(user, _, _)| user);

    let all: Vec<usize> = results.iter().map(|&(_, r, _)| r).collect();
    let mut bucketed: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for label in ["5-10", "10-30", ">30"] {
        bucketed.insert(label.to_string(), Vec::new());
    }
    for &(_, rank, seq_len) in &results {
        bucketed.get_mut(bucket_label(seq_len)).unwrap().push(rank);
    }
    let buckets = bucketed
        .into_iter()
        .map(|(label, ranks)| (label, BucketMetrics::from_ranks(&ranks)))
        .collect();
    Ok(MetricsReport { overall: BucketMetrics::from_ranks(&all), buckets })
}

/// Overall metrics of one trained run (the four headline numbers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(rename = "ndcg@5")]
    pub ndcg5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
    #[serde(rename = "mrr@5")]
    pub mrr5: f64,
    #[serde(rename = "mrr@10")]
    pub mrr10: f64,
}

impl MetricsSummary {
    pub fn from_report(r: &MetricsReport) -> Self {
        let o = &r.overall;
        MetricsSummary {
            ndcg5: o.ndcg5.unwrap_or(0.0),
            ndcg10: o.ndcg10.unwrap_or(0.0),
            mrr5: o.mrr5.unwrap_or(0.0),
            mrr10: o.mrr10.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean: MetricsSummary,
    pub per_seed: Vec<(u64, MetricsSummary)>,
}

/// One row per arm, in the standard report order:
/// Full, w/o Cross-Attn, w/o IICM, w/o MoE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == label)
    }
}

/// Train and evaluate one arm over the given seeds (test split, best
/// checkpoint per run).
pub fn ablate_variant(
    model_cfg: &crate::model::ModelConfig,
    train_cfg: &crate::trainer::TrainConfig,
    stein_cfg: &crate::iicm::SteinConfig,
    bundle: &DataBundle,
    variant: crate::crossmodal::Variant,
    seeds: &[u64],
) -> Result<AblationRow, crate::trainer::TrainError> {
    let (_, _, test_split) = crate::data::leave_one_out_split(&bundle.dataset);
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = crate::trainer::TrainConfig { variant, seed, ..*train_cfg };
        let result = crate::trainer::train(model_cfg, &cfg, stein_cfg, bundle)?;
        let best_model = crate::trainer::model_from_checkpoint(&result.best)?;
        let report = evaluate(&best_model, bundle, &test_split, true, cfg.batch_size)?;
        per_seed.push((seed, MetricsSummary::from_report(&report)));
    }
    let n = per_seed.len() as f64;
    let mean = MetricsSummary {
        ndcg5: per_seed.iter().map(|(_, m)| m.ndcg5).sum::<f64>() / n,
        ndcg10: per_seed.iter().map(|(_, m)| m.ndcg10).sum::<f64>() / n,
        mrr5: per_seed.iter().map(|(_, m)| m.mrr5).sum::<f64>() / n,
        mrr10: per_seed.iter().map(|(_, m)| m.mrr10).sum::<f64>() / n,
    };
    Ok(AblationRow { variant: variant.label().to_string(), mean, per_seed })
}

/// The full four-arm workflow.
pub fn ablate(
    model_cfg: &crate::model::ModelConfig,
    train_cfg: &crate::trainer::TrainConfig,
    stein_cfg: &crate::iicm::SteinConfig,
    bundle: &DataBundle,
    seeds: &[u64],
) -> Result<AblationReport, crate::trainer::TrainError> {
    use crate::crossmodal::Variant;
    let mut rows = Vec::new();
    for variant in [Variant::Full, Variant::NoCrossAttn, Variant::NoIicm, Variant::NoMoe] {
        rows.push(ablate_variant(model_cfg, train_cfg, stein_cfg, bundle, variant, seeds)?);
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rank_hand_cases() {
        // unique max -> rank 1
        let logits = vec![-1e30, 0.1, 3.0, 0.2];
        let r = rank_of_target(&logits, 2, &HashSet::new()).unwrap();
        assert_eq!(r.rank, 1);
        // scores [2, 2, 1], target is the higher id of the tied pair -> rank 2
        let logits = vec![-1e30, 2.0, 2.0, 1.0];
        let r = rank_of_target(&logits, 2, &HashSet::new()).unwrap();
        assert_eq!(r.rank, 2);
        // excluding the top non-target improves the rank by one
        let logits = vec![-1e30, 5.0, 2.0, 1.0];
        let base = rank_of_target(&logits, 2, &HashSet::new()).unwrap();
        let excl: HashSet<u32> = [1].into_iter().collect();
        let better = rank_of_target(&logits, 2, &excl).unwrap();
        assert_eq!(base.rank, 2);
        assert_eq!(better.rank, 1);
        assert_eq!(better.excluded, 1);
    }

    #[test]
    fn excluded_target_is_an_error() {
        let excl: HashSet<u32> = [2].into_iter().collect();
        assert!(matches!(
            rank_of_target(&[0.0, 1.0, 2.0], 2, &excl),
            Err(MetricsError::TargetExcluded)
        ));
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert!((ndcg_at_k(3, 5) - 0.5).abs() < 1e-15, "1/log2(4) = 0.5");
        assert_eq!(ndcg_at_k(7, 5), 0.0);
        assert_eq!(mrr_at_k(1, 5), 1.0);
        assert_eq!(mrr_at_k(2, 5), 0.5);
        assert_eq!(mrr_at_k(11, 10), 0.0);
    }

    #[test]
    fn metrics_are_monotone_in_rank_and_k() {
        for k in 1..12 {
            for rank in 1..11 {
                assert!(ndcg_at_k(rank, k) >= ndcg_at_k(rank + 1, k));
                assert!(mrr_at_k(rank, k) >= mrr_at_k(rank + 1, k));
                assert!(ndcg_at_k(rank, k + 1) >= ndcg_at_k(rank, k));
                assert!(mrr_at_k(rank, k + 1) >= mrr_at_k(rank, k));
            }
        }
    }

    /// Brute-force rank: sort the candidate list and find the target.
    fn rank_by_enumeration(logits: &[f64], target: u32, excl: &HashSet<u32>) -> usize {
        let mut cands: Vec<u32> = (1..logits.len() as u32).filter(|i| !excl.contains(i)).collect();
        cands.sort_by(|&a, &b| {
            logits[b as usize]
                .partial_cmp(&logits[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        cands.iter().position(|&i| i == target).unwrap() + 1
    }

    #[test]
    fn rank_matches_brute_force_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        for _ in 0..1000 {
            let n = rng.gen_range(2..40);
            let mut logits = vec![-1e30];
            // quantized scores force plenty of ties
            logits.extend((0..n).map(|_| (rng.gen_range(-4..4) as f64) * 0.5));
            let mut excl = HashSet::new();
            for i in 1..=n as u32 {
                if rng.gen_bool(0.2) {
                    excl.insert(i);
                }
            }
            let target = loop {
                let t = rng.gen_range(1..=n as u32);
                if !excl.contains(&t) {
                    break t;
                }
            };
            let got = rank_of_target(&logits, target, &excl).unwrap().rank;
            let want = rank_by_enumeration(&logits, target, &excl);
            assert_eq!(got, want, "target {target}, excl {excl:?}, logits {logits:?}");
        }
    }

    #[test]
    fn rank_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(3..20);
            let mut logits = vec![-1e30];
            logits.extend((0..n).map(|_| rng.gen_range(-2.0..2.0)));
            let target = rng.gen_range(1..=n as u32);
            let r1 = rank_of_target(&logits, target, &HashSet::new()).unwrap().rank;
            let shifted: Vec<f64> = logits.iter().map(|&v| v * 3.0 + 10.0).collect();
            let r2 = rank_of_target(&shifted, target, &HashSet::new()).unwrap().rank;
            assert_eq!(r1, r2);
        }
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucket_label(5), "5-10");
        assert_eq!(bucket_label(10), "5-10");
        assert_eq!(bucket_label(11), "10-30");
        assert_eq!(bucket_label(30), "10-30");
        assert_eq!(bucket_label(31), ">30");
    }

    #[test]
    fn hand_aggregation_two_users() {
        // ranks [1, 3]: mean NDCG@5 = (1 + 0.5) / 2
        let m = BucketMetrics::from_ranks(&[1, 3]);
        assert!((m.ndcg5.unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(m.n_users, 2);
        let empty = BucketMetrics::from_ranks(&[]);
        assert_eq!(empty.n_users, 0);
        assert!(empty.ndcg5.is_none());
    }
}
