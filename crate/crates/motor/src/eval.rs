//! Full-ranking evaluation: Recall@K / NDCG@K with exact sort and index
//! tie-break, popularity-bucket analysis, parameter audits and
//! token-overlap retrieval.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{lightgcn_propagate, BackboneKind, Model};
use crate::dataset::InteractionDataset;
use crate::quantizer::TokenAssignment;

/// Final user and item representations under the model's backbone.
pub fn final_representations(model: &Model, ds: &InteractionDataset) -> (Vec<f64>, Vec<f64>) {
    let d = model.dim;
    let user: Vec<f64> = model.user_embeddings.iter().map(|&v| v as f64).collect();
    let (base, _) = model.all_item_base_representations();
    match model.backbone {
        BackboneKind::BprMf => (user, base),
        BackboneKind::LightGcn => lightgcn_propagate(
            &user,
            &base,
            d,
            &ds.user_adjacency,
            &ds.item_train_degree,
            model.lightgcn_layers,
        ),
        BackboneKind::Vbpr => {
            let items: Vec<f64> = (0..model.num_items)
                .into_par_iter()
                .flat_map_iter(|i| {
                    model.vbpr_item_representation(i, &base[i * d..(i + 1) * d]).into_iter()
                })
                .collect();
            (user, items)
        }
    }
}

/// Score every non-excluded item for user `u` and sort descending;
/// ties break to the lower item index. `exclusions` must be sorted.
pub fn rank_items_for_user(
    u: usize,
    h_user: &[f64],
    h_item: &[f64],
    dim: usize,
    exclusions: &[usize],
) -> Vec<usize> {
    let hu = &h_user[u * dim..(u + 1) * dim];
    let num_items = h_item.len() / dim;
    let mut scored: Vec<(usize, f64)> = (0..num_items)
        .filter(|i| exclusions.binary_search(i).is_err())
        .map(|i| {
            let hi = &h_item[i * dim..(i + 1) * dim];
            (i, hu.iter().zip(hi).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

/// |top-K intersect relevant| / |relevant|. `relevant` must be sorted.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.binary_search(i).is_ok()).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with truncated-ideal normalization.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Which split the held-out items come from; controls the exclusion set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// Relevant = val items, exclusions = train.
    Validation,
    /// Relevant = test items, exclusions = train and val.
    Test,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Keyed "recall@K" / "ndcg@K".
    pub metrics: BTreeMap<String, f64>,
    pub num_evaluated_users: usize,
}

/// Mean Recall@K / NDCG@K over users with a non-empty relevant set.
/// Users are processed in parallel and merged in index order.
pub fn evaluate(
    model: &Model,
    ds: &InteractionDataset,
    split: EvalSplit,
    ks: &[usize],
) -> SplitMetrics {
    let (h_user, h_item) = final_representations(model, ds);
    evaluate_representations(&h_user, &h_item, model.dim, ds, split, ks)
}

pub fn evaluate_representations(
    h_user: &[f64],
    h_item: &[f64],
    dim: usize,
    ds: &InteractionDataset,
    split: EvalSplit,
    ks: &[usize],
) -> SplitMetrics {
    let per_user = per_user_metrics(h_user, h_item, dim, ds, split, ks, None);
    let mut metrics = BTreeMap::new();
    let evaluated = per_user.iter().filter(|r| r.is_some()).count();
    for (ki, &k) in ks.iter().enumerate() {
        let (mut rsum, mut nsum) = (0.0, 0.0);
        for row in per_user.iter().flatten() {
            rsum += row[2 * ki];
            nsum += row[2 * ki + 1];
        }
        let denom = evaluated.max(1) as f64;
        metrics.insert(format!("recall@{k}"), rsum / denom);
        metrics.insert(format!("ndcg@{k}"), nsum / denom);
    }
    SplitMetrics { metrics, num_evaluated_users: evaluated }
}

/// Per user: [recall@k0, ndcg@k0, recall@k1, ...] or None when the
/// (possibly bucket-restricted) relevant set is empty.
fn per_user_metrics(
    h_user: &[f64],
    h_item: &[f64],
    dim: usize,
    ds: &InteractionDataset,
    split: EvalSplit,
    ks: &[usize],
    bucket_filter: Option<&[bool]>,
) -> Vec<Option<Vec<f64>>> {
    (0..ds.num_users)
        .into_par_iter()
        .map(|u| {
            let held_out = match split {
                EvalSplit::Validation => &ds.val_edges,
                EvalSplit::Test => &ds.test_edges,
            };
            let mut relevant = ds.user_items_in(held_out, u);
            if let Some(mask) = bucket_filter {
                relevant.retain(|&i| mask[i]);
            }
            if relevant.is_empty() {
                return None;
            }
            let mut exclusions = ds.user_adjacency[u].clone();
            if split == EvalSplit::Test {
                exclusions.extend(ds.user_items_in(&ds.val_edges, u));
                exclusions.sort_unstable();
                exclusions.dedup();
            }
            let ranked = rank_items_for_user(u, h_user, h_item, dim, &exclusions);
            let mut out = Vec::with_capacity(2 * ks.len());
            for &k in ks {
                out.push(recall_at_k(&ranked, &relevant, k));
                out.push(ndcg_at_k(&ranked, &relevant, k));
            }
            Some(out)
        })
        .collect()
}

/// Popularity buckets over train-interaction counts.
pub const BUCKETS: [(&str, usize, usize); 5] = [
    ("0-5", 0, 5),
    ("6-10", 6, 10),
    ("11-20", 11, 20),
    ("21-50", 21, 50),
    (">=51", 51, usize::MAX),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub label: String,
    pub num_items: usize,
    pub recall_at_20: f64,
    pub ndcg_at_20: f64,
    pub num_evaluated_users: usize,
}

pub fn bucket_index(train_degree: usize) -> usize {
    BUCKETS
        .iter()
        .position(|&(_, lo, hi)| train_degree >= lo && train_degree <= hi)
        .expect("buckets partition the degree range")
}

/// Per-bucket Recall@20 / NDCG@20 on the test split, restricting each
/// user's relevant set to the bucket's items.
pub fn bucket_analysis(model: &Model, ds: &InteractionDataset) -> Vec<BucketMetrics> {
    let (h_user, h_item) = final_representations(model, ds);
    bucket_analysis_representations(&h_user, &h_item, model.dim, ds)
}

pub fn bucket_analysis_representations(
    h_user: &[f64],
    h_item: &[f64],
    dim: usize,
    ds: &InteractionDataset,
) -> Vec<BucketMetrics> {
    // Bucket populations count distinct test items.
    let mut test_items: Vec<usize> = ds.test_edges.iter().map(|&(_, i)| i).collect();
    test_items.sort_unstable();
    test_items.dedup();
    BUCKETS
        .iter()
        .enumerate()
        .map(|(b, &(label, _, _))| {
            let mask: Vec<bool> =
                (0..ds.num_items).map(|i| bucket_index(ds.item_train_degree[i]) == b).collect();
            let num_items = test_items.iter().filter(|&&i| mask[i]).count();
            let rows =
                per_user_metrics(h_user, h_item, dim, ds, EvalSplit::Test, &[20], Some(&mask));
            let evaluated = rows.iter().filter(|r| r.is_some()).count();
            let (mut rsum, mut nsum) = (0.0, 0.0);
            for row in rows.iter().flatten() {
                rsum += row[0];
                nsum += row[1];
            }
            let denom = evaluated.max(1) as f64;
            BucketMetrics {
                label: label.to_string(),
                num_items,
                recall_at_20: rsum / denom,
                ndcg_at_20: nsum / denom,
                num_evaluated_users: evaluated,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterAudit {
    pub user_params: usize,
    pub item_side_params: usize,
    pub tcn_params: usize,
    pub backbone_extra_params: usize,
    /// N x d: what an item ID embedding table would cost.
    pub id_based_equivalent: usize,
    /// item_side_params / id_based_equivalent.
    pub ratio: f64,
}

pub fn parameter_audit(model: &Model) -> ParameterAudit {
    let id_based_equivalent = model.num_items * model.dim;
    let item_side_params = model.item_side_param_count();
    ParameterAudit {
        user_params: model.user_param_count(),
        item_side_params,
        tcn_params: model.tcn_param_count(),
        backbone_extra_params: model.backbone_extra_param_count(),
        id_based_equivalent,
        ratio: item_side_params as f64 / id_based_equivalent as f64,
    }
}

/// Rank items by the number of (modality, slot) positions sharing the
/// query's token id. Descending overlap, ties by ascending index; the
/// query itself is excluded.
pub fn retrieve_similar_by_tokens(
    assignments: &[&TokenAssignment],
    query: usize,
    top_n: usize,
) -> Vec<(usize, usize)> {
    let num_items = assignments.first().map_or(0, |a| a.num_items);
    let mut scored: Vec<(usize, usize)> = (0..num_items)
        .filter(|&i| i != query)
        .map(|i| {
            let overlap = assignments
                .iter()
                .map(|a| {
                    a.item_tokens(i)
                        .iter()
                        .zip(a.item_tokens(query))
                        .filter(|(x, y)| x == y)
                        .count()
                })
                .sum();
            (i, overlap)
        })
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_n);
    scored
}
