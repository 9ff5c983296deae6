//! End-to-end BPR training: uniform triplet sampling with rejection,
//! exact backward through backbone -> TCN -> token tables (or item ID
//! rows), and Adam with sparse semantics for embedding tables.
//!
//! Gradient accumulation is serialized in canonical order so parameter
//! trajectories are identical regardless of thread count.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{
    bpr_loss, bpr_loss_grad, lightgcn_propagate, score, BackboneKind, ItemSource, Model,
};
use crate::dataset::InteractionDataset;
use crate::error::{MotorError, Result};
use crate::eval::{evaluate, EvalSplit};
use crate::tcn::TcnCache;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs, monitored on validation Recall@20.
    pub patience: usize,
    pub l2_coeff: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2048,
            max_epochs: 1000,
            patience: 20,
            l2_coeff: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MomentPair {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl MomentPair {
    pub fn new(len: usize) -> Self {
        MomentPair { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// First/second moments shaped like every trainable buffer; embedding
/// tables use sparse semantics (moments advance only for touched rows,
/// bias correction uses the global step).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub user: MomentPair,
    pub item_id: Option<MomentPair>,
    pub tables: Vec<MomentPair>,
    /// Per group: slot-weight moments.
    pub tcn_slot_weights: Vec<MomentPair>,
    /// Per group, per layer: (weight, bias) moments.
    pub tcn_mlp: Vec<Vec<(MomentPair, MomentPair)>>,
    pub vbpr: Option<MomentPair>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let (item_id, tables, tcn_slot_weights, tcn_mlp) = match &model.item_source {
            ItemSource::Id { embeddings } => {
                (Some(MomentPair::new(embeddings.len())), Vec::new(), Vec::new(), Vec::new())
            }
            ItemSource::Tokens { tables, tcn, .. } => (
                None,
                tables.tables.iter().map(|t| MomentPair::new(t.len())).collect(),
                tcn.groups.iter().map(|g| MomentPair::new(g.slot_weights.len())).collect(),
                tcn.groups
                    .iter()
                    .map(|g| {
                        g.mlp
                            .iter()
                            .map(|l| (MomentPair::new(l.weight.len()), MomentPair::new(l.bias.len())))
                            .collect()
                    })
                    .collect(),
            ),
        };
        AdamState {
            step: 0,
            user: MomentPair::new(model.user_embeddings.len()),
            item_id,
            tables,
            tcn_slot_weights,
            tcn_mlp,
            vbpr: model.vbpr_projection.as_ref().map(|p| MomentPair::new(p.len())),
        }
    }
}

fn adam_apply(
    params: &mut [f32],
    grads: &[f64],
    moments: &mut MomentPair,
    offset: usize,
    cfg: &TrainConfig,
    step: u64,
) {
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for (k, &g) in grads.iter().enumerate() {
        let idx = offset + k;
        let m = b1 * moments.m[idx] as f64 + (1.0 - b1) * g;
        let v = b2 * moments.v[idx] as f64 + (1.0 - b2) * g * g;
        moments.m[idx] = m as f32;
        moments.v[idx] = v as f32;
        let update = cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + cfg.adam_eps);
        params[idx] = (params[idx] as f64 - update) as f32;
    }
}

/// Uniform (user, positive) draws from train edges; negatives are drawn
/// uniformly with rejection against train interactions (cap 200), then a
/// complement draw over the user's sorted adjacency.
pub fn sample_triplets(
    ds: &InteractionDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    if ds.train_edges.is_empty() {
        return Err(MotorError::EmptyDataset);
    }
    let n = ds.num_items;
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (u, i) = ds.train_edges[rng.gen_range(0..ds.train_edges.len())];
        let mut neg = None;
        for _ in 0..200 {
            let cand = rng.gen_range(0..n);
            if !ds.is_train_interaction(u, cand) {
                neg = Some(cand);
                break;
            }
        }
        let neg = match neg {
            Some(j) => j,
            None => complement_draw(&ds.user_adjacency[u], n, rng)
                .ok_or(MotorError::SamplingExhausted { user: u })?,
        };
        out.push((u, i, neg));
    }
    Ok(out)
}

/// r-th item (0-based) of [0, n) \ sorted `exclude`.
fn complement_draw(exclude: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let free = n - exclude.len();
    if free == 0 {
        return None;
    }
    let mut r = rng.gen_range(0..free);
    let mut prev = 0usize;
    for &e in exclude {
        let gap = e - prev;
        if r < gap {
            return Some(prev + r);
        }
        r -= gap;
        prev = e + 1;
    }
    Some(prev + r)
}

/// Dense f64 gradient buffer with a touched-row set, so sparse Adam can
/// walk rows in deterministic order.
#[derive(Debug, Clone)]
pub struct RowGrads {
    pub dim: usize,
    pub data: Vec<f64>,
    pub touched: std::collections::BTreeSet<usize>,
}

impl RowGrads {
    fn new(rows: usize, dim: usize) -> Self {
        RowGrads { dim, data: vec![0.0; rows * dim], touched: Default::default() }
    }

    fn add(&mut self, row: usize, values: &[f64], scale: f64) {
        self.touched.insert(row);
        for (g, &v) in self.data[row * self.dim..(row + 1) * self.dim].iter_mut().zip(values) {
            *g += scale * v;
        }
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct TcnGradBuffers {
    pub slot_weights: Vec<Vec<f64>>,
    pub mlp: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

/// Exact gradients of the summed batch loss w.r.t. every trainable
/// parameter, plus the loss itself.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss_sum: f64,
    pub user: RowGrads,
    /// ID mode: gradients of the item embedding rows. ID-free mode:
    /// gradients w.r.t. the item base representations (pre-routing).
    pub item: RowGrads,
    /// ID-free mode: per (table, token-row) gradients.
    pub table_rows: BTreeMap<(usize, usize), Vec<f64>>,
    pub tcn: Option<TcnGradBuffers>,
    pub vbpr: Option<Vec<f64>>,
}

/// Forward + backward over a batch of triplets; no parameters change.
pub fn compute_batch_gradients(
    model: &Model,
    ds: &InteractionDataset,
    triplets: &[(usize, usize, usize)],
    cfg: &TrainConfig,
    batch_index: usize,
) -> Result<BatchGrads> {
    let d = model.dim;
    let m = model.num_users;
    let n = model.num_items;

    // Items needing a base representation this step.
    let mut batch_items: Vec<usize> =
        triplets.iter().flat_map(|&(_, i, j)| [i, j]).collect();
    batch_items.sort_unstable();
    batch_items.dedup();

    let full_graph = model.backbone == BackboneKind::LightGcn;
    let (base_reps, caches, rep_index): (Vec<f64>, Vec<Option<TcnCache>>, Vec<usize>) =
        if full_graph {
            let (reps, caches) = model.all_item_base_representations();
            (reps, caches, (0..n).collect())
        } else {
            let pairs: Vec<(Vec<f64>, Option<TcnCache>)> = batch_items
                .par_iter()
                .map(|&i| model.item_base_representation(i))
                .collect();
            let mut flat = Vec::with_capacity(pairs.len() * d);
            let mut caches = Vec::with_capacity(pairs.len());
            let mut index = vec![usize::MAX; n];
            for (slot, ((rep, cache), &item)) in pairs.into_iter().zip(&batch_items).enumerate() {
                flat.extend(rep);
                caches.push(cache);
                index[item] = slot;
            }
            (flat, caches, index)
        };

    // Final representations for scoring.
    let user_f64: Vec<f64> = model.user_embeddings.iter().map(|&v| v as f64).collect();
    let (h_user, h_item): (Vec<f64>, Option<Vec<f64>>) = if full_graph {
        let (hu, hi) = lightgcn_propagate(
            &user_f64,
            &base_reps,
            d,
            &ds.user_adjacency,
            &ds.item_train_degree,
            model.lightgcn_layers,
        );
        (hu, Some(hi))
    } else {
        (user_f64, None)
    };

    let item_rep = |item: usize| -> Vec<f64> {
        let slot = if full_graph { item } else { rep_index[item] };
        let base = if let Some(hi) = &h_item {
            hi[slot * d..(slot + 1) * d].to_vec()
        } else {
            base_reps[slot * d..(slot + 1) * d].to_vec()
        };
        if model.backbone == BackboneKind::Vbpr {
            model.vbpr_item_representation(item, &base)
        } else {
            base
        }
    };

    // Forward + loss, accumulating gradients w.r.t. h_u and h_i in
    // triplet order.
    let mut g_user = RowGrads::new(m, d);
    let mut g_item = RowGrads::new(n, d);
    let mut loss_sum = 0.0f64;
    for &(u, i, j) in triplets {
        let hu = &h_user[u * d..(u + 1) * d];
        let hi = item_rep(i);
        let hj = item_rep(j);
        let s_pos = score(hu, &hi);
        let s_neg = score(hu, &hj);
        let loss = bpr_loss(s_pos, s_neg);
        if !loss.is_finite() {
            return Err(MotorError::NonFiniteLoss {
                batch: batch_index,
                msg: format!("triplet ({u},{i},{j}): s_pos={s_pos}, s_neg={s_neg}"),
            });
        }
        loss_sum += loss;
        let g = bpr_loss_grad(s_pos, s_neg);
        let diff: Vec<f64> = hi.iter().zip(&hj).map(|(a, b)| g * (a - b)).collect();
        g_user.add(u, &diff, 1.0);
        let gu_scaled: Vec<f64> = hu.iter().map(|&v| g * v).collect();
        g_item.add(i, &gu_scaled, 1.0);
        g_item.add(j, &gu_scaled, -1.0);
    }

    // VBPR projection gradient; the base-representation gradient equals
    // the h_i gradient.
    let mut vbpr_grad: Option<Vec<f64>> = None;
    if model.backbone == BackboneKind::Vbpr {
        let proj = model.vbpr_projection.as_ref().expect("VBPR projection");
        let feats = model.concat_features.as_ref().expect("VBPR features");
        let fdim = proj.len() / d;
        let mut pg = vec![0.0f64; proj.len()];
        for &item in g_item.touched.iter() {
            let gi = g_item.row(item);
            let f = &feats[item * fdim..(item + 1) * fdim];
            for (k, &fk) in f.iter().enumerate() {
                if fk == 0.0 {
                    continue;
                }
                for (slot, &gv) in gi.iter().enumerate() {
                    pg[k * d + slot] += fk as f64 * gv;
                }
            }
        }
        vbpr_grad = Some(pg);
    }

    // Backbone backward: LightGCN propagation is self-adjoint, so the
    // forward operator applied to gradients is the backward pass.
    let (mut g_user, mut g_item) = if full_graph {
        let (gu, gi) = lightgcn_propagate(
            &g_user.data,
            &g_item.data,
            d,
            &ds.user_adjacency,
            &ds.item_train_degree,
            model.lightgcn_layers,
        );
        let mut gub = RowGrads { dim: d, data: gu, touched: Default::default() };
        let mut gib = RowGrads { dim: d, data: gi, touched: Default::default() };
        for u in 0..m {
            if gub.row(u).iter().any(|&v| v != 0.0) {
                gub.touched.insert(u);
            }
        }
        for i in 0..n {
            if gib.row(i).iter().any(|&v| v != 0.0) {
                gib.touched.insert(i);
            }
        }
        (gub, gib)
    } else {
        (g_user, g_item)
    };

    // L2 on touched embedding rows (user rows and the item-side rows).
    if cfg.l2_coeff > 0.0 {
        let touched: Vec<usize> = g_user.touched.iter().copied().collect();
        for u in touched {
            let row: Vec<f64> =
                model.user_embeddings[u * d..(u + 1) * d].iter().map(|&v| v as f64).collect();
            loss_sum += cfg.l2_coeff * row.iter().map(|v| v * v).sum::<f64>();
            let reg: Vec<f64> = row.iter().map(|v| 2.0 * cfg.l2_coeff * v).collect();
            g_user.add(u, &reg, 1.0);
        }
        if let ItemSource::Id { embeddings } = &model.item_source {
            let touched: Vec<usize> = g_item.touched.iter().copied().collect();
            for i in touched {
                let row: Vec<f64> =
                    embeddings[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
                loss_sum += cfg.l2_coeff * row.iter().map(|v| v * v).sum::<f64>();
                let reg: Vec<f64> = row.iter().map(|v| 2.0 * cfg.l2_coeff * v).collect();
                g_item.add(i, &reg, 1.0);
            }
        }
    }

    // Route item-side gradients: ID rows directly, or through the TCN
    // into slot weights, MLP layers and the looked-up token rows.
    let mut table_row_grads: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut tcn_grads: Option<TcnGradBuffers> = None;
    if let ItemSource::Tokens { tables, assignments, tcn } = &model.item_source {
        let mut buffers = TcnGradBuffers {
            slot_weights: tcn.groups.iter().map(|g| vec![0.0; g.slot_weights.len()]).collect(),
            mlp: tcn
                .groups
                .iter()
                .map(|g| {
                    g.mlp
                        .iter()
                        .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                        .collect()
                })
                .collect(),
        };
        let refs: Vec<&crate::quantizer::TokenAssignment> = assignments.iter().collect();
        for &item in g_item.touched.iter() {
            let slot = if full_graph { item } else { rep_index[item] };
            let cache = caches[slot].as_ref().expect("ID-free caches");
            let grads = tcn.backward(cache, g_item.row(item));
            for (g, wg) in grads.slot_weights.iter().enumerate() {
                for (acc, &v) in buffers.slot_weights[g].iter_mut().zip(wg) {
                    *acc += v;
                }
            }
            for (g, layers) in grads.mlp.iter().enumerate() {
                for (l, (wg, bg)) in layers.iter().enumerate() {
                    let (aw, ab) = &mut buffers.mlp[g][l];
                    for (acc, &v) in aw.iter_mut().zip(wg) {
                        *acc += v;
                    }
                    for (acc, &v) in ab.iter_mut().zip(bg) {
                        *acc += v;
                    }
                }
            }
            for ((table, row), ig) in
                tables.lookup_rows(&refs, item).into_iter().zip(grads.inputs)
            {
                let entry = table_row_grads.entry((table, row)).or_insert_with(|| vec![0.0; d]);
                for (acc, &v) in entry.iter_mut().zip(&ig) {
                    *acc += v;
                }
            }
        }
        if cfg.l2_coeff > 0.0 {
            for (&(table, row), grad) in table_row_grads.iter_mut() {
                let trow = tables.row(table, row);
                loss_sum +=
                    cfg.l2_coeff * trow.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                for (g, &v) in grad.iter_mut().zip(trow) {
                    *g += 2.0 * cfg.l2_coeff * v as f64;
                }
            }
        }
        tcn_grads = Some(buffers);
    }

    Ok(BatchGrads {
        loss_sum,
        user: g_user,
        item: g_item,
        table_rows: table_row_grads,
        tcn: tcn_grads,
        vbpr: vbpr_grad,
    })
}

/// One optimization step over a batch of triplets. Returns the summed
/// batch loss (callers divide by triplet count).
fn train_batch(
    model: &mut Model,
    ds: &InteractionDataset,
    triplets: &[(usize, usize, usize)],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    batch_index: usize,
) -> Result<f64> {
    let grads = compute_batch_gradients(model, ds, triplets, cfg, batch_index)?;
    let d = model.dim;

    // Adam step: one global timestep, touched rows in deterministic order.
    adam.step += 1;
    let step = adam.step;
    for &u in &grads.user.touched {
        adam_apply(&mut model.user_embeddings, grads.user.row(u), &mut adam.user, u * d, cfg, step);
    }
    match &mut model.item_source {
        ItemSource::Id { embeddings } => {
            let moments = adam.item_id.as_mut().expect("item moments");
            for &i in &grads.item.touched {
                adam_apply(embeddings, grads.item.row(i), moments, i * d, cfg, step);
            }
        }
        ItemSource::Tokens { tables, tcn, .. } => {
            for ((table, row), grad) in &grads.table_rows {
                adam_apply(
                    &mut tables.tables[*table],
                    grad,
                    &mut adam.tables[*table],
                    row * d,
                    cfg,
                    step,
                );
            }
            let buffers = grads.tcn.as_ref().expect("tcn grads");
            for (g, group) in tcn.groups.iter_mut().enumerate() {
                adam_apply(
                    &mut group.slot_weights,
                    &buffers.slot_weights[g],
                    &mut adam.tcn_slot_weights[g],
                    0,
                    cfg,
                    step,
                );
                for (l, layer) in group.mlp.iter_mut().enumerate() {
                    let (wg, bg) = &buffers.mlp[g][l];
                    let (wm, bm) = &mut adam.tcn_mlp[g][l];
                    adam_apply(&mut layer.weight, wg, wm, 0, cfg, step);
                    adam_apply(&mut layer.bias, bg, bm, 0, cfg, step);
                }
            }
        }
    }
    if let (Some(proj), Some(pg)) = (model.vbpr_projection.as_mut(), &grads.vbpr) {
        adam_apply(proj, pg, adam.vbpr.as_mut().expect("vbpr moments"), 0, cfg, step);
    }

    Ok(grads.loss_sum)
}

/// One pass over ceil(|train| / batch_size) batches; returns the mean
/// triplet loss.
pub fn train_epoch(
    model: &mut Model,
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let num_batches = ds.train_edges.len().div_ceil(cfg.batch_size);
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for b in 0..num_batches {
        let size = cfg.batch_size.min(ds.train_edges.len() - b * cfg.batch_size).max(1);
        let triplets = sample_triplets(ds, size, rng)?;
        loss_sum += train_batch(model, ds, &triplets, cfg, adam, b)?;
        count += triplets.len();
    }
    Ok(loss_sum / count.max(1) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub val_recall_at_20: f64,
    pub val_ndcg_at_20: f64,
    pub wall_secs: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_recall_at_20: f64,
}

/// Train with early stopping on validation Recall@20; returns the best
/// checkpoint and the per-epoch log.
pub fn fit(
    mut model: Model,
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FitOutcome> {
    use rand::SeedableRng;
    if ds.val_edges.is_empty() {
        return Err(MotorError::EmptyValidation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(&model);
    let mut log = Vec::new();
    let mut best_model = model.clone();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    if cfg.max_epochs == 0 {
        let start = Instant::now();
        let metrics = evaluate(&model, ds, EvalSplit::Validation, &[20]);
        log.push(EpochLog {
            epoch: 0,
            loss: None,
            val_recall_at_20: metrics.metrics["recall@20"],
            val_ndcg_at_20: metrics.metrics["ndcg@20"],
            wall_secs: start.elapsed().as_secs_f64(),
        });
        return Ok(FitOutcome {
            best_val_recall_at_20: metrics.metrics["recall@20"],
            model,
            log,
            best_epoch: 0,
        });
    }

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let loss = train_epoch(&mut model, ds, cfg, &mut adam, &mut rng)?;
        let metrics = evaluate(&model, ds, EvalSplit::Validation, &[20]);
        let recall = metrics.metrics["recall@20"];
        log.push(EpochLog {
            epoch,
            loss: Some(loss),
            val_recall_at_20: recall,
            val_ndcg_at_20: metrics.metrics["ndcg@20"],
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if recall > best_recall {
            best_recall = recall;
            best_model = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(FitOutcome {
        model: best_model,
        log,
        best_epoch,
        best_val_recall_at_20: best_recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneKind, Model};
    use crate::dataset::{build_dataset, Modality};
    use crate::quantizer::TokenAssignment;
    use crate::tcn::TcnVariant;
    use rand::SeedableRng;

    fn tiny_dataset() -> InteractionDataset {
        // 3 users x 4 items; every item has a train edge and every user
        // has at least one non-interacted item to sample as a negative.
        let edges: Vec<(String, String)> = [
            ("u0", "i0"),
            ("u0", "i1"),
            ("u0", "i2"),
            ("u1", "i1"),
            ("u1", "i2"),
            ("u1", "i3"),
            ("u2", "i0"),
            ("u2", "i3"),
        ]
        .iter()
        .map(|&(u, i)| (u.to_string(), i.to_string()))
        .collect();
        build_dataset(&edges, 5).unwrap()
    }

    #[test]
    fn negatives_avoid_train_items() {
        let ds = tiny_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            for (u, _, j) in sample_triplets(&ds, 16, &mut rng).unwrap() {
                assert!(!ds.is_train_interaction(u, j));
            }
        }
    }

    #[test]
    fn empty_train_errors() {
        let mut ds = tiny_dataset();
        ds.train_edges.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_triplets(&ds, 4, &mut rng).is_err());
    }

    #[test]
    fn complement_draw_covers_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let exclude = vec![1, 3];
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let v = complement_draw(&exclude, 5, &mut rng).unwrap();
            assert!(v == 0 || v == 2 || v == 4);
            seen.insert(v);
        }
        assert_eq!(seen.len(), 3);
        assert!(complement_draw(&[0, 1, 2], 3, &mut rng).is_none());
    }

    #[test]
    fn negative_sampling_is_uniform_over_complement() {
        // User with train item {0} of N=4: negatives must hit {1,2,3}
        // uniformly within 3-sigma binomial bounds.
        let edges: Vec<(String, String)> = vec![
            ("a".into(), "x0".into()),
            ("b".into(), "x1".into()),
            ("b".into(), "x2".into()),
            ("b".into(), "x3".into()),
        ]
        .into_iter()
        .map(|(u, i)| (u, i))
        .collect();
        let ds = build_dataset(&edges, 0).unwrap();
        let a = ds.user_ids.iter().position(|s| s == "a").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 30_000usize;
        let mut counts = vec![0usize; 4];
        let mut drawn = 0usize;
        while drawn < draws {
            for (u, _, j) in sample_triplets(&ds, 256, &mut rng).unwrap() {
                if u == a {
                    counts[j] += 1;
                    drawn += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        assert_eq!(counts[ds.item_ids.iter().position(|s| s == "x0").unwrap()], 0);
        let p = 1.0 / 3.0;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for (idx, &c) in counts.iter().enumerate() {
            if ds.item_ids[idx] == "x0" {
                continue;
            }
            assert!(
                (c as f64 - total as f64 * p).abs() < 3.0 * sigma,
                "item {idx}: {c} of {total}"
            );
        }
    }

    fn toy_assignments(n: usize) -> Vec<TokenAssignment> {
        // Token patterns are distinct per item so no two items collapse to
        // the same representation.
        let mk = |modality, offset: usize| TokenAssignment {
            modality,
            num_items: n,
            num_slots: 2,
            codebook_size: 4,
            tokens: (0..n * 2).map(|v| (((v * 3 + offset) % 7) % 4) as u16).collect(),
        };
        vec![mk(Modality::Vision, 0), mk(Modality::Text, 1)]
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        let ds = tiny_dataset();
        for mode_free in [false, true] {
            let mut model = if mode_free {
                Model::new_id_free(
                    ds.num_users,
                    ds.num_items,
                    4,
                    BackboneKind::BprMf,
                    0,
                    TcnVariant::ModalAgnostic,
                    toy_assignments(ds.num_items),
                    4,
                    None,
                    3,
                )
                .unwrap()
            } else {
                Model::new_id_based(ds.num_users, ds.num_items, 4, BackboneKind::BprMf, 0, None, 3)
                    .unwrap()
            };
            let before = model.clone();
            let cfg = TrainConfig { learning_rate: 0.0, batch_size: 8, ..Default::default() };
            let mut adam = AdamState::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            train_epoch(&mut model, &ds, &cfg, &mut adam, &mut rng).unwrap();
            assert_eq!(model.user_embeddings, before.user_embeddings);
            match (&model.item_source, &before.item_source) {
                (ItemSource::Id { embeddings: a }, ItemSource::Id { embeddings: b }) => {
                    assert_eq!(a, b)
                }
                (ItemSource::Tokens { tables: a, .. }, ItemSource::Tokens { tables: b, .. }) => {
                    assert_eq!(a.tables, b.tables)
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn single_triplet_overfits() {
        let ds = tiny_dataset();
        let mut model =
            Model::new_id_based(ds.num_users, ds.num_items, 4, BackboneKind::BprMf, 0, None, 7)
                .unwrap();
        let cfg = TrainConfig { learning_rate: 0.05, ..Default::default() };
        let mut adam = AdamState::new(&model);
        let triplet = vec![(0usize, ds.user_adjacency[0][0], {
            let mut j = 0;
            while ds.is_train_interaction(0, j) {
                j += 1;
            }
            j
        })];
        let mut losses = Vec::new();
        for b in 0..300 {
            losses.push(train_batch(&mut model, &ds, &triplet, &cfg, &mut adam, b).unwrap());
        }
        assert!(losses.last().unwrap() < &0.1, "final loss {}", losses.last().unwrap());
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss not monotone: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let run = || {
            let mut model = Model::new_id_free(
                ds.num_users,
                ds.num_items,
                4,
                BackboneKind::BprMf,
                0,
                TcnVariant::ModalSpecific,
                toy_assignments(ds.num_items),
                4,
                None,
                11,
            )
            .unwrap();
            let cfg = TrainConfig { batch_size: 4, ..Default::default() };
            let mut adam = AdamState::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(train_epoch(&mut model, &ds, &cfg, &mut adam, &mut rng).unwrap());
            }
            (losses, model.user_embeddings)
        };
        let (la, ua) = run();
        let (lb, ub) = run();
        assert_eq!(la, lb);
        assert_eq!(ua, ub);
    }

    #[test]
    fn gradient_routing_touches_only_batch_token_rows() {
        let ds = tiny_dataset();
        let assignments = toy_assignments(ds.num_items);
        let mut model = Model::new_id_free(
            ds.num_users,
            ds.num_items,
            4,
            BackboneKind::BprMf,
            0,
            TcnVariant::ModalAgnostic,
            assignments.clone(),
            4,
            None,
            13,
        )
        .unwrap();
        let before = match &model.item_source {
            ItemSource::Tokens { tables, .. } => tables.tables.clone(),
            _ => unreachable!(),
        };
        let cfg = TrainConfig::default();
        let mut adam = AdamState::new(&model);
        let (u, i) = ds.train_edges[0];
        let mut j = 0;
        while ds.is_train_interaction(u, j) {
            j += 1;
        }
        train_batch(&mut model, &ds, &[(u, i, j)], &cfg, &mut adam, 0).unwrap();
        let (tables_after, tabs) = match &model.item_source {
            ItemSource::Tokens { tables, .. } => (tables.tables.clone(), tables.clone()),
            _ => unreachable!(),
        };
        let refs: Vec<&TokenAssignment> = assignments.iter().collect();
        let mut touched: std::collections::HashSet<(usize, usize)> = Default::default();
        for item in [i, j] {
            touched.extend(tabs.lookup_rows(&refs, item));
        }
        let d = 4;
        for (t, (ta, tb)) in tables_after.iter().zip(&before).enumerate() {
            for row in 0..4 {
                let changed = ta[row * d..(row + 1) * d] != tb[row * d..(row + 1) * d];
                assert_eq!(
                    changed,
                    touched.contains(&(t, row)),
                    "table {t} row {row}: changed={changed}"
                );
            }
        }
    }

    #[test]
    fn fit_early_stopping_and_empty_val() {
        let ds = tiny_dataset();
        let model =
            Model::new_id_based(ds.num_users, ds.num_items, 4, BackboneKind::BprMf, 0, None, 1)
                .unwrap();
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        if ds.val_edges.is_empty() {
            assert!(matches!(fit(model, &ds, &cfg, 0), Err(MotorError::EmptyValidation)));
        } else {
            let out = fit(model, &ds, &cfg, 0).unwrap();
            assert_eq!(out.log.len(), 1);
            assert!(out.log[0].loss.is_none());
        }
    }

    #[test]
    fn fit_runs_on_dataset_with_validation() {
        // Build a dataset large enough that users hold out val/test edges.
        let mut edges = Vec::new();
        for u in 0..6 {
            for i in 0..12 {
                edges.push((format!("u{u}"), format!("i{i}")));
            }
        }
        let ds = build_dataset(&edges, 2).unwrap();
        assert!(!ds.val_edges.is_empty());
        let model =
            Model::new_id_based(ds.num_users, ds.num_items, 4, BackboneKind::BprMf, 0, None, 4)
                .unwrap();
        let cfg = TrainConfig { max_epochs: 3, batch_size: 16, ..Default::default() };
        let out = fit(model, &ds, &cfg, 8).unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(out.best_epoch >= 1);
    }

    #[test]
    fn lightgcn_training_step_runs() {
        let ds = tiny_dataset();
        let mut model = Model::new_id_based(
            ds.num_users,
            ds.num_items,
            4,
            BackboneKind::LightGcn,
            2,
            None,
            6,
        )
        .unwrap();
        let cfg = TrainConfig::default();
        let mut adam = AdamState::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let loss = train_epoch(&mut model, &ds, &cfg, &mut adam, &mut rng).unwrap();
        assert!(loss.is_finite());
    }
}
