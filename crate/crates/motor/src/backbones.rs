//! Recommender backbones sharing one (h_u, h_i, score) contract:
//! BPR-MF, LightGCN and the concatenated-feature VBPR, each in ID-based
//! (item ID embedding table) or ID-free (token representation) mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::Result;
use crate::quantizer::TokenAssignment;
use crate::tcn::{Tcn, TcnCache, TcnVariant};
use crate::token_store::{xavier_bound, TokenEmbeddingTables};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    BprMf,
    LightGcn,
    Vbpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    IdBased,
    IdFree,
}

/// Where item base representations come from: a per-item ID embedding row,
/// or the token pipeline (tables -> TCN).
#[derive(Debug, Clone)]
pub enum ItemSource {
    Id { embeddings: Vec<f32> },
    Tokens { tables: TokenEmbeddingTables, assignments: Vec<TokenAssignment>, tcn: Tcn },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    /// M x d row-major.
    pub user_embeddings: Vec<f32>,
    pub item_source: ItemSource,
    pub backbone: BackboneKind,
    pub lightgcn_layers: usize,
    /// (d_v + d_t) x d row-major; present iff backbone is VBPR.
    pub vbpr_projection: Option<Vec<f32>>,
    /// N x (d_v + d_t) concatenated modal features; present iff VBPR.
    pub concat_features: Option<Vec<f32>>,
}

impl Model {
    pub fn new_id_based(
        num_users: usize,
        num_items: usize,
        dim: usize,
        backbone: BackboneKind,
        lightgcn_layers: usize,
        features: Option<(&FeatureMatrix, &FeatureMatrix)>,
        seed: u64,
    ) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_embeddings = xavier_matrix(num_users, dim, &mut rng);
        let item_embeddings = xavier_matrix(num_items, dim, &mut rng);
        let mut model = Model {
            num_users,
            num_items,
            dim,
            user_embeddings,
            item_source: ItemSource::Id { embeddings: item_embeddings },
            backbone,
            lightgcn_layers,
            vbpr_projection: None,
            concat_features: None,
        };
        model.attach_vbpr(features, &mut rng)?;
        Ok(model)
    }

    pub fn new_id_free(
        num_users: usize,
        num_items: usize,
        dim: usize,
        backbone: BackboneKind,
        lightgcn_layers: usize,
        tcn_variant: TcnVariant,
        assignments: Vec<TokenAssignment>,
        codebook_size: usize,
        features: Option<(&FeatureMatrix, &FeatureMatrix)>,
        seed: u64,
    ) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_embeddings = xavier_matrix(num_users, dim, &mut rng);
        let slots: Vec<usize> = assignments.iter().map(|a| a.num_slots).collect();
        let tables = TokenEmbeddingTables::init(&slots, codebook_size, dim, rng.gen());
        let tcn = Tcn::init(tcn_variant, &slots, dim, rng.gen());
        let mut model = Model {
            num_users,
            num_items,
            dim,
            user_embeddings,
            item_source: ItemSource::Tokens { tables, assignments, tcn },
            backbone,
            lightgcn_layers,
            vbpr_projection: None,
            concat_features: None,
        };
        model.attach_vbpr(features, &mut rng)?;
        Ok(model)
    }

    fn attach_vbpr(
        &mut self,
        features: Option<(&FeatureMatrix, &FeatureMatrix)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if self.backbone != BackboneKind::Vbpr {
            return Ok(());
        }
        let (fv, ft) = features.ok_or_else(|| crate::error::MotorError::Config(
            "VBPR requires both modality feature matrices".into(),
        ))?;
        let fdim = fv.dim + ft.dim;
        let mut concat = Vec::with_capacity(self.num_items * fdim);
        for i in 0..self.num_items {
            concat.extend_from_slice(fv.row(i));
            concat.extend_from_slice(ft.row(i));
        }
        self.vbpr_projection = Some(xavier_matrix(fdim, self.dim, rng));
        self.concat_features = Some(concat);
        Ok(())
    }

    pub fn user_embedding(&self, u: usize) -> &[f32] {
        &self.user_embeddings[u * self.dim..(u + 1) * self.dim]
    }

    /// Item base representation: ID embedding row or TCN output r_i.
    /// Returns the TCN cache in ID-free mode for the backward pass.
    pub fn item_base_representation(&self, item: usize) -> (Vec<f64>, Option<TcnCache>) {
        match &self.item_source {
            ItemSource::Id { embeddings } => (
                embeddings[item * self.dim..(item + 1) * self.dim]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
                None,
            ),
            ItemSource::Tokens { tables, assignments, tcn } => {
                let refs: Vec<&TokenAssignment> = assignments.iter().collect();
                let embs = tables.lookup(&refs, item).expect("consistent token pipeline");
                let (r, cache) = tcn.forward(&embs);
                (r, Some(cache))
            }
        }
    }

    /// Base representations of every item, plus TCN caches in ID-free mode.
    pub fn all_item_base_representations(&self) -> (Vec<f64>, Vec<Option<TcnCache>>) {
        let d = self.dim;
        let pairs: Vec<(Vec<f64>, Option<TcnCache>)> = (0..self.num_items)
            .into_par_iter()
            .map(|i| self.item_base_representation(i))
            .collect();
        let mut flat = Vec::with_capacity(self.num_items * d);
        let mut caches = Vec::with_capacity(self.num_items);
        for (r, c) in pairs {
            flat.extend(r);
            caches.push(c);
        }
        (flat, caches)
    }

    /// VBPR item representation: base + projection applied to the item's
    /// concatenated modal features.
    pub fn vbpr_item_representation(&self, item: usize, base: &[f64]) -> Vec<f64> {
        let proj = self.vbpr_projection.as_ref().expect("VBPR projection");
        let feats = self.concat_features.as_ref().expect("VBPR features");
        let fdim = proj.len() / self.dim;
        let f = &feats[item * fdim..(item + 1) * fdim];
        let mut out = base.to_vec();
        for (k, &fk) in f.iter().enumerate() {
            if fk == 0.0 {
                continue;
            }
            let row = &proj[k * self.dim..(k + 1) * self.dim];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += fk as f64 * p as f64;
            }
        }
        out
    }

    pub fn user_param_count(&self) -> usize {
        self.user_embeddings.len()
    }

    pub fn item_side_param_count(&self) -> usize {
        match &self.item_source {
            ItemSource::Id { embeddings } => embeddings.len(),
            ItemSource::Tokens { tables, .. } => tables.param_count(),
        }
    }

    pub fn tcn_param_count(&self) -> usize {
        match &self.item_source {
            ItemSource::Id { .. } => 0,
            ItemSource::Tokens { tcn, .. } => tcn.param_count(),
        }
    }

    pub fn backbone_extra_param_count(&self) -> usize {
        self.vbpr_projection.as_ref().map_or(0, |p| p.len())
    }
}

pub fn xavier_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let a = xavier_bound(rows, cols);
    (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect()
}

/// Symmetric-normalized neighbor averaging over the train bipartite graph,
/// final representation = mean of layers 0..L. Degree-0 nodes keep their
/// layer-0 embedding untouched.
///
/// The propagation operator is symmetric, so this same function also
/// serves as the backward pass (applied to upstream gradients).
pub fn lightgcn_propagate(
    user_embs: &[f64],
    item_embs: &[f64],
    dim: usize,
    user_adjacency: &[Vec<usize>],
    item_degrees: &[usize],
    layers: usize,
) -> (Vec<f64>, Vec<f64>) {
    let m = user_adjacency.len();
    let n = item_degrees.len();
    debug_assert_eq!(user_embs.len(), m * dim);
    debug_assert_eq!(item_embs.len(), n * dim);
    let mut acc_u = user_embs.to_vec();
    let mut acc_i = item_embs.to_vec();
    let mut cur_u = user_embs.to_vec();
    let mut cur_i = item_embs.to_vec();
    for _ in 0..layers {
        let mut next_u = vec![0.0f64; m * dim];
        let mut next_i = vec![0.0f64; n * dim];
        for (u, items) in user_adjacency.iter().enumerate() {
            let du = items.len();
            for &i in items {
                let norm = 1.0 / ((du as f64) * (item_degrees[i] as f64)).sqrt();
                for k in 0..dim {
                    next_u[u * dim + k] += norm * cur_i[i * dim + k];
                    next_i[i * dim + k] += norm * cur_u[u * dim + k];
                }
            }
        }
        for (a, &v) in acc_u.iter_mut().zip(&next_u) {
            *a += v;
        }
        for (a, &v) in acc_i.iter_mut().zip(&next_i) {
            *a += v;
        }
        cur_u = next_u;
        cur_i = next_i;
    }
    let scale = 1.0 / (layers as f64 + 1.0);
    let mut h_u = acc_u;
    let mut h_i = acc_i;
    for v in h_u.iter_mut().chain(h_i.iter_mut()) {
        *v *= scale;
    }
    // Isolated nodes: no propagation, keep layer 0.
    for (u, items) in user_adjacency.iter().enumerate() {
        if items.is_empty() {
            h_u[u * dim..(u + 1) * dim].copy_from_slice(&user_embs[u * dim..(u + 1) * dim]);
        }
    }
    for (i, &deg) in item_degrees.iter().enumerate() {
        if deg == 0 {
            h_i[i * dim..(i + 1) * dim].copy_from_slice(&item_embs[i * dim..(i + 1) * dim]);
        }
    }
    (h_u, h_i)
}

/// Interaction score: inner product of the final representations.
pub fn score(h_u: &[f64], h_i: &[f64]) -> f64 {
    h_u.iter().zip(h_i).map(|(a, b)| a * b).sum()
}

/// BPR loss -ln sigma(s_pos - s_neg), computed as softplus(-(s_pos-s_neg)).
pub fn bpr_loss(s_pos: f64, s_neg: f64) -> f64 {
    softplus(-(s_pos - s_neg))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// d bpr_loss / d (s_pos - s_neg) = -sigma(-(s_pos - s_neg)).
pub fn bpr_loss_grad(s_pos: f64, s_neg: f64) -> f64 {
    let x = s_pos - s_neg;
    -1.0 / (1.0 + x.exp())
}
