//! Planted-cluster synthetic data: items belong to latent clusters, their
//! modality features are cluster centroids plus Gaussian noise, and users
//! interact mostly within a home cluster with a heavy-tailed item
//! popularity. Gives quantizers and recommenders a recoverable signal at
//! desk scale.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{build_dataset, write_feature_matrix, FeatureMatrix, InteractionDataset, Modality};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub vision_dim: usize,
    pub text_dim: usize,
    /// Feature noise sigma relative to unit-variance centroids.
    pub feature_noise: f64,
    pub interactions_per_user: usize,
    /// Probability a draw comes from the user's home cluster.
    pub intra_cluster_prob: f64,
    /// Zipf exponent of within-cluster item popularity.
    pub popularity_exponent: f64,
    /// Within-cluster popularity rank at which the Zipf curve is cut off;
    /// later ranks form a near-cold tail of rarely surfaced items.
    pub tail_start_rank: usize,
    /// Relative popularity weight of tail ranks. Small but nonzero so
    /// tail items still collect a handful of interactions.
    pub tail_weight: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 2000,
            num_items: 500,
            num_clusters: 20,
            vision_dim: 64,
            text_dim: 32,
            feature_noise: 0.25,
            interactions_per_user: 12,
            intra_cluster_prob: 0.95,
            popularity_exponent: 2.5,
            tail_start_rank: 18,
            tail_weight: 0.0003,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct SyntheticBundle {
    pub edges: Vec<(String, String)>,
    pub dataset: InteractionDataset,
    /// Features are row-aligned with `dataset` item indices, so filtered
    /// items are absent.
    pub vision: FeatureMatrix,
    pub text: FeatureMatrix,
    /// Planted cluster per dense item index.
    pub item_cluster: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0,1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticBundle> {
    assert!(cfg.num_clusters > 0 && cfg.num_items >= cfg.num_clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let cluster_of = |item: usize| item % cfg.num_clusters;
    let centroids_v: Vec<Vec<f64>> = (0..cfg.num_clusters)
        .map(|_| (0..cfg.vision_dim).map(|_| gaussian(&mut rng)).collect())
        .collect();
    let centroids_t: Vec<Vec<f64>> = (0..cfg.num_clusters)
        .map(|_| (0..cfg.text_dim).map(|_| gaussian(&mut rng)).collect())
        .collect();

    let mut raw_vision = vec![0.0f32; cfg.num_items * cfg.vision_dim];
    let mut raw_text = vec![0.0f32; cfg.num_items * cfg.text_dim];
    for i in 0..cfg.num_items {
        let c = cluster_of(i);
        for k in 0..cfg.vision_dim {
            raw_vision[i * cfg.vision_dim + k] =
                (centroids_v[c][k] + cfg.feature_noise * gaussian(&mut rng)) as f32;
        }
        for k in 0..cfg.text_dim {
            raw_text[i * cfg.text_dim + k] =
                (centroids_t[c][k] + cfg.feature_noise * gaussian(&mut rng)) as f32;
        }
    }

    // Within-cluster Zipf popularity over member items in index order.
    let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_clusters];
    for i in 0..cfg.num_items {
        cluster_items[cluster_of(i)].push(i);
    }
    let samplers: Vec<WeightedIndex<f64>> = cluster_items
        .iter()
        .map(|items| {
            let weights: Vec<f64> = (0..items.len())
                .map(|r| {
                    if r < cfg.tail_start_rank {
                        1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent)
                    } else {
                        cfg.tail_weight
                    }
                })
                .collect();
            WeightedIndex::new(weights).expect("non-empty cluster")
        })
        .collect();

    let mut edges = Vec::with_capacity(cfg.num_users * cfg.interactions_per_user);
    let width = (cfg.num_items.max(2) as f64).log10().ceil() as usize;
    for u in 0..cfg.num_users {
        let home = u % cfg.num_clusters;
        let mut chosen: HashSet<usize> = HashSet::new();
        let mut attempts = 0;
        while chosen.len() < cfg.interactions_per_user && attempts < cfg.interactions_per_user * 50
        {
            attempts += 1;
            let c = if rng.gen::<f64>() < cfg.intra_cluster_prob {
                home
            } else {
                rng.gen_range(0..cfg.num_clusters)
            };
            let item = cluster_items[c][samplers[c].sample(&mut rng)];
            chosen.insert(item);
        }
        let mut items: Vec<usize> = chosen.into_iter().collect();
        items.sort_unstable();
        for i in items {
            edges.push((format!("u{u}"), format!("i{i:0width$}")));
        }
    }

    let dataset = build_dataset(&edges, cfg.seed)?;

    // Re-order feature rows into the dataset's dense item order.
    let mut vision = vec![0.0f32; dataset.num_items * cfg.vision_dim];
    let mut text = vec![0.0f32; dataset.num_items * cfg.text_dim];
    let mut item_cluster = vec![0usize; dataset.num_items];
    for (dense, id) in dataset.item_ids.iter().enumerate() {
        let raw: usize = id[1..].parse().expect("synthetic item id");
        vision[dense * cfg.vision_dim..(dense + 1) * cfg.vision_dim]
            .copy_from_slice(&raw_vision[raw * cfg.vision_dim..(raw + 1) * cfg.vision_dim]);
        text[dense * cfg.text_dim..(dense + 1) * cfg.text_dim]
            .copy_from_slice(&raw_text[raw * cfg.text_dim..(raw + 1) * cfg.text_dim]);
        item_cluster[dense] = cluster_of(raw);
    }
    let num_items = dataset.num_items;
    Ok(SyntheticBundle {
        edges,
        dataset,
        vision: FeatureMatrix::new(Modality::Vision, num_items, cfg.vision_dim, vision)?,
        text: FeatureMatrix::new(Modality::Text, num_items, cfg.text_dim, text)?,
        item_cluster,
    })
}

/// Write interactions.tsv, vision.mfea and text.mfea under `dir`;
/// returns the three paths.
pub fn write_bundle(dir: &Path, bundle: &SyntheticBundle) -> Result<(PathBuf, PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let interactions = dir.join("interactions.tsv");
    let mut out = String::new();
    for (u, i) in &bundle.edges {
        out.push_str(u);
        out.push('\t');
        out.push_str(i);
        out.push('\n');
    }
    std::fs::write(&interactions, out)?;
    let vision = dir.join("vision.mfea");
    let text = dir.join("text.mfea");
    write_feature_matrix(&vision, &bundle.vision)?;
    write_feature_matrix(&text, &bundle.text)?;
    Ok((interactions, vision, text))
}
