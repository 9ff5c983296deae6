//! Interaction ingestion, dense ID remapping, per-user 8:1:1 splitting and
//! 1-core filtering, plus the dense per-modality feature matrices.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MotorError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    /// Canonical modality order used everywhere downstream.
    pub const ALL: [Modality; 2] = [Modality::Vision, Modality::Text];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Vision => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Modality> {
        match tag {
            0 => Some(Modality::Vision),
            1 => Some(Modality::Text),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Vision => write!(f, "vision"),
            Modality::Text => write!(f, "text"),
        }
    }
}

/// Users, items and interaction edges with a per-user train/val/test split.
///
/// Indices are dense: users in `[0, num_users)`, items in `[0, num_items)`.
/// After construction every user and every item has at least one train edge.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train_edges: Vec<(usize, usize)>,
    pub val_edges: Vec<(usize, usize)>,
    pub test_edges: Vec<(usize, usize)>,
    /// Per-user sorted list of train item indices.
    pub user_adjacency: Vec<Vec<usize>>,
    /// Per-item count of train interactions.
    pub item_train_degree: Vec<usize>,
    /// Val/test edges dropped because their item lost all train edges,
    /// plus the removed items' counts are reflected in the remap.
    pub num_filtered_edges: usize,
    /// Original string id per dense user index.
    pub user_ids: Vec<String>,
    /// Original string id per dense item index.
    pub item_ids: Vec<String>,
}

/// Parse a TSV interaction file: one `user<TAB>item` per line.
/// Duplicate pairs collapse to one edge; first-appearance order is kept.
pub fn load_interactions(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut edges = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let user = fields.next().unwrap_or("");
        let item = fields.next();
        let extra = fields.next();
        let (user, item) = match (item, extra) {
            (Some(item), None) if !user.is_empty() && !item.is_empty() => (user, item),
            _ => {
                return Err(MotorError::Parse {
                    line: idx + 1,
                    msg: format!("expected exactly 2 tab-separated fields, got {line:?}"),
                })
            }
        };
        let key = (user.to_string(), item.to_string());
        if seen.insert(key.clone(), ()).is_none() {
            edges.push(key);
        }
    }
    Ok(edges)
}

/// Remap string ids densely (first-appearance order), split each user's
/// edges 8:1:1 with floor rounding, then 1-core filter the train split.
///
/// Val and test each receive `floor(n/10)` edges, the remainder goes to
/// train; users with fewer than 3 edges put everything in train. Items
/// left without a train edge are removed entirely and their val/test
/// edges counted in `num_filtered_edges`.
pub fn build_dataset(edges: &[(String, String)], seed: u64) -> Result<InteractionDataset> {
    if edges.is_empty() {
        return Err(MotorError::EmptyDataset);
    }

    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut dense_edges = Vec::with_capacity(edges.len());
    let mut seen = std::collections::HashSet::new();
    for (u, i) in edges {
        let un = *user_index.entry(u).or_insert_with(|| {
            user_ids.push(u.clone());
            user_ids.len() - 1
        });
        let it = *item_index.entry(i).or_insert_with(|| {
            item_ids.push(i.clone());
            item_ids.len() - 1
        });
        if seen.insert((un, it)) {
            dense_edges.push((un, it));
        }
    }

    let num_users = user_ids.len();
    let num_items = item_ids.len();

    // Per-user edge lists in first-appearance order.
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); num_users];
    for &(u, i) in &dense_edges {
        per_user[u].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (u, items) in per_user.iter_mut().enumerate() {
        items.shuffle(&mut rng);
        let n = items.len();
        let holdout = if n < 3 { 0 } else { n / 10 };
        for (pos, &i) in items.iter().enumerate() {
            if pos < n - 2 * holdout {
                train.push((u, i));
            } else if pos < n - holdout {
                val.push((u, i));
            } else {
                test.push((u, i));
            }
        }
    }

    // 1-core filter on the train split: drop items with zero train degree,
    // then drop val/test edges touching them. Users always keep >=1 train
    // edge by construction, but iterate until stable anyway.
    let mut item_alive = vec![false; num_items];
    for &(_, i) in &train {
        item_alive[i] = true;
    }
    let mut user_alive = vec![false; num_users];
    for &(u, _) in &train {
        user_alive[u] = true;
    }
    loop {
        let before = train.len();
        train.retain(|&(u, i)| user_alive[u] && item_alive[i]);
        if train.len() == before {
            break;
        }
        item_alive.iter_mut().for_each(|a| *a = false);
        user_alive.iter_mut().for_each(|a| *a = false);
        for &(u, i) in &train {
            user_alive[u] = true;
            item_alive[i] = true;
        }
    }
    let filtered_before = val.len() + test.len();
    val.retain(|&(u, i)| user_alive[u] && item_alive[i]);
    test.retain(|&(u, i)| user_alive[u] && item_alive[i]);
    let num_filtered_edges = filtered_before - val.len() - test.len();

    // Compact indices over surviving users/items, preserving order.
    let user_remap = compact_map(&user_alive);
    let item_remap = compact_map(&item_alive);
    let remap =
        |edges: &mut Vec<(usize, usize)>| {
            for e in edges.iter_mut() {
                *e = (user_remap[e.0].unwrap(), item_remap[e.1].unwrap());
            }
        };
    remap(&mut train);
    remap(&mut val);
    remap(&mut test);
    let user_ids: Vec<String> = user_ids
        .into_iter()
        .enumerate()
        .filter(|(u, _)| user_alive[*u])
        .map(|(_, id)| id)
        .collect();
    let item_ids: Vec<String> = item_ids
        .into_iter()
        .enumerate()
        .filter(|(i, _)| item_alive[*i])
        .map(|(_, id)| id)
        .collect();
    let num_users = user_ids.len();
    let num_items = item_ids.len();

    let mut user_adjacency = vec![Vec::new(); num_users];
    let mut item_train_degree = vec![0usize; num_items];
    for &(u, i) in &train {
        user_adjacency[u].push(i);
        item_train_degree[i] += 1;
    }
    for adj in &mut user_adjacency {
        adj.sort_unstable();
    }

    Ok(InteractionDataset {
        num_users,
        num_items,
        train_edges: train,
        val_edges: val,
        test_edges: test,
        user_adjacency,
        item_train_degree,
        num_filtered_edges,
        user_ids,
        item_ids,
    })
}

fn compact_map(alive: &[bool]) -> Vec<Option<usize>> {
    let mut next = 0;
    alive
        .iter()
        .map(|&a| {
            if a {
                next += 1;
                Some(next - 1)
            } else {
                None
            }
        })
        .collect()
}

impl InteractionDataset {
    /// Items of user `u` in the given split, as a sorted unique list.
    pub fn user_items_in(&self, split: &[(usize, usize)], u: usize) -> Vec<usize> {
        let mut items: Vec<usize> = split
            .iter()
            .filter(|&&(eu, _)| eu == u)
            .map(|&(_, i)| i)
            .collect();
        items.sort_unstable();
        items.dedup();
        items
    }

    /// Binary search in the per-user sorted train adjacency.
    pub fn is_train_interaction(&self, u: usize, i: usize) -> bool {
        self.user_adjacency[u].binary_search(&i).is_ok()
    }

    /// Emit the `string_id<TAB>dense_index` sidecars for users and items.
    pub fn write_id_maps(&self, user_path: &Path, item_path: &Path) -> Result<()> {
        for (path, ids) in [(user_path, &self.user_ids), (item_path, &self.item_ids)] {
            let mut w = BufWriter::new(File::create(path)?);
            for (idx, id) in ids.iter().enumerate() {
                writeln!(w, "{id}\t{idx}")?;
            }
        }
        Ok(())
    }
}

/// Per-modality dense N x d_m feature matrix, row-major f32.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(MotorError::Shape {
                msg: format!("feature data len {} != {}x{}", data.len(), rows, dim),
            });
        }
        Ok(FeatureMatrix { modality, rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"MFEA";

/// Load a feature matrix: binary format when the file starts with the
/// `MFEA` magic, CSV fallback otherwise. Row count is validated against
/// `expected_rows` and every value must be finite.
pub fn load_feature_matrix(
    path: &Path,
    modality: Modality,
    expected_rows: usize,
) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path)?;
    let m = if bytes.len() >= 4 && &bytes[..4] == FEATURE_MAGIC {
        parse_binary_features(&bytes, modality, path)?
    } else {
        parse_csv_features(&bytes, modality, path)?
    };
    if m.rows != expected_rows {
        return Err(MotorError::Shape {
            msg: format!(
                "{}: expected {} feature rows, file has {}",
                path.display(),
                expected_rows,
                m.rows
            ),
        });
    }
    for (idx, &v) in m.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(MotorError::NonFinite { row: idx / m.dim, col: idx % m.dim });
        }
    }
    Ok(m)
}

fn parse_binary_features(bytes: &[u8], modality: Modality, path: &Path) -> Result<FeatureMatrix> {
    let err = |msg: &str| MotorError::Format { path: path.display().to_string(), msg: msg.into() };
    if bytes.len() < 20 {
        return Err(err("truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != 1 {
        return Err(err(&format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expected = 20 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(err(&format!(
            "truncated file: header says {rows}x{cols} ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[20..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    FeatureMatrix::new(modality, rows, cols, data)
}

fn parse_csv_features(bytes: &[u8], modality: Modality, path: &Path) -> Result<FeatureMatrix> {
    let err = |msg: String| MotorError::Format { path: path.display().to_string(), msg };
    let text = std::str::from_utf8(bytes).map_err(|e| err(format!("not UTF-8: {e}")))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut dim = 0;
    for (line_no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|e| err(format!("line {}: bad float {field:?}: {e}", line_no + 1)))?;
            data.push(v);
            count += 1;
        }
        if rows == 0 {
            dim = count;
        } else if count != dim {
            return Err(err(format!("line {}: {} fields, expected {}", line_no + 1, count, dim)));
        }
        rows += 1;
    }
    FeatureMatrix::new(modality, rows, dim, data)
}

/// Write the binary `MFEA` feature format.
pub fn write_feature_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.dim as u32).to_le_bytes())?;
    for &v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read the whole file; small helper shared by loaders that accept readers.
#[allow(dead_code)]
fn read_all(mut r: impl Read) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(buf)
}
