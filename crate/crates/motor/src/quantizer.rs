//! Per-modality product quantization: slot-wise k-means codebooks, an
//! optional learned orthogonal rotation (alternating minimization with a
//! Procrustes update), and nearest-centroid token assignment.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::{FeatureMatrix, Modality};
use crate::error::{MotorError, Result};
use crate::kmeans::{kmeans, lloyd, sq_dist, KmeansResult};

/// Learned rotation plus D sub-codebooks of K centroids each.
#[derive(Debug, Clone)]
pub struct ModalCodebook {
    pub modality: Modality,
    pub dim: usize,
    pub num_slots: usize,
    pub codebook_size: usize,
    /// dim x dim orthonormal matrix, row-major; identity for plain PQ.
    pub rotation: Vec<f32>,
    /// One K x (dim/num_slots) matrix per slot, row-major.
    pub sub_codebooks: Vec<Vec<f32>>,
}

/// N x D integer token ids for one modality, entries in [0, K).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAssignment {
    pub modality: Modality,
    pub num_items: usize,
    pub num_slots: usize,
    pub codebook_size: usize,
    /// Row-major N x D.
    pub tokens: Vec<u16>,
}

impl TokenAssignment {
    pub fn item_tokens(&self, item: usize) -> &[u16] {
        &self.tokens[item * self.num_slots..(item + 1) * self.num_slots]
    }
}

impl ModalCodebook {
    pub fn slot_width(&self) -> usize {
        self.dim / self.num_slots
    }

    pub fn rotation_is_identity(&self) -> bool {
        let d = self.dim;
        self.rotation
            .iter()
            .enumerate()
            .all(|(idx, &v)| v == if idx / d == idx % d { 1.0 } else { 0.0 })
    }

    /// max |R^T R - I|, checked against 1e-5 after every rotation update.
    pub fn orthonormality_residual(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                let mut dot = 0.0f64;
                for k in 0..d {
                    dot += self.rotation[k * d + a] as f64 * self.rotation[k * d + b] as f64;
                }
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Apply the rotation to one feature row: g = f R.
    pub fn rotate_row(&self, f: &[f32]) -> Vec<f32> {
        let d = self.dim;
        let mut g = vec![0.0f32; d];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for k in 0..d {
                acc += f[k] as f64 * self.rotation[k * d + j] as f64;
            }
            *gj = acc as f32;
        }
        g
    }
}

fn identity(d: usize) -> Vec<f32> {
    let mut r = vec![0.0f32; d * d];
    for i in 0..d {
        r[i * d + i] = 1.0;
    }
    r
}

fn slot_seed(seed: u64, slot: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(slot as u64 + 1)
}

/// Extract slot `x` (contiguous column block) of a row-major N x d matrix.
fn slot_matrix(data: &[f32], rows: usize, dim: usize, slot: usize, width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let start = r * dim + slot * width;
        out.extend_from_slice(&data[start..start + width]);
    }
    out
}

fn check_divisible(dim: usize, slots: usize) -> Result<()> {
    if slots == 0 || dim % slots != 0 {
        return Err(MotorError::Divisibility { dim, slots });
    }
    Ok(())
}

/// Plain PQ: slot-wise k-means with identity rotation.
pub fn fit_pq(
    f: &FeatureMatrix,
    num_slots: usize,
    codebook_size: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ModalCodebook> {
    check_divisible(f.dim, num_slots)?;
    let width = f.dim / num_slots;
    let mut sub_codebooks = Vec::with_capacity(num_slots);
    for x in 0..num_slots {
        let pts = slot_matrix(&f.data, f.rows, f.dim, x, width);
        let r = kmeans(&pts, f.rows, width, codebook_size, max_iters, slot_seed(seed, x));
        sub_codebooks.push(r.centroids);
    }
    Ok(ModalCodebook {
        modality: f.modality,
        dim: f.dim,
        num_slots,
        codebook_size,
        rotation: identity(f.dim),
        sub_codebooks,
    })
}

/// Alternating minimization: re-fit codebooks on rotated features, then
/// update the rotation to the orthogonal Procrustes solution aligning
/// features to their reconstructions. `outer_iters = 0` reduces to
/// `fit_pq` exactly (identity rotation, same seeding).
pub fn fit_opq(
    f: &FeatureMatrix,
    num_slots: usize,
    codebook_size: usize,
    outer_iters: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<ModalCodebook> {
    let mut cb = fit_pq(f, num_slots, codebook_size, kmeans_iters, seed)?;
    if outer_iters == 0 {
        return Ok(cb);
    }
    let width = cb.slot_width();
    let mut assignment = assign_tokens(f, &cb)?;
    for _ in 0..outer_iters {
        // Reconstruction of each item under the current codes.
        let recon = reconstruct(&cb, &assignment);
        cb.rotation = procrustes_rotation(&f.data, &recon, f.rows, f.dim);
        debug_assert!(cb.orthonormality_residual() < 1e-5);
        // Warm-start Lloyd on the newly rotated features.
        let rotated = rotate_all(f, &cb);
        for x in 0..num_slots {
            let pts = slot_matrix(&rotated, f.rows, f.dim, x, width);
            let KmeansResult { centroids, .. } =
                lloyd(&pts, f.rows, width, cb.sub_codebooks[x].clone(), kmeans_iters);
            cb.sub_codebooks[x] = centroids;
        }
        assignment = assign_tokens(f, &cb)?;
    }
    Ok(cb)
}

fn rotate_all(f: &FeatureMatrix, cb: &ModalCodebook) -> Vec<f32> {
    if cb.rotation_is_identity() {
        return f.data.clone();
    }
    (0..f.rows)
        .into_par_iter()
        .flat_map_iter(|i| cb.rotate_row(f.row(i)).into_iter())
        .collect()
}

/// N x d matrix of concatenated assigned centroids.
fn reconstruct(cb: &ModalCodebook, ta: &TokenAssignment) -> Vec<f32> {
    let width = cb.slot_width();
    let mut out = vec![0.0f32; ta.num_items * cb.dim];
    for i in 0..ta.num_items {
        for x in 0..cb.num_slots {
            let t = ta.tokens[i * cb.num_slots + x] as usize;
            let src = &cb.sub_codebooks[x][t * width..(t + 1) * width];
            out[i * cb.dim + x * width..i * cb.dim + (x + 1) * width].copy_from_slice(src);
        }
    }
    out
}

/// Solve max_R tr(R^T F^T Y) over orthogonal R via SVD of F^T Y.
/// Reflections are allowed; only the reconstruction error matters.
fn procrustes_rotation(features: &[f32], recon: &[f32], rows: usize, dim: usize) -> Vec<f32> {
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    for r in 0..rows {
        let fr = &features[r * dim..(r + 1) * dim];
        let yr = &recon[r * dim..(r + 1) * dim];
        for a in 0..dim {
            let fa = fr[a] as f64;
            if fa == 0.0 {
                continue;
            }
            for b in 0..dim {
                m[(a, b)] += fa * yr[b] as f64;
            }
        }
    }
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let r = u * vt;
    (0..dim * dim).map(|idx| r[(idx / dim, idx % dim)] as f32).collect()
}

/// Map each item's rotated subvectors to their nearest centroids.
/// Ties break to the lowest centroid index.
pub fn assign_tokens(f: &FeatureMatrix, cb: &ModalCodebook) -> Result<TokenAssignment> {
    if f.dim != cb.dim {
        return Err(MotorError::Shape {
            msg: format!("feature dim {} != codebook dim {}", f.dim, cb.dim),
        });
    }
    let width = cb.slot_width();
    let identity = cb.rotation_is_identity();
    let assign_row = |i: usize| -> Vec<u16> {
        let rotated;
        let row: &[f32] = if identity {
            f.row(i)
        } else {
            rotated = cb.rotate_row(f.row(i));
            &rotated
        };
        (0..cb.num_slots)
            .map(|x| {
                let sub = &row[x * width..(x + 1) * width];
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (j, c) in cb.sub_codebooks[x].chunks_exact(width).enumerate() {
                    let d = sq_dist(sub, c);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best as u16
            })
            .collect()
    };
    let tokens: Vec<u16> = if f.rows >= 512 {
        (0..f.rows).into_par_iter().flat_map_iter(assign_row).collect()
    } else {
        (0..f.rows).flat_map(assign_row).collect()
    };
    Ok(TokenAssignment {
        modality: f.modality,
        num_items: f.rows,
        num_slots: cb.num_slots,
        codebook_size: cb.codebook_size,
        tokens,
    })
}

/// counts[x][j] = number of items holding token j in slot x.
pub fn token_histogram(ta: &TokenAssignment) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; ta.codebook_size]; ta.num_slots];
    for row in ta.tokens.chunks_exact(ta.num_slots) {
        for (x, &t) in row.iter().enumerate() {
            counts[x][t as usize] += 1;
        }
    }
    counts
}

/// Mean squared reconstruction error over items.
pub fn quantization_error(f: &FeatureMatrix, cb: &ModalCodebook, ta: &TokenAssignment) -> f64 {
    let width = cb.slot_width();
    let identity = cb.rotation_is_identity();
    let mut total = 0.0f64;
    for i in 0..f.rows {
        let rotated;
        let row: &[f32] = if identity {
            f.row(i)
        } else {
            rotated = cb.rotate_row(f.row(i));
            &rotated
        };
        for x in 0..cb.num_slots {
            let t = ta.tokens[i * cb.num_slots + x] as usize;
            let c = &cb.sub_codebooks[x][t * width..(t + 1) * width];
            total += sq_dist(&row[x * width..(x + 1) * width], c);
        }
    }
    total / f.rows as f64
}

const CODEBOOK_MAGIC: &[u8; 4] = b"MCBK";

/// Binary codebook format: magic, version, modality tag, d_m, D, K,
/// rotation floats, then the D sub-codebooks, all little-endian.
pub fn write_codebook(path: &Path, cb: &ModalCodebook) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CODEBOOK_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&[cb.modality.tag()])?;
    w.write_all(&(cb.dim as u32).to_le_bytes())?;
    w.write_all(&(cb.num_slots as u32).to_le_bytes())?;
    w.write_all(&(cb.codebook_size as u32).to_le_bytes())?;
    for &v in &cb.rotation {
        w.write_all(&v.to_le_bytes())?;
    }
    for sub in &cb.sub_codebooks {
        for &v in sub {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_codebook(path: &Path) -> Result<ModalCodebook> {
    let err = |msg: &str| MotorError::Format { path: path.display().to_string(), msg: msg.into() };
    let bytes = std::fs::read(path)?;
    if bytes.len() < 21 || &bytes[..4] != CODEBOOK_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != 1 {
        return Err(err("unsupported version"));
    }
    let modality = Modality::from_tag(bytes[8]).ok_or_else(|| err("bad modality tag"))?;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let num_slots = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let codebook_size = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
    check_divisible(dim, num_slots)?;
    let width = dim / num_slots;
    let expected = 21 + 4 * (dim * dim + num_slots * codebook_size * width);
    if bytes.len() != expected {
        return Err(err("truncated codebook"));
    }
    let mut floats = bytes[21..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let rotation: Vec<f32> = floats.by_ref().take(dim * dim).collect();
    let mut sub_codebooks = Vec::with_capacity(num_slots);
    for _ in 0..num_slots {
        sub_codebooks.push(floats.by_ref().take(codebook_size * width).collect());
    }
    Ok(ModalCodebook { modality, dim, num_slots, codebook_size, rotation, sub_codebooks })
}

/// Token TSV: one line per item, `item_index` then the D token ids.
pub fn write_tokens(path: &Path, ta: &TokenAssignment) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..ta.num_items {
        write!(w, "{i}")?;
        for &t in ta.item_tokens(i) {
            write!(w, "\t{t}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_tokens(path: &Path, modality: Modality, codebook_size: usize) -> Result<TokenAssignment> {
    let text = std::fs::read_to_string(path)?;
    let mut tokens = Vec::new();
    let mut num_slots = 0;
    let mut rows = 0;
    for (line_no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let idx: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MotorError::Parse { line: line_no + 1, msg: "bad item index".into() })?;
        if idx != rows {
            return Err(MotorError::Parse {
                line: line_no + 1,
                msg: format!("expected item {rows}, found {idx}"),
            });
        }
        let row: Vec<u16> = fields
            .map(|s| s.parse::<u16>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| MotorError::Parse { line: line_no + 1, msg: e.to_string() })?;
        if rows == 0 {
            num_slots = row.len();
        } else if row.len() != num_slots {
            return Err(MotorError::Parse { line: line_no + 1, msg: "ragged token row".into() });
        }
        for &t in &row {
            if t as usize >= codebook_size {
                return Err(MotorError::TokenCorruption { token: t as usize, k: codebook_size });
            }
        }
        tokens.extend(row);
        rows += 1;
    }
    Ok(TokenAssignment { modality, num_items: rows, num_slots, codebook_size, tokens })
}

/// Histogram TSV: `slot<TAB>token<TAB>count`, one modality per file.
pub fn write_histogram(path: &Path, ta: &TokenAssignment) -> Result<()> {
    let counts = token_histogram(ta);
    let mut w = BufWriter::new(File::create(path)?);
    for (x, slot_counts) in counts.iter().enumerate() {
        for (j, &c) in slot_counts.iter().enumerate() {
            writeln!(w, "{x}\t{j}\t{c}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(modality: Modality, rows: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::new(modality, rows, dim, data).unwrap()
    }

    #[test]
    fn pq_slot_widths() {
        let f = random_features(Modality::Text, 40, 384, 1);
        let cb = fit_pq(&f, 8, 4, 5, 1).unwrap();
        assert_eq!(cb.num_slots, 8);
        assert_eq!(cb.slot_width(), 48);
        assert!(cb.rotation_is_identity());
    }

    #[test]
    fn pq_divisibility_error() {
        let f = random_features(Modality::Text, 10, 10, 1);
        assert!(matches!(fit_pq(&f, 3, 2, 5, 1), Err(MotorError::Divisibility { .. })));
    }

    #[test]
    fn pq_d1_is_plain_kmeans() {
        let f = random_features(Modality::Vision, 50, 6, 2);
        let cb = fit_pq(&f, 1, 4, 20, 9).unwrap();
        let r = kmeans(&f.data, 50, 6, 4, 20, slot_seed(9, 0));
        assert_eq!(cb.sub_codebooks[0], r.centroids);
    }

    #[test]
    fn identical_rows_quantize_exactly() {
        let row: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let data: Vec<f32> = row.iter().copied().cycle().take(8 * 20).collect();
        let f = FeatureMatrix::new(Modality::Vision, 20, 8, data).unwrap();
        let cb = fit_pq(&f, 2, 3, 10, 4).unwrap();
        let ta = assign_tokens(&f, &cb).unwrap();
        assert_eq!(quantization_error(&f, &cb, &ta), 0.0);
    }

    #[test]
    fn opq_zero_iters_equals_pq_bitwise() {
        let f = random_features(Modality::Text, 60, 16, 5);
        let pq = fit_pq(&f, 4, 5, 12, 5).unwrap();
        let opq = fit_opq(&f, 4, 5, 0, 12, 5).unwrap();
        assert_eq!(pq.rotation, opq.rotation);
        assert_eq!(pq.sub_codebooks, opq.sub_codebooks);
    }

    #[test]
    fn opq_rotation_orthonormal_and_not_worse_than_pq() {
        // Correlated Gaussian-ish data via a fixed shear, so rotation helps.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = 400;
        let dim = 8;
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            let mut z: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            for k in 1..dim {
                z[k] += 0.9 * z[k - 1];
            }
            data.extend(z);
        }
        let f = FeatureMatrix::new(Modality::Vision, rows, dim, data).unwrap();
        let pq = fit_pq(&f, 2, 4, 25, 3).unwrap();
        let pq_ta = assign_tokens(&f, &pq).unwrap();
        let opq = fit_opq(&f, 2, 4, 10, 25, 3).unwrap();
        let opq_ta = assign_tokens(&f, &opq).unwrap();
        assert!(opq.orthonormality_residual() < 1e-5);
        let e_pq = quantization_error(&f, &pq, &pq_ta);
        let e_opq = quantization_error(&f, &opq, &opq_ta);
        assert!(e_opq <= e_pq + 1e-9, "opq {e_opq} vs pq {e_pq}");
    }

    #[test]
    fn assign_matches_bruteforce() {
        let f = random_features(Modality::Text, 200, 12, 8);
        let cb = fit_pq(&f, 3, 7, 15, 8).unwrap();
        let ta = assign_tokens(&f, &cb).unwrap();
        let width = cb.slot_width();
        for i in 0..f.rows {
            for x in 0..3 {
                let sub = &f.row(i)[x * width..(x + 1) * width];
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..7 {
                    let d = sq_dist(sub, &cb.sub_codebooks[x][j * width..(j + 1) * width]);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                assert_eq!(ta.tokens[i * 3 + x] as usize, best);
            }
        }
    }

    #[test]
    fn assignment_is_idempotent() {
        let f = random_features(Modality::Vision, 120, 8, 13);
        let cb = fit_opq(&f, 2, 4, 3, 10, 13).unwrap();
        let a = assign_tokens(&f, &cb).unwrap();
        let b = assign_tokens(&f, &cb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k1_all_tokens_zero() {
        let f = random_features(Modality::Vision, 30, 4, 3);
        let cb = fit_pq(&f, 2, 1, 5, 3).unwrap();
        let ta = assign_tokens(&f, &cb).unwrap();
        assert!(ta.tokens.iter().all(|&t| t == 0));
    }

    #[test]
    fn histogram_conserves_counts() {
        let f = random_features(Modality::Text, 90, 8, 6);
        let cb = fit_pq(&f, 4, 5, 10, 6).unwrap();
        let ta = assign_tokens(&f, &cb).unwrap();
        let counts = token_histogram(&ta);
        for slot in &counts {
            assert_eq!(slot.iter().sum::<usize>(), 90);
        }
    }

    #[test]
    fn quantization_error_definition() {
        // Single item, single slot, distance 2.0 from the centroid -> 4.0.
        let f = FeatureMatrix::new(Modality::Vision, 1, 2, vec![2.0, 0.0]).unwrap();
        let cb = ModalCodebook {
            modality: Modality::Vision,
            dim: 2,
            num_slots: 1,
            codebook_size: 1,
            rotation: identity(2),
            sub_codebooks: vec![vec![0.0, 0.0]],
        };
        let ta = assign_tokens(&f, &cb).unwrap();
        assert_eq!(quantization_error(&f, &cb, &ta), 4.0);
    }

    #[test]
    fn codebook_file_roundtrip() {
        let f = random_features(Modality::Text, 50, 8, 17);
        let cb = fit_opq(&f, 2, 4, 2, 10, 17).unwrap();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        write_codebook(tmp.path(), &cb).unwrap();
        let back = read_codebook(tmp.path()).unwrap();
        assert_eq!(back.rotation, cb.rotation);
        assert_eq!(back.sub_codebooks, cb.sub_codebooks);
        assert_eq!(back.modality, cb.modality);
    }

    #[test]
    fn token_file_roundtrip() {
        let f = random_features(Modality::Vision, 25, 6, 19);
        let cb = fit_pq(&f, 3, 4, 10, 19).unwrap();
        let ta = assign_tokens(&f, &cb).unwrap();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        write_tokens(tmp.path(), &ta).unwrap();
        let back = read_tokens(tmp.path(), Modality::Vision, 4).unwrap();
        assert_eq!(back, ta);
    }
}
