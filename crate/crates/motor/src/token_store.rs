//! Trainable token embedding tables: one K x d table per (modality, slot),
//! shared by every item holding that token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MotorError, Result};
use crate::quantizer::TokenAssignment;

/// Per (modality, slot) embedding tables in canonical order: vision slots
/// 0..D_v-1 first, then text slots 0..D_t-1. All downstream weight vectors
/// index this order.
#[derive(Debug, Clone)]
pub struct TokenEmbeddingTables {
    /// Slots per modality, in canonical modality order.
    pub slots_per_modality: Vec<usize>,
    pub codebook_size: usize,
    pub dim: usize,
    /// One K x d row-major table per slot, canonical order.
    pub tables: Vec<Vec<f32>>,
}

impl TokenEmbeddingTables {
    /// Xavier-uniform init in [-a, a] with a = sqrt(6 / (K + d)).
    pub fn init(slots_per_modality: &[usize], codebook_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = xavier_bound(codebook_size, dim);
        let total: usize = slots_per_modality.iter().sum();
        let tables = (0..total)
            .map(|_| (0..codebook_size * dim).map(|_| rng.gen_range(-a..=a)).collect())
            .collect();
        TokenEmbeddingTables {
            slots_per_modality: slots_per_modality.to_vec(),
            codebook_size,
            dim,
            tables,
        }
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    /// Item-side trainable parameter count (token tables only).
    pub fn param_count(&self) -> usize {
        self.tables.iter().map(|t| t.len()).sum()
    }

    /// Flat slot index of (modality position, slot within modality).
    pub fn slot_offset(&self, modality_pos: usize) -> usize {
        self.slots_per_modality[..modality_pos].iter().sum()
    }

    pub fn row(&self, table: usize, token: usize) -> &[f32] {
        &self.tables[table][token * self.dim..(token + 1) * self.dim]
    }

    pub fn row_mut(&mut self, table: usize, token: usize) -> &mut [f32] {
        &mut self.tables[table][token * self.dim..(token + 1) * self.dim]
    }

    /// Token embeddings of one item in canonical slot order.
    ///
    /// `assignments` must be given in canonical modality order and agree
    /// with `slots_per_modality`.
    pub fn lookup<'a>(
        &'a self,
        assignments: &[&TokenAssignment],
        item: usize,
    ) -> Result<Vec<&'a [f32]>> {
        if assignments.len() != self.slots_per_modality.len() {
            return Err(MotorError::Shape {
                msg: format!(
                    "{} assignments for {} modalities",
                    assignments.len(),
                    self.slots_per_modality.len()
                ),
            });
        }
        let mut out = Vec::with_capacity(self.num_tables());
        let mut table = 0;
        for (m, ta) in assignments.iter().enumerate() {
            if ta.num_slots != self.slots_per_modality[m] {
                return Err(MotorError::Shape {
                    msg: format!(
                        "assignment has {} slots, tables expect {}",
                        ta.num_slots, self.slots_per_modality[m]
                    ),
                });
            }
            for &t in ta.item_tokens(item) {
                let t = t as usize;
                if t >= self.codebook_size {
                    return Err(MotorError::TokenCorruption { token: t, k: self.codebook_size });
                }
                out.push(self.row(table, t));
                table += 1;
            }
        }
        Ok(out)
    }

    /// Flat (table, token-row) indices an item resolves to; used for
    /// sparse gradient routing.
    pub fn lookup_rows(&self, assignments: &[&TokenAssignment], item: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_tables());
        let mut table = 0;
        for ta in assignments {
            for &t in ta.item_tokens(item) {
                out.push((table, t as usize));
                table += 1;
            }
        }
        out
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}
