//! Binary checkpoint container: magic "MOTR", version, a length-prefixed
//! UTF-8 JSON config echo, then named sections. All integers and floats
//! are little-endian.
//!
//! Sections: USRE (user embeddings), ITME (item ID embeddings), TOKTAB
//! (token tables, canonical order), TCNP (layout descriptor + weights),
//! VBPJ (VBPR projection), ADAM (optimizer moments).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{ItemSource, Model};
use crate::error::{MotorError, Result};
use crate::tcn::TcnVariant;
use crate::trainer::AdamState;

const MAGIC: &[u8; 4] = b"MOTR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TcnDescriptor {
    pub variant: TcnVariant,
    pub dim: usize,
    pub group_sizes: Vec<usize>,
    /// Per group, per layer: (in_dim, out_dim).
    pub layers: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Default)]
pub struct AdamSection {
    pub step: u64,
    /// (m, v) buffers in canonical parameter order.
    pub buffers: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Raw checkpoint contents; callers re-attach token assignments and
/// features, which are not stored here.
#[derive(Debug, Clone, Default)]
pub struct CheckpointData {
    pub config_json: String,
    /// (rows, cols, data).
    pub user_embeddings: (usize, usize, Vec<f32>),
    pub item_id_embeddings: Option<(usize, usize, Vec<f32>)>,
    /// (slots per modality, K, d, tables).
    pub token_tables: Option<(Vec<usize>, usize, usize, Vec<Vec<f32>>)>,
    /// (descriptor, flat weights: per group slot_weights then W/b per layer).
    pub tcn: Option<(TcnDescriptor, Vec<f32>)>,
    pub vbpr_projection: Option<(usize, usize, Vec<f32>)>,
    pub adam: Option<AdamSection>,
}

fn write_section(w: &mut impl Write, name: &str, payload: &[u8]) -> Result<()> {
    w.write_all(&[name.len() as u8])?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn matrix_payload(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + data.len() * 4);
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    put_f32s(&mut buf, data);
    buf
}

fn adam_buffers(adam: &AdamState) -> Vec<(&[f32], &[f32])> {
    let mut out: Vec<(&[f32], &[f32])> = vec![(&adam.user.m, &adam.user.v)];
    if let Some(p) = &adam.item_id {
        out.push((&p.m, &p.v));
    }
    for p in &adam.tables {
        out.push((&p.m, &p.v));
    }
    for p in &adam.tcn_slot_weights {
        out.push((&p.m, &p.v));
    }
    for layers in &adam.tcn_mlp {
        for (wm, bm) in layers {
            out.push((&wm.m, &wm.v));
            out.push((&bm.m, &bm.v));
        }
    }
    if let Some(p) = &adam.vbpr {
        out.push((&p.m, &p.v));
    }
    out
}

pub fn write_checkpoint(
    path: &Path,
    config_json: &str,
    model: &Model,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;

    write_section(
        &mut w,
        "USRE",
        &matrix_payload(model.num_users, model.dim, &model.user_embeddings),
    )?;
    match &model.item_source {
        ItemSource::Id { embeddings } => {
            write_section(
                &mut w,
                "ITME",
                &matrix_payload(model.num_items, model.dim, embeddings),
            )?;
        }
        ItemSource::Tokens { tables, tcn, .. } => {
            let mut buf = Vec::new();
            buf.extend_from_slice(&(tables.slots_per_modality.len() as u32).to_le_bytes());
            for &s in &tables.slots_per_modality {
                buf.extend_from_slice(&(s as u32).to_le_bytes());
            }
            buf.extend_from_slice(&(tables.codebook_size as u32).to_le_bytes());
            buf.extend_from_slice(&(tables.dim as u32).to_le_bytes());
            for t in &tables.tables {
                put_f32s(&mut buf, t);
            }
            write_section(&mut w, "TOKTAB", &buf)?;

            let descriptor = TcnDescriptor {
                variant: tcn.variant,
                dim: tcn.dim,
                group_sizes: tcn.group_sizes.clone(),
                layers: tcn
                    .groups
                    .iter()
                    .map(|g| g.mlp.iter().map(|l| (l.in_dim, l.out_dim)).collect())
                    .collect(),
            };
            let desc = serde_json::to_vec(&descriptor)?;
            let mut buf = Vec::new();
            buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
            buf.extend_from_slice(&desc);
            for g in &tcn.groups {
                put_f32s(&mut buf, &g.slot_weights);
                for l in &g.mlp {
                    put_f32s(&mut buf, &l.weight);
                    put_f32s(&mut buf, &l.bias);
                }
            }
            write_section(&mut w, "TCNP", &buf)?;
        }
    }
    if let Some(proj) = &model.vbpr_projection {
        let fdim = proj.len() / model.dim;
        write_section(&mut w, "VBPJ", &matrix_payload(fdim, model.dim, proj))?;
    }
    if let Some(adam) = adam {
        let buffers = adam_buffers(adam);
        let mut buf = Vec::new();
        buf.extend_from_slice(&adam.step.to_le_bytes());
        buf.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
        for (m, v) in buffers {
            buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f32s(&mut buf, m);
            put_f32s(&mut buf, v);
        }
        write_section(&mut w, "ADAM", &buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: &str) -> MotorError {
        MotorError::Format { path: self.path.display().to_string(), msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

fn read_matrix(c: &mut Cursor) -> Result<(usize, usize, Vec<f32>)> {
    let rows = c.u64()? as usize;
    let cols = c.u32()? as usize;
    let data = c.f32s(rows * cols)?;
    Ok((rows, cols, data))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(c.err("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.err(&format!("unsupported version {version}")));
    }
    let cfg_len = c.u64()? as usize;
    let config_json = String::from_utf8(c.take(cfg_len)?.to_vec())
        .map_err(|_| c.err("config echo is not UTF-8"))?;

    let mut data = CheckpointData { config_json, ..Default::default() };
    while !c.done() {
        let name_len = c.u8()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| c.err("section name is not UTF-8"))?;
        let payload_len = c.u64()? as usize;
        let start = c.pos;
        match name.as_str() {
            "USRE" => data.user_embeddings = read_matrix(&mut c)?,
            "ITME" => data.item_id_embeddings = Some(read_matrix(&mut c)?),
            "TOKTAB" => {
                let num_modalities = c.u32()? as usize;
                let mut slots = Vec::with_capacity(num_modalities);
                for _ in 0..num_modalities {
                    slots.push(c.u32()? as usize);
                }
                let k = c.u32()? as usize;
                let d = c.u32()? as usize;
                let total: usize = slots.iter().sum();
                let tables = (0..total).map(|_| c.f32s(k * d)).collect::<Result<Vec<_>>>()?;
                data.token_tables = Some((slots, k, d, tables));
            }
            "TCNP" => {
                let desc_len = c.u32()? as usize;
                let descriptor: TcnDescriptor = serde_json::from_slice(c.take(desc_len)?)?;
                let weight_count: usize = descriptor
                    .layers
                    .iter()
                    .zip(match descriptor.variant {
                        TcnVariant::ModalSpecific | TcnVariant::ModalAgnostic => {
                            descriptor.group_sizes.clone()
                        }
                        _ => vec![0; descriptor.layers.len()],
                    })
                    .map(|(layers, slots)| {
                        slots + layers.iter().map(|&(i, o)| i * o + o).sum::<usize>()
                    })
                    .sum();
                let weights = c.f32s(weight_count)?;
                data.tcn = Some((descriptor, weights));
            }
            "VBPJ" => data.vbpr_projection = Some(read_matrix(&mut c)?),
            "ADAM" => {
                let step = c.u64()?;
                let n = c.u32()? as usize;
                let mut buffers = Vec::with_capacity(n);
                for _ in 0..n {
                    let len = c.u64()? as usize;
                    let m = c.f32s(len)?;
                    let v = c.f32s(len)?;
                    buffers.push((m, v));
                }
                data.adam = Some(AdamSection { step, buffers });
            }
            other => {
                log::warn!("skipping unknown checkpoint section {other:?}");
                c.take(payload_len)?;
            }
        }
        if c.pos != start + payload_len {
            return Err(c.err(&format!("section {name} length mismatch")));
        }
    }
    Ok(data)
}

/// Copy checkpointed parameters into a freshly constructed model of the
/// same configuration; any shape disagreement is an error.
pub fn apply_to_model(data: &CheckpointData, model: &mut Model) -> Result<()> {
    let shape_err = |msg: String| MotorError::Shape { msg };
    let (rows, cols, user) = &data.user_embeddings;
    if *rows != model.num_users || *cols != model.dim {
        return Err(shape_err(format!(
            "USRE {rows}x{cols}, model expects {}x{}",
            model.num_users, model.dim
        )));
    }
    model.user_embeddings.copy_from_slice(user);
    match &mut model.item_source {
        ItemSource::Id { embeddings } => {
            let (rows, cols, items) = data
                .item_id_embeddings
                .as_ref()
                .ok_or_else(|| shape_err("missing ITME section".into()))?;
            if *rows != model.num_items || *cols != model.dim {
                return Err(shape_err(format!(
                    "ITME {rows}x{cols}, model expects {}x{}",
                    model.num_items, model.dim
                )));
            }
            embeddings.copy_from_slice(items);
        }
        ItemSource::Tokens { tables, tcn, .. } => {
            let (slots, k, d, stored) = data
                .token_tables
                .as_ref()
                .ok_or_else(|| shape_err("missing TOKTAB section".into()))?;
            if *slots != tables.slots_per_modality
                || *k != tables.codebook_size
                || *d != tables.dim
            {
                return Err(shape_err(format!(
                    "TOKTAB layout {slots:?}/K={k}/d={d}, model expects {:?}/K={}/d={}",
                    tables.slots_per_modality, tables.codebook_size, tables.dim
                )));
            }
            for (dst, src) in tables.tables.iter_mut().zip(stored) {
                dst.copy_from_slice(src);
            }
            let (descriptor, weights) =
                data.tcn.as_ref().ok_or_else(|| shape_err("missing TCNP section".into()))?;
            if descriptor.variant != tcn.variant
                || descriptor.dim != tcn.dim
                || descriptor.group_sizes != tcn.group_sizes
            {
                return Err(shape_err("TCNP descriptor does not match model".into()));
            }
            let mut pos = 0;
            for g in tcn.groups.iter_mut() {
                let n = g.slot_weights.len();
                g.slot_weights.copy_from_slice(&weights[pos..pos + n]);
                pos += n;
                for l in g.mlp.iter_mut() {
                    let wn = l.weight.len();
                    l.weight.copy_from_slice(&weights[pos..pos + wn]);
                    pos += wn;
                    let bn = l.bias.len();
                    l.bias.copy_from_slice(&weights[pos..pos + bn]);
                    pos += bn;
                }
            }
            if pos != weights.len() {
                return Err(shape_err("TCNP weight blob size mismatch".into()));
            }
        }
    }
    if let Some(proj) = &mut model.vbpr_projection {
        let (rows, cols, stored) = data
            .vbpr_projection
            .as_ref()
            .ok_or_else(|| shape_err("missing VBPJ section".into()))?;
        if rows * cols != proj.len() || *cols != model.dim {
            return Err(shape_err(format!(
                "VBPJ {rows}x{cols}, model expects {}x{}",
                proj.len() / model.dim,
                model.dim
            )));
        }
        proj.copy_from_slice(stored);
    }
    Ok(())
}
