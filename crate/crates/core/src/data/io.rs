//! On-disk dataset layout: `manifest.json` plus a little-endian `embeddings.bin`.
//!
//! The embedding file is the 8-byte magic `HOPEEMB1`, a `u32` record count and a
//! `u32` dimension, followed by records of `u16` attribute id, `u16` object id
//! and `dim` `f32` values. Train records come first, then test records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompositionDataset, Pair, Sample, SynonymGroups, VocabSpec};
use crate::error::{bail, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDING_FILE: &str = "embeddings.bin";
pub const EMBEDDING_MAGIC: &[u8; 8] = b"HOPEEMB1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    attributes: Vec<String>,
    objects: Vec<String>,
    seen_pairs: Vec<Pair>,
    unseen_closed: Vec<Pair>,
    dim: usize,
    train_count: usize,
    test_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synonym_groups: Option<SynonymGroups>,
}

pub fn save(dataset: &CompositionDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let v = &dataset.vocab;
    let manifest = Manifest {
        attributes: v.attributes.clone(),
        objects: v.objects.clone(),
        seen_pairs: v.seen_pairs.clone(),
        unseen_closed: v.unseen_closed.clone(),
        dim: v.dim,
        train_count: dataset.train.len(),
        test_count: dataset.test.len(),
        synonym_groups: dataset.synonym_groups.clone(),
    };
    if v.n_attrs() > u16::MAX as usize + 1 || v.n_objs() > u16::MAX as usize + 1 {
        bail!(Format, "vocabulary too large for 16-bit label ids");
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;

    let records = dataset.train.len() + dataset.test.len();
    let mut buf = Vec::with_capacity(16 + records * (4 + 4 * v.dim));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(records as u32).to_le_bytes());
    buf.extend_from_slice(&(v.dim as u32).to_le_bytes());
    for s in dataset.train.iter().chain(&dataset.test) {
        buf.extend_from_slice(&(s.label.attr as u16).to_le_bytes());
        buf.extend_from_slice(&(s.label.obj as u16).to_le_bytes());
        for &x in &s.embedding {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(EMBEDDING_FILE), buf)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<CompositionDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| crate::HopeError::Format(format!("{}: {e}", manifest_path.display())))?;
    let vocab = VocabSpec {
        attributes: manifest.attributes,
        objects: manifest.objects,
        seen_pairs: manifest.seen_pairs,
        unseen_closed: manifest.unseen_closed,
        dim: manifest.dim,
    };
    vocab.validate()?;

    let bytes = fs::read(dir.join(EMBEDDING_FILE))?;
    let samples = parse_embeddings(&bytes, &vocab)?;
    if samples.len() != manifest.train_count + manifest.test_count {
        bail!(
            Format,
            "embedding file holds {} records, manifest declares {} train + {} test",
            samples.len(),
            manifest.train_count,
            manifest.test_count
        );
    }
    let mut samples = samples;
    let test = samples.split_off(manifest.train_count);
    let dataset = CompositionDataset {
        vocab,
        train: samples,
        test,
        synonym_groups: manifest.synonym_groups,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn parse_embeddings(bytes: &[u8], vocab: &VocabSpec) -> Result<Vec<Sample>> {
    if bytes.len() < 16 {
        bail!(Format, "embedding file shorter than its 16-byte header");
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        bail!(Format, "bad embedding magic {:?}", String::from_utf8_lossy(&bytes[..8]));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let count = u32_at(8);
    let dim = u32_at(12);
    if dim != vocab.dim {
        bail!(Format, "embedding dimension {dim} does not match manifest dimension {}", vocab.dim);
    }
    let record = 4 + 4 * dim;
    let body = &bytes[16..];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let Some(rec) = body.get(i * record..(i + 1) * record) else {
            bail!(Format, "record {i} truncated ({} of {count} records complete)", i);
        };
        let attr = u16::from_le_bytes([rec[0], rec[1]]) as usize;
        let obj = u16::from_le_bytes([rec[2], rec[3]]) as usize;
        if attr >= vocab.n_attrs() {
            bail!(Format, "record {i}: attribute id {attr} out of range");
        }
        if obj >= vocab.n_objs() {
            bail!(Format, "record {i}: object id {obj} out of range");
        }
        let embedding: Vec<f64> = rec[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if !embedding.iter().all(|v| v.is_finite()) {
            bail!(Format, "record {i}: non-finite embedding value");
        }
        out.push(Sample {
            embedding,
            label: Pair::new(attr, obj),
        });
    }
    if body.len() != count * record {
        bail!(Format, "{} trailing bytes after {count} records", body.len() - count * record);
    }
    Ok(out)
}
