//! Binary checkpoint: `HOPECKPT`, `u32` version, SHA-256 of the config JSON,
//! length-prefixed config and vocabulary JSON, then named `f64` blocks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{OptimizerState, TrainConfig};
use crate::data::{Pair, TextEncoderStub, VocabSpec};
use crate::error::{bail, Result};
use crate::hopfield::HopfieldMemory;
use crate::losses::SoftPrompt;
use crate::model::HopeModel;
use crate::numerics::{AdamState, Matrix};
use crate::params::Parameters;
use crate::softmoe::ComposerStack;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HOPECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: [u8; 32],
    pub model: HopeModel,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn hash_hex(&self) -> String {
        self.config_hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Whether `config` hashes to the stored value.
    pub fn matches(&self, config: &TrainConfig) -> bool {
        config_hash(config) == self.config_hash
    }
}

pub fn config_hash(config: &TrainConfig) -> [u8; 32] {
    let json = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(json.as_bytes()).into()
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| crate::HopeError::Format(format!("value {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_block(buf: &mut Vec<u8>, name: &str, m: &Matrix) -> Result<()> {
    put_u32(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, m.rows())?;
    put_u32(buf, m.cols())?;
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes the model and optimizer; the file is replaced atomically.
pub fn save_checkpoint(path: &Path, config: &TrainConfig, model: &HopeModel, optimizer: &OptimizerState) -> Result<()> {
    let config_json = serde_json::to_string(config)?;
    let vocab_json = serde_json::to_string(&model.vocab)?;
    let mut blocks: Vec<(String, Matrix)> = model.named_parameters();
    let rows: Vec<f64> = model
        .memory
        .row_class
        .iter()
        .flat_map(|p| [p.attr as f64, p.obj as f64])
        .collect();
    blocks.push(("memory.row_class".into(), Matrix::from_vec(model.memory.n_rows(), 2, rows)?));
    for (name, st) in &optimizer.states {
        blocks.push((format!("adam.m/{name}"), st.first_moment.clone()));
        blocks.push((format!("adam.v/{name}"), st.second_moment.clone()));
        blocks.push((format!("adam.step/{name}"), Matrix::scalar(st.step as f64)));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash(config));
    put_u32(&mut buf, config_json.len())?;
    buf.extend_from_slice(config_json.as_bytes());
    put_u32(&mut buf, vocab_json.len())?;
    buf.extend_from_slice(vocab_json.as_bytes());
    put_u32(&mut buf, blocks.len())?;
    for (name, m) in &blocks {
        put_block(&mut buf, name, m)?;
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            bail!(Format, "checkpoint truncated while reading {what} at byte {}", self.pos);
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| crate::HopeError::Format(format!("checkpoint {what} is not UTF-8")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        bail!(Format, "{} is not a checkpoint (bad magic)", path.display());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        bail!(Format, "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}");
    }
    let hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
    let config_text = r.string("config")?;
    let config: TrainConfig = serde_json::from_str(config_text)
        .map_err(|e| crate::HopeError::Format(format!("checkpoint config: {e}")))?;
    let vocab: VocabSpec = serde_json::from_str(r.string("vocabulary")?)
        .map_err(|e| crate::HopeError::Format(format!("checkpoint vocabulary: {e}")))?;
    vocab.validate()?;
    let stored_json_hash: [u8; 32] = Sha256::digest(config_text.as_bytes()).into();
    if stored_json_hash != hash {
        bail!(Format, "checkpoint config hash does not match its config");
    }

    let n_blocks = r.u32("block count")?;
    let mut blocks: BTreeMap<String, Matrix> = BTreeMap::new();
    for i in 0..n_blocks {
        let name = r.string(&format!("block {i} name"))?.to_string();
        let rows = r.u32(&format!("block {name} shape"))?;
        let cols = r.u32(&format!("block {name} shape"))?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| crate::HopeError::Format(format!("block {name} shape overflows")))?;
        let data = r
            .take(len, &format!("block {name}"))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if blocks.insert(name.clone(), Matrix::from_vec(rows, cols, data)?).is_some() {
            bail!(Format, "duplicate checkpoint block {name}");
        }
    }
    if r.pos != bytes.len() {
        bail!(Format, "{} trailing bytes after checkpoint blocks", bytes.len() - r.pos);
    }

    let model = rebuild_model(&config, vocab, &mut blocks)?;
    let mut optimizer = OptimizerState::default();
    let names: Vec<String> = blocks
        .keys()
        .filter_map(|k| k.strip_prefix("adam.step/").map(str::to_string))
        .collect();
    for name in names {
        let step = blocks.remove(&format!("adam.step/{name}")).expect("listed");
        let (Some(m), Some(v)) = (
            blocks.remove(&format!("adam.m/{name}")),
            blocks.remove(&format!("adam.v/{name}")),
        ) else {
            bail!(Format, "incomplete optimizer state for {name}");
        };
        let s = step.get(0, 0);
        if step.shape() != (1, 1) || s < 0.0 || s.fract() != 0.0 {
            bail!(Format, "bad optimizer step for {name}");
        }
        optimizer.states.insert(
            name,
            AdamState {
                config: config.adam,
                first_moment: m,
                second_moment: v,
                step: s as u64,
            },
        );
    }
    if let Some(extra) = blocks.keys().next() {
        bail!(Format, "unexpected checkpoint block {extra}");
    }
    Ok(Checkpoint {
        config,
        config_hash: hash,
        model,
        optimizer,
    })
}

fn rebuild_model(config: &TrainConfig, vocab: VocabSpec, blocks: &mut BTreeMap<String, Matrix>) -> Result<HopeModel> {
    let d = vocab.dim;
    let Some(rc) = blocks.remove("memory.row_class") else {
        bail!(Format, "checkpoint lacks block memory.row_class");
    };
    if rc.cols() != 2 {
        bail!(Format, "memory.row_class must have 2 columns");
    }
    let row_class: Vec<Pair> = (0..rc.rows())
        .map(|i| Pair::new(rc.get(i, 0) as usize, rc.get(i, 1) as usize))
        .collect();
    let c = row_class.len();
    let slots = config.model.slots;
    let memory = HopfieldMemory::from_parts(
        Matrix::zeros(c, d),
        Matrix::zeros(c, d),
        Matrix::zeros(vocab.n_attrs(), d),
        Matrix::zeros(vocab.n_objs(), d),
        Matrix::zeros(d, slots * d),
        row_class,
        slots,
    )
    .map_err(|e| crate::HopeError::Format(format!("checkpoint memory: {e}")))?;
    let mut model = HopeModel {
        prompt: SoftPrompt::new(vocab.n_attrs(), vocab.n_objs(), d, 0),
        encoder: TextEncoderStub::new(d, 0),
        memory,
        composer: ComposerStack::new(d, &config.model.composer, 0)?,
        logit_scale: Matrix::scalar(0.0),
        use_memory: config.model.use_memory,
        vocab,
    };
    let mut err = None;
    model.visit_mut("", &mut |name, m| {
        if err.is_some() {
            return;
        }
        match blocks.remove(name) {
            None => err = Some(format!("checkpoint lacks block {name}")),
            Some(b) if b.shape() != m.shape() => {
                err = Some(format!("block {name} has shape {:?}, expected {:?}", b.shape(), m.shape()))
            }
            Some(b) => *m = b,
        }
    });
    if let Some(e) = err {
        bail!(Format, "{e}");
    }
    Ok(model)
}
