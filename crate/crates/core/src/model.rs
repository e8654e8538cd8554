//! The assembled recognizer: soft prompt, frozen text encoder, Hopfield memory
//! and composer, with the staged objectives built on one tape.

use serde::{Deserialize, Serialize};

use crate::data::{CompositionDataset, Pair, Sample, TextEncoderStub, VocabSpec};
use crate::error::{bail, Result};
use crate::hopfield::{info_nce_on_tape, HopfieldMemory, MemoryInit, MemoryVars, RetrievalNodes, TargetMode};
use crate::losses::{
    build_text_features, composition_loss, decomposed_loss, seen_targets, LossVars, LossWeights,
    PromptVars, SoftPrompt, TextFeatures,
};
use crate::numerics::{Matrix, Tape, Var};
use crate::params::{frozen, Binder, Parameters};
use crate::softmoe::{ComposerConfig, ComposerStack, ComposerVars};

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Retrieval slots `l`, half per primitive.
    pub slots: usize,
    pub k_shots: usize,
    pub composer: ComposerConfig,
    /// When false the composer sees only the image embedding.
    pub use_memory: bool,
    pub logit_scale_init: f64,
    pub projection_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            slots: 8,
            k_shots: 10,
            composer: ComposerConfig::default(),
            use_memory: true,
            logit_scale_init: 1.0 / 0.07,
            projection_init_scale: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots < 2 || self.slots % 2 != 0 {
            bail!(Config, "slots must be even and at least 2, got {}", self.slots);
        }
        if self.k_shots == 0 {
            bail!(Config, "k_shots must be at least 1");
        }
        if !(self.logit_scale_init > 0.0) || !self.logit_scale_init.is_finite() {
            bail!(Config, "logit_scale_init must be positive");
        }
        if !(self.projection_init_scale >= 0.0) || !self.projection_init_scale.is_finite() {
            bail!(Config, "projection_init_scale must be non-negative");
        }
        self.composer.validate()
    }
}

/// Which objective and parameter group a step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Soft prompt only, soft-prompt loss.
    Prompt = 1,
    /// Adds the memory and its projection with the retrieval losses.
    Memory = 2,
    /// Everything trainable with the full objective.
    Joint = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Prompt, Stage::Memory, Stage::Joint];

    pub fn number(self) -> usize {
        self as usize
    }
}

/// Parameters that never receive updates.
pub const FROZEN: [&str; 6] = [
    "prompt.attr_emb",
    "prompt.obj_emb",
    "prompt.template",
    "memory.text_attr",
    "memory.text_obj",
    "encoder.projection",
];

/// Whether parameter `name` is optimized in `stage`.
pub fn is_trainable(name: &str, stage: Stage, train_memory_in_joint: bool) -> bool {
    if FROZEN.contains(&name) {
        return false;
    }
    let prompt = name == "prompt.context" || name == "logit_scale";
    let memory = name.starts_with("memory.");
    match stage {
        Stage::Prompt => prompt,
        Stage::Memory => prompt || memory,
        Stage::Joint => {
            if name == "memory.visual_attr" || name == "memory.visual_obj" {
                train_memory_in_joint
            } else {
                true
            }
        }
    }
}

/// Switches for the individual objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub target_mode: TargetMode,
    pub use_retrieval_loss: bool,
    pub use_infonce: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            target_mode: TargetMode::Spread,
            use_retrieval_loss: true,
            use_infonce: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HopeModel {
    pub vocab: VocabSpec,
    pub prompt: SoftPrompt,
    pub encoder: TextEncoderStub,
    pub memory: HopfieldMemory,
    pub composer: ComposerStack,
    /// `1 x 1` multiplier on every similarity logit.
    pub logit_scale: Matrix,
    pub use_memory: bool,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub prompt: PromptVars,
    pub encoder: Var,
    pub memory: MemoryVars,
    pub composer: ComposerVars,
    pub logit_scale: Var,
}

/// Per-sample forward results on a tape.
#[derive(Clone, Debug)]
pub struct SampleNodes {
    pub image: Var,
    pub retrieval: Option<RetrievalNodes>,
    /// `1 x D` fused feature, present when the composer ran.
    pub fused: Option<Var>,
    pub combine: Vec<Var>,
}

/// Derives independent sub-seeds from one seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

impl HopeModel {
    pub fn init(dataset: &CompositionDataset, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        dataset.validate()?;
        let vocab = dataset.vocab.clone();
        let d = vocab.dim;
        let prompt = SoftPrompt::new(vocab.n_attrs(), vocab.n_objs(), d, sub_seed(seed, 1));
        let encoder = TextEncoderStub::new(d, sub_seed(seed, 2));
        let memory = HopfieldMemory::init(
            dataset,
            &MemoryInit {
                k_shots: cfg.k_shots,
                slots: cfg.slots,
                projection_scale: cfg.projection_init_scale,
                seed: sub_seed(seed, 3),
            },
            &encoder,
            &prompt,
        )?;
        let composer = ComposerStack::new(d, &cfg.composer, sub_seed(seed, 4))?;
        Ok(Self {
            vocab,
            prompt,
            encoder,
            memory,
            composer,
            logit_scale: Matrix::scalar(cfg.logit_scale_init),
            use_memory: cfg.use_memory,
        })
    }

    pub fn dim(&self) -> usize {
        self.vocab.dim
    }

    pub fn bind(&self, b: &mut Binder) -> ModelVars {
        ModelVars {
            prompt: self.prompt.bind(b, "prompt"),
            encoder: b.bind("encoder.projection", &self.encoder.projection),
            memory: self.memory.bind(b, "memory"),
            composer: self.composer.bind(b, "composer"),
            logit_scale: b.bind("logit_scale", &self.logit_scale),
        }
    }

    /// Retrieval (when enabled) and, if `compose`, the fused feature of one image.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        embedding: &[f64],
        retrieve: bool,
        compose: bool,
    ) -> Result<SampleNodes> {
        if embedding.len() != self.dim() {
            bail!(Dimension, "embedding has {} values, expected {}", embedding.len(), self.dim());
        }
        let image = tape.constant(Matrix::row_vector(embedding));
        let retrieval = if self.use_memory && (retrieve || compose) {
            let z = self.memory.project_query_on_tape(tape, image, &vars.memory)?;
            Some(self.memory.retrieve_on_tape(tape, z, &vars.memory)?)
        } else {
            None
        };
        let (fused, combine) = if compose {
            let seq = match &retrieval {
                Some(r) => tape.concat_rows(&[image, r.patterns, r.prototypes])?,
                None => image,
            };
            let out = vars.composer.forward(tape, seq)?;
            (Some(out.features), out.combine)
        } else {
            (None, Vec::new())
        };
        Ok(SampleNodes {
            image,
            retrieval,
            fused,
            combine,
        })
    }

    /// Loss components of `stage` on a batch; all terms are batch means.
    pub fn batch_losses(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &[&Sample],
        stage: Stage,
        obj: &Objective,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            bail!(Contract, "empty batch");
        }
        let labels: Vec<Pair> = batch.iter().map(|s| s.label).collect();
        let targets = seen_targets(&self.vocab.seen_pairs, &labels)?;
        let text = build_text_features(tape, &vars.prompt, vars.encoder, &self.vocab.seen_pairs)?;

        let mut images = Matrix::zeros(batch.len(), self.dim());
        for (r, s) in batch.iter().enumerate() {
            if s.embedding.len() != self.dim() {
                bail!(Dimension, "sample embedding has {} values", s.embedding.len());
            }
            images.row_mut(r).copy_from_slice(&s.embedding);
        }
        let images = tape.constant(images);
        let mut out = LossVars {
            spm: Some(composition_loss(tape, images, &text, vars.logit_scale, &targets)?),
            ..LossVars::default()
        };
        if stage == Stage::Prompt {
            return Ok(out);
        }

        let retrieve = self.use_memory && (obj.use_retrieval_loss || obj.use_infonce);
        let compose = stage == Stage::Joint;
        if !retrieve && !compose {
            return Ok(out);
        }
        let inv_n = 1.0 / batch.len() as f64;
        let mut r_terms = Vec::new();
        let mut nce_terms = Vec::new();
        let mut fused = Vec::new();
        for s in batch {
            let nodes = self.forward_sample(tape, vars, &s.embedding, retrieve, compose)?;
            if let Some(r) = &nodes.retrieval {
                if obj.use_retrieval_loss {
                    r_terms.push(self.memory.retrieval_loss_on_tape(tape, r.scores, s.label, obj.target_mode)?);
                }
                if obj.use_infonce {
                    let pos = self.memory.positive_slots(&r.winners, s.label);
                    nce_terms.push(info_nce_on_tape(tape, nodes.image, r.patterns, &pos, obj.weights.tau)?);
                }
            }
            if let Some(f) = nodes.fused {
                fused.push(f);
            }
        }
        let mean = |tape: &mut Tape, terms: &[Var]| -> Result<Option<Var>> {
            if terms.is_empty() {
                return Ok(None);
            }
            let stacked = tape.concat_rows(terms)?;
            let total = tape.sum(stacked);
            Ok(Some(tape.scale(total, inv_n)))
        };
        out.retrieval = mean(tape, &r_terms)?;
        out.info_nce = mean(tape, &nce_terms)?;
        if compose {
            let f = tape.concat_rows(&fused)?;
            out.st_obj = Some(composition_loss(tape, f, &text, vars.logit_scale, &targets)?);
            out.dfm = Some(decomposed_loss(tape, f, &text, vars.logit_scale, &labels)?);
        }
        Ok(out)
    }

    /// Fused features of a set of embeddings, one row each.
    pub fn fused_features(&self, embeddings: &[&[f64]]) -> Result<Matrix> {
        let mut out = Matrix::zeros(embeddings.len(), self.dim());
        for (r, e) in embeddings.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = self.bind(&mut Binder::new(&mut tape, &frozen));
            let nodes = self.forward_sample(&mut tape, &vars, e, false, true)?;
            let f = nodes.fused.expect("composer ran");
            out.row_mut(r).copy_from_slice(tape.value(f).as_slice());
        }
        Ok(out)
    }

    /// Plain retrieval for one embedding.
    pub fn retrieve(&self, embedding: &[f64]) -> Result<crate::hopfield::RetrievalResult> {
        let z = self.memory.project_query(embedding)?;
        self.memory.retrieve(&z)
    }

    /// Combine weights of every Soft-MoE layer for one embedding.
    pub fn combine_weights(&self, embedding: &[f64]) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut Binder::new(&mut tape, &frozen));
        let nodes = self.forward_sample(&mut tape, &vars, embedding, false, true)?;
        Ok(nodes.combine.iter().map(|&c| tape.value(c).clone()).collect())
    }

    /// Unit text features for arbitrary compositions.
    pub fn text_features(&self, pairs: &[Pair]) -> Result<TextFeatures> {
        TextFeatures::compute(&self.prompt, &self.encoder.projection, pairs)
    }

    /// Every named parameter, trainable or not.
    pub fn named_parameters(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n.to_string(), m.clone())));
        out
    }
}

impl Parameters for HopeModel {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.prompt.visit("prompt", f);
        f("encoder.projection", &self.encoder.projection);
        self.memory.visit("memory", f);
        self.composer.visit("composer", f);
        f("logit_scale", &self.logit_scale);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.prompt.visit_mut("prompt", f);
        f("encoder.projection", &mut self.encoder.projection);
        self.memory.visit_mut("memory", f);
        self.composer.visit_mut("composer", f);
        f("logit_scale", &mut self.logit_scale);
    }
}
