//! Soft prompt, text features and the cross-entropy objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{project_pooled, Pair, VocabSpec};
use crate::error::{bail, Result};
use crate::numerics::{cross_entropy_mean, Matrix, Tape, Var};
use crate::params::{frozen, join, Binder, Parameters};

/// Number of trainable context tokens in front of every class prompt.
pub const CONTEXT_LEN: usize = 3;

/// Template token rows: `a`, `photo`, `of`, `object`.
const TEMPLATE_LEN: usize = 4;

/// Learnable context plus frozen token embeddings for the class words.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    /// `3 x D`, trainable.
    pub context: Matrix,
    /// `|A| x D`, frozen.
    pub attr_emb: Matrix,
    /// `|O| x D`, frozen.
    pub obj_emb: Matrix,
    /// `4 x D` word vectors for `a photo of ... object`, frozen.
    pub template: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub context: Var,
    pub attr_emb: Var,
    pub obj_emb: Var,
}

impl SoftPrompt {
    /// Seeded token tables. The context starts at the `a photo of` word vectors.
    pub fn new(n_attrs: usize, n_objs: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut table = |rows: usize| {
            let data = (0..rows * dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Matrix::from_vec(rows, dim, data).expect("sized buffer")
        };
        let template = table(TEMPLATE_LEN);
        let attr_emb = table(n_attrs);
        let obj_emb = table(n_objs);
        let context = template.select_rows(&[0, 1, 2]).expect("template rows");
        Self {
            context,
            attr_emb,
            obj_emb,
            template,
        }
    }

    pub fn dim(&self) -> usize {
        self.context.cols()
    }

    /// Tokens of `a photo of [attribute] object`.
    pub fn attribute_prompt(&self, attr: usize) -> Result<Matrix> {
        if attr >= self.attr_emb.rows() {
            bail!(Contract, "attribute {attr} out of range");
        }
        let head = self.template.select_rows(&[0, 1, 2])?;
        let word = self.attr_emb.select_rows(&[attr])?;
        let tail = self.template.select_rows(&[3])?;
        Matrix::concat_rows(&[&head, &word, &tail])
    }

    /// Tokens of `a photo of [object]`.
    pub fn object_prompt(&self, obj: usize) -> Result<Matrix> {
        if obj >= self.obj_emb.rows() {
            bail!(Contract, "object {obj} out of range");
        }
        let head = self.template.select_rows(&[0, 1, 2])?;
        let word = self.obj_emb.select_rows(&[obj])?;
        Matrix::concat_rows(&[&head, &word])
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> PromptVars {
        PromptVars {
            context: b.bind(&join(prefix, "context"), &self.context),
            attr_emb: b.bind(&join(prefix, "attr_emb"), &self.attr_emb),
            obj_emb: b.bind(&join(prefix, "obj_emb"), &self.obj_emb),
        }
    }
}

impl Parameters for SoftPrompt {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "context"), &self.context);
        f(&join(prefix, "attr_emb"), &self.attr_emb);
        f(&join(prefix, "obj_emb"), &self.obj_emb);
        f(&join(prefix, "template"), &self.template);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "context"), &mut self.context);
        f(&join(prefix, "attr_emb"), &mut self.attr_emb);
        f(&join(prefix, "obj_emb"), &mut self.obj_emb);
        f(&join(prefix, "template"), &mut self.template);
    }
}

/// Class text features as tape nodes, all rows unit length.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatureVars {
    /// `|C_s| x D`.
    pub compositions: Var,
    /// `|A| x D`.
    pub attributes: Var,
    /// `|O| x D`.
    pub objects: Var,
}

/// Plain-value counterpart of [`TextFeatureVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub compositions: Matrix,
    pub attributes: Matrix,
    pub objects: Matrix,
}

fn one_hot_rows(ids: impl Iterator<Item = usize>, n: usize, width: usize) -> Matrix {
    let mut m = Matrix::zeros(n, width);
    for (r, id) in ids.enumerate() {
        m.set(r, id, 1.0);
    }
    m
}

/// Encodes `[θ1, θ2, θ3, words...]` for every class on the tape.
///
/// The stub encoder mean-pools its tokens, so the pooled row of each prompt is
/// assembled from summed context and selected word rows before projection.
pub fn build_text_features(
    tape: &mut Tape,
    prompt: &PromptVars,
    encoder: Var,
    classes: &[Pair],
) -> Result<TextFeatureVars> {
    let n_attrs = tape.value(prompt.attr_emb).rows();
    let n_objs = tape.value(prompt.obj_emb).rows();
    let ones = tape.constant(Matrix::filled(1, CONTEXT_LEN, 1.0));
    let ctx_sum = tape.matmul(ones, prompt.context)?;

    let pooled = |tape: &mut Tape, words: Vec<(Var, Matrix)>, rows: usize| -> Result<Var> {
        let n_tokens = CONTEXT_LEN + words.len();
        let broadcast = tape.constant(Matrix::filled(rows, 1, 1.0));
        let mut acc = tape.matmul(broadcast, ctx_sum)?;
        for (table, select) in words {
            let sel = tape.constant(select);
            let picked = tape.matmul(sel, table)?;
            acc = tape.add(acc, picked)?;
        }
        Ok(tape.scale(acc, 1.0 / n_tokens as f64))
    };

    let c = classes.len();
    let sel_a = one_hot_rows(classes.iter().map(|p| p.attr), c, n_attrs);
    let sel_o = one_hot_rows(classes.iter().map(|p| p.obj), c, n_objs);
    let comp = pooled(tape, vec![(prompt.attr_emb, sel_a), (prompt.obj_emb, sel_o)], c)?;
    let attrs = pooled(tape, vec![(prompt.attr_emb, Matrix::identity(n_attrs))], n_attrs)?;
    let objs = pooled(tape, vec![(prompt.obj_emb, Matrix::identity(n_objs))], n_objs)?;
    Ok(TextFeatureVars {
        compositions: project_pooled(tape, comp, encoder)?,
        attributes: project_pooled(tape, attrs, encoder)?,
        objects: project_pooled(tape, objs, encoder)?,
    })
}

impl TextFeatures {
    pub fn compute(prompt: &SoftPrompt, encoder: &Matrix, classes: &[Pair]) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = prompt.bind(&mut Binder::new(&mut tape, &frozen), "");
        let w = tape.constant(encoder.clone());
        let f = build_text_features(&mut tape, &vars, w, classes)?;
        Ok(Self {
            compositions: tape.value(f.compositions).clone(),
            attributes: tape.value(f.attributes).clone(),
            objects: tape.value(f.objects).clone(),
        })
    }
}

/// Weights of the total objective and the InfoNCE temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.8,
            gamma: 0.3,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    /// Weights must lie in `[0, 1)`; zero switches a term off.
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..1.0).contains(&w) {
                bail!(Config, "loss weight {name} must be in [0, 1), got {w}");
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            bail!(Config, "temperature must be positive, got {}", self.tau);
        }
        Ok(())
    }
}

/// Maps composition labels to their seen-class index.
pub fn seen_targets(classes: &[Pair], labels: &[Pair]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            classes.iter().position(|c| c == l).ok_or_else(|| {
                crate::HopeError::Contract(format!(
                    "label ({}, {}) is not a seen composition",
                    l.attr, l.obj
                ))
            })
        })
        .collect()
}

/// `scale · feats · textᵀ`.
pub fn similarity_logits(tape: &mut Tape, feats: Var, text: Var, scale: Var) -> Result<Var> {
    let raw = tape.matmul_nt(feats, text)?;
    tape.scale_by(raw, scale)
}

/// Cross-entropy of image features against the seen composition features.
/// Serves both the soft-prompt loss (on `f_v`) and the fused loss (on `F_v`).
pub fn composition_loss(
    tape: &mut Tape,
    feats: Var,
    text: &TextFeatureVars,
    scale: Var,
    targets: &[usize],
) -> Result<Var> {
    let logits = similarity_logits(tape, feats, text.compositions, scale)?;
    cross_entropy_mean(tape, logits, targets)
}

/// Decomposed loss: attribute and object cross-entropies of the fused features.
pub fn decomposed_loss(
    tape: &mut Tape,
    feats: Var,
    text: &TextFeatureVars,
    scale: Var,
    labels: &[Pair],
) -> Result<Var> {
    let attrs: Vec<usize> = labels.iter().map(|p| p.attr).collect();
    let objs: Vec<usize> = labels.iter().map(|p| p.obj).collect();
    let la = similarity_logits(tape, feats, text.attributes, scale)?;
    let lo = similarity_logits(tape, feats, text.objects, scale)?;
    let a = cross_entropy_mean(tape, la, &attrs)?;
    let o = cross_entropy_mean(tape, lo, &objs)?;
    tape.add(a, o)
}

/// Named loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub st_obj: f64,
    pub dfm: f64,
    pub spm: f64,
    pub retrieval: f64,
    pub info_nce: f64,
}

impl LossParts {
    pub const NAMES: [&'static str; 5] = ["st_obj", "dfm", "spm", "retrieval", "info_nce"];

    pub fn values(&self) -> [f64; 5] {
        [self.st_obj, self.dfm, self.spm, self.retrieval, self.info_nce]
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        self.st_obj + w.alpha * self.dfm + w.beta * self.spm + w.gamma * (self.retrieval + self.info_nce)
    }

    /// Training error naming the first non-finite component.
    pub fn check_finite(&self, step: usize) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            if !v.is_finite() {
                bail!(Training, "loss component {name} is {v} at step {step}");
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &LossParts, k: f64) {
        self.st_obj += k * other.st_obj;
        self.dfm += k * other.dfm;
        self.spm += k * other.spm;
        self.retrieval += k * other.retrieval;
        self.info_nce += k * other.info_nce;
    }
}

/// Loss component nodes; absent parts do not contribute.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub st_obj: Option<Var>,
    pub dfm: Option<Var>,
    pub spm: Option<Var>,
    pub retrieval: Option<Var>,
    pub info_nce: Option<Var>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar_value(x));
        LossParts {
            st_obj: v(self.st_obj),
            dfm: v(self.dfm),
            spm: v(self.spm),
            retrieval: v(self.retrieval),
            info_nce: v(self.info_nce),
        }
    }
}

/// `L_st+obj + α L_dfm + β L_spm + γ (L_r + L_InfoNCE)` on the tape.
pub fn total_loss(tape: &mut Tape, parts: &LossVars, w: &LossWeights) -> Result<Var> {
    let terms = [
        (parts.st_obj, 1.0),
        (parts.dfm, w.alpha),
        (parts.spm, w.beta),
        (parts.retrieval, w.gamma),
        (parts.info_nce, w.gamma),
    ];
    let mut acc: Option<Var> = None;
    for (part, k) in terms {
        let Some(v) = part else { continue };
        let scaled = tape.scale(v, k);
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Matrix::scalar(0.0))))
}

/// Labels by seen index, rejecting compositions outside the vocabulary's seen set.
pub fn seen_labels(vocab: &VocabSpec, labels: &[Pair]) -> Result<Vec<usize>> {
    seen_targets(&vocab.seen_pairs, labels)
}
