//! Transformer composer with Soft Mixture-of-Experts feed-forward layers.
//!
//! Routing logits `X·Φ` are normalized twice: over tokens to form the slot
//! inputs (dispatch) and over slots to mix expert outputs back (combine).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{bail, Result};
use crate::numerics::{Activation, Matrix, Tape, Var};
use crate::params::{frozen, join, Binder, Parameters};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// `gelu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: gaussian(rng, dim, hidden, 1.0 / (dim as f64).sqrt()),
            b1: Matrix::zeros(1, hidden),
            w2: gaussian(rng, hidden, dim, 1.0 / (hidden as f64).sqrt()),
            b2: Matrix::zeros(1, dim),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(dim, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, dim),
            b2: Matrix::zeros(1, dim),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> FeedForwardVars {
        FeedForwardVars {
            w1: b.bind(&join(prefix, "w1"), &self.w1),
            b1: b.bind(&join(prefix, "b1"), &self.b1),
            w2: b.bind(&join(prefix, "w2"), &self.w2),
            b2: b.bind(&join(prefix, "b2"), &self.b2),
        }
    }
}

impl FeedForwardVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.map(h, Activation::Gelu);
        let y = tape.matmul(h, self.w2)?;
        tape.add(y, self.b2)
    }
}

impl Parameters for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "b1"), &self.b1);
        f(&join(prefix, "w2"), &self.w2);
        f(&join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

/// Single-head scaled dot-product self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl Attention {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            wq: gaussian(rng, dim, dim, std),
            wk: gaussian(rng, dim, dim, std),
            wv: gaussian(rng, dim, dim, std),
            wo: gaussian(rng, dim, dim, std),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> AttentionVars {
        AttentionVars {
            wq: b.bind(&join(prefix, "wq"), &self.wq),
            wk: b.bind(&join(prefix, "wk"), &self.wk),
            wv: b.bind(&join(prefix, "wv"), &self.wv),
            wo: b.bind(&join(prefix, "wo"), &self.wo),
        }
    }
}

impl AttentionVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        let q = tape.matmul(x, self.wq)?;
        let k = tape.matmul(x, self.wk)?;
        let v = tape.matmul(x, self.wv)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let a = tape.softmax_rows(s)?;
        let ctx = tape.matmul(a, v)?;
        tape.matmul(ctx, self.wo)
    }
}

impl Parameters for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "wq"), &self.wq);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        f(&join(prefix, "wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftMoeLayer {
    /// `D x (n_experts · slots_per_expert)`.
    pub routing: Matrix,
    pub experts: Vec<FeedForward>,
    pub slots_per_expert: usize,
}

#[derive(Clone, Debug)]
pub struct SoftMoeVars {
    pub routing: Var,
    pub experts: Vec<FeedForwardVars>,
    pub slots_per_expert: usize,
}

impl SoftMoeLayer {
    pub fn new(
        dim: usize,
        hidden: usize,
        n_experts: usize,
        slots_per_expert: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_experts == 0 || slots_per_expert == 0 || hidden == 0 {
            bail!(
                Config,
                "Soft-MoE needs positive experts, slots per expert and hidden width, got {n_experts}, {slots_per_expert}, {hidden}"
            );
        }
        let routing = gaussian(rng, dim, n_experts * slots_per_expert, 1.0 / (dim as f64).sqrt());
        let experts = (0..n_experts).map(|_| FeedForward::new(dim, hidden, rng)).collect();
        Ok(Self {
            routing,
            experts,
            slots_per_expert,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn n_slots(&self) -> usize {
        self.routing.cols()
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> SoftMoeVars {
        SoftMoeVars {
            routing: b.bind(&join(prefix, "routing"), &self.routing),
            experts: self
                .experts
                .iter()
                .enumerate()
                .map(|(e, ffn)| ffn.bind(b, &join(prefix, &format!("expert{e}"))))
                .collect(),
            slots_per_expert: self.slots_per_expert,
        }
    }

    /// Plain-value forward pass.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut Binder::new(&mut tape, &frozen), "");
        let xv = tape.constant(x.clone());
        let out = vars.forward(&mut tape, xv)?;
        Ok(tape.value(out.output).clone())
    }
}

impl Parameters for SoftMoeLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "routing"), &self.routing);
        for (e, ffn) in self.experts.iter().enumerate() {
            ffn.visit(&join(prefix, &format!("expert{e}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "routing"), &mut self.routing);
        for (e, ffn) in self.experts.iter_mut().enumerate() {
            ffn.visit_mut(&join(prefix, &format!("expert{e}")), f);
        }
    }
}

/// Dispatch weights: softmax of `X·Φ` over tokens, per slot column.
pub fn dispatch_weights(x: &Matrix, routing: &Matrix) -> Result<Matrix> {
    let logits = x.matmul(routing)?;
    Ok(logits.transpose().softmax_rows()?.transpose())
}

/// Combine weights: softmax of `X·Φ` over slots, per token row.
pub fn combine_weights(x: &Matrix, routing: &Matrix) -> Result<Matrix> {
    x.matmul(routing)?.softmax_rows()
}

#[derive(Clone, Copy, Debug)]
pub struct MoeNodes {
    pub output: Var,
    pub dispatch: Var,
    pub combine: Var,
}

/// Soft-MoE routing around arbitrary experts. Expert `e` receives the slot rows
/// `e·spe .. (e+1)·spe` of `Dᵀ·X`.
pub fn moe_forward_with<F>(
    tape: &mut Tape,
    x: Var,
    routing: Var,
    slots_per_expert: usize,
    mut expert: F,
) -> Result<MoeNodes>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let n_slots = tape.value(routing).cols();
    if slots_per_expert == 0 || n_slots % slots_per_expert != 0 {
        bail!(
            Dimension,
            "{n_slots} routing slots not divisible into {slots_per_expert} per expert"
        );
    }
    let logits = tape.matmul(x, routing)?;
    let dispatch = tape.softmax_cols(logits)?;
    let combine = tape.softmax_rows(logits)?;
    let slots_in = tape.matmul_tn(dispatch, x)?;
    let mut outs = Vec::with_capacity(n_slots / slots_per_expert);
    for e in 0..n_slots / slots_per_expert {
        let rows: Vec<usize> = (e * slots_per_expert..(e + 1) * slots_per_expert).collect();
        let input = tape.select_rows(slots_in, &rows)?;
        outs.push(expert(tape, e, input)?);
    }
    let slots_out = tape.concat_rows(&outs)?;
    let output = tape.matmul(combine, slots_out)?;
    Ok(MoeNodes {
        output,
        dispatch,
        combine,
    })
}

impl SoftMoeVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<MoeNodes> {
        let experts = &self.experts;
        if tape.value(self.routing).cols() != experts.len() * self.slots_per_expert {
            bail!(Dimension, "routing width does not match expert count");
        }
        moe_forward_with(tape, x, self.routing, self.slots_per_expert, |t, e, input| {
            experts[e].forward(t, input)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Dense(FeedForward),
    Moe(SoftMoeLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn: Attention,
    pub mixer: Mixer,
}

#[derive(Clone, Debug)]
enum MixerVars {
    Dense(FeedForwardVars),
    Moe(SoftMoeVars),
}

#[derive(Clone, Debug)]
struct BlockVars {
    attn: AttentionVars,
    mixer: MixerVars,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposerKind {
    /// Second half of the blocks uses Soft-MoE layers.
    #[default]
    Softmoe,
    /// Plain feed-forward in every block.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComposerConfig {
    pub n_blocks: usize,
    pub n_experts: usize,
    pub hidden_mult: usize,
    pub slots_per_expert: usize,
    pub kind: ComposerKind,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            n_experts: 8,
            hidden_mult: 2,
            slots_per_expert: 1,
            kind: ComposerKind::Softmoe,
        }
    }
}

impl ComposerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            bail!(Config, "composer needs at least one block");
        }
        if self.hidden_mult == 0 {
            bail!(Config, "hidden_mult must be positive");
        }
        if self.kind == ComposerKind::Softmoe && (self.n_experts == 0 || self.slots_per_expert == 0) {
            bail!(Config, "n_experts and slots_per_expert must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposerStack {
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct ComposerVars {
    blocks: Vec<BlockVars>,
}

/// Composer outputs on a tape.
#[derive(Clone, Debug)]
pub struct ComposerNodes {
    /// `1 x D`, unit length.
    pub features: Var,
    /// Combine weights of each Soft-MoE layer, in block order.
    pub combine: Vec<Var>,
}

impl ComposerStack {
    pub fn new(dim: usize, cfg: &ComposerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = cfg.hidden_mult * dim;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let attn = Attention::new(dim, &mut rng);
            let moe = cfg.kind == ComposerKind::Softmoe && i >= cfg.n_blocks / 2;
            let mixer = if moe {
                Mixer::Moe(SoftMoeLayer::new(
                    dim,
                    hidden,
                    cfg.n_experts,
                    cfg.slots_per_expert,
                    &mut rng,
                )?)
            } else {
                Mixer::Dense(FeedForward::new(dim, hidden, &mut rng))
            };
            blocks.push(Block { attn, mixer });
        }
        Ok(Self { blocks })
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &SoftMoeLayer> {
        self.blocks.iter().filter_map(|b| match &b.mixer {
            Mixer::Moe(m) => Some(m),
            Mixer::Dense(_) => None,
        })
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> ComposerVars {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                let p = join(prefix, &format!("block{i}"));
                let attn = block.attn.bind(b, &join(&p, "attn"));
                let mixer = match &block.mixer {
                    Mixer::Dense(ffn) => MixerVars::Dense(ffn.bind(b, &join(&p, "ffn"))),
                    Mixer::Moe(moe) => MixerVars::Moe(moe.bind(b, &join(&p, "moe"))),
                };
                BlockVars { attn, mixer }
            })
            .collect();
        ComposerVars { blocks }
    }

    /// Fused feature of a plain token sequence.
    pub fn forward(&self, seq: &Matrix) -> Result<(Vec<f64>, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut Binder::new(&mut tape, &frozen), "");
        let x = tape.constant(seq.clone());
        let out = vars.forward(&mut tape, x)?;
        let combine = out.combine.iter().map(|&c| tape.value(c).clone()).collect();
        Ok((tape.value(out.features).as_slice().to_vec(), combine))
    }
}

impl ComposerVars {
    /// Pre-norm blocks with residuals; reads out row 0, L2-normalized.
    pub fn forward(&self, tape: &mut Tape, seq: Var) -> Result<ComposerNodes> {
        if tape.value(seq).rows() == 0 {
            bail!(Contract, "composer needs at least one token");
        }
        let mut x = seq;
        let mut combine = Vec::new();
        for block in &self.blocks {
            let h = tape.layer_norm_rows(x);
            let a = block.attn.forward(tape, h)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm_rows(x);
            let m = match &block.mixer {
                MixerVars::Dense(ffn) => ffn.forward(tape, h)?,
                MixerVars::Moe(moe) => {
                    let nodes = moe.forward(tape, h)?;
                    combine.push(nodes.combine);
                    nodes.output
                }
            };
            x = tape.add(x, m)?;
        }
        let first = tape.select_rows(x, &[0])?;
        Ok(ComposerNodes {
            features: tape.l2_normalize_rows(first),
            combine,
        })
    }
}

impl Parameters for ComposerStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            block.attn.visit(&join(&p, "attn"), f);
            match &block.mixer {
                Mixer::Dense(ffn) => ffn.visit(&join(&p, "ffn"), f),
                Mixer::Moe(moe) => moe.visit(&join(&p, "moe"), f),
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            block.attn.visit_mut(&join(&p, "attn"), f);
            match &mut block.mixer {
                Mixer::Dense(ffn) => ffn.visit_mut(&join(&p, "ffn"), f),
                Mixer::Moe(moe) => moe.visit_mut(&join(&p, "moe"), f),
            }
        }
    }
}

fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Histogram of which expert each token is combined from, split by the
/// sample's attribute and object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertAllocation {
    pub n_experts: usize,
    /// `expert x attribute` token counts.
    pub attr_counts: Vec<Vec<usize>>,
    /// `expert x object` token counts.
    pub obj_counts: Vec<Vec<usize>>,
    pub tokens: usize,
}

impl ExpertAllocation {
    pub fn new(n_experts: usize, n_attrs: usize, n_objs: usize) -> Self {
        Self {
            n_experts,
            attr_counts: vec![vec![0; n_attrs]; n_experts],
            obj_counts: vec![vec![0; n_objs]; n_experts],
            tokens: 0,
        }
    }

    /// Adds every token of one sample, assigned to the expert owning its
    /// arg-max combine slot.
    pub fn record(&mut self, combine: &Matrix, slots_per_expert: usize, label: Pair) -> Result<()> {
        if combine.cols() != self.n_experts * slots_per_expert {
            bail!(
                Dimension,
                "combine weights have {} slots, expected {}",
                combine.cols(),
                self.n_experts * slots_per_expert
            );
        }
        if label.attr >= self.attr_counts[0].len() || label.obj >= self.obj_counts[0].len() {
            bail!(Contract, "label ({}, {}) out of range", label.attr, label.obj);
        }
        for slot in combine.argmax_rows() {
            let e = slot / slots_per_expert;
            self.attr_counts[e][label.attr] += 1;
            self.obj_counts[e][label.obj] += 1;
            self.tokens += 1;
        }
        Ok(())
    }

    pub fn usage(&self) -> Vec<usize> {
        self.attr_counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Entropy of the token share per expert; `ln n_experts` when balanced.
    pub fn usage_entropy(&self) -> f64 {
        entropy(&self.usage())
    }

    /// Entropy of each expert's attribute histogram.
    pub fn attr_entropy(&self) -> Vec<f64> {
        self.attr_counts.iter().map(|r| entropy(r)).collect()
    }

    pub fn obj_entropy(&self) -> Vec<f64> {
        self.obj_counts.iter().map(|r| entropy(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_moe(x: &Matrix, routing: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let r = tape.constant(routing.clone());
        let out = moe_forward_with(&mut tape, xv, r, 1, |_, _, s| Ok(s)).unwrap();
        tape.value(out.output).clone()
    }

    #[test]
    fn dispatch_examples() {
        let d = dispatch_weights(&Matrix::row_vector(&[0.3, 2.0]), &Matrix::from_rows(&[[1.0], [0.5]]).unwrap())
            .unwrap();
        assert_eq!(d.as_slice(), &[1.0]);

        let x = Matrix::from_rows(&[[0.2, -0.4]; 3]).unwrap();
        let r = Matrix::from_rows(&[[1.0, -2.0], [0.3, 0.7]]).unwrap();
        let d = dispatch_weights(&x, &r).unwrap();
        for v in d.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let d = dispatch_weights(&x, &Matrix::scalar(1.0)).unwrap();
        assert!((d.get(0, 0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((d.get(1, 0) - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn combine_examples() {
        let c = combine_weights(&Matrix::from_rows(&[[0.5], [-3.0]]).unwrap(), &Matrix::scalar(2.0)).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 1.0]);

        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let r = Matrix::from_rows(&[[0.0, 3f64.ln()], [0.0, 0.0]]).unwrap();
        let c = combine_weights(&x, &r).unwrap();
        assert!((c.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((c.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identity_experts_single_token() {
        let x = Matrix::row_vector(&[0.4, -1.2, 3.0]);
        let r = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]]).unwrap();
        let y = identity_moe(&x, &r);
        for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_experts_uniform_logits_give_mean() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [-2.0, 4.0]]).unwrap();
        let y = identity_moe(&x, &Matrix::zeros(2, 4));
        let mean = [2.5 / 4.0, 5.5 / 4.0];
        for r in 0..4 {
            for c in 0..2 {
                assert!((y.get(r, c) - mean[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_expert_maps_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = SoftMoeLayer::new(3, 6, 4, 1, &mut rng).unwrap();
        for e in &mut layer.experts {
            *e = FeedForward::zeros(3, 6);
        }
        let x = gaussian(&mut rng, 5, 3, 1.0);
        assert_eq!(layer.forward(&x).unwrap(), Matrix::zeros(5, 3));
    }

    fn zero_stack(dim: usize) -> ComposerStack {
        let mut stack = ComposerStack::new(dim, &ComposerConfig::default(), 1).unwrap();
        stack.visit_mut("", &mut |_, m| {
            m.as_mut_slice().fill(0.0);
        });
        stack
    }

    #[test]
    fn residual_only_stack_normalizes_first_token() {
        let stack = zero_stack(4);
        let seq = Matrix::from_rows(&[[3.0, 0.0, 4.0, 0.0], [1.0, 1.0, 1.0, 1.0], [0.0, 2.0, 0.0, 1.0]]).unwrap();
        let (f, _) = stack.forward(&seq).unwrap();
        let want = [0.6, 0.0, 0.8, 0.0];
        for (a, b) in f.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn permuting_retrieved_rows_keeps_output() {
        let stack = ComposerStack::new(6, &ComposerConfig::default(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = gaussian(&mut rng, 9, 6, 1.0);
        let perm = seq.select_rows(&[0, 3, 1, 4, 2, 8, 6, 5, 7]).unwrap();
        let (a, _) = stack.forward(&seq).unwrap();
        let (b, _) = stack.forward(&perm).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_composer_golden_value() {
        let stack = ComposerStack::new(4, &ComposerConfig::default(), 42).unwrap();
        let seq = Matrix::from_rows(&[
            [0.5, -0.5, 0.5, 0.5],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (f, combine) = stack.forward(&seq).unwrap();
        assert_eq!(combine.len(), 1);
        assert_eq!(combine[0].shape(), (5, 8));
        let golden = [
            0.532_716_524_275_167_7,
            -0.372_100_683_251_217_9,
            0.744_041_004_604_688_2,
            0.155_425_769_275_907_84,
        ];
        for (a, b) in f.iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{f:?}");
        }
    }

    #[test]
    fn block_layout_and_names() {
        let stack = ComposerStack::new(4, &ComposerConfig::default(), 0).unwrap();
        assert!(matches!(stack.blocks[0].mixer, Mixer::Dense(_)));
        assert!(matches!(stack.blocks[1].mixer, Mixer::Moe(_)));
        let mut names = Vec::new();
        stack.visit("composer", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"composer.block0.ffn.w1".to_string()));
        assert!(names.contains(&"composer.block1.moe.routing".to_string()));
        assert!(names.contains(&"composer.block1.moe.expert7.b2".to_string()));
        assert!(names.contains(&"composer.block1.attn.wo".to_string()));

        let dense = ComposerConfig {
            kind: ComposerKind::Dense,
            ..ComposerConfig::default()
        };
        let stack = ComposerStack::new(4, &dense, 0).unwrap();
        assert_eq!(stack.moe_layers().count(), 0);
    }

    #[test]
    fn allocation_counts_every_token() {
        let mut alloc = ExpertAllocation::new(1, 2, 3);
        let c = Matrix::filled(5, 1, 1.0);
        alloc.record(&c, 1, Pair::new(1, 2)).unwrap();
        alloc.record(&c, 1, Pair::new(0, 2)).unwrap();
        assert_eq!(alloc.usage(), vec![10]);
        assert_eq!(alloc.attr_counts[0], vec![5, 5]);
        assert_eq!(alloc.obj_counts[0], vec![0, 0, 10]);
        assert_eq!(alloc.usage_entropy(), 0.0);
        assert!((alloc.attr_entropy()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_router_spreads_tokens() {
        let n = 8;
        let dim = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut routing = gaussian(&mut rng, dim, n, 1.0);
        // equal-norm slot columns
        let t = routing.transpose().l2_normalize_rows();
        routing = t.transpose();
        let mut alloc = ExpertAllocation::new(n, 1, 1);
        for _ in 0..500 {
            let x = gaussian(&mut rng, 17, dim, 1.0);
            let c = combine_weights(&x, &routing).unwrap();
            alloc.record(&c, 1, Pair::new(0, 0)).unwrap();
        }
        assert!((alloc.usage_entropy() - (n as f64).ln()).abs() < 0.05);
    }
}
