//! Calibrated seen/unseen metrics, memory probes and expert reports.

mod ablation;
mod sweep;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{CompositionDataset, Pair, Sample, VocabSpec};
use crate::error::{bail, Result};
use crate::model::HopeModel;
use crate::numerics::Matrix;
use crate::softmoe::ExpertAllocation;

pub use ablation::{ablation_csv, ablation_suite, merge_json, AblationRow, AblationVariant};
pub use sweep::{bias_sweep, curve_auc, harmonic_mean, CurvePoint, EvalReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    /// Seen plus the held-out unseen compositions.
    #[default]
    Closed,
    /// Every attribute-object pair.
    Open,
}

impl std::str::FromStr for World {
    type Err = crate::HopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            other => Err(crate::HopeError::Config(format!("unknown world {other:?}"))),
        }
    }
}

/// Candidate compositions for prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibleSet {
    pub world: World,
    pub pairs: Vec<Pair>,
    pub seen: Vec<bool>,
}

impl FeasibleSet {
    pub fn new(vocab: &VocabSpec, world: World) -> Self {
        let pairs: Vec<Pair> = match world {
            World::Closed => vocab
                .seen_pairs
                .iter()
                .chain(&vocab.unseen_closed)
                .copied()
                .collect(),
            World::Open => vocab.all_pairs(),
        };
        let seen = pairs.iter().map(|&p| vocab.is_seen(p)).collect();
        Self { world, pairs, seen }
    }

    pub fn index_of(&self, p: Pair) -> Option<usize> {
        self.pairs.iter().position(|&q| q == p)
    }
}

/// `F_v · f_tᵀ` for every embedding against every feasible composition.
pub fn score_compositions(model: &HopeModel, embeddings: &[&[f64]], feasible: &FeasibleSet) -> Result<Matrix> {
    let fused = model.fused_features(embeddings)?;
    let text = model.text_features(&feasible.pairs)?;
    fused.matmul_nt(&text.compositions)
}

/// Scores the test split and runs the calibration sweep.
pub fn evaluate(model: &HopeModel, test: &[Sample], world: World) -> Result<EvalReport> {
    let feasible = FeasibleSet::new(&model.vocab, world);
    let mut labels = Vec::with_capacity(test.len());
    for (i, s) in test.iter().enumerate() {
        match feasible.index_of(s.label) {
            Some(j) => labels.push(j),
            None => bail!(
                Contract,
                "test sample {i} label {} is not in the {:?} feasible set",
                model.vocab.pair_name(s.label),
                world
            ),
        }
    }
    let embeddings: Vec<&[f64]> = test.iter().map(|s| s.embedding.as_slice()).collect();
    let scores = score_compositions(model, &embeddings, &feasible)?;
    bias_sweep(&scores, &labels, &feasible.seen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalProbeReport {
    pub seen_rate: f64,
    pub unseen_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen_synonym_rate: Option<f64>,
    pub n_seen: usize,
    pub n_unseen: usize,
}

impl RetrievalProbeReport {
    pub fn to_csv(&self) -> String {
        let syn = self.unseen_synonym_rate.map_or(String::new(), |v| v.to_string());
        format!(
            "seen_rate,unseen_rate,unseen_synonym_rate,n_seen,n_unseen\n{},{},{syn},{},{}\n",
            self.seen_rate, self.unseen_rate, self.n_seen, self.n_unseen
        )
    }
}

/// Whether some attribute slot retrieved an acceptable attribute and some
/// object slot an acceptable object.
fn retrieval_hit(
    model: &HopeModel,
    winners: &[usize],
    attr_ok: &dyn Fn(usize) -> bool,
    obj_ok: &dyn Fn(usize) -> bool,
) -> bool {
    let half = model.memory.slots() / 2;
    let rows = &model.memory.row_class;
    let attr = winners[..half].iter().any(|&w| attr_ok(rows[w].attr));
    let obj = winners[half..].iter().any(|&w| obj_ok(rows[w].obj));
    attr && obj
}

/// Primitive retrieval rates of the memory on the test split.
pub fn retrieval_probe(model: &HopeModel, dataset: &CompositionDataset, use_synonyms: bool) -> Result<RetrievalProbeReport> {
    let groups = match (use_synonyms, &dataset.synonym_groups) {
        (true, None) => bail!(Config, "synonym probe requested but the dataset has no synonym groups"),
        (true, Some(g)) => Some(g),
        (false, _) => None,
    };
    let (mut seen_hits, mut n_seen) = (0usize, 0usize);
    let (mut unseen_hits, mut syn_hits, mut n_unseen) = (0usize, 0usize, 0usize);
    for s in &dataset.test {
        let r = model.retrieve(&s.embedding)?;
        let exact = retrieval_hit(model, &r.winners, &|a| a == s.label.attr, &|o| o == s.label.obj);
        if model.vocab.is_seen(s.label) {
            n_seen += 1;
            seen_hits += usize::from(exact);
        } else {
            n_unseen += 1;
            unseen_hits += usize::from(exact);
            if let Some(g) = groups {
                let attrs = g.attr_synonyms(s.label.attr);
                let objs = g.obj_synonyms(s.label.obj);
                let hit = retrieval_hit(
                    model,
                    &r.winners,
                    &|a| a == s.label.attr || attrs.is_some_and(|grp| grp.contains(&a)),
                    &|o| o == s.label.obj || objs.is_some_and(|grp| grp.contains(&o)),
                );
                syn_hits += usize::from(hit);
            }
        }
    }
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(RetrievalProbeReport {
        seen_rate: frac(seen_hits, n_seen),
        unseen_rate: frac(unseen_hits, n_unseen),
        unseen_synonym_rate: groups.map(|_| frac(syn_hits, n_unseen)),
        n_seen,
        n_unseen,
    })
}

/// Token-to-expert histogram of the first Soft-MoE layer over the test split.
pub fn expert_allocation(model: &HopeModel, test: &[Sample]) -> Result<ExpertAllocation> {
    let Some(layer) = model.composer.moe_layers().next() else {
        bail!(Config, "the composer has no Soft-MoE layer");
    };
    let mut alloc = ExpertAllocation::new(layer.n_experts(), model.vocab.n_attrs(), model.vocab.n_objs());
    for s in test {
        let combine = model.combine_weights(&s.embedding)?;
        alloc.record(&combine[0], layer.slots_per_expert, s.label)?;
    }
    Ok(alloc)
}

/// Expert histograms as CSV: one row per (expert, kind, primitive).
pub fn allocation_csv(alloc: &ExpertAllocation, vocab: &VocabSpec) -> String {
    let mut out = String::from("expert,kind,primitive,count\n");
    for e in 0..alloc.n_experts {
        for (a, c) in alloc.attr_counts[e].iter().enumerate() {
            let _ = writeln!(out, "{e},attribute,{},{c}", vocab.attributes[a]);
        }
        for (o, c) in alloc.obj_counts[e].iter().enumerate() {
            let _ = writeln!(out, "{e},object,{},{c}", vocab.objects[o]);
        }
    }
    out
}

/// Memory rows, raw test embeddings and fused test features as CSV.
pub fn export_embeddings(model: &HopeModel, dataset: &CompositionDataset) -> Result<String> {
    let d = model.dim();
    let mut out = String::from("source,index,attribute,object");
    for j in 0..d {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    let row = |out: &mut String, source: &str, i: usize, p: Pair, v: &[f64]| {
        let _ = write!(out, "{source},{i},{},{}", model.vocab.attributes[p.attr], model.vocab.objects[p.obj]);
        for x in v {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    };
    for (i, &p) in model.memory.row_class.iter().enumerate() {
        row(&mut out, "memory_attr", i, p, model.memory.visual_attr.row(i));
    }
    for (i, &p) in model.memory.row_class.iter().enumerate() {
        row(&mut out, "memory_obj", i, p, model.memory.visual_obj.row(i));
    }
    for (i, s) in dataset.test.iter().enumerate() {
        row(&mut out, "test", i, s.label, &s.embedding);
    }
    let embeddings: Vec<&[f64]> = dataset.test.iter().map(|s| s.embedding.as_slice()).collect();
    let fused = model.fused_features(&embeddings)?;
    for (i, s) in dataset.test.iter().enumerate() {
        row(&mut out, "fused", i, s.label, fused.row(i));
    }
    Ok(out)
}
