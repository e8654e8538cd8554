//! Modern Hopfield retrieval over visual composition memories.
//!
//! The query projection turns an image embedding into `l` query rows. The first
//! `l/2` rows attend over the attribute-side visual memory, the rest over the
//! object-side memory. A single softmax update retrieves each pattern, and the
//! arg-max row of every score vector selects a frozen text prototype.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CompositionDataset, Pair, TextEncoderStub};
use crate::error::{bail, Result};
use crate::losses::SoftPrompt;
use crate::numerics::{Activation, Matrix, Tape, Var};
use crate::params::{frozen, join, Binder, Parameters};

/// Target used by the retrieval loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Any seen composition sharing the true primitive counts as a hit.
    #[default]
    Spread,
    /// Only the sample's own composition row counts.
    Single,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HopfieldMemory {
    /// `|C_tr| x D`, trainable.
    pub visual_attr: Matrix,
    /// `|C_tr| x D`, trainable.
    pub visual_obj: Matrix,
    /// `|A| x D`, frozen.
    pub text_attr: Matrix,
    /// `|O| x D`, frozen.
    pub text_obj: Matrix,
    /// `D x (l·D)` query projection.
    pub projection: Matrix,
    /// Seen composition stored in each visual memory row.
    pub row_class: Vec<Pair>,
    slots: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryVars {
    pub visual_attr: Var,
    pub visual_obj: Var,
    pub projection: Var,
}

/// Retrieval outcome on a tape.
#[derive(Clone, Debug)]
pub struct RetrievalNodes {
    /// `l x D` retrieved patterns.
    pub patterns: Var,
    /// `l x |C_tr|` softmax scores.
    pub scores: Var,
    /// `l x D` text prototypes of the arg-max compositions (constant).
    pub prototypes: Var,
    /// Arg-max memory row of each slot.
    pub winners: Vec<usize>,
}

/// Plain-value retrieval outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub patterns: Matrix,
    pub scores: Matrix,
    pub prototypes: Matrix,
    pub winners: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MemoryInit {
    pub k_shots: usize,
    pub slots: usize,
    pub projection_scale: f64,
    pub seed: u64,
}

impl HopfieldMemory {
    /// Assembles a memory from explicit parts.
    pub fn from_parts(
        visual_attr: Matrix,
        visual_obj: Matrix,
        text_attr: Matrix,
        text_obj: Matrix,
        projection: Matrix,
        row_class: Vec<Pair>,
        slots: usize,
    ) -> Result<Self> {
        if slots == 0 || slots % 2 != 0 {
            bail!(Config, "slot count must be even and positive, got {slots}");
        }
        let d = visual_attr.cols();
        let c = row_class.len();
        if visual_attr.shape() != (c, d) || visual_obj.shape() != (c, d) {
            bail!(
                Dimension,
                "visual memories must be {c}x{d}, got {:?} and {:?}",
                visual_attr.shape(),
                visual_obj.shape()
            );
        }
        if text_attr.cols() != d || text_obj.cols() != d {
            bail!(Dimension, "text memories must have {d} columns");
        }
        if projection.shape() != (d, slots * d) {
            bail!(
                Dimension,
                "projection must be {d}x{}, got {:?}",
                slots * d,
                projection.shape()
            );
        }
        for p in &row_class {
            if p.attr >= text_attr.rows() || p.obj >= text_obj.rows() {
                bail!(Dimension, "row class ({}, {}) outside text memories", p.attr, p.obj);
            }
        }
        Ok(Self {
            visual_attr,
            visual_obj,
            text_attr,
            text_obj,
            projection,
            row_class,
            slots,
        })
    }

    /// Builds visual prototypes from up to `k_shots` train embeddings per seen
    /// composition and text prototypes from the attribute and object prompts.
    pub fn init(
        dataset: &CompositionDataset,
        opts: &MemoryInit,
        encoder: &TextEncoderStub,
        prompt: &SoftPrompt,
    ) -> Result<Self> {
        if opts.k_shots == 0 {
            bail!(Config, "k_shots must be at least 1");
        }
        let d = dataset.dim();
        let vocab = &dataset.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let groups = dataset.train_by_composition();
        let mut visual = Matrix::zeros(vocab.seen_pairs.len(), d);
        for (c, members) in groups.iter().enumerate() {
            if members.is_empty() {
                bail!(
                    Init,
                    "seen composition {} has no train samples",
                    vocab.pair_name(vocab.seen_pairs[c])
                );
            }
            let k = opts.k_shots.min(members.len());
            let mut picks = sample(&mut rng, members.len(), k).into_vec();
            picks.sort_unstable();
            let row = visual.row_mut(c);
            for &i in &picks {
                for (r, x) in row.iter_mut().zip(&members[i].embedding) {
                    *r += x / k as f64;
                }
            }
        }

        let mut text_attr = Matrix::zeros(vocab.n_attrs(), d);
        for a in 0..vocab.n_attrs() {
            let e = encoder.encode(&prompt.attribute_prompt(a)?)?;
            text_attr.row_mut(a).copy_from_slice(&e);
        }
        let mut text_obj = Matrix::zeros(vocab.n_objs(), d);
        for o in 0..vocab.n_objs() {
            let e = encoder.encode(&prompt.object_prompt(o)?)?;
            text_obj.row_mut(o).copy_from_slice(&e);
        }

        let projection = Matrix::from_vec(
            d,
            opts.slots * d,
            (0..d * opts.slots * d)
                .map(|_| opts.projection_scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?;
        Self::from_parts(
            visual.clone(),
            visual,
            text_attr,
            text_obj,
            projection,
            vocab.seen_pairs.clone(),
            opts.slots,
        )
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn dim(&self) -> usize {
        self.visual_attr.cols()
    }

    pub fn n_rows(&self) -> usize {
        self.row_class.len()
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> MemoryVars {
        MemoryVars {
            visual_attr: b.bind(&join(prefix, "visual_attr"), &self.visual_attr),
            visual_obj: b.bind(&join(prefix, "visual_obj"), &self.visual_obj),
            projection: b.bind(&join(prefix, "projection"), &self.projection),
        }
    }

    /// `Z = reshape(f_v · W)` into `l` rows of width `D`.
    pub fn project_query_on_tape(&self, tape: &mut Tape, image: Var, vars: &MemoryVars) -> Result<Var> {
        let flat = tape.matmul(image, vars.projection)?;
        tape.reshape(flat, self.slots, self.dim())
    }

    pub fn project_query(&self, image: &[f64]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut Binder::new(&mut tape, &frozen), "");
        let f = tape.constant(Matrix::row_vector(image));
        let z = self.project_query_on_tape(&mut tape, f, &vars)?;
        Ok(tape.value(z).clone())
    }

    /// One softmax update per slot against the matching half of the memory.
    pub fn retrieve_on_tape(&self, tape: &mut Tape, queries: Var, vars: &MemoryVars) -> Result<RetrievalNodes> {
        let l = self.slots;
        if tape.value(queries).rows() != l {
            bail!(
                Dimension,
                "expected {l} query rows, got {}",
                tape.value(queries).rows()
            );
        }
        let half = l / 2;
        let attr_rows: Vec<usize> = (0..half).collect();
        let obj_rows: Vec<usize> = (half..l).collect();
        let za = tape.select_rows(queries, &attr_rows)?;
        let zo = tape.select_rows(queries, &obj_rows)?;
        let la = tape.matmul_nt(za, vars.visual_attr)?;
        let lo = tape.matmul_nt(zo, vars.visual_obj)?;
        let sa = tape.softmax_rows(la)?;
        let so = tape.softmax_rows(lo)?;
        let va = tape.matmul(sa, vars.visual_attr)?;
        let vo = tape.matmul(so, vars.visual_obj)?;
        let patterns = tape.concat_rows(&[va, vo])?;
        let scores = tape.concat_rows(&[sa, so])?;

        let winners = tape.value(scores).argmax_rows();
        let mut protos = Matrix::zeros(l, self.dim());
        for (i, &w) in winners.iter().enumerate() {
            let pair = self.row_class[w];
            let src = if i < half {
                self.text_attr.row(pair.attr)
            } else {
                self.text_obj.row(pair.obj)
            };
            protos.row_mut(i).copy_from_slice(src);
        }
        let prototypes = tape.constant(protos);
        Ok(RetrievalNodes {
            patterns,
            scores,
            prototypes,
            winners,
        })
    }

    pub fn retrieve(&self, queries: &Matrix) -> Result<RetrievalResult> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut Binder::new(&mut tape, &frozen), "");
        let z = tape.constant(queries.clone());
        let r = self.retrieve_on_tape(&mut tape, z, &vars)?;
        Ok(RetrievalResult {
            patterns: tape.value(r.patterns).clone(),
            scores: tape.value(r.scores).clone(),
            prototypes: tape.value(r.prototypes).clone(),
            winners: r.winners,
        })
    }

    /// Per-row hit mask for the retrieval target of `label`, one row per memory half.
    fn target_mask(&self, label: Pair, mode: TargetMode) -> Matrix {
        let c = self.n_rows();
        let mut mask = Matrix::zeros(2, c);
        for (j, p) in self.row_class.iter().enumerate() {
            let (hit_a, hit_o) = match mode {
                TargetMode::Spread => (p.attr == label.attr, p.obj == label.obj),
                TargetMode::Single => (*p == label, *p == label),
            };
            if hit_a {
                mask.set(0, j, 1.0);
            }
            if hit_o {
                mask.set(1, j, 1.0);
            }
        }
        mask
    }

    /// Cross-entropy of the slot-averaged scores against the target rows,
    /// weighted uniformly over the rows sharing the primitive. Summed over
    /// the attribute and object halves.
    pub fn retrieval_loss_on_tape(
        &self,
        tape: &mut Tape,
        scores: Var,
        label: Pair,
        mode: TargetMode,
    ) -> Result<Var> {
        if !self.row_class.contains(&label) {
            bail!(
                Contract,
                "retrieval loss label ({}, {}) is not a seen composition",
                label.attr,
                label.obj
            );
        }
        let l = self.slots;
        let half = l / 2;
        let mut avg = Matrix::zeros(2, l);
        for j in 0..l {
            avg.set(usize::from(j >= half), j, 1.0 / half as f64);
        }
        let avg = tape.constant(avg);
        let mass = tape.matmul(avg, scores)?;
        let mask = self.target_mask(label, mode);
        let (rows, cols) = mask.shape();
        let mut weights = Matrix::zeros(rows, cols);
        // rows outside the target get log(mass + 1) with weight 0, so an
        // underflowed score never turns into 0·(-inf)
        let mut pad = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let n: f64 = mask.row(r).iter().sum();
            for c in 0..cols {
                if mask.get(r, c) > 0.0 {
                    weights.set(r, c, 1.0 / n);
                } else {
                    pad.set(r, c, 1.0);
                }
            }
        }
        let pad = tape.constant(pad);
        let padded = tape.add(mass, pad)?;
        let logs = tape.map(padded, Activation::Log);
        let weights = tape.constant(weights);
        let weighted = tape.mul(logs, weights)?;
        let total = tape.sum(weighted);
        Ok(tape.scale(total, -1.0))
    }

    pub fn retrieval_loss(&self, scores: &Matrix, label: Pair, mode: TargetMode) -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.constant(scores.clone());
        let l = self.retrieval_loss_on_tape(&mut tape, s, label, mode)?;
        Ok(tape.scalar_value(l))
    }

    /// Slots whose arg-max composition shares the sample's primitive for that half.
    pub fn positive_slots(&self, winners: &[usize], label: Pair) -> Vec<usize> {
        let half = self.slots / 2;
        winners
            .iter()
            .enumerate()
            .filter(|&(i, &w)| {
                let p = self.row_class[w];
                if i < half {
                    p.attr == label.attr
                } else {
                    p.obj == label.obj
                }
            })
            .map(|(i, _)| i)
            .collect()
    }
}

impl Parameters for HopfieldMemory {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "visual_attr"), &self.visual_attr);
        f(&join(prefix, "visual_obj"), &self.visual_obj);
        f(&join(prefix, "text_attr"), &self.text_attr);
        f(&join(prefix, "text_obj"), &self.text_obj);
        f(&join(prefix, "projection"), &self.projection);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "visual_attr"), &mut self.visual_attr);
        f(&join(prefix, "visual_obj"), &mut self.visual_obj);
        f(&join(prefix, "text_attr"), &mut self.text_attr);
        f(&join(prefix, "text_obj"), &mut self.text_obj);
        f(&join(prefix, "projection"), &mut self.projection);
    }
}

/// InfoNCE of the image embedding against the retrieved patterns:
/// `Σ_{p∈P} -log softmax(f_v·V / τ)_p`, zero when `positives` is empty.
pub fn info_nce_on_tape(
    tape: &mut Tape,
    image: Var,
    patterns: Var,
    positives: &[usize],
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        bail!(Config, "temperature must be positive, got {temperature}");
    }
    let l = tape.value(patterns).rows();
    if l < 2 {
        bail!(Contract, "InfoNCE needs at least 2 retrieved patterns, got {l}");
    }
    if positives.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let raw = tape.matmul_nt(image, patterns)?;
    let sims = tape.scale(raw, 1.0 / temperature);
    let lse = tape.log_sum_exp_rows(sims)?;
    let lse_total = tape.scale(lse, positives.len() as f64);
    let mut indicator = Matrix::zeros(l, 1);
    for &p in positives {
        if p >= l {
            bail!(Contract, "positive slot {p} out of range for {l} slots");
        }
        indicator.set(p, 0, 1.0);
    }
    let ind = tape.constant(indicator);
    let picked = tape.matmul(sims, ind)?;
    let out = tape.sub(lse_total, picked)?;
    Ok(tape.sum(out))
}

pub fn info_nce(image: &[f64], patterns: &Matrix, positives: &[usize], temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(Matrix::row_vector(image));
    let v = tape.constant(patterns.clone());
    let l = info_nce_on_tape(&mut tape, f, v, positives, temperature)?;
    Ok(tape.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn memory(rows: &[[f64; 2]], classes: Vec<Pair>, slots: usize) -> HopfieldMemory {
        let m = Matrix::from_rows(rows).unwrap();
        let n_attr = classes.iter().map(|p| p.attr).max().unwrap() + 1;
        let n_obj = classes.iter().map(|p| p.obj).max().unwrap() + 1;
        HopfieldMemory::from_parts(
            m.clone(),
            m,
            Matrix::zeros(n_attr, 2),
            Matrix::zeros(n_obj, 2),
            Matrix::zeros(2, 2 * slots),
            classes,
            slots,
        )
        .unwrap()
    }

    #[test]
    fn zero_projection_gives_zero_queries() {
        let mem = memory(&[[1.0, 0.0]], vec![Pair::new(0, 0)], 2);
        let z = mem.project_query(&[0.3, -0.7]).unwrap();
        assert_eq!(z, Matrix::zeros(2, 2));
    }

    #[test]
    fn stacked_identity_projection_copies_query() {
        let mut mem = memory(&[[1.0, 0.0]], vec![Pair::new(0, 0)], 2);
        mem.projection = Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]]).unwrap();
        let z = mem.project_query(&[0.3, -0.7]).unwrap();
        assert_eq!(z, Matrix::from_rows(&[[0.3, -0.7], [0.3, -0.7]]).unwrap());
    }

    #[test]
    fn single_row_memory_returns_that_row() {
        let mem = memory(&[[0.6, 0.8]], vec![Pair::new(0, 0)], 2);
        let r = mem.retrieve(&Matrix::from_rows(&[[5.0, -1.0], [0.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(r.scores.as_slice(), &[1.0, 1.0]);
        assert_eq!(r.patterns.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn two_row_softmax_retrieval() {
        let mem = memory(&[[1.0, 0.0], [0.0, 1.0]], vec![Pair::new(0, 0), Pair::new(1, 1)], 2);
        let r = mem.retrieve(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()).unwrap();
        let e = std::f64::consts::E;
        let p = e / (e + 1.0);
        assert!((r.scores.get(0, 0) - p).abs() < 1e-15);
        assert!((r.scores.get(0, 1) - (1.0 - p)).abs() < 1e-15);
        assert!((r.patterns.get(0, 0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((r.patterns.get(0, 1) - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(r.winners, vec![0, 0]);
    }

    #[test]
    fn saturated_query_retrieves_its_row() {
        let mem = memory(&[[1.0, 0.0], [0.0, 1.0]], vec![Pair::new(0, 0), Pair::new(1, 1)], 2);
        let r = mem.retrieve(&Matrix::from_rows(&[[0.0, 50.0], [50.0, 0.0]]).unwrap()).unwrap();
        let v = r.patterns.row(0);
        let cos = v[1] / (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(cos > 0.99);
    }

    fn four_class_memory() -> HopfieldMemory {
        let classes = vec![Pair::new(0, 0), Pair::new(1, 1), Pair::new(2, 2), Pair::new(3, 3)];
        let rows = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        memory(&rows, classes, 2)
    }

    #[test]
    fn retrieval_loss_uniform_scores() {
        let mem = four_class_memory();
        let s = Matrix::filled(2, 4, 0.25);
        let l = mem.retrieval_loss(&s, Pair::new(1, 1), TargetMode::Spread).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 2.772_588_722_239_781).abs() < 1e-12);
    }

    #[test]
    fn retrieval_loss_zero_when_mass_on_target() {
        let mem = four_class_memory();
        let s = Matrix::from_rows(&[[0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let l = mem.retrieval_loss(&s, Pair::new(1, 1), TargetMode::Spread).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn retrieval_loss_rejects_unseen_label() {
        let mem = four_class_memory();
        let s = Matrix::filled(2, 4, 0.25);
        assert!(matches!(
            mem.retrieval_loss(&s, Pair::new(0, 1), TargetMode::Spread),
            Err(crate::HopeError::Contract(_))
        ));
    }

    #[test]
    fn spread_target_counts_all_rows_with_the_primitive() {
        let classes = vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)];
        let rows = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let mem = memory(&rows, classes, 2);
        // attribute target (0,0),(0,1) at 1/2 each; object target (0,0),(1,0)
        let s = Matrix::from_rows(&[[0.8, 0.2, 0.0], [0.5, 0.0, 0.5]]).unwrap();
        let spread = mem.retrieval_loss(&s, Pair::new(0, 0), TargetMode::Spread).unwrap();
        // ½(ln 1.25 + ln 5) + ln 2 = ln 5
        assert!((spread - 1.609_437_912_434_100_3).abs() < 1e-12);
        let single = mem.retrieval_loss(&s, Pair::new(0, 0), TargetMode::Single).unwrap();
        assert!((single - 0.916_290_731_874_155_1).abs() < 1e-12);
    }

    #[test]
    fn info_nce_examples() {
        let v = Matrix::filled(4, 2, 0.5);
        let l = info_nce(&[1.0, 0.0], &v, &[2], 0.07).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let v = Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]).unwrap();
        let l = info_nce(&[1.0, 0.0], &v, &[0], 1.0).unwrap();
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.126_928_011_042_972_6).abs() < 1e-12);

        let v = Matrix::from_rows(&[[40.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(info_nce(&[1.0, 0.0], &v, &[0], 1.0).unwrap() < 1e-15);
        assert_eq!(info_nce(&[1.0, 0.0], &v, &[], 1.0).unwrap(), 0.0);
        assert!(matches!(
            info_nce(&[1.0, 0.0], &v, &[0], 0.0),
            Err(crate::HopeError::Config(_))
        ));
    }

    #[test]
    fn positive_slots_follow_primitive_match() {
        let classes = vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)];
        let rows = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let mem = memory(&rows, classes, 4);
        // slots 0,1 are attribute slots; 2,3 object slots
        let pos = mem.positive_slots(&[1, 2, 2, 1], Pair::new(0, 1));
        assert_eq!(pos, vec![0, 3]);
    }
}
