//! Vocabulary, labelled embedding samples, and the providers that produce them.
//!
//! Embeddings stand in for a frozen image encoder: they are either drawn by the
//! seeded [`generate`] routine or read from disk with [`load`].

mod generator;
mod io;
mod text;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use generator::{generate, GeneratorSpec};
pub use io::{load, save, EMBEDDING_FILE, EMBEDDING_MAGIC, MANIFEST_FILE};
pub use text::{encode_on_tape, project_pooled, TextEncoderStub};

/// An (attribute, object) composition label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Pair {
    pub attr: usize,
    pub obj: usize,
}

impl Pair {
    pub fn new(attr: usize, obj: usize) -> Self {
        Self { attr, obj }
    }
}

impl From<(usize, usize)> for Pair {
    fn from((attr, obj): (usize, usize)) -> Self {
        Self { attr, obj }
    }
}

impl From<Pair> for (usize, usize) {
    fn from(p: Pair) -> Self {
        (p.attr, p.obj)
    }
}

/// Primitive vocabularies and the seen / closed-world unseen split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    pub seen_pairs: Vec<Pair>,
    pub unseen_closed: Vec<Pair>,
    pub dim: usize,
}

impl VocabSpec {
    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    pub fn pair_name(&self, p: Pair) -> String {
        let a = self.attributes.get(p.attr).map_or("?", String::as_str);
        let o = self.objects.get(p.obj).map_or("?", String::as_str);
        format!("({a}, {o})")
    }

    /// Every pair of `A x O`, attribute-major.
    pub fn all_pairs(&self) -> Vec<Pair> {
        (0..self.n_attrs())
            .flat_map(|a| (0..self.n_objs()).map(move |o| Pair::new(a, o)))
            .collect()
    }

    pub fn seen_index(&self, p: Pair) -> Option<usize> {
        self.seen_pairs.iter().position(|&q| q == p)
    }

    pub fn is_seen(&self, p: Pair) -> bool {
        self.seen_pairs.contains(&p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attrs() < 2 || self.n_objs() < 2 {
            bail!(
                Validation,
                "need at least 2 attributes and 2 objects, got {} and {}",
                self.n_attrs(),
                self.n_objs()
            );
        }
        if self.dim == 0 {
            bail!(Validation, "embedding dimension must be positive");
        }
        let check = |p: &Pair, set: &str| -> Result<()> {
            if p.attr >= self.n_attrs() || p.obj >= self.n_objs() {
                bail!(
                    Validation,
                    "{set} pair ({}, {}) out of range",
                    p.attr,
                    p.obj
                );
            }
            Ok(())
        };
        let mut seen = HashSet::new();
        for p in &self.seen_pairs {
            check(p, "seen")?;
            if !seen.insert(*p) {
                bail!(Validation, "duplicate seen pair {}", self.pair_name(*p));
            }
        }
        let mut unseen = HashSet::new();
        for p in &self.unseen_closed {
            check(p, "unseen")?;
            if seen.contains(p) {
                bail!(
                    Validation,
                    "pair {} is both seen and unseen",
                    self.pair_name(*p)
                );
            }
            if !unseen.insert(*p) {
                bail!(Validation, "duplicate unseen pair {}", self.pair_name(*p));
            }
        }
        if self.seen_pairs.is_empty() {
            bail!(Validation, "no seen compositions");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub embedding: Vec<f64>,
    pub label: Pair,
}

/// Partition of primitive ids into groups of near-synonyms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynonymGroups {
    pub attributes: Vec<Vec<usize>>,
    pub objects: Vec<Vec<usize>>,
}

impl SynonymGroups {
    fn group_of(groups: &[Vec<usize>], id: usize) -> Option<&[usize]> {
        groups.iter().find(|g| g.contains(&id)).map(Vec::as_slice)
    }

    pub fn attr_synonyms(&self, attr: usize) -> Option<&[usize]> {
        Self::group_of(&self.attributes, attr)
    }

    pub fn obj_synonyms(&self, obj: usize) -> Option<&[usize]> {
        Self::group_of(&self.objects, obj)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionDataset {
    pub vocab: VocabSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub synonym_groups: Option<SynonymGroups>,
}

impl CompositionDataset {
    pub fn dim(&self) -> usize {
        self.vocab.dim
    }

    /// Train samples grouped by seen-composition index.
    pub fn train_by_composition(&self) -> Vec<Vec<&Sample>> {
        let mut groups = vec![Vec::new(); self.vocab.seen_pairs.len()];
        for s in &self.train {
            if let Some(i) = self.vocab.seen_index(s.label) {
                groups[i].push(s);
            }
        }
        groups
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let dim = self.vocab.dim;
        let unseen: HashSet<Pair> = self.vocab.unseen_closed.iter().copied().collect();
        for (i, s) in self.train.iter().enumerate() {
            self.check_sample(i, "train", s, dim)?;
            if !self.vocab.is_seen(s.label) {
                bail!(
                    Validation,
                    "train sample {i} is labelled with non-seen pair {}",
                    self.vocab.pair_name(s.label)
                );
            }
        }
        let (mut n_seen, mut n_unseen) = (0, 0);
        for (i, s) in self.test.iter().enumerate() {
            self.check_sample(i, "test", s, dim)?;
            if self.vocab.is_seen(s.label) {
                n_seen += 1;
            } else if unseen.contains(&s.label) {
                n_unseen += 1;
            } else {
                bail!(
                    Validation,
                    "test sample {i} label {} is neither seen nor closed-world unseen",
                    self.vocab.pair_name(s.label)
                );
            }
        }
        if n_seen == 0 || n_unseen == 0 {
            bail!(
                Validation,
                "test split needs seen and unseen samples, got {n_seen} seen and {n_unseen} unseen"
            );
        }
        if let Some(groups) = &self.synonym_groups {
            for g in &groups.attributes {
                if g.iter().any(|&a| a >= self.vocab.n_attrs()) {
                    bail!(Validation, "synonym group references unknown attribute");
                }
            }
            for g in &groups.objects {
                if g.iter().any(|&o| o >= self.vocab.n_objs()) {
                    bail!(Validation, "synonym group references unknown object");
                }
            }
        }
        Ok(())
    }

    fn check_sample(&self, i: usize, split: &str, s: &Sample, dim: usize) -> Result<()> {
        if s.embedding.len() != dim {
            bail!(
                Validation,
                "{split} sample {i} has dimension {}, expected {dim}",
                s.embedding.len()
            );
        }
        if !s.embedding.iter().all(|v| v.is_finite()) {
            bail!(Validation, "{split} sample {i} has a non-finite embedding");
        }
        if s.label.attr >= self.vocab.n_attrs() || s.label.obj >= self.vocab.n_objs() {
            bail!(
                Validation,
                "{split} sample {i} label ({}, {}) out of range",
                s.label.attr,
                s.label.obj
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabSpec {
        VocabSpec {
            attributes: vec!["red".into(), "old".into()],
            objects: vec!["car".into(), "tomato".into()],
            seen_pairs: vec![Pair::new(0, 0), Pair::new(1, 1)],
            unseen_closed: vec![Pair::new(0, 1)],
            dim: 4,
        }
    }

    #[test]
    fn overlapping_split_names_the_pair() {
        let mut v = vocab();
        v.unseen_closed.push(Pair::new(1, 1));
        let err = v.validate().unwrap_err().to_string();
        assert!(err.contains("(old, tomato)"), "{err}");
    }

    #[test]
    fn out_of_range_pair_rejected() {
        let mut v = vocab();
        v.seen_pairs.push(Pair::new(5, 0));
        assert!(v.validate().is_err());
    }

    #[test]
    fn train_label_must_be_seen() {
        let ds = CompositionDataset {
            vocab: vocab(),
            train: vec![Sample {
                embedding: vec![0.0; 4],
                label: Pair::new(0, 1),
            }],
            test: vec![],
            synonym_groups: None,
        };
        let err = ds.validate().unwrap_err().to_string();
        assert!(err.contains("train sample 0"), "{err}");
    }

    #[test]
    fn pair_serializes_as_tuple() {
        let json = serde_json::to_string(&Pair::new(2, 3)).unwrap();
        assert_eq!(json, "[2,3]");
    }
}
