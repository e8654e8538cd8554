use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CompositionDataset, Pair, Sample, SynonymGroups, VocabSpec};
use crate::error::{bail, Result};
use crate::numerics::{dot, Matrix};

/// Cosine similarity above which two primitives are grouped as synonyms.
pub const SYNONYM_THRESHOLD: f64 = 0.8;

/// Parameters of the synthetic compositional embedding generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub dim: usize,
    /// Train samples drawn for every seen composition.
    pub samples_per_composition: usize,
    /// Test samples drawn for every seen and closed-world unseen composition.
    pub test_samples_per_composition: usize,
    pub seen_fraction: f64,
    /// Share of the unseen compositions admitted to the closed-world test set.
    pub closed_unseen_fraction: f64,
    /// Noise standard deviation; the noise vector has expected norm `noise`.
    pub noise: f64,
    pub attr_scale: f64,
    pub obj_scale: f64,
    /// Weight of the attribute-object interaction block.
    pub interaction_scale: f64,
    /// When nonzero, primitive latents are drawn around this many shared centres.
    pub latent_clusters: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_attrs: 8,
            n_objs: 10,
            dim: 32,
            samples_per_composition: 20,
            test_samples_per_composition: 20,
            seen_fraction: 0.6,
            closed_unseen_fraction: 0.5,
            noise: 0.1,
            attr_scale: 1.0,
            obj_scale: 1.0,
            interaction_scale: 0.3,
            latent_clusters: 0,
            cluster_spread: 0.4,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_attrs < 2 || self.n_objs < 2 {
            bail!(Config, "need at least 2 attributes and 2 objects");
        }
        if self.dim < 4 {
            bail!(Config, "embedding dimension must be at least 4, got {}", self.dim);
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            bail!(Config, "seen fraction must lie in (0, 1), got {}", self.seen_fraction);
        }
        if !(self.closed_unseen_fraction > 0.0 && self.closed_unseen_fraction <= 1.0) {
            bail!(
                Config,
                "closed-world unseen fraction must lie in (0, 1], got {}",
                self.closed_unseen_fraction
            );
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            bail!(Config, "noise must be a finite value >= 0, got {}", self.noise);
        }
        if self.samples_per_composition == 0 || self.test_samples_per_composition == 0 {
            bail!(Config, "sample counts must be positive");
        }
        Ok(())
    }

    /// Number of seen compositions implied by the seen fraction.
    pub fn seen_count(&self) -> usize {
        let total = (self.n_attrs * self.n_objs) as f64;
        (self.seen_fraction * total).round() as usize
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn draw_latents(rng: &mut ChaCha8Rng, count: usize, spec: &GeneratorSpec) -> Vec<Vec<f64>> {
    let d = spec.dim;
    if spec.latent_clusters == 0 {
        return (0..count)
            .map(|_| {
                let mut v = gaussian(rng, d);
                normalize(&mut v);
                v
            })
            .collect();
    }
    let centres: Vec<Vec<f64>> = (0..spec.latent_clusters)
        .map(|_| {
            let mut v = gaussian(rng, d);
            normalize(&mut v);
            v
        })
        .collect();
    let jitter = spec.cluster_spread / (d as f64).sqrt();
    (0..count)
        .map(|i| {
            let centre = &centres[i % centres.len()];
            let mut v: Vec<f64> = centre
                .iter()
                .zip(gaussian(rng, d))
                .map(|(c, z)| c + jitter * z)
                .collect();
            normalize(&mut v);
            v
        })
        .collect()
}

/// Single-linkage grouping of unit latents at the synonym threshold.
fn synonym_groups(latents: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = latents.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if dot(&latents[i], &latents[j]) >= SYNONYM_THRESHOLD {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_slot[r]].push(i);
    }
    groups
}

/// Picks the seen pairs: a covering set so every primitive occurs at least once,
/// topped up without replacement from the remaining pairs.
fn split_pairs(rng: &mut ChaCha8Rng, spec: &GeneratorSpec) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let (na, no) = (spec.n_attrs, spec.n_objs);
    let total = na * no;
    let n_seen = spec.seen_count();
    if n_seen < 2 || total - n_seen.min(total) < 2 {
        bail!(
            Config,
            "seen fraction {} gives {} seen and {} unseen pairs; need at least 2 of each",
            spec.seen_fraction,
            n_seen,
            total.saturating_sub(n_seen)
        );
    }
    let cover = na.max(no);
    if n_seen < cover {
        bail!(
            Config,
            "{n_seen} seen pairs cannot cover {na} attributes and {no} objects"
        );
    }
    let mut attrs: Vec<usize> = (0..na).collect();
    let mut objs: Vec<usize> = (0..no).collect();
    attrs.shuffle(rng);
    objs.shuffle(rng);
    let mut seen: Vec<Pair> = (0..cover)
        .map(|k| Pair::new(attrs[k % na], objs[k % no]))
        .collect();
    let mut rest: Vec<Pair> = (0..na)
        .flat_map(|a| (0..no).map(move |o| Pair::new(a, o)))
        .filter(|p| !seen.contains(p))
        .collect();
    rest.shuffle(rng);
    let extra = n_seen - cover;
    seen.extend(rest.drain(..extra));
    seen.sort();
    Ok((seen, rest))
}

/// Draws a synthetic compositional dataset.
///
/// Each embedding is `normalize(W_mix · [s_a·u_a ; s_o·u_o ; s_i·√D·(u_a ⊙ ρ(u_o))] + ε)`
/// where `u_a`, `u_o` are unit primitive latents, `ρ` is a fixed coordinate
/// permutation, `W_mix` is a fixed Gaussian map and `ε ~ N(0, σ²/D · I)`.
/// Values are rounded to `f32` so the dataset survives the binary format exactly.
pub fn generate(spec: &GeneratorSpec) -> Result<CompositionDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;

    let attr_latents = draw_latents(&mut rng, spec.n_attrs, spec);
    let obj_latents = draw_latents(&mut rng, spec.n_objs, spec);
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let mix_scale = 1.0 / (d as f64).sqrt();
    let mix = Matrix::from_vec(
        d,
        3 * d,
        gaussian(&mut rng, 3 * d * d)
            .into_iter()
            .map(|v| v * mix_scale)
            .collect(),
    )?;

    let (seen, mut unseen) = split_pairs(&mut rng, spec)?;
    let n_closed = ((spec.closed_unseen_fraction * unseen.len() as f64).round() as usize)
        .clamp(1, unseen.len());
    unseen.truncate(n_closed);
    unseen.sort();

    let inter_scale = spec.interaction_scale * (d as f64).sqrt();
    let prototype = |p: Pair| -> Vec<f64> {
        let (ua, uo) = (&attr_latents[p.attr], &obj_latents[p.obj]);
        let mut latent = Vec::with_capacity(3 * d);
        latent.extend(ua.iter().map(|v| v * spec.attr_scale));
        latent.extend(uo.iter().map(|v| v * spec.obj_scale));
        latent.extend((0..d).map(|i| inter_scale * ua[i] * uo[perm[i]]));
        (0..d).map(|r| dot(mix.row(r), &latent)).collect()
    };
    let noise_scale = spec.noise / (d as f64).sqrt();
    let draw = |p: Pair, rng: &mut ChaCha8Rng| -> Sample {
        let mut e = prototype(p);
        if spec.noise > 0.0 {
            for (x, z) in e.iter_mut().zip(gaussian(rng, d)) {
                *x += noise_scale * z;
            }
        }
        normalize(&mut e);
        Sample {
            embedding: e.into_iter().map(|v| v as f32 as f64).collect(),
            label: p,
        }
    };

    let mut train = Vec::with_capacity(seen.len() * spec.samples_per_composition);
    for &p in &seen {
        for _ in 0..spec.samples_per_composition {
            train.push(draw(p, &mut rng));
        }
    }
    let mut test = Vec::new();
    for &p in seen.iter().chain(&unseen) {
        for _ in 0..spec.test_samples_per_composition {
            test.push(draw(p, &mut rng));
        }
    }

    let vocab = VocabSpec {
        attributes: (0..spec.n_attrs).map(|i| format!("attr{i}")).collect(),
        objects: (0..spec.n_objs).map(|i| format!("obj{i}")).collect(),
        seen_pairs: seen,
        unseen_closed: unseen,
        dim: d,
    };
    let dataset = CompositionDataset {
        vocab,
        train,
        test,
        synonym_groups: Some(SynonymGroups {
            attributes: synonym_groups(&attr_latents),
            objects: synonym_groups(&obj_latents),
        }),
    };
    dataset.validate()?;
    Ok(dataset)
}
