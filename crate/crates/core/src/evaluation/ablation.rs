use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{evaluate, retrieval_probe, World};
use crate::data::CompositionDataset;
use crate::error::Result;
use crate::training::{train, TrainConfig};

/// A named set of config overrides, merged into the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub overrides: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
    /// Memory probe on unseen test items; absent without a memory.
    pub probe_unseen: Option<f64>,
    pub probe_synonyms: Option<f64>,
}

/// Recursive object merge; non-object values in `patch` replace `base`.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

pub fn variant_config(base: &TrainConfig, variant: &AblationVariant, seed: u64) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(base)?;
    if !variant.overrides.is_null() {
        merge_json(&mut v, &variant.overrides);
    }
    let mut cfg: TrainConfig = serde_json::from_value(v)
        .map_err(|e| crate::HopeError::Config(format!("variant {}: {e}", variant.name)))?;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Trains every variant under every seed and evaluates it in the closed world.
pub fn ablation_suite(
    base: &TrainConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    dataset: &CompositionDataset,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in variants {
        for &seed in seeds {
            let mut cfg = variant_config(base, variant, seed)?;
            cfg.eval_each_epoch = false;
            let out = train(&cfg, dataset)?;
            let report = evaluate(&out.model, &dataset.test, World::Closed)?;
            let (probe_unseen, probe_synonyms) = if out.model.use_memory {
                let p = retrieval_probe(&out.model, dataset, dataset.synonym_groups.is_some())?;
                (Some(p.unseen_rate), p.unseen_synonym_rate)
            } else {
                (None, None)
            };
            rows.push(AblationRow {
                variant: variant.name.clone(),
                seed,
                seen: report.seen,
                unseen: report.unseen,
                hm: report.hm,
                auc: report.auc,
                probe_unseen,
                probe_synonyms,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from("variant,seed,seen,unseen,hm,auc,probe_unseen,probe_synonyms\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.seed,
            r.seen,
            r.unseen,
            r.hm,
            r.auc,
            opt(r.probe_unseen),
            opt(r.probe_synonyms)
        );
    }
    out
}
