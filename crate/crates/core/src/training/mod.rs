//! Staged optimization, run configuration, metrics logging and checkpoints.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CompositionDataset, Sample};
use crate::error::{bail, Result};
use crate::evaluation::{evaluate, World};
use crate::hopfield::TargetMode;
use crate::losses::{total_loss, LossParts, LossWeights};
use crate::model::{is_trainable, HopeModel, ModelConfig, Objective, Stage};
use crate::numerics::{AdamConfig, AdamState, Matrix, Tape};
use crate::params::{Binder, Parameters};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Parameters are rounded to single precision after every update.
    F32,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs of the prompt, memory and joint stages; 0 skips a stage.
    pub stage_epochs: [usize; 3],
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub target_mode: TargetMode,
    pub use_retrieval_loss: bool,
    pub use_infonce: bool,
    /// Keep the visual memories trainable in the joint stage.
    pub stage3_train_memory: bool,
    /// Caps train samples per seen composition (data-fraction ablations).
    pub max_train_per_composition: Option<usize>,
    /// Closed-world validation after every epoch.
    pub eval_each_epoch: bool,
    /// Dataset directory the run was trained on.
    pub data: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage_epochs: [2, 2, 6],
            weights: LossWeights::default(),
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            batch_size: 64,
            seed: 0,
            precision: Precision::F64,
            model: ModelConfig::default(),
            target_mode: TargetMode::Spread,
            use_retrieval_loss: true,
            use_infonce: true,
            stage3_train_memory: true,
            max_train_per_composition: None,
            eval_each_epoch: true,
            data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_epochs.iter().sum::<usize>() == 0 {
            bail!(Config, "at least one stage needs a positive epoch count");
        }
        self.weights.validate()?;
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            bail!(Config, "invalid Adam settings {a:?}");
        }
        if self.max_train_per_composition == Some(0) {
            bail!(Config, "max_train_per_composition must be at least 1");
        }
        self.model.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.weights,
            target_mode: self.target_mode,
            use_retrieval_loss: self.use_retrieval_loss,
            use_infonce: self.use_infonce,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| crate::HopeError::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Closed-world validation summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based over all stages.
    pub epoch: usize,
    pub stage: usize,
    pub parts: LossParts,
    pub total: f64,
    pub validation: Option<Validation>,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,stage");
    for n in LossParts::NAMES {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",total,val_seen,val_unseen,val_hm,val_auc\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.epoch, r.stage);
        for v in r.parts.values() {
            let _ = write!(out, ",{v}");
        }
        let _ = write!(out, ",{}", r.total);
        match r.validation {
            Some(v) => {
                let _ = writeln!(out, ",{},{},{},{}", v.seen, v.unseen, v.hm, v.auc);
            }
            None => out.push_str(",,,,\n"),
        }
    }
    out
}

/// Adam moments per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub states: BTreeMap<String, AdamState>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HopeModel,
    pub optimizer: OptimizerState,
    pub metrics: Vec<EpochMetrics>,
}

fn round_f32(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        *v = *v as f32 as f64;
    }
}

/// Train samples, capped per composition with a seeded draw.
fn training_pool<'a>(dataset: &'a CompositionDataset, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<&'a Sample> {
    let Some(cap) = cap else {
        return dataset.train.iter().collect();
    };
    let mut pool = Vec::new();
    for mut group in dataset.train_by_composition() {
        group.shuffle(rng);
        group.truncate(cap);
        pool.extend(group);
    }
    pool
}

/// Runs the configured stages and returns the trained model.
pub fn train(config: &TrainConfig, dataset: &CompositionDataset) -> Result<TrainOutcome> {
    train_with(config, dataset, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    dataset: &CompositionDataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let mut model = HopeModel::init(dataset, &config.model, config.seed)?;
    if config.precision == Precision::F32 {
        model.visit_mut("", &mut |_, m| round_f32(m));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_DA7A);
    let pool = training_pool(dataset, config.max_train_per_composition, &mut rng);
    let objective = config.objective();
    let mut optimizer = OptimizerState::default();
    let mut metrics = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0usize;

    for (stage, &epochs) in Stage::ALL.iter().zip(&config.stage_epochs) {
        let stage = *stage;
        let trainable = |name: &str| is_trainable(name, stage, config.stage3_train_memory);
        for _ in 0..epochs {
            epoch += 1;
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            let bs = if config.batch_size == 0 { pool.len() } else { config.batch_size };
            let mut sums = LossParts::default();
            let mut total_sum = 0.0;
            for chunk in order.chunks(bs) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| pool[i]).collect();
                let (parts, total) =
                    train_step(&mut model, &mut optimizer, config, &objective, &batch, stage, &trainable, step)?;
                let w = batch.len() as f64 / pool.len() as f64;
                sums.add_scaled(&parts, w);
                total_sum += w * total;
                step += 1;
            }
            let validation = if config.eval_each_epoch {
                let r = evaluate(&model, &dataset.test, World::Closed)?;
                Some(Validation {
                    seen: r.seen,
                    unseen: r.unseen,
                    hm: r.hm,
                    auc: r.auc,
                })
            } else {
                None
            };
            let m = EpochMetrics {
                epoch,
                stage: stage.number(),
                parts: sums,
                total: total_sum,
                validation,
            };
            on_epoch(&m);
            metrics.push(m);
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        metrics,
    })
}

/// One optimizer step on `batch`; returns the loss components before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut HopeModel,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    objective: &Objective,
    batch: &[&Sample],
    stage: Stage,
    trainable: &dyn Fn(&str) -> bool,
    step: usize,
) -> Result<(LossParts, f64)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, trainable);
    let vars = model.bind(&mut binder);
    let registry = binder.finish();
    let parts_vars = model.batch_losses(&mut tape, &vars, batch, stage, objective)?;
    let parts = parts_vars.values(&tape);
    parts.check_finite(step)?;
    let loss = total_loss(&mut tape, &parts_vars, &objective.weights)?;
    let total = tape.scalar_value(loss);
    if !total.is_finite() {
        bail!(Training, "total loss is {total} at step {step}");
    }
    let mut grads = tape.backward(loss)?;
    let mut by_name: BTreeMap<String, Matrix> = BTreeMap::new();
    for (name, var) in registry {
        if let Some(g) = grads.take(var) {
            if !g.is_finite() {
                bail!(Training, "gradient of {name} is not finite at step {step}");
            }
            by_name.insert(name, g);
        }
    }
    let mut result = Ok(());
    model.visit_mut("", &mut |name, param| {
        if result.is_err() {
            return;
        }
        let Some(g) = by_name.get(name) else { return };
        let state = optimizer
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::for_param(param, config.adam));
        result = state.step(param, g);
        if config.precision == Precision::F32 {
            round_f32(param);
        }
    });
    result?;
    Ok((parts, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorSpec};

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_json(r#"{"seed": 9, "model": {"k_shots": 1}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.model.k_shots, 1);
        assert_eq!(partial.model.slots, 8);
        assert!(TrainConfig::from_json(r#"{"sede": 9}"#).is_err());
    }

    #[test]
    fn defaults_follow_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.stage_epochs.iter().sum::<usize>(), 10);
        assert_eq!((cfg.weights.alpha, cfg.weights.beta, cfg.weights.gamma), (0.9, 0.8, 0.3));
        assert_eq!(cfg.model.composer.n_blocks, 2);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn invalid_schedule_rejected() {
        let cfg = TrainConfig {
            stage_epochs: [0, 0, 0],
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(crate::HopeError::Config(_))));
    }

    #[test]
    fn short_run_logs_every_epoch() {
        let ds = generate(&GeneratorSpec {
            n_attrs: 3,
            n_objs: 3,
            dim: 8,
            samples_per_composition: 3,
            test_samples_per_composition: 2,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            stage_epochs: [1, 1, 1],
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.metrics.len(), 3);
        assert_eq!(out.metrics.iter().map(|m| m.stage).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(out.metrics[2].parts.st_obj > 0.0);
        let csv = metrics_csv(&out.metrics);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("epoch,stage,st_obj,dfm,spm,retrieval,info_nce,total,"));
    }
}
