//! Finite-difference checks of every training loss on a small random model.

use crate::data::{generate, GeneratorSpec, Sample};
use crate::error::{bail, Result};
use crate::losses::{total_loss, LossVars};
use crate::model::{is_trainable, HopeModel, ModelConfig, Objective, Stage};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Tape, Var};
use crate::params::Binder;
use crate::softmoe::ComposerConfig;

/// Loss terms covered by [`loss_grad_checks`].
pub const CHECKED_LOSSES: [&str; 6] = ["spm", "retrieval", "info_nce", "st_obj", "dfm", "total"];

/// Shape of the random instance.
#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub dim: usize,
    pub slots: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradCheckInstance {
    fn default() -> Self {
        Self {
            n_attrs: 4,
            n_objs: 5,
            dim: 16,
            slots: 4,
            batch: 3,
            seed: 0,
        }
    }
}

fn pick(parts: &LossVars, name: &str, tape: &mut Tape, obj: &Objective) -> Result<Var> {
    let v = match name {
        "spm" => parts.spm,
        "retrieval" => parts.retrieval,
        "info_nce" => parts.info_nce,
        "st_obj" => parts.st_obj,
        "dfm" => parts.dfm,
        "total" => Some(total_loss(tape, parts, &obj.weights)?),
        other => bail!(Config, "unknown loss {other:?}"),
    };
    match v {
        Some(v) => Ok(v),
        None => bail!(Contract, "loss {name} was not built for the check batch"),
    }
}

/// Parameters a loss can reach; the others would only add zero-gradient work.
fn relevant(loss: &str, name: &str) -> bool {
    match loss {
        "spm" => name == "prompt.context" || name == "logit_scale",
        "retrieval" | "info_nce" => name.starts_with("memory."),
        _ => true,
    }
}

/// Runs a gradient check of each loss in `losses` against the trainable
/// parameters of the joint stage.
pub fn loss_grad_checks(
    inst: &GradCheckInstance,
    losses: &[&str],
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheckReport>> {
    let ds = generate(&GeneratorSpec {
        n_attrs: inst.n_attrs,
        n_objs: inst.n_objs,
        dim: inst.dim,
        samples_per_composition: 2,
        test_samples_per_composition: 1,
        seen_fraction: 0.6,
        seed: inst.seed,
        ..GeneratorSpec::default()
    })?;
    let cfg = ModelConfig {
        slots: inst.slots,
        k_shots: 2,
        composer: ComposerConfig {
            n_experts: 4,
            ..ComposerConfig::default()
        },
        // larger than the training default so the retrieval is not uniform
        projection_init_scale: 0.5,
        ..ModelConfig::default()
    };
    let model = HopeModel::init(&ds, &cfg, inst.seed)?;
    let batch: Vec<&Sample> = ds.train.iter().step_by(ds.train.len() / inst.batch.max(1)).take(inst.batch).collect();
    let obj = Objective::default();

    let mut reports = Vec::new();
    for &loss in losses {
        let params: Vec<(String, crate::numerics::Matrix)> = model
            .named_parameters()
            .into_iter()
            .filter(|(n, _)| is_trainable(n, Stage::Joint, true) && relevant(loss, n))
            .collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let report = grad_check(
            loss,
            |tape, vars| {
                let preset: Vec<(String, Var)> = names.iter().cloned().zip(vars.iter().copied()).collect();
                let never = |_: &str| false;
                let mut binder = Binder::new(tape, &never).with_leaves(&preset);
                let mv = model.bind(&mut binder);
                let parts = model.batch_losses(tape, &mv, &batch, Stage::Joint, &obj)?;
                pick(&parts, loss, tape, &obj)
            },
            &params,
            opts,
        )?;
        reports.push(report);
    }
    Ok(reports)
}
