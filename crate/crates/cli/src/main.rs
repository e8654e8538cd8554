use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hope_core::data::{self, generate, CompositionDataset, GeneratorSpec};
use hope_core::diagnostics::{loss_grad_checks, GradCheckInstance, CHECKED_LOSSES};
use hope_core::evaluation::{
    ablation_csv, ablation_suite, allocation_csv, evaluate, export_embeddings, expert_allocation, merge_json,
    retrieval_probe, AblationVariant, World,
};
use hope_core::numerics::GradCheckOptions;
use hope_core::training::{load_checkpoint, metrics_csv, save_checkpoint, train_with, Checkpoint, Precision, TrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hope", version, about = "Hopfield-memory compositional zero-shot recognition on embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(Train),
    /// Closed- or open-world evaluation of a checkpoint.
    Eval(Eval),
    /// Finite-difference check of every loss on a random toy model.
    GradCheck(GradCheck),
    /// Primitive retrieval rates of the memory on the test split.
    ProbeRetrieval(Probe),
    /// Token-to-expert histograms of the first Soft-MoE layer.
    ReportExperts(CkptOutput),
    /// Train and evaluate config variants over shared seeds.
    Ablate(Ablate),
    /// Dump memory rows, test embeddings and fused features as CSV.
    ExportEmbeddings(CkptOutput),
}

#[derive(Args)]
struct GenData {
    /// Number of attributes [default: 8].
    #[arg(long)]
    attrs: Option<usize>,
    /// Number of objects [default: 10].
    #[arg(long)]
    objects: Option<usize>,
    /// Embedding dimension [default: 32].
    #[arg(long)]
    dim: Option<usize>,
    /// Fraction of attribute-object pairs that are seen [default: 0.6].
    #[arg(long)]
    seen: Option<f64>,
    /// Train samples per seen composition [default: 20].
    #[arg(long)]
    samples: Option<usize>,
    /// Test samples per seen and closed-world unseen composition [default: 20].
    #[arg(long)]
    test_samples: Option<usize>,
    /// Noise standard deviation [default: 0.1].
    #[arg(long)]
    noise: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with generator settings; flags given here win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt, metrics.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags given here win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs of the prompt, memory and joint stages, e.g. 2,2,6.
    #[arg(long, value_parser = parse_epochs)]
    epochs: Option<[usize; 3]>,
    #[arg(long)]
    lr: Option<f64>,
    /// 0 means full batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// f64 or f32.
    #[arg(long)]
    precision: Option<String>,
    /// Skip per-epoch validation.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = WorldArg::Closed)]
    world: WorldArg,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Config to compare against the checkpoint's; a mismatch only warns.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorldArg {
    /// Seen plus held-out unseen compositions.
    Closed,
    /// Every attribute-object pair.
    Open,
}

impl WorldArg {
    fn name(self) -> &'static str {
        match self {
            WorldArg::Closed => "closed",
            WorldArg::Open => "open",
        }
    }

    fn world(self) -> World {
        match self {
            WorldArg::Closed => World::Closed,
            WorldArg::Open => World::Open,
        }
    }
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check at most this many random entries per parameter block.
    #[arg(long)]
    max_entries: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct Probe {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also count retrievals of synonym primitives as hits.
    #[arg(long)]
    synonyms: bool,
    /// Output CSV; the JSON report goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CkptOutput {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    /// JSON list of {"name", "overrides"}; defaults to the standard suite.
    #[arg(long)]
    variants: Option<PathBuf>,
    /// Base training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

type CliResult<T> = Result<T, String>;

fn parse_epochs(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected 3 comma-separated epoch counts, got {}", v.len()))
}

fn ctx<T>(r: hope_core::Result<T>, what: &Path) -> CliResult<T> {
    r.map_err(|e| format!("{}: {e}", what.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: io error: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("{}: io error: {e}", dir.display()))?;
    }
    fs::write(path, text).map_err(|e| format!("{}: io error: {e}", path.display()))
}

fn load_data(dir: &Path) -> CliResult<CompositionDataset> {
    ctx(data::load(dir), dir)
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    ctx(load_checkpoint(path), path)
}

/// Dataset from `--data`, else the directory recorded at training time.
fn dataset_for(ckpt: &Checkpoint, data: Option<&Path>) -> CliResult<CompositionDataset> {
    match (data, &ckpt.config.data) {
        (Some(d), _) => load_data(d),
        (None, Some(d)) => load_data(Path::new(d)),
        (None, None) => Err("config error: checkpoint records no dataset; pass --data".into()),
    }
}

fn gen_data(a: GenData) -> CliResult<()> {
    let mut spec = json!({});
    if let Some(p) = &a.config {
        spec = serde_json::from_str(&read_text(p)?).map_err(|e| format!("{}: config error: {e}", p.display()))?;
    }
    let flags = [
        ("n_attrs", a.attrs.map(|v| json!(v))),
        ("n_objs", a.objects.map(|v| json!(v))),
        ("dim", a.dim.map(|v| json!(v))),
        ("seen_fraction", a.seen.map(|v| json!(v))),
        ("samples_per_composition", a.samples.map(|v| json!(v))),
        ("test_samples_per_composition", a.test_samples.map(|v| json!(v))),
        ("noise", a.noise.map(|v| json!(v))),
        ("seed", a.seed.map(|v| json!(v))),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            merge_json(&mut spec, &json!({ key: v }));
        }
    }
    let mut full = serde_json::to_value(GeneratorSpec::default()).map_err(|e| e.to_string())?;
    merge_json(&mut full, &spec);
    let spec: GeneratorSpec = serde_json::from_value(full).map_err(|e| format!("config error: {e}"))?;
    let ds = generate(&spec).map_err(|e| e.to_string())?;
    ctx(data::save(&ds, &a.out), &a.out)?;
    println!(
        "seed={} attrs={} objects={} dim={} seen_pairs={} unseen_pairs={} train={} test={} out={}",
        spec.seed,
        ds.vocab.n_attrs(),
        ds.vocab.n_objs(),
        ds.dim(),
        ds.vocab.seen_pairs.len(),
        ds.vocab.unseen_closed.len(),
        ds.train.len(),
        ds.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: Train) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => ctx(TrainConfig::from_json(&read_text(p)?), p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.stage_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = &a.precision {
        cfg.precision = match p.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(format!("config error: unknown precision {other:?}")),
        };
    }
    if a.no_eval {
        cfg.eval_each_epoch = false;
    }
    cfg.data = Some(a.data.display().to_string());
    cfg.validate().map_err(|e| e.to_string())?;
    let ds = load_data(&a.data)?;
    println!("seed={} stage_epochs={:?} precision={:?}", cfg.seed, cfg.stage_epochs, cfg.precision);
    let out = train_with(&cfg, &ds, |m| {
        let val = m.validation.map_or(String::new(), |v| {
            format!(" seen={:.4} unseen={:.4} hm={:.4} auc={:.4}", v.seen, v.unseen, v.hm, v.auc)
        });
        println!("epoch={} stage={} loss={:.6}{val}", m.epoch, m.stage, m.total);
    })
    .map_err(|e| e.to_string())?;
    let ckpt = a.out.join("model.ckpt");
    ctx(save_checkpoint(&ckpt, &cfg, &out.model, &out.optimizer), &ckpt)?;
    write_text(&a.out.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    write_text(&a.out.join("config.json"), &(cfg.to_json() + "\n"))?;
    println!("checkpoint={}", ckpt.display());
    Ok(())
}

fn eval_cmd(a: Eval) -> CliResult<()> {
    let world = a.world.world();
    let ckpt = load_ckpt(&a.ckpt)?;
    if let Some(p) = &a.config {
        let cfg = ctx(TrainConfig::from_json(&read_text(p)?), p)?;
        if !ckpt.matches(&cfg) {
            eprintln!(
                "warning: {} does not match the checkpoint config (hash {})",
                p.display(),
                ckpt.hash_hex()
            );
        }
    }
    let ds = dataset_for(&ckpt, a.data.as_deref())?;
    let report = evaluate(&ckpt.model, &ds.test, world).map_err(|e| e.to_string())?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    let dir = a
        .out
        .unwrap_or_else(|| a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = format!("eval_{}", a.world.name());
    let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())? + "\n";
    write_text(&dir.join(format!("{stem}.json")), &json)?;
    write_text(&dir.join(format!("{stem}_curve.csv")), &report.curve_csv())?;
    write_text(&dir.join(format!("{stem}.csv")), &report.summary_csv())?;
    println!(
        "world={} seen={:.4} unseen={:.4} hm={:.4} auc={:.4} n_seen={} n_unseen={}",
        a.world.name(), report.seen, report.unseen, report.hm, report.auc, report.n_seen, report.n_unseen
    );
    Ok(())
}

fn grad_check_cmd(a: GradCheck) -> CliResult<bool> {
    let inst = GradCheckInstance {
        seed: a.seed,
        ..GradCheckInstance::default()
    };
    let opts = GradCheckOptions {
        tolerance: a.tolerance,
        max_entries: a.max_entries,
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    println!(
        "seed={} attrs={} objects={} dim={} slots={} step={:e} tolerance={:e}",
        a.seed, inst.n_attrs, inst.n_objs, inst.dim, inst.slots, opts.step, opts.tolerance
    );
    let reports = loss_grad_checks(&inst, &CHECKED_LOSSES, &opts).map_err(|e| e.to_string())?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<10} max_rel={:.3e} {}",
            r.label,
            r.max_rel_error(),
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            print!("{r}");
            ok = false;
        }
    }
    Ok(ok)
}

fn probe_cmd(a: Probe) -> CliResult<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let ds = dataset_for(&ckpt, a.data.as_deref())?;
    let report = retrieval_probe(&ckpt.model, &ds, a.synonyms).map_err(|e| e.to_string())?;
    write_text(&a.out, &report.to_csv())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())? + "\n";
    write_text(&a.out.with_extension("json"), &json)?;
    let syn = report.unseen_synonym_rate.map_or(String::new(), |v| format!(" unseen_synonym_rate={v:.4}"));
    println!(
        "seen_rate={:.4} unseen_rate={:.4}{syn}",
        report.seen_rate, report.unseen_rate
    );
    Ok(())
}

fn experts_cmd(a: CkptOutput) -> CliResult<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let ds = dataset_for(&ckpt, a.data.as_deref())?;
    let alloc = expert_allocation(&ckpt.model, &ds.test).map_err(|e| e.to_string())?;
    write_text(&a.out, &allocation_csv(&alloc, &ckpt.model.vocab))?;
    println!("tokens={} usage={:?} usage_entropy={:.4}", alloc.tokens, alloc.usage(), alloc.usage_entropy());
    Ok(())
}

fn default_variants() -> Vec<AblationVariant> {
    let v = |name: &str, overrides| AblationVariant {
        name: name.into(),
        overrides,
    };
    vec![
        v("hope", json!({})),
        v("k_shots_1", json!({"model": {"k_shots": 1}})),
        v("no_infonce", json!({"use_infonce": false})),
        v("no_retrieval_loss", json!({"use_retrieval_loss": false})),
        v("dense_composer", json!({"model": {"composer": {"kind": "dense"}}})),
        v("no_memory", json!({"model": {"use_memory": false}, "weights": {"gamma": 0.0}})),
    ]
}

fn ablate_cmd(a: Ablate) -> CliResult<()> {
    let base = match &a.config {
        Some(p) => ctx(TrainConfig::from_json(&read_text(p)?), p)?,
        None => TrainConfig::default(),
    };
    let variants = match &a.variants {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| format!("{}: config error: {e}", p.display()))?,
        None => default_variants(),
    };
    let ds = load_data(&a.data)?;
    println!("seeds={:?} variants={}", a.seeds, variants.len());
    let rows = ablation_suite(&base, &variants, &a.seeds, &ds).map_err(|e| e.to_string())?;
    for r in &rows {
        println!(
            "variant={} seed={} seen={:.4} unseen={:.4} hm={:.4} auc={:.4}",
            r.variant, r.seed, r.seen, r.unseen, r.hm, r.auc
        );
    }
    write_text(&a.out, &ablation_csv(&rows))
}

fn export_cmd(a: CkptOutput) -> CliResult<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let ds = dataset_for(&ckpt, a.data.as_deref())?;
    let csv = export_embeddings(&ckpt.model, &ds).map_err(|e| e.to_string())?;
    write_text(&a.out, &csv)?;
    println!("rows={}", csv.lines().count() - 1);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::GradCheck(a) => match grad_check_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => Err("training error: gradient check failed".into()),
            Err(e) => Err(e),
        },
        Command::ProbeRetrieval(a) => probe_cmd(a),
        Command::ReportExperts(a) => experts_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::ExportEmbeddings(a) => export_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
