use hope_core::data::{generate, CompositionDataset, GeneratorSpec, Sample};
use hope_core::evaluation::{evaluate, retrieval_probe, World};
use hope_core::model::{is_trainable, HopeModel, ModelConfig, Stage};
use hope_core::training::{load_checkpoint, save_checkpoint, train, train_step, OptimizerState, TrainConfig};

fn clean(n_attrs: usize, n_objs: usize, seen: f64, seed: u64) -> CompositionDataset {
    generate(&GeneratorSpec {
        n_attrs,
        n_objs,
        dim: 16,
        samples_per_composition: 4,
        test_samples_per_composition: 2,
        seen_fraction: seen,
        noise: 0.0,
        seed,
        ..GeneratorSpec::default()
    })
    .unwrap()
}

fn small_config(epochs: [usize; 3]) -> TrainConfig {
    TrainConfig {
        stage_epochs: epochs,
        batch_size: 16,
        eval_each_epoch: false,
        ..TrainConfig::default()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn identical_config_gives_identical_run() {
    let ds = clean(3, 4, 0.5, 1);
    let cfg = small_config([1, 1, 1]);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    let ta: Vec<u64> = a.metrics.iter().map(|m| m.total.to_bits()).collect();
    let tb: Vec<u64> = b.metrics.iter().map(|m| m.total.to_bits()).collect();
    assert_eq!(ta, tb);
    assert_eq!(a.model.named_parameters(), b.model.named_parameters());
    assert_eq!(a.optimizer, b.optimizer);
}

#[test]
fn different_seeds_diverge() {
    let ds = clean(3, 4, 0.5, 1);
    let a = train(&small_config([1, 1, 1]), &ds).unwrap();
    let b = train(&TrainConfig { seed: 1, ..small_config([1, 1, 1]) }, &ds).unwrap();
    assert_ne!(a.model.named_parameters(), b.model.named_parameters());
}

#[test]
fn visual_memory_stays_at_init_without_memory_training() {
    let ds = clean(3, 4, 0.5, 2);
    let cfg = TrainConfig {
        stage3_train_memory: false,
        ..small_config([1, 0, 2])
    };
    let init = HopeModel::init(&ds, &cfg.model, cfg.seed).unwrap();
    let out = train(&cfg, &ds).unwrap();
    assert_eq!(out.model.memory.visual_attr, init.memory.visual_attr);
    assert_eq!(out.model.memory.visual_obj, init.memory.visual_obj);
    assert_ne!(out.model.prompt.context, init.prompt.context);
}

#[test]
fn frozen_text_side_never_moves() {
    let ds = clean(3, 4, 0.5, 3);
    let cfg = small_config([1, 1, 1]);
    let init = HopeModel::init(&ds, &cfg.model, cfg.seed).unwrap();
    let out = train(&cfg, &ds).unwrap();
    let before: Vec<_> = init.named_parameters();
    let after: Vec<_> = out.model.named_parameters();
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if !is_trainable(name, Stage::Joint, true) {
            assert_eq!(a, b, "{name} changed");
        }
    }
}

#[test]
fn full_batch_steps_descend_at_small_rate() {
    let ds = clean(2, 4, 0.5, 4);
    let mut cfg = small_config([0, 0, 1]);
    cfg.adam.lr = 1e-3;
    let mut model = HopeModel::init(&ds, &cfg.model, cfg.seed).unwrap();
    let mut opt = OptimizerState::default();
    let objective = cfg.objective();
    let batch: Vec<&Sample> = ds.train.iter().collect();
    let trainable = |n: &str| is_trainable(n, Stage::Joint, true);
    let mut totals = Vec::new();
    for step in 0..6 {
        let (_, total) = train_step(&mut model, &mut opt, &cfg, &objective, &batch, Stage::Joint, &trainable, step).unwrap();
        totals.push(total);
    }
    for w in totals.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{totals:?}");
    }
}

#[test]
fn clean_data_is_fit() {
    let ds = clean(2, 4, 0.5, 5);
    assert_eq!(ds.vocab.seen_pairs.len(), 4);
    let cfg = TrainConfig {
        stage_epochs: [10, 10, 30],
        batch_size: 0,
        eval_each_epoch: false,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &ds).unwrap();
    let r = evaluate(&out.model, &ds.train, World::Closed).unwrap();
    assert!(r.seen >= 0.95, "train seen accuracy {}", r.seen);
}

#[test]
fn one_shot_memory_rows_equal_the_clean_embedding() {
    let ds = clean(3, 4, 0.5, 6);
    let cfg = ModelConfig {
        k_shots: 1,
        ..ModelConfig::default()
    };
    let model = HopeModel::init(&ds, &cfg, 0).unwrap();
    for (c, group) in ds.train_by_composition().iter().enumerate() {
        for (got, want) in model.memory.visual_attr.row(c).iter().zip(&group[0].embedding) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn more_shots_give_closer_prototypes() {
    let ds = generate(&GeneratorSpec {
        n_attrs: 4,
        n_objs: 4,
        dim: 16,
        samples_per_composition: 40,
        test_samples_per_composition: 1,
        noise: 0.3,
        seed: 7,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let groups = ds.train_by_composition();
    let centroids: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut m = vec![0.0; ds.dim()];
            for s in g {
                for (a, x) in m.iter_mut().zip(&s.embedding) {
                    *a += x / g.len() as f64;
                }
            }
            m
        })
        .collect();
    let spread = |k: usize| -> f64 {
        let cfg = ModelConfig {
            k_shots: k,
            ..ModelConfig::default()
        };
        let m = HopeModel::init(&ds, &cfg, 0).unwrap();
        centroids.iter().enumerate().map(|(c, ctr)| dist2(m.memory.visual_attr.row(c), ctr)).sum()
    };
    assert!(spread(10) < spread(1), "{} vs {}", spread(10), spread(1));
}

#[test]
fn unseen_primitives_all_occur_in_seen_pairs() {
    for seed in 0..5 {
        let ds = generate(&GeneratorSpec {
            seed,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let v = &ds.vocab;
        for p in &v.unseen_closed {
            assert!(v.seen_pairs.iter().any(|s| s.attr == p.attr));
            assert!(v.seen_pairs.iter().any(|s| s.obj == p.obj));
        }
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation_and_probe() {
    let ds = clean(3, 4, 0.5, 8);
    let cfg = small_config([1, 1, 1]);
    let out = train(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &cfg, &out.model, &out.optimizer).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.matches(&cfg));
    assert_eq!(back.optimizer, out.optimizer);
    for world in [World::Closed, World::Open] {
        let a = evaluate(&out.model, &ds.test, world).unwrap();
        let b = evaluate(&back.model, &ds.test, world).unwrap();
        assert_eq!(a.curve_csv(), b.curve_csv());
        assert_eq!(a.summary_csv(), b.summary_csv());
    }
    let pa = retrieval_probe(&out.model, &ds, false).unwrap();
    let pb = retrieval_probe(&back.model, &ds, false).unwrap();
    assert_eq!(pa.to_csv(), pb.to_csv());
}

#[test]
fn probe_rates_are_fractions_of_the_test_split() {
    let ds = clean(3, 4, 0.5, 9);
    let model = HopeModel::init(&ds, &ModelConfig::default(), 0).unwrap();
    let p = retrieval_probe(&model, &ds, false).unwrap();
    assert_eq!(p.n_seen + p.n_unseen, ds.test.len());
    for (rate, n) in [(p.seen_rate, p.n_seen), (p.unseen_rate, p.n_unseen)] {
        let hits = rate * n as f64;
        assert!((hits - hits.round()).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&rate));
    }
}
