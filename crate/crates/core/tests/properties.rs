use hope_core::data::Pair;
use hope_core::evaluation::{bias_sweep, curve_auc, harmonic_mean};
use hope_core::hopfield::{info_nce, HopfieldMemory, TargetMode};
use hope_core::losses::{LossParts, LossWeights};
use hope_core::numerics::{log_sum_exp, AdamConfig, AdamState, Matrix};
use hope_core::softmoe::{combine_weights, dispatch_weights, ComposerConfig, ComposerKind, ComposerStack, SoftMoeLayer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn sized_matrix(max: usize, range: f64) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(move |(r, c)| matrix(r, c, range))
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Memory with `rows` random compositions over a 3x4 vocabulary.
fn memory_from(rows: &Matrix, slots: usize) -> HopfieldMemory {
    let n = rows.rows();
    let d = rows.cols();
    let classes: Vec<Pair> = (0..n).map(|i| Pair::new(i % 3, i % 4)).collect();
    HopfieldMemory::from_parts(
        rows.clone(),
        rows.scale(-0.5),
        Matrix::zeros(3, d),
        Matrix::zeros(4, d),
        Matrix::zeros(d, slots * d),
        classes,
        slots,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(m in sized_matrix(12, 800.0)) {
        let s = m.softmax_rows().unwrap();
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
            prop_assert!(s.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn log_sum_exp_shifts_with_constant(v in prop::collection::vec(-300.0..300.0f64, 1..20), c in -500.0..500.0f64) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() < 1e-9);
    }

    #[test]
    fn matmul_matches_naive_oracle((a, b) in (1..=32usize, 1..=32usize, 1..=32usize)
        .prop_flat_map(|(n, k, m)| (matrix(n, k, 2.0), matrix(k, m, 2.0))))
    {
        let oracle = naive_matmul(&a, &b);
        prop_assert!(max_diff(&a.matmul(&b).unwrap(), &oracle) < 1e-13);
        prop_assert!(max_diff(&a.matmul_nt(&b.transpose()).unwrap(), &oracle) < 1e-13);
        prop_assert!(max_diff(&a.transpose().matmul_tn(&b).unwrap(), &oracle) < 1e-13);
    }

    #[test]
    fn routing_weights_are_normalized(
        (x, phi) in (1..16usize, 1..10usize, 1..9usize)
            .prop_flat_map(|(t, d, s)| (matrix(t, d, 3.0), matrix(d, s, 2.0)))
    ) {
        let dw = dispatch_weights(&x, &phi).unwrap();
        let cw = combine_weights(&x, &phi).unwrap();
        for s in 0..dw.cols() {
            let col: f64 = (0..dw.rows()).map(|t| dw.get(t, s)).sum();
            prop_assert!((col - 1.0).abs() < 1e-12);
        }
        for t in 0..cw.rows() {
            prop_assert!((cw.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieval_scores_are_distributions_for_any_slot_count(
        half in prop::sample::select(vec![1usize, 2, 4, 8]),
        (mem, q) in (2..10usize, 2..8usize).prop_flat_map(|(n, d)| (matrix(n, d, 1.0), matrix(16, d, 4.0)))
    ) {
        let l = 2 * half;
        let memory = memory_from(&mem, l);
        let queries = q.select_rows(&(0..l).collect::<Vec<_>>()).unwrap();
        let r = memory.retrieve(&queries).unwrap();
        prop_assert_eq!(r.scores.shape(), (l, mem.rows()));
        prop_assert_eq!(r.patterns.shape(), (l, mem.cols()));
        for i in 0..l {
            let sum: f64 = r.scores.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieved_patterns_lie_in_the_memory_hull(
        (mem, q) in (2..10usize, 2..8usize).prop_flat_map(|(n, d)| (matrix(n, d, 1.0), matrix(4, d, 5.0)))
    ) {
        let memory = memory_from(&mem, 4);
        let r = memory.retrieve(&q).unwrap();
        for i in 0..4 {
            let rows = if i < 2 { &memory.visual_attr } else { &memory.visual_obj };
            let max_norm = (0..rows.rows())
                .map(|j| rows.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            let v = r.patterns.row(i);
            prop_assert!(v.iter().map(|x| x * x).sum::<f64>().sqrt() <= max_norm + 1e-12);
            for c in 0..rows.cols() {
                let lo = (0..rows.rows()).map(|j| rows.get(j, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..rows.rows()).map(|j| rows.get(j, c)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v[c] >= lo - 1e-12 && v[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn retrieval_loss_ignores_slot_order_within_a_half(
        (mem, q) in (4..9usize, 2..6usize).prop_flat_map(|(n, d)| (matrix(n, d, 1.0), matrix(8, d, 3.0))),
        label_row in 0..4usize,
        perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let memory = memory_from(&mem, 8);
        let label = memory.row_class[label_row];
        let s = memory.retrieve(&q).unwrap().scores;
        let mut order: Vec<usize> = perm.clone();
        order.extend(perm.iter().rev().map(|i| i + 4));
        let permuted = s.select_rows(&order).unwrap();
        for mode in [TargetMode::Spread, TargetMode::Single] {
            let a = memory.retrieval_loss(&s, label, mode).unwrap();
            let b = memory.retrieval_loss(&permuted, label, mode).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn info_nce_is_non_negative(
        (img, pats) in (2..8usize).prop_flat_map(|d| (prop::collection::vec(-1.0..1.0f64, d), matrix(4, d, 1.0))),
        positives in prop::collection::btree_set(0..4usize, 0..4),
        tau in 0.05..2.0f64,
    ) {
        let pos: Vec<usize> = positives.into_iter().collect();
        let l = info_nce(&img, &pats, &pos, tau).unwrap();
        prop_assert!(l >= 0.0);
        if pos.is_empty() {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn total_loss_is_linear_in_its_parts(
        parts in prop::collection::vec(0.0..10.0f64, 5),
        alpha in 0.0..1.0f64, beta in 0.0..1.0f64, gamma in 0.0..1.0f64,
    ) {
        let p = LossParts { st_obj: parts[0], dfm: parts[1], spm: parts[2], retrieval: parts[3], info_nce: parts[4] };
        let w = LossWeights { alpha, beta, gamma, ..LossWeights::default() };
        let want = parts[0] + alpha * parts[1] + beta * parts[2] + gamma * (parts[3] + parts[4]);
        prop_assert!((p.total(&w) - want).abs() < 1e-12);
    }

    #[test]
    fn adding_a_constant_to_every_score_changes_nothing(
        (rows, labels) in (2..12usize).prop_flat_map(|n| (
            prop::collection::vec(prop::collection::vec(-32i32..32, 5), n),
            prop::collection::vec(0usize..5, n),
        )),
        shift in -64i32..64,
    ) {
        // eighths keep every gap exact so both runs see identical thresholds
        let to_matrix = |k: i32| {
            let r: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| f64::from(v + k) / 8.0).collect()).collect();
            Matrix::from_rows(&r).unwrap()
        };
        let seen = [true, true, false, true, false];
        let a = bias_sweep(&to_matrix(0), &labels, &seen).unwrap();
        let b = bias_sweep(&to_matrix(shift), &labels, &seen).unwrap();
        prop_assert_eq!((a.seen, a.unseen, a.hm, a.auc), (b.seen, b.unseen, b.hm, b.auc));
        let pa: Vec<(f64, f64)> = a.curve.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
        let pb: Vec<(f64, f64)> = b.curve.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
        prop_assert_eq!(pa, pb);
        prop_assert!((0.0..=1.0).contains(&a.hm));
        let hm = a.curve.iter().map(|p| harmonic_mean(p.seen_acc, p.unseen_acc)).fold(0.0, f64::max);
        if a.n_unseen > 0 {
            prop_assert_eq!(a.hm, hm);
        }
    }

    #[test]
    fn auc_ignores_duplicates_and_order(
        points in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..12),
        dup in prop::collection::vec(0usize..12, 0..6),
        perm_seed in any::<u64>(),
    ) {
        let base = curve_auc(&points);
        let mut more = points.clone();
        for &i in &dup {
            more.push(points[i % points.len()]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(more.as_mut_slice(), &mut rng);
        prop_assert!((curve_auc(&more) - base).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_about_lr(g in prop::sample::select(vec![1e-3, 1.0, 1e6]), lr in 1e-4..1e-1f64) {
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let mut p = Matrix::scalar(0.0);
        let mut st = AdamState::for_param(&p, cfg);
        st.step(&mut p, &Matrix::scalar(g)).unwrap();
        prop_assert!((p.get(0, 0) + lr).abs() < lr * 1e-4);
    }
}

#[test]
fn composer_readout_ignores_order_of_context_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    for kind in [ComposerKind::Softmoe, ComposerKind::Dense] {
        let cfg = ComposerConfig {
            kind,
            ..ComposerConfig::default()
        };
        let stack = ComposerStack::new(d, &cfg, 11).unwrap();
        let seq = Matrix::from_vec(
            9,
            d,
            (0..9 * d).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect(),
        )
        .unwrap();
        let (f, _) = stack.forward(&seq).unwrap();
        let permuted = seq.select_rows(&[0, 4, 3, 2, 1, 8, 7, 6, 5]).unwrap();
        let (g, _) = stack.forward(&permuted).unwrap();
        for (a, b) in f.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn moe_layer_is_token_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = SoftMoeLayer::new(6, 12, 4, 2, &mut rng).unwrap();
    let x = Matrix::from_vec(5, 6, (0..30).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
    let y = layer.forward(&x).unwrap();
    let order = [3, 0, 4, 1, 2];
    let yp = layer.forward(&x.select_rows(&order).unwrap()).unwrap();
    assert!(max_diff(&yp, &y.select_rows(&order).unwrap()) < 1e-12);
}

#[test]
fn replayed_forward_is_bit_identical() {
    let stack = ComposerStack::new(8, &ComposerConfig::default(), 9).unwrap();
    let seq = Matrix::from_vec(5, 8, (0..40).map(|i| (i as f64).sin()).collect()).unwrap();
    let (a, ca) = stack.forward(&seq).unwrap();
    let (b, cb) = stack.forward(&seq).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}
