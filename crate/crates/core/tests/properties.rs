use asymoe::autodiff::Tape;
use asymoe::config::{Config, ExpertKind};
use asymoe::diagnostics::{evidence_dependence_ratio, expert_activation_histogram, grounding_ratio, row_entropy};
use asymoe::hyperbolic::{
    constraint_tolerance, exp_map_origin_clipped, exterior_angle, log_map_origin, lorentz_distance, order_loss, LorentzPoint,
};
use asymoe::model::AsyMoeModel;
use asymoe::router::{biased_distribution, load_balance_loss, top_k_select, Modality, RoutingDecision};
use asymoe::synth_data::{generate_conflict, generate_containment, read_jsonl, write_jsonl, ConflictParams, Dataset};
use asymoe::tensor::{softmax, Tensor};
use proptest::prelude::*;

const C: f64 = 1.0;
const MAX_NORM: f64 = 10.0;

fn tangent(dim: usize, max_norm: f64) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, dim), 0.0..max_norm).prop_map(|(dir, r)| {
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        dir.iter().map(|x| x / n * r).collect()
    })
}

fn lift(v: &[f64]) -> LorentzPoint {
    exp_map_origin_clipped(v, C, MAX_NORM).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let t = Tensor::matrix(3, 4, data).unwrap();
        let s = softmax(&t, 1).unwrap();
        for r in 0..3 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn linear_loss_gradient_is_the_weight(w in prop::collection::vec(-5.0f64..5.0, 6), x in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::matrix(6, 1, x).unwrap(), true);
        let wv = tape.constant(Tensor::matrix(1, 6, w.clone()).unwrap());
        let y = tape.matmul(wv, xv).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        prop_assert_eq!(g.get(xv).unwrap().data(), &w[..]);
    }

    #[test]
    fn lifts_stay_on_the_hyperboloid(v in tangent(8, MAX_NORM)) {
        let x = lift(&v);
        prop_assert!(x.constraint_residual().abs() <= constraint_tolerance(x.time(), C));
    }

    #[test]
    fn exp_log_round_trip(v in tangent(8, MAX_NORM)) {
        let back = log_map_origin(&lift(&v)).unwrap();
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn distance_from_origin_is_tangent_norm(v in tangent(5, MAX_NORM)) {
        let o = LorentzPoint::origin(5, C);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((lorentz_distance(&o, &lift(&v)).unwrap() - norm).abs() < 1e-8);
    }

    #[test]
    fn distance_is_a_metric(a in tangent(4, 3.0), b in tangent(4, 3.0), c in tangent(4, 3.0)) {
        let (x, y, z) = (lift(&a), lift(&b), lift(&c));
        let dxy = lorentz_distance(&x, &y).unwrap();
        prop_assert!(dxy >= 0.0);
        prop_assert!((dxy - lorentz_distance(&y, &x).unwrap()).abs() < 1e-10);
        prop_assert_eq!(lorentz_distance(&x, &x).unwrap(), 0.0);
        prop_assert!(lorentz_distance(&x, &z).unwrap() <= dxy + lorentz_distance(&y, &z).unwrap() + 1e-9);
    }

    #[test]
    fn exterior_angle_is_rotation_invariant(a in tangent(3, 3.0), b in tangent(3, 3.0), theta in 0.0f64..6.28) {
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 0.01);
        let (v, t) = (lift(&a), lift(&b));
        let Ok(angle) = exterior_angle(&v, &t) else { return Ok(()) };
        let rot = |p: &LorentzPoint| {
            let x = p.coords();
            let (s, c) = theta.sin_cos();
            LorentzPoint::new(vec![x[0], c * x[1] - s * x[2], s * x[1] + c * x[2], x[3]], C).unwrap()
        };
        let rotated = exterior_angle(&rot(&v), &rot(&t)).unwrap();
        prop_assert!((angle - rotated).abs() < 1e-9);
    }

    #[test]
    fn order_loss_is_nonnegative(a in tangent(4, 4.0), b in tangent(4, 4.0)) {
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 0.01);
        if let Ok(l) = order_loss(&lift(&a), &lift(&b), 0.1) {
            prop_assert!(l >= 0.0);
        }
    }

    #[test]
    fn evidence_bias_is_monotone(logits in prop::collection::vec(-4.0f64..4.0, 3), s1 in 0.0f64..1.0, ds in 0.01f64..1.0) {
        let mask = [true, false, false];
        let p1 = biased_distribution(&logits, s1, &mask);
        let p2 = biased_distribution(&logits, s1 + ds, &mask);
        prop_assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p2[0] > p1[0]);
    }

    #[test]
    fn top_k_gates_are_normalised(raw in prop::collection::vec(0.01f64..1.0, 5), k in 1usize..=5) {
        let total: f64 = raw.iter().sum();
        let dist: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let (idx, gates) = top_k_select(&dist, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!((gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(gates.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn load_balance_is_bounded(tops in prop::collection::vec(0usize..4, 1..20), raw in prop::collection::vec(0.01f64..1.0, 4)) {
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let ds: Vec<RoutingDecision> = tops
            .iter()
            .enumerate()
            .map(|(t, &e)| RoutingDecision {
                token: t,
                modality: Modality::Visual,
                experts: vec![e],
                gates: vec![1.0],
                probs: probs.clone(),
                s_evd: None,
            })
            .collect();
        let l = load_balance_loss(&ds, 4).unwrap();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&l));
    }

    #[test]
    fn ratios_stay_in_range(a in 0.0f64..5.0, b in 0.0f64..5.0) {
        prop_assume!(a + b > 0.0);
        let g = grounding_ratio(a, b).unwrap();
        let r = evidence_dependence_ratio(a, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&g));
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn entropy_is_bounded(raw in prop::collection::vec(0.0f64..1.0, 2..10)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 0.0);
        let row: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let h = row_entropy(&row);
        prop_assert!(h >= -1e-15 && h <= (row.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn histograms_sum_to_one(tops in prop::collection::vec(0usize..4, 1..30)) {
        let kinds = [ExpertKind::Visual, ExpertKind::Evidence, ExpertKind::Hyperbolic, ExpertKind::Shared];
        let ds: Vec<RoutingDecision> = tops
            .iter()
            .enumerate()
            .map(|(t, &e)| RoutingDecision {
                token: t,
                modality: Modality::Language,
                experts: vec![e],
                gates: vec![1.0],
                probs: vec![0.25; 4],
                s_evd: None,
            })
            .collect();
        let h = expert_activation_histogram(ds.iter().map(|d| ("task", d)), &kinds).unwrap();
        prop_assert!((h["task"].total() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn containment_labels_match_the_inclusion_oracle(seed in any::<u64>(), n in 1usize..60) {
        let s = generate_containment(seed, n, 20, 6).unwrap();
        let pos = s.iter().filter(|x| x.label).count();
        prop_assert!(pos.abs_diff(n - pos) <= 1);
        for x in &s {
            let included = x.query.iter().all(|a| x.scene.contains(a));
            prop_assert_eq!(included, x.label);
        }
        prop_assert_eq!(s, generate_containment(seed, n, 20, 6).unwrap());
    }

    #[test]
    fn conflict_splits_respect_the_mapping(seed in any::<u64>(), rate in 0.05f64..0.95) {
        let p = ConflictParams { n_keys: 6, n_values: 3, conflict_rate: rate, null_context_rate: 0.2, n_fillers: 2, n_train: 40, n_eval: 20 };
        let d = generate_conflict(seed, &p).unwrap();
        for s in &d.conflict {
            prop_assert!(s.value_ctx != Some(d.mapping[s.key]));
            prop_assert_eq!(s.label, s.value_ctx.unwrap());
        }
        for s in &d.consistent {
            prop_assert_eq!(s.value_ctx, Some(d.mapping[s.key]));
        }
    }

    #[test]
    fn jsonl_round_trips(seed in any::<u64>()) {
        let cfg = Config::default().data;
        let d = Dataset::containment("eval", &cfg, generate_containment(seed, 25, cfg.n_attributes, cfg.scene_size).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&d, &path).unwrap();
        prop_assert_eq!(read_jsonl(&path).unwrap(), d);
    }

    #[test]
    fn traces_are_well_formed(seed in 0u64..1000) {
        let mut cfg = Config::default();
        cfg.seed = seed;
        cfg.model.d_model = 16;
        cfg.model.n_layers = 2;
        cfg.asymoe.d_ff = 16;
        cfg.data.n_train = 4;
        cfg.data.n_eval = 2;
        let model = AsyMoeModel::new(&cfg).unwrap();
        let data = asymoe::synth_data::build_datasets(seed, &cfg.data).unwrap();
        for s in data[0].to_multimodal() {
            let (_, trace) = model.forward(&s, true).unwrap();
            for layer in trace.unwrap().layers {
                for a in &layer.attention {
                    for r in 0..a.rows() {
                        prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    }
                }
                for d in &layer.routing {
                    prop_assert!((d.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    let forbidden = if d.modality == Modality::Visual { ExpertKind::Evidence } else { ExpertKind::Visual };
                    prop_assert!(d.experts.iter().all(|&e| cfg.asymoe.experts[e] != forbidden));
                }
            }
        }
    }

    #[test]
    fn config_toml_round_trips(lr in 1e-5f64..1e-1, k in 1usize..=4, seed in 0..=i64::MAX as u64) {
        let mut cfg = Config::default();
        cfg.train.lr = lr;
        cfg.asymoe.k = k;
        cfg.seed = seed;
        prop_assert_eq!(Config::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn oversized_seeds_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let mut cfg = Config::default();
        cfg.seed = seed;
        prop_assert!(cfg.validate().is_err());
    }
}

#[test]
fn truncated_jsonl_names_the_line() {
    let cfg = Config::default().data;
    let d = Dataset::containment("eval", &cfg, generate_containment(1, 5, cfg.n_attributes, cfg.scene_size).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_jsonl(&d, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.len() - 10;
    std::fs::write(&path, &text[..cut]).unwrap();
    let err = read_jsonl(&path).unwrap_err().to_string();
    assert!(err.contains("line 6"), "{err}");
}

#[test]
fn large_jsonl_keeps_order() {
    let cfg = Config::default().data;
    let d = Dataset::containment("train", &cfg, generate_containment(9, 10_000, cfg.n_attributes, cfg.scene_size).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    write_jsonl(&d, &path).unwrap();
    let back = read_jsonl(&path).unwrap();
    let path2 = dir.path().join("big2.jsonl");
    write_jsonl(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    assert_eq!(back, d);
}
