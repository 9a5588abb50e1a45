use asymoe::config::{Config, Task};
use asymoe::model::{AsyMoeModel, MultimodalSample};
use asymoe::synth_data::{build_datasets, vocab, Dataset};
use asymoe::trainer::{alpha_trajectory, evaluate, evaluate_samples, load_checkpoint, save_checkpoint, train};
use asymoe::Error;

fn tiny(task: Task) -> Config {
    let mut c = Config::default();
    c.model.d_model = 16;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.max_seq = 16;
    c.asymoe.d_ff = 24;
    c.data.task = task;
    c.data.n_train = 64;
    c.data.n_eval = 32;
    c.data.n_attributes = 12;
    c.data.scene_size = 4;
    c.data.n_keys = 8;
    c.data.n_values = 4;
    c.model.visual_vocab = 16;
    c.model.language_vocab = 32;
    c.train.steps = 6;
    c.train.batch_size = 4;
    c.train.eval_interval = 2;
    c.train.lr = 1e-2;
    c
}

fn splits(cfg: &Config) -> (Vec<MultimodalSample>, Vec<(String, Dataset)>) {
    let mut ds = build_datasets(cfg.seed, &cfg.data).unwrap().into_iter();
    let train = ds.next().unwrap().to_multimodal();
    (train, ds.map(|d| (d.header.split.clone(), d)).collect())
}

#[test]
fn zero_lr_keeps_parameters_and_loss() {
    let mut cfg = tiny(Task::Conflict);
    cfg.train.lr = 0.0;
    cfg.train.weight_decay = 0.0;
    cfg.train.batch_size = cfg.data.n_train;
    let (train_set, evals) = splits(&cfg);
    let mut model = AsyMoeModel::new(&cfg).unwrap();
    let before = model.params.hash();
    let r = train(&mut model, &train_set, &evals, None).unwrap();
    assert_eq!(model.params.hash(), before);
    assert!(r.steps.windows(2).all(|w| w[0].total == w[1].total));
    for (_, series) in alpha_trajectory(&r) {
        assert_eq!(series.len(), 3);
        assert!(series.iter().all(|&a| a == 0.5));
    }
}

#[test]
fn loss_components_compose_at_every_step() {
    let mut cfg = tiny(Task::Containment);
    cfg.train.lambda_align = 0.05;
    let (train_set, evals) = splits(&cfg);
    let mut model = AsyMoeModel::new(&cfg).unwrap();
    let r = train(&mut model, &train_set, &evals, None).unwrap();
    let t = &cfg.train;
    for s in &r.steps {
        let composed = s.task + t.lambda_order * s.order + t.lambda_bal * s.balance + t.lambda_align * s.align;
        assert!((s.total - composed).abs() < 1e-9);
    }
    assert_eq!(r.alpha_trajectory.len(), cfg.train.steps / cfg.train.eval_interval);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny(Task::Conflict);
    let (train_set, evals) = splits(&cfg);
    let run = || {
        let mut m = AsyMoeModel::new(&cfg).unwrap();
        train(&mut m, &train_set, &evals, None).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn separable_micro_task_is_learned() {
    // One visual token; answer YES for tokens below 4.
    let samples: Vec<MultimodalSample> = (0..64)
        .map(|i| {
            let v = i % 8;
            MultimodalSample {
                id: i,
                visual: vec![v],
                language: vec![vocab::Q, vocab::ANS],
                context: vec![0],
                answers: vec![2],
                labels: vec![if v < 4 { vocab::YES } else { vocab::NO }],
                candidates: vec![vocab::YES, vocab::NO],
                entailment: false,
            }
        })
        .collect();
    let mut cfg = tiny(Task::Containment);
    cfg.train.steps = 500;
    cfg.train.batch_size = 8;
    cfg.train.lr = 3e-3;
    cfg.train.eval_interval = 100;
    let mut model = AsyMoeModel::new(&cfg).unwrap();
    train(&mut model, &samples, &[], None).unwrap();
    let acc = evaluate_samples(&model, &samples).unwrap().accuracy;
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny(Task::Conflict);
    let (train_set, evals) = splits(&cfg);
    let mut model = AsyMoeModel::new(&cfg).unwrap();
    train(&mut model, &train_set, &evals, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params.hash(), model.params.hash());
    for (_, d) in &evals {
        assert_eq!(evaluate(&model, d).unwrap(), evaluate(&loaded, d).unwrap());
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"format_version\": 1").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn conflict_rates_partition() {
    let cfg = tiny(Task::Conflict);
    let (_, evals) = splits(&cfg);
    let model = AsyMoeModel::new(&cfg).unwrap();
    for (_, d) in &evals {
        let r = evaluate(&model, d).unwrap();
        let total = r.context_faithful.unwrap() + r.memory_answer.unwrap() + r.other.unwrap();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(r, evaluate(&model, d).unwrap());
    }
}

#[test]
fn untrained_model_is_at_chance_on_balanced_task() {
    let mut cfg = tiny(Task::Containment);
    cfg.data.n_eval = 1200;
    let data = build_datasets(cfg.seed, &cfg.data).unwrap();
    let model = AsyMoeModel::new(&cfg).unwrap();
    let acc = evaluate(&model, &data[1]).unwrap().accuracy;
    assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn divergence_leaves_a_checkpoint() {
    let mut cfg = tiny(Task::Conflict);
    cfg.train.lr = 1e300;
    cfg.train.clip_norm = 0.0;
    cfg.train.schedule = asymoe::config::Schedule::Constant;
    cfg.train.steps = 20;
    let (train_set, evals) = splits(&cfg);
    let mut model = AsyMoeModel::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    match train(&mut model, &train_set, &evals, Some(dir.path())) {
        Err(Error::Diverged { checkpoint: Some(p), .. }) => {
            let m = load_checkpoint(&p).unwrap();
            assert!(m.params.iter().all(|(_, p)| p.value.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.steps.len())),
    }
}

#[test]
fn frozen_alpha_does_not_move() {
    let mut cfg = tiny(Task::Conflict);
    cfg.asymoe.frozen_alpha = Some(0.3);
    let (train_set, evals) = splits(&cfg);
    let mut model = AsyMoeModel::new(&cfg).unwrap();
    let r = train(&mut model, &train_set, &evals, None).unwrap();
    for (_, series) in alpha_trajectory(&r) {
        assert!(series.iter().all(|&a| (a - 0.3).abs() < 1e-12 && a == series[0]));
    }
}

#[test]
fn empty_inputs_are_errors() {
    let cfg = tiny(Task::Conflict);
    let mut model = AsyMoeModel::new(&cfg).unwrap();
    assert!(train(&mut model, &[], &[], None).is_err());
    assert!(evaluate_samples(&model, &[]).is_err());
}
