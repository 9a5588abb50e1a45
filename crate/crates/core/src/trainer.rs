//! Training loop, evaluation and checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{Config, Schedule, Stream, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{AsyMoeModel, AttentionTrace, LossWeights, MultimodalSample};
use crate::params::{Binder, ParamStore};
use crate::synth_data::{Dataset, Samples};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub task: f64,
    pub order: f64,
    pub balance: f64,
    pub align: f64,
    pub total: f64,
    /// Answer accuracy on the step's batch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    /// Number of completed optimisation steps.
    pub step: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub alpha_names: Vec<String>,
    pub initial_alphas: Vec<f64>,
    /// α of every evidence-priority expert at the end of each eval interval.
    pub alpha_trajectory: Vec<AlphaPoint>,
    pub final_eval: BTreeMap<String, EvalReport>,
    pub param_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_task_loss: f64,
    /// Conflict datasets only: prediction equals the context value.
    pub context_faithful: Option<f64>,
    /// Conflict datasets only: prediction equals the memorised value but not the context value.
    pub memory_answer: Option<f64>,
    pub other: Option<f64>,
}

/// Per-expert α series from a report, keyed by expert name.
pub fn alpha_trajectory(report: &TrainReport) -> Vec<(String, Vec<f64>)> {
    report
        .alpha_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), report.alpha_trajectory.iter().map(|p| p.values[i]).collect()))
        .collect()
}

pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
            let t = (step - cfg.warmup_steps) as f64 / span;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Decoupled-weight-decay Adam.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

fn check_composition(total: f64, task: f64, order: f64, balance: f64, align: f64, w: LossWeights) -> Result<()> {
    let composed = task + w.order * order + w.balance * balance + w.align * align;
    if (total - composed).abs() > 1e-9 * total.abs().max(1.0) {
        return Err(Error::Contract(format!(
            "loss composition broken: total {total} vs components {composed}"
        )));
    }
    Ok(())
}

/// Trains `model` in place on `data`. When `out_dir` is given, a last-good
/// checkpoint is written there if training diverges.
pub fn train(
    model: &mut AsyMoeModel,
    data: &[MultimodalSample],
    eval_sets: &[(String, Dataset)],
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let cfg = model.config.train.clone();
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for s in data {
        s.validate(&model.config.model)?;
    }
    let weights = LossWeights::from(&cfg);
    let mut rng = model.config.rng(Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let alpha_names: Vec<String> = model.alphas().into_iter().map(|a| a.0).collect();
    let initial_alphas: Vec<f64> = model.alphas().into_iter().map(|a| a.1).collect();
    let mut logs = Vec::with_capacity(cfg.steps);
    let mut trajectory = Vec::new();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        batch.sort_unstable();
        let outcome = batch_gradients(model, data, &batch, weights);
        let (mut grads, log) = match outcome {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(diverged(model, step, out_dir)),
            Err(e) => return Err(e),
        };
        if !log.total.is_finite() {
            return Err(diverged(model, step, out_dir));
        }
        if cfg.clip_norm > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lr = learning_rate(&cfg, step);
        let snapshot = model.params.clone();
        opt.step(&mut model.params, &grads, lr);
        if model.params.iter().any(|(_, p)| !p.value.is_finite()) {
            model.params = snapshot;
            return Err(diverged(model, step, out_dir));
        }
        logs.push(StepLog { step, lr, ..log });
        if (step + 1) % cfg.eval_interval == 0 {
            trajectory.push(AlphaPoint {
                step: step + 1,
                values: model.alphas().into_iter().map(|a| a.1).collect(),
            });
        }
    }

    let mut final_eval = BTreeMap::new();
    for (name, d) in eval_sets {
        final_eval.insert(name.clone(), evaluate(model, d)?);
    }
    Ok(TrainReport {
        steps: logs,
        alpha_names,
        initial_alphas,
        alpha_trajectory: trajectory,
        final_eval,
        param_hash: model.params.hash(),
    })
}

fn diverged(model: &AsyMoeModel, step: usize, out_dir: Option<&Path>) -> Error {
    let checkpoint = out_dir.and_then(|d| {
        let p = d.join("last_good.json");
        save_checkpoint(model, &p).ok().map(|_| p)
    });
    Error::Diverged { step, checkpoint }
}

/// Mean gradients and loss components over one batch; samples are
/// accumulated in batch order so results are deterministic.
pub fn batch_gradients(
    model: &AsyMoeModel,
    data: &[MultimodalSample],
    batch: &[usize],
    weights: LossWeights,
) -> Result<(Vec<Tensor>, StepLog)> {
    let mut acc: Vec<Tensor> = model.params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
    let mut log = StepLog {
        step: 0,
        lr: 0.0,
        task: 0.0,
        order: 0.0,
        balance: 0.0,
        align: 0.0,
        total: 0.0,
        accuracy: 0.0,
    };
    let (mut correct, mut answers) = (0usize, 0usize);
    let scale = 1.0 / batch.len() as f64;
    for &i in batch {
        let s = &data[i];
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params, true);
        let loss = model.sample_loss(&mut tape, &mut b, s, weights)?;
        let total = tape.value(loss.total).item();
        check_composition(total, loss.task, loss.order, loss.balance, loss.align, weights)?;
        let grads = tape.backward(loss.total)?;
        for (a, g) in acc.iter_mut().zip(b.collect(&grads)) {
            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += scale * y);
        }
        log.task += scale * loss.task;
        log.order += scale * loss.order;
        log.balance += scale * loss.balance;
        log.align += scale * loss.align;
        log.total += scale * total;
        correct += loss.predictions.iter().zip(&s.labels).filter(|(p, l)| p == l).count();
        answers += s.labels.len();
    }
    log.accuracy = correct as f64 / answers as f64;
    check_composition(log.total, log.task, log.order, log.balance, log.align, weights)?;
    Ok((acc, log))
}

/// Accuracy (and conflict-task answer breakdown) at answer positions.
pub fn evaluate(model: &AsyMoeModel, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let samples = data.to_multimodal();
    let mut report = evaluate_samples(model, &samples)?;
    if let Samples::Conflict(items) = &data.samples {
        let (mut faithful, mut memory, mut other) = (0usize, 0usize, 0usize);
        for (item, s) in items.iter().zip(&samples) {
            let pred = model.predict(s)?[0];
            let ctx = item.value_ctx.map(|v| data.value_token(v));
            let global = data.value_token(item.global_value);
            if Some(pred) == ctx {
                faithful += 1;
            } else if pred == global {
                memory += 1;
            } else {
                other += 1;
            }
        }
        let n = items.len() as f64;
        report.context_faithful = Some(faithful as f64 / n);
        report.memory_answer = Some(memory as f64 / n);
        report.other = Some(other as f64 / n);
    }
    Ok(report)
}

pub fn evaluate_samples(model: &AsyMoeModel, samples: &[MultimodalSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let (mut correct, mut total, mut loss) = (0usize, 0usize, 0.0);
    for s in samples {
        let (logits, _) = model.forward(s, false)?;
        let preds = crate::model::predict_tokens(&logits, &s.candidates);
        correct += preds.iter().zip(&s.labels).filter(|(p, l)| p == l).count();
        total += s.labels.len();
        for (r, l) in s.labels.iter().enumerate() {
            let j = s.candidates.iter().position(|c| c == l).expect("validated");
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[j];
        }
    }
    Ok(EvalReport {
        n: samples.len(),
        accuracy: correct as f64 / total as f64,
        mean_task_loss: loss / total as f64,
        context_faithful: None,
        memory_answer: None,
        other: None,
    })
}

pub fn collect_traces(model: &AsyMoeModel, samples: &[MultimodalSample]) -> Result<Vec<AttentionTrace>> {
    samples
        .iter()
        .map(|s| model.forward(s, true).map(|(_, t)| t.expect("trace requested")))
        .collect()
}

impl TrainReport {
    /// Step metrics as CSV: losses, batch accuracy and the latest logged α values.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut head: Vec<String> = ["step", "lr", "task", "order", "balance", "align", "total", "accuracy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        head.extend(self.alpha_names.iter().map(|n| format!("alpha.{n}")));
        w.write_record(&head)?;
        let mut alphas = self.initial_alphas.clone();
        let mut next = self.alpha_trajectory.iter().peekable();
        for s in &self.steps {
            while let Some(p) = next.next_if(|p| p.step <= s.step + 1) {
                alphas = p.values.clone();
            }
            let mut row = vec![
                s.step.to_string(),
                format!("{:e}", s.lr),
                format!("{:e}", s.task),
                format!("{:e}", s.order),
                format!("{:e}", s.balance),
                format!("{:e}", s.align),
                format!("{:e}", s.total),
                format!("{:e}", s.accuracy),
            ];
            row.extend(alphas.iter().map(|a| format!("{a:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: Config,
    params: Vec<NamedArray>,
}

pub fn save_checkpoint(model: &AsyMoeModel, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|(_, p)| NamedArray {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect(),
    };
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AsyMoeModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            file.format_version
        )));
    }
    let mut model = AsyMoeModel::new(&file.config)?;
    let values = file
        .params
        .into_iter()
        .map(|a| Ok((a.name, Tensor::new(a.shape, a.data)?)))
        .collect::<Result<Vec<_>>>()?;
    model.params.load_values(values)?;
    Ok(model)
}

/// Path helper: `dir/name`, creating `dir` when needed.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(learning_rate(&cfg, 0), cfg.lr);
        assert!((learning_rate(&cfg, 50) - cfg.lr / 2.0).abs() < 1e-15);
        assert!(learning_rate(&cfg, 99) < 1e-6);
        let warm = TrainConfig {
            warmup_steps: 10,
            ..cfg
        };
        assert!((learning_rate(&warm, 4) - warm.lr / 2.0).abs() < 1e-15);
        assert_eq!(learning_rate(&warm, 10), warm.lr);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let g = s.filled("g", &[2], 1.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, &[Tensor::vector(vec![3.0, -0.5])], 0.1);
        let v = s.value(g).data();
        assert!((v[0] - 0.9).abs() < 1e-7 && (v[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn composition_check_flags_mismatch() {
        let w = LossWeights {
            order: 0.1,
            balance: 0.01,
            align: 0.0,
        };
        assert!(check_composition(1.0 + 0.1 * 2.0 + 0.01 * 3.0, 1.0, 2.0, 3.0, 7.0, w).is_ok());
        assert!(check_composition(1.5, 1.0, 2.0, 3.0, 0.0, w).is_err());
    }
}
