//! Finite-difference verification of model gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{ExpertKind, Stream};
use crate::error::Result;
use crate::model::{AsyMoeModel, LossWeights, MultimodalSample};
use crate::params::Binder;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Extra randomly chosen entries per parameter, beyond the largest-gradient one.
    pub random_entries: usize,
    /// Random entries must have at least this analytic magnitude; also the
    /// denominator floor of the relative error.
    pub min_grad: f64,
    /// Multiplies every analytic gradient by `1 + corrupt` (negative control).
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            random_entries: 2,
            min_grad: 1e-5,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub param: String,
    /// Coarse component label: embedding, attention, router, expert kind, norm, head.
    pub group: String,
    pub entries: Vec<EntryCheck>,
    pub worst_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub tolerance: f64,
    pub passed: bool,
    pub loss: f64,
    /// Mean order-loss value; zero means every pair was already inside its cone.
    pub order_loss: f64,
    pub align_loss: f64,
}

impl GradCheckReport {
    /// Distinct component labels covered, in first-seen order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn group_of(name: &str, kinds: &[ExpertKind]) -> String {
    if name.starts_with("embed.") {
        return "embedding".into();
    }
    if name == "head" {
        return "head".into();
    }
    if name.ends_with(".gain") {
        return "norm".into();
    }
    if name.contains(".attn.") {
        return "attention".into();
    }
    if name.contains(".router.") {
        return "router".into();
    }
    if name.contains(".ffn.") {
        return "dense_ffn".into();
    }
    if let Some(rest) = name.split(".expert").nth(1) {
        let e: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        if let Some(k) = kinds.get(e) {
            return format!("expert.{}", k.name());
        }
    }
    "other".into()
}

/// Mean total loss over `samples`.
pub fn loss_value(model: &AsyMoeModel, samples: &[MultimodalSample], w: LossWeights) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params, false);
        let l = model.sample_loss(&mut tape, &mut b, s, w)?;
        sum += tape.value(l.total).item();
    }
    Ok(sum / samples.len() as f64)
}

/// Analytic gradients of the mean total loss, in parameter-store order.
pub fn analytic_gradients(model: &AsyMoeModel, samples: &[MultimodalSample], w: LossWeights) -> Result<(f64, Vec<Tensor>)> {
    gradients_with_parts(model, samples, w).map(|(l, g, _)| (l, g))
}

fn gradients_with_parts(
    model: &AsyMoeModel,
    samples: &[MultimodalSample],
    w: LossWeights,
) -> Result<(f64, Vec<Tensor>, (f64, f64))> {
    let mut acc: Vec<Tensor> = model.params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut parts = (0.0, 0.0);
    for s in samples {
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params, true);
        let l = model.sample_loss(&mut tape, &mut b, s, w)?;
        loss += scale * tape.value(l.total).item();
        parts.0 += scale * l.order;
        parts.1 += scale * l.align;
        let g = tape.backward(l.total)?;
        for (a, g) in acc.iter_mut().zip(b.collect(&g)) {
            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += scale * y);
        }
    }
    Ok((loss, acc, parts))
}

/// Compares analytic and central-difference gradients for every trainable
/// parameter tensor: its largest-magnitude entry plus a few random ones.
pub fn grad_check(
    model: &AsyMoeModel,
    samples: &[MultimodalSample],
    w: LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if samples.is_empty() {
        return Err(crate::Error::InvalidArgument("grad check needs at least one sample".into()));
    }
    for s in samples {
        s.validate(&model.config.model)?;
    }
    let (loss, mut grads, parts) = gradients_with_parts(model, samples, w)?;
    if let Some(c) = opts.corrupt {
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= 1.0 + c);
        }
    }
    let kinds = model.expert_kinds();
    let mut rng = model.config.rng(Stream::GradCheck);
    let mut probe = model.clone();
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut params = Vec::new();
    for (i, id) in ids.into_iter().enumerate() {
        let p = model.params.get(id);
        if !p.trainable {
            continue;
        }
        let g = grads[i].data();
        let top = (0..g.len()).fold(0, |b, j| if g[j].abs() > g[b].abs() { j } else { b });
        let mut picks = vec![top];
        let eligible: Vec<usize> = (0..g.len()).filter(|&j| j != top && g[j].abs() >= opts.min_grad).collect();
        for _ in 0..opts.random_entries.min(eligible.len()) {
            loop {
                let j = eligible[rng.random_range(0..eligible.len())];
                if !picks.contains(&j) {
                    picks.push(j);
                    break;
                }
            }
        }
        let mut entries = Vec::with_capacity(picks.len());
        for j in picks {
            let orig = p.value.data()[j];
            probe.params.value_mut(id).data_mut()[j] = orig + opts.h;
            let up = loss_value(&probe, samples, w)?;
            probe.params.value_mut(id).data_mut()[j] = orig - opts.h;
            let down = loss_value(&probe, samples, w)?;
            probe.params.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            entries.push(EntryCheck {
                index: j,
                analytic: g[j],
                numeric,
                rel_err: relative_error(g[j], numeric, opts.min_grad),
            });
        }
        let worst = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
        params.push(ParamCheck {
            param: p.name.clone(),
            group: group_of(&p.name, &kinds),
            entries,
            worst_rel_err: worst,
        });
    }
    let (worst_rel_err, worst_param) = params
        .iter()
        .map(|p| (p.worst_rel_err, p.param.clone()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    Ok(GradCheckReport {
        passed: worst_rel_err < opts.tolerance,
        params,
        worst_rel_err,
        worst_param,
        tolerance: opts.tolerance,
        loss,
        order_loss: parts.0,
        align_loss: parts.1,
    })
}
