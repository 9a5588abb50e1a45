//! Modality-aware top-k routing with an evidence-relevance bias for language tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ExpertKind;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Language,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Language => "language",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Position of the token in its sequence.
    pub token: usize,
    pub modality: Modality,
    /// Selected experts, by descending gate (ties → lower index).
    pub experts: Vec<usize>,
    /// Renormalised gates aligned with `experts`.
    pub gates: Vec<f64>,
    /// Full distribution before top-k (zeros on experts the modality cannot see).
    pub probs: Vec<f64>,
    pub s_evd: Option<f64>,
}

impl RoutingDecision {
    pub fn top1(&self) -> usize {
        self.experts[0]
    }
}

#[derive(Clone, Debug)]
pub struct Router {
    pub w_v: ParamId,
    /// Equal to `w_v` when one routing matrix serves both modalities.
    pub w_l: ParamId,
    /// Present only when some expert is evidence-priority.
    pub w_evd: Option<ParamId>,
    pub evd_mask: Vec<bool>,
    pub visible_v: Vec<bool>,
    pub visible_l: Vec<bool>,
    pub k: usize,
    pub d: usize,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        kinds: &[ExpertKind],
        k: usize,
        shared: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = kinds.len();
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("k = {k} for {n} experts")));
        }
        let evd_mask: Vec<bool> = kinds.iter().map(|k| *k == ExpertKind::Evidence).collect();
        let w_v = store.matrix(format!("{name}.w_v"), d, n, std, rng);
        let w_l = if shared {
            w_v
        } else {
            store.matrix(format!("{name}.w_l"), d, n, std, rng)
        };
        let w_evd = evd_mask
            .iter()
            .any(|&m| m)
            .then(|| store.matrix(format!("{name}.w_evd"), d, 1, std, rng));
        Ok(Router {
            w_v,
            w_l,
            w_evd,
            evd_mask,
            visible_v: kinds.iter().map(|k| k.visible_to_visual()).collect(),
            visible_l: kinds.iter().map(|k| k.visible_to_language()).collect(),
            k,
            d,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.evd_mask.len()
    }

    pub fn visible(&self, m: Modality) -> &[bool] {
        match m {
            Modality::Visual => &self.visible_v,
            Modality::Language => &self.visible_l,
        }
    }

    /// Number of experts actually activated for a token of modality `m`.
    pub fn effective_k(&self, m: Modality) -> usize {
        self.k.min(self.visible(m).iter().filter(|&&v| v).count())
    }

    fn tiled_mask(&self, m: Modality, rows: usize) -> Vec<bool> {
        self.visible(m).iter().copied().cycle().take(rows * self.n_experts()).collect()
    }

    /// Visual routing distribution `softmax(u·W_V)` over visible experts, `[n×E]`.
    pub fn probs_visual(&self, tape: &mut Tape, b: &mut Binder, u: Var) -> Result<Var> {
        let w = b.var(tape, self.w_v);
        let logits = tape.matmul(u, w)?;
        let mask = self.tiled_mask(Modality::Visual, tape.value(u).rows());
        tape.masked_softmax(logits, 1, Some(&mask))
    }

    /// Evidence scores `σ(w_evdᵀ·Attn(u, C))` as an `[n×1]` column.
    pub fn evidence_scores(&self, tape: &mut Tape, b: &mut Binder, u: Var, context: Var) -> Result<Var> {
        let w = self
            .w_evd
            .ok_or_else(|| Error::Contract("router has no evidence projection".into()))?;
        if tape.value(context).rows() == 0 {
            return Err(Error::Contract("evidence score needs at least one context token".into()));
        }
        let scores = tape.matmul_bt(u, context)?;
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt())?;
        let attn = tape.softmax(scores, 1)?;
        let pooled = tape.matmul(attn, context)?;
        let wv = b.var(tape, w);
        let z = tape.matmul(pooled, wv)?;
        tape.sigmoid(z)
    }

    /// Language routing `softmax(u·W_L + s_evd·m_evd)`; returns the
    /// distribution and the evidence-score column when one exists.
    pub fn probs_language(&self, tape: &mut Tape, b: &mut Binder, u: Var, context: Option<Var>) -> Result<(Var, Option<Var>)> {
        let w = b.var(tape, self.w_l);
        let mut logits = tape.matmul(u, w)?;
        let mut s = None;
        if self.w_evd.is_some() {
            let c = context.ok_or_else(|| {
                Error::Contract("language routing needs context tokens (use a null-context sentinel)".into())
            })?;
            let sv = self.evidence_scores(tape, b, u, c)?;
            let mask_row = Tensor::from_parts(
                vec![1, self.n_experts()],
                self.evd_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            );
            let m = tape.constant(mask_row);
            let bias = tape.matmul(sv, m)?;
            logits = tape.add(logits, bias)?;
            s = Some(sv);
        }
        let mask = self.tiled_mask(Modality::Language, tape.value(u).rows());
        Ok((tape.masked_softmax(logits, 1, Some(&mask))?, s))
    }
}

fn single_row(h: &Tensor) -> Tensor {
    Tensor::from_parts(vec![1, h.numel()], h.data().to_vec())
}

fn check_width(r: &Router, h: &Tensor, op: &'static str) -> Result<()> {
    if h.numel() != r.d {
        return Err(Error::dim(op, format!("token width {} for router width {}", h.numel(), r.d)));
    }
    Ok(())
}

/// Visual routing distribution for one token.
pub fn route_visual(store: &ParamStore, r: &Router, h_v: &Tensor) -> Result<Vec<f64>> {
    check_width(r, h_v, "route_visual")?;
    let mut tape = Tape::new();
    let mut b = Binder::new(store, false);
    let u = tape.constant(single_row(h_v));
    let p = r.probs_visual(&mut tape, &mut b, u)?;
    Ok(tape.value(p).data().to_vec())
}

/// Evidence score of one language token against `context: [n×d]`.
pub fn evidence_score(store: &ParamStore, r: &Router, h_l: &Tensor, context: &Tensor) -> Result<f64> {
    check_width(r, h_l, "evidence_score")?;
    if context.numel() == 0 {
        return Err(Error::Contract("evidence score needs at least one context token".into()));
    }
    let mut tape = Tape::new();
    let mut b = Binder::new(store, false);
    let u = tape.constant(single_row(h_l));
    let c = tape.constant(context.clone());
    let s = r.evidence_scores(&mut tape, &mut b, u, c)?;
    Ok(tape.value(s).item())
}

/// Language routing distribution for one token and its evidence score.
pub fn route_language(store: &ParamStore, r: &Router, h_l: &Tensor, context: Option<&Tensor>) -> Result<(Vec<f64>, Option<f64>)> {
    check_width(r, h_l, "route_language")?;
    let mut tape = Tape::new();
    let mut b = Binder::new(store, false);
    let u = tape.constant(single_row(h_l));
    let c = match context {
        Some(c) if c.numel() == 0 => {
            return Err(Error::Contract("evidence score needs at least one context token".into()))
        }
        Some(c) => Some(tape.constant(c.clone())),
        None => None,
    };
    let (p, s) = r.probs_language(&mut tape, &mut b, u, c)?;
    Ok((tape.value(p).data().to_vec(), s.map(|s| tape.value(s).item())))
}

/// `softmax(logits + s·mask)`, the language routing rule with logits held fixed.
pub fn biased_distribution(logits: &[f64], s_evd: f64, evd_mask: &[bool]) -> Vec<f64> {
    let biased: Vec<f64> = logits
        .iter()
        .zip(evd_mask)
        .map(|(l, &m)| if m { l + s_evd } else { *l })
        .collect();
    crate::tensor::kernels::softmax_axis(&biased, &[biased.len()], 0, None)
}

/// Indices of the `k` largest entries (ties → lower index), in descending order.
pub(crate) fn top_k_indices(dist: &[f64], k: usize, visible: Option<&[bool]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len())
        .filter(|&i| visible.is_none_or(|v| v[i]))
        .collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Keeps the `k` most probable experts and renormalises their weights.
pub fn top_k_select(dist: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > dist.len() {
        return Err(Error::InvalidArgument(format!("k = {k} for {} experts", dist.len())));
    }
    let idx = top_k_indices(dist, k, None);
    let total: f64 = idx.iter().map(|&i| dist[i]).sum();
    if total <= 0.0 {
        return Err(Error::Contract("selected experts carry no probability".into()));
    }
    let gates = idx.iter().map(|&i| dist[i] / total).collect();
    Ok((idx, gates))
}

/// `n · Σᵢ fᵢ·Pᵢ` with `fᵢ` the top-1 share and `Pᵢ` the mean routed probability.
pub fn load_balance_loss(decisions: &[RoutingDecision], n_experts: usize) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::InvalidArgument("load balance over zero decisions".into()));
    }
    let (f, p) = balance_stats(decisions, n_experts)?;
    Ok(n_experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

/// Top-1 fractions and mean probabilities per expert.
pub fn balance_stats(decisions: &[RoutingDecision], n_experts: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut f = vec![0.0; n_experts];
    let mut p = vec![0.0; n_experts];
    for d in decisions {
        if d.probs.len() != n_experts || d.experts.is_empty() {
            return Err(Error::dim("load_balance_loss", "decision does not match expert count"));
        }
        f[d.top1()] += 1.0;
        for (acc, v) in p.iter_mut().zip(&d.probs) {
            *acc += v;
        }
    }
    let n = decisions.len() as f64;
    f.iter_mut().for_each(|v| *v /= n);
    p.iter_mut().for_each(|v| *v /= n);
    Ok((f, p))
}
