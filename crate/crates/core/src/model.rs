//! A small pre-norm transformer whose feed-forward sublayers are AsyMoE layers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{Config, ExpertKind, Stream};
use crate::error::{Error, Result};
use crate::experts::{Expert, FfnExpert, Geometry};
use crate::params::{Binder, ParamId, ParamStore};
use crate::router::{top_k_indices, Modality, Router, RoutingDecision};
use crate::tensor::Tensor;

/// One token sequence: visual tokens first, then language tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: usize,
    pub visual: Vec<usize>,
    pub language: Vec<usize>,
    /// Positions (in the joint sequence) carrying input evidence.
    pub context: Vec<usize>,
    /// Joint positions whose outputs are classified.
    pub answers: Vec<usize>,
    /// Target language token per answer position.
    pub labels: Vec<usize>,
    /// Language tokens the answer is chosen from.
    pub candidates: Vec<usize>,
    /// Whether the language side describes part of the visual side
    /// (pairs used by the order loss).
    pub entailment: bool,
}

impl MultimodalSample {
    pub fn len(&self) -> usize {
        self.visual.len() + self.language.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self, pos: usize) -> Modality {
        if pos < self.visual.len() {
            Modality::Visual
        } else {
            Modality::Language
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        (0..self.len()).map(|p| self.modality(p)).collect()
    }

    pub fn validate(&self, cfg: &crate::config::ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("sample {}: {msg}", self.id)));
        let n = self.len();
        if self.visual.is_empty() || self.language.is_empty() {
            return bad("needs at least one visual and one language token".into());
        }
        if n > cfg.max_seq {
            return bad(format!("length {n} exceeds max_seq {}", cfg.max_seq));
        }
        if let Some(t) = self.visual.iter().find(|&&t| t >= cfg.visual_vocab) {
            return bad(format!("visual token {t} outside vocabulary"));
        }
        if let Some(t) = self.language.iter().chain(&self.candidates).find(|&&t| t >= cfg.language_vocab) {
            return bad(format!("language token {t} outside vocabulary"));
        }
        if self.answers.is_empty() || self.answers.len() != self.labels.len() {
            return bad("needs one label per answer position and at least one answer".into());
        }
        if self.answers.iter().any(|&p| p >= n || p < self.visual.len()) {
            return bad("answer positions must be language positions".into());
        }
        if self.context.iter().any(|&p| p >= n) {
            return bad("context position out of range".into());
        }
        if self.candidates.is_empty() || self.labels.iter().any(|l| !self.candidates.contains(l)) {
            return bad("labels must be among the candidates".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultimodalBatch {
    pub samples: Vec<MultimodalSample>,
}

impl MultimodalBatch {
    pub fn validate(&self, cfg: &crate::config::ModelConfig) -> Result<()> {
        self.samples.iter().try_for_each(|s| s.validate(cfg))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertContextSummary {
    pub expert: usize,
    /// Routed tokens (a token counts once per selecting decision).
    pub tokens: usize,
    /// Mean attention mass, over routed tokens and heads, on context positions.
    pub context_mass: f64,
    /// Mean mass on all other positions.
    pub other_mass: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// One `[n×n]` row-stochastic matrix per head.
    pub attention: Vec<Tensor>,
    /// Empty for dense layers.
    pub routing: Vec<RoutingDecision>,
    pub expert_context: Vec<ExpertContextSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub sample_id: usize,
    pub modalities: Vec<Modality>,
    pub context: Vec<usize>,
    pub answers: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub gain: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
}

#[derive(Clone, Debug)]
pub struct AsyMoeLayer {
    pub gain: ParamId,
    pub router: Router,
    pub experts: Vec<Expert>,
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense { gain: ParamId, ffn: FfnExpert },
    Moe(AsyMoeLayer),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attention: Attention,
    pub ffn: FeedForward,
}

/// Per-sequence positional metadata shared by the layers of one forward pass.
pub struct SeqMeta<'a> {
    pub modalities: &'a [Modality],
    pub context: &'a [usize],
}

impl SeqMeta<'_> {
    fn rows(&self, m: Modality) -> Vec<usize> {
        (0..self.modalities.len()).filter(|&i| self.modalities[i] == m).collect()
    }
}

/// Outputs of `AsyMoeLayer::forward` besides the new hidden state.
pub struct MoeOutput {
    pub hidden: Var,
    /// Differentiable load-balance term for this layer.
    pub balance: Var,
    pub decisions: Vec<RoutingDecision>,
}

impl AsyMoeLayer {
    pub fn has_evidence(&self) -> bool {
        self.experts.iter().any(|e| e.kind() == ExpertKind::Evidence)
    }

    /// `h + Σ_k g_k·E_k(norm(h))`, gates computed from `route_src` rows.
    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, h: Var, route_src: Var, meta: &SeqMeta) -> Result<MoeOutput> {
        let n = tape.value(h).rows();
        if meta.modalities.len() != n || tape.value(route_src).rows() != n {
            return Err(Error::dim(
                "moe_forward",
                format!("{} modality flags for {n} hidden rows", meta.modalities.len()),
            ));
        }
        let n_exp = self.experts.len();
        let gain = b.var(tape, self.gain);
        let u = tape.rms_norm(h, gain)?;
        let pooled = if self.has_evidence() && !meta.context.is_empty() {
            let rows = tape.gather_rows(u, meta.context)?;
            Some(tape.mean_rows(rows)?)
        } else {
            None
        };
        let ctx_route = if meta.context.is_empty() {
            None
        } else {
            Some(tape.gather_rows(route_src, meta.context)?)
        };

        let mut out = h;
        let mut decisions = Vec::with_capacity(n);
        let mut prob_sum: Option<Var> = None;
        for modality in [Modality::Visual, Modality::Language] {
            let idx = meta.rows(modality);
            if idx.is_empty() {
                continue;
            }
            let r_in = tape.gather_rows(route_src, &idx)?;
            let (probs, s_evd) = match modality {
                Modality::Visual => (self.router.probs_visual(tape, b, r_in)?, None),
                Modality::Language => self.router.probs_language(tape, b, r_in, ctx_route)?,
            };
            let k = self.router.effective_k(modality);
            let visible = self.router.visible(modality);
            let pv = tape.value(probs).clone();
            let sel: Vec<Vec<usize>> = (0..idx.len())
                .map(|r| top_k_indices(pv.row(r), k, Some(visible)))
                .collect();
            let gates = tape.top_k_gates(probs, &sel)?;
            let gv = tape.value(gates).clone();
            let sv = s_evd.map(|s| tape.value(s).clone());
            for (r, &pos) in idx.iter().enumerate() {
                decisions.push(RoutingDecision {
                    token: pos,
                    modality,
                    experts: sel[r].clone(),
                    gates: gv.row(r).to_vec(),
                    probs: pv.row(r).to_vec(),
                    s_evd: sv.as_ref().map(|s| s.data()[r]),
                });
            }

            let x = tape.gather_rows(u, &idx)?;
            for (e, expert) in self.experts.iter().enumerate() {
                let slots: Vec<(usize, usize)> = sel
                    .iter()
                    .enumerate()
                    .filter_map(|(r, s)| s.iter().position(|&x| x == e).map(|slot| (r, slot)))
                    .collect();
                if slots.is_empty() {
                    continue;
                }
                let rows: Vec<usize> = slots.iter().map(|&(r, _)| r).collect();
                let xe = tape.gather_rows(x, &rows)?;
                let ye = expert.apply(tape, b, xe, pooled)?;
                let ge = tape.gather_elems(gates, &slots)?;
                let ye = tape.scale_rows(ye, ge)?;
                let abs: Vec<usize> = rows.iter().map(|&r| idx[r]).collect();
                out = tape.scatter_add_rows(out, ye, &abs)?;
            }

            let mean = tape.mean_rows(probs)?;
            let total = tape.scale(mean, idx.len() as f64)?;
            prob_sum = Some(match prob_sum {
                Some(acc) => tape.add(acc, total)?,
                None => total,
            });
        }
        decisions.sort_by_key(|d| d.token);

        let mut f = vec![0.0; n_exp];
        for d in &decisions {
            f[d.top1()] += 1.0 / n as f64;
        }
        let fv = tape.constant(Tensor::from_parts(vec![1, n_exp], f));
        let p = prob_sum.expect("at least one token");
        let fp = tape.mul(p, fv)?;
        let s = tape.sum(fp)?;
        let balance = tape.scale(s, n_exp as f64 / n as f64)?;
        Ok(MoeOutput {
            hidden: out,
            balance,
            decisions,
        })
    }
}

impl Attention {
    /// Multi-head attention sublayer with residual; returns per-head weights when `capture`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        h: Var,
        mask: &[bool],
        capture: bool,
    ) -> Result<(Var, Var, Vec<Tensor>)> {
        let (n, d) = (tape.value(h).rows(), tape.value(h).cols());
        let dh = d / self.n_heads;
        let gain = b.var(tape, self.gain);
        let u = tape.rms_norm(h, gain)?;
        let (wq, wk, wv, wo) = (
            b.var(tape, self.wq),
            b.var(tape, self.wk),
            b.var(tape, self.wv),
            b.var(tape, self.wo),
        );
        let q = tape.matmul(u, wq)?;
        let k = tape.matmul(u, wk)?;
        let v = tape.matmul(u, wv)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::new();
        for hd in 0..self.n_heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = tape.masked_softmax(s, 1, Some(mask))?;
            if capture {
                weights.push(tape.value(a).clone());
            }
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(cat, wo)?;
        debug_assert_eq!(tape.value(o).rows(), n);
        Ok((tape.add(h, o)?, u, weights))
    }
}

/// Visual queries see visual keys; language queries see visual keys and
/// earlier-or-equal language keys.
pub fn attention_mask(n_visual: usize, n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = j < n_visual || (i >= n_visual && j <= i);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub order: f64,
    pub balance: f64,
    pub align: f64,
}

impl From<&crate::config::TrainConfig> for LossWeights {
    fn from(t: &crate::config::TrainConfig) -> Self {
        LossWeights {
            order: t.lambda_order,
            balance: t.lambda_bal,
            align: t.lambda_align,
        }
    }
}

/// The scalar loss graph of one sample plus its logged components.
pub struct SampleLoss {
    pub total: Var,
    pub task: f64,
    pub order: f64,
    pub balance: f64,
    pub align: f64,
    /// Predicted token per answer position.
    pub predictions: Vec<usize>,
}

pub struct Forward {
    /// `[answers × candidates]` logits.
    pub logits: Var,
    /// Final normalised hidden states, `[n×d]`.
    pub hidden: Var,
    /// Mean load-balance term over MoE layers, if any.
    pub balance: Option<Var>,
    pub trace: Option<AttentionTrace>,
}

#[derive(Clone, Debug)]
pub struct AsyMoeModel {
    pub config: Config,
    pub params: ParamStore,
    pub visual_embed: ParamId,
    pub language_embed: ParamId,
    pub position_embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_gain: ParamId,
    pub head: ParamId,
}

impl AsyMoeModel {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut rng = config.rng(Stream::Init);
        let m = &config.model;
        let a = &config.asymoe;
        let std = m.init_std;
        let d = m.d_model;
        let mut p = ParamStore::new();
        let visual_embed = p.matrix("embed.visual", m.visual_vocab, d, std, &mut rng);
        let language_embed = p.matrix("embed.language", m.language_vocab, d, std, &mut rng);
        let position_embed = p.matrix("embed.position", m.max_seq, d, std, &mut rng);
        let geometry = Geometry {
            curvature: a.curvature,
            max_norm: a.max_norm,
            cone_k: a.cone_k,
        };
        let mut blocks = Vec::with_capacity(m.n_layers);
        for l in 0..m.n_layers {
            let name = format!("layer{l}");
            let attention = Attention {
                gain: p.filled(format!("{name}.attn.gain"), &[d], 1.0),
                wq: p.matrix(format!("{name}.attn.wq"), d, d, std, &mut rng),
                wk: p.matrix(format!("{name}.attn.wk"), d, d, std, &mut rng),
                wv: p.matrix(format!("{name}.attn.wv"), d, d, std, &mut rng),
                wo: p.matrix(format!("{name}.attn.wo"), d, d, std, &mut rng),
                n_heads: m.n_heads,
            };
            let ffn = if l % m.moe_stride == 0 {
                let gain = p.filled(format!("{name}.moe.gain"), &[d], 1.0);
                let router = Router::new(
                    &mut p,
                    &format!("{name}.moe.router"),
                    d,
                    &a.experts,
                    a.k,
                    a.shared_router,
                    std,
                    &mut rng,
                )?;
                let experts = a
                    .experts
                    .iter()
                    .enumerate()
                    .map(|(e, &kind)| {
                        Expert::new(
                            kind,
                            &mut p,
                            &format!("{name}.moe.expert{e}"),
                            d,
                            a.d_ff,
                            a.activation,
                            std,
                            geometry,
                            a.frozen_alpha,
                            &mut rng,
                        )
                    })
                    .collect();
                FeedForward::Moe(AsyMoeLayer { gain, router, experts })
            } else {
                FeedForward::Dense {
                    gain: p.filled(format!("{name}.ffn.gain"), &[d], 1.0),
                    ffn: FfnExpert::new(&mut p, &format!("{name}.ffn"), d, a.d_ff, d, a.activation, std, &mut rng),
                }
            };
            blocks.push(Block { attention, ffn });
        }
        let final_gain = p.filled("final.gain", &[d], 1.0);
        let head = p.matrix("head", d, m.language_vocab, std, &mut rng);
        Ok(AsyMoeModel {
            config: config.clone(),
            params: p,
            visual_embed,
            language_embed,
            position_embed,
            blocks,
            final_gain,
            head,
        })
    }

    pub fn geometry(&self) -> Geometry {
        let a = &self.config.asymoe;
        Geometry {
            curvature: a.curvature,
            max_norm: a.max_norm,
            cone_k: a.cone_k,
        }
    }

    /// `(name, α)` for every evidence-priority expert, in layer order.
    pub fn alphas(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            if let FeedForward::Moe(layer) = &block.ffn {
                for (e, expert) in layer.experts.iter().enumerate() {
                    if let Expert::Evidence(ev) = expert {
                        out.push((format!("layer{l}.expert{e}"), ev.alpha(&self.params)));
                    }
                }
            }
        }
        out
    }

    pub fn expert_kinds(&self) -> Vec<ExpertKind> {
        self.config.asymoe.experts.clone()
    }

    /// Builds the forward graph of one sample on `tape`.
    pub fn forward_graph(&self, tape: &mut Tape, b: &mut Binder, s: &MultimodalSample, capture: bool) -> Result<Forward> {
        s.validate(&self.config.model)?;
        let n = s.len();
        let nv = s.visual.len();
        let d = self.config.model.d_model;
        let ve = b.var(tape, self.visual_embed);
        let le = b.var(tape, self.language_embed);
        let pe = b.var(tape, self.position_embed);
        let xv = tape.embedding(ve, &s.visual)?;
        let xl = tape.embedding(le, &s.language)?;
        let base = tape.constant(Tensor::zeros(&[n, d]));
        let h = tape.scatter_add_rows(base, xv, &(0..nv).collect::<Vec<_>>())?;
        let h = tape.scatter_add_rows(h, xl, &(nv..n).collect::<Vec<_>>())?;
        let pos: Vec<usize> = (0..n).collect();
        let p = tape.embedding(pe, &pos)?;
        let mut h = tape.add(h, p)?;

        let modalities = s.modalities();
        let meta = SeqMeta {
            modalities: &modalities,
            context: &s.context,
        };
        let mask = attention_mask(nv, n);
        let mut trace = capture.then(|| AttentionTrace {
            sample_id: s.id,
            modalities: modalities.clone(),
            context: s.context.clone(),
            answers: s.answers.clone(),
            layers: Vec::new(),
        });
        let mut balances = Vec::new();
        for block in &self.blocks {
            let (h_attn, u_pre, weights) = block.attention.forward(tape, b, h, &mask, capture)?;
            let mut routing = Vec::new();
            h = match &block.ffn {
                FeedForward::Dense { gain, ffn } => {
                    let g = b.var(tape, *gain);
                    let u = tape.rms_norm(h_attn, g)?;
                    let y = ffn.apply(tape, b, u)?;
                    tape.add(h_attn, y)?
                }
                FeedForward::Moe(layer) => {
                    let out = layer.forward(tape, b, h_attn, u_pre, &meta)?;
                    balances.push(out.balance);
                    routing = out.decisions;
                    out.hidden
                }
            };
            if let Some(t) = trace.as_mut() {
                let expert_context = match &block.ffn {
                    FeedForward::Moe(layer) => expert_context_summaries(&weights, &routing, &s.context, layer.experts.len()),
                    FeedForward::Dense { .. } => Vec::new(),
                };
                t.layers.push(LayerTrace {
                    attention: weights,
                    routing,
                    expert_context,
                });
            }
        }

        let fg = b.var(tape, self.final_gain);
        let hidden = tape.rms_norm(h, fg)?;
        let rows = tape.gather_rows(hidden, &s.answers)?;
        let head = b.var(tape, self.head);
        let full = tape.matmul(rows, head)?;
        let logits = tape.gather_cols(full, &s.candidates)?;
        let balance = match balances.len() {
            0 => None,
            1 => Some(balances[0]),
            k => {
                let mut acc = balances[0];
                for &bv in &balances[1..] {
                    acc = tape.add(acc, bv)?;
                }
                Some(tape.scale(acc, 1.0 / k as f64)?)
            }
        };
        Ok(Forward {
            logits,
            hidden,
            balance,
            trace,
        })
    }

    /// Builds `task + λ_order·order + λ_bal·balance + λ_align·align` for one sample.
    pub fn sample_loss(&self, tape: &mut Tape, b: &mut Binder, s: &MultimodalSample, w: LossWeights) -> Result<SampleLoss> {
        let fwd = self.forward_graph(tape, b, s, false)?;
        let targets: Vec<usize> = s
            .labels
            .iter()
            .map(|l| s.candidates.iter().position(|c| c == l).expect("validated"))
            .collect();
        let predictions = predict_tokens(tape.value(fwd.logits), &s.candidates);
        let task = tape.cross_entropy(fwd.logits, &targets)?;
        let mut total = task;
        let mut parts = (0.0, 0.0, 0.0);

        if let Some(bal) = fwd.balance {
            parts.1 = tape.value(bal).item();
            if w.balance > 0.0 {
                let t = tape.scale(bal, w.balance)?;
                total = tape.add(total, t)?;
            }
        }
        let need_lifts = (s.entailment && w.order > 0.0) || w.align > 0.0;
        if need_lifts || s.entailment {
            let g = self.geometry();
            let nv = s.visual.len();
            let vis = tape.gather_rows(fwd.hidden, &(0..nv).collect::<Vec<_>>())?;
            let lang = tape.gather_rows(fwd.hidden, &(nv..s.len()).collect::<Vec<_>>())?;
            let mv = tape.mean_rows(vis)?;
            let ml = tape.mean_rows(lang)?;
            let pv = tape.exp_map_origin(mv, g.curvature, g.max_norm)?;
            let pl = tape.exp_map_origin(ml, g.curvature, g.max_norm)?;
            if s.entailment {
                let o = tape.order_loss(pv, pl, g.curvature, g.cone_k)?;
                parts.0 = tape.value(o).item();
                if w.order > 0.0 {
                    let t = tape.scale(o, w.order)?;
                    total = tape.add(total, t)?;
                }
            }
            let a = tape.lorentz_distance_sq(pv, pl, g.curvature)?;
            parts.2 = tape.value(a).item();
            if w.align > 0.0 {
                let t = tape.scale(a, w.align)?;
                total = tape.add(total, t)?;
            }
        }
        Ok(SampleLoss {
            total,
            task: tape.value(task).item(),
            order: parts.0,
            balance: parts.1,
            align: parts.2,
            predictions,
        })
    }

    /// Inference: candidate logits `[answers × candidates]` and an optional trace.
    pub fn forward(&self, s: &MultimodalSample, trace: bool) -> Result<(Tensor, Option<AttentionTrace>)> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let f = self.forward_graph(&mut tape, &mut b, s, trace)?;
        Ok((tape.value(f.logits).clone(), f.trace))
    }

    pub fn predict(&self, s: &MultimodalSample) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(s, false)?;
        Ok(predict_tokens(&logits, &s.candidates))
    }
}

/// Arg-max candidate per row (ties → earlier candidate).
pub fn predict_tokens(logits: &Tensor, candidates: &[usize]) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            candidates[best]
        })
        .collect()
}

fn expert_context_summaries(
    heads: &[Tensor],
    routing: &[RoutingDecision],
    context: &[usize],
    n_experts: usize,
) -> Vec<ExpertContextSummary> {
    let mut out: Vec<ExpertContextSummary> = (0..n_experts)
        .map(|e| ExpertContextSummary {
            expert: e,
            tokens: 0,
            context_mass: 0.0,
            other_mass: 0.0,
        })
        .collect();
    for d in routing {
        let mut ctx = 0.0;
        for a in heads {
            ctx += context.iter().map(|&j| a.get2(d.token, j)).sum::<f64>();
        }
        let ctx = ctx / heads.len() as f64;
        for &e in &d.experts {
            out[e].tokens += 1;
            out[e].context_mass += ctx;
            out[e].other_mass += 1.0 - ctx;
        }
    }
    for s in &mut out {
        if s.tokens > 0 {
            s.context_mass /= s.tokens as f64;
            s.other_mass /= s.tokens as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Activation;

    fn tiny_config() -> Config {
        let mut c = Config::default();
        c.model.d_model = 8;
        c.model.n_layers = 2;
        c.model.n_heads = 2;
        c.model.max_seq = 16;
        c.model.init_std = 0.3;
        c.asymoe.d_ff = 12;
        c
    }

    pub(crate) fn sample() -> MultimodalSample {
        MultimodalSample {
            id: 0,
            visual: vec![3, 9, 1],
            language: vec![1, 12, 2, 20, 3, 12, 4],
            context: vec![4, 5, 6],
            answers: vec![9],
            labels: vec![20],
            candidates: (16..24).collect(),
            entailment: true,
        }
    }

    #[test]
    fn mask_partitions_visual_and_causal_language() {
        let m = attention_mask(2, 4);
        let row = |i: usize| m[i * 4..(i + 1) * 4].to_vec();
        assert_eq!(row(0), vec![true, true, false, false]);
        assert_eq!(row(2), vec![true, true, true, false]);
        assert_eq!(row(3), vec![true, true, true, true]);
    }

    #[test]
    fn trace_does_not_change_logits() {
        let m = AsyMoeModel::new(&tiny_config()).unwrap();
        let (a, none) = m.forward(&sample(), false).unwrap();
        let (b, t) = m.forward(&sample(), true).unwrap();
        assert!(none.is_none());
        assert_eq!(a, b);
        let t = t.unwrap();
        assert_eq!(t.layers.len(), 2);
        for layer in &t.layers {
            assert_eq!(layer.attention.len(), 2);
            for a in &layer.attention {
                for r in 0..a.rows() {
                    assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            assert_eq!(layer.routing.len(), 10);
        }
    }

    #[test]
    fn zero_experts_make_moe_identity() {
        let mut m = AsyMoeModel::new(&tiny_config()).unwrap();
        let names: Vec<String> = m
            .params
            .iter()
            .filter(|(_, p)| p.name.contains(".expert") && !p.name.ends_with("alpha_logit"))
            .map(|(_, p)| p.name.clone())
            .collect();
        for n in names {
            m.params.zero_prefix(&n);
        }
        let FeedForward::Moe(layer) = &m.blocks[0].ffn else { panic!() };
        let mut tape = Tape::new();
        let mut b = Binder::new(&m.params, false);
        let s = sample();
        let h = tape.constant(Tensor::randn(&[10, 8], 1.0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5)));
        let mods = s.modalities();
        let meta = SeqMeta {
            modalities: &mods,
            context: &s.context,
        };
        let out = layer.forward(&mut tape, &mut b, h, h, &meta).unwrap();
        assert_eq!(tape.value(out.hidden), tape.value(h));
    }

    #[test]
    fn single_expert_layer_is_a_plain_block() {
        let mut c = tiny_config();
        c.model.n_layers = 1;
        c.asymoe.experts = vec![ExpertKind::Shared];
        c.asymoe.k = 1;
        c.asymoe.activation = Activation::Gelu;
        let m = AsyMoeModel::new(&c).unwrap();
        let s = sample();
        let (logits, _) = m.forward(&s, false).unwrap();

        // hand-assembled block from the same parameters
        let p = &m.params;
        let v = |name: &str| p.value(p.id(name).unwrap()).clone();
        let n = s.len();
        let mut h = vec![0.0; n * 8];
        for (i, &t) in s.visual.iter().chain(&s.language).enumerate() {
            let table = if i < 3 { v("embed.visual") } else { v("embed.language") };
            for j in 0..8 {
                h[i * 8 + j] = table.get2(t, j) + v("embed.position").get2(i, j);
            }
        }
        let h = Tensor::matrix(n, 8, h).unwrap();
        let norm = |x: &Tensor, g: &Tensor| {
            let mut out = x.clone();
            for i in 0..x.rows() {
                let ms = x.row(i).iter().map(|a| a * a).sum::<f64>() / 8.0;
                let inv = 1.0 / (ms + 1e-6).sqrt();
                for j in 0..8 {
                    out.data_mut()[i * 8 + j] = x.get2(i, j) * inv * g.data()[j];
                }
            }
            out
        };
        let mm = |a: &Tensor, b: &Tensor| crate::tensor::matmul(a, b).unwrap();
        let u = norm(&h, &v("layer0.attn.gain"));
        let (q, k, vv) = (mm(&u, &v("layer0.attn.wq")), mm(&u, &v("layer0.attn.wk")), mm(&u, &v("layer0.attn.wv")));
        let mask = attention_mask(3, n);
        let mut cat = vec![0.0; n * 8];
        for hd in 0..2 {
            for i in 0..n {
                let mut w = vec![0.0; n];
                for j in 0..n {
                    w[j] = if mask[i * n + j] {
                        (0..4).map(|t| q.get2(i, hd * 4 + t) * k.get2(j, hd * 4 + t)).sum::<f64>() / 2.0
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = w.iter().map(|x| (x - mx).exp()).sum();
                for t in 0..4 {
                    cat[i * 8 + hd * 4 + t] = (0..n).map(|j| (w[j] - mx).exp() / z * vv.get2(j, hd * 4 + t)).sum();
                }
            }
        }
        let attn = mm(&Tensor::matrix(n, 8, cat).unwrap(), &v("layer0.attn.wo"));
        let h1 = Tensor::matrix(n, 8, h.data().iter().zip(attn.data()).map(|(a, b)| a + b).collect()).unwrap();
        let u1 = norm(&h1, &v("layer0.moe.gain"));
        let mut z = mm(&u1, &v("layer0.moe.expert0.w_in"));
        for (i, x) in z.data_mut().iter_mut().enumerate() {
            *x = crate::tensor::kernels::gelu(*x + v("layer0.moe.expert0.b_in").data()[i % 12]);
        }
        let y = mm(&z, &v("layer0.moe.expert0.w_out"));
        let h2: Vec<f64> = (0..n * 8)
            .map(|i| h1.data()[i] + y.data()[i] + v("layer0.moe.expert0.b_out").data()[i % 8])
            .collect();
        let hf = norm(&Tensor::matrix(n, 8, h2).unwrap(), &v("final.gain"));
        let head = v("head");
        for (c, &tok) in s.candidates.iter().enumerate() {
            let want: f64 = (0..8).map(|j| hf.get2(9, j) * head.get2(j, tok)).sum();
            assert!((logits.get2(0, c) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn malformed_samples_are_rejected() {
        let m = AsyMoeModel::new(&tiny_config()).unwrap();
        let mut s = sample();
        s.answers = vec![1];
        assert!(m.forward(&s, false).is_err());
        let mut s = sample();
        s.language.push(500);
        assert!(m.forward(&s, false).is_err());
        let mut s = sample();
        s.labels = vec![2];
        assert!(m.forward(&s, false).is_err());
    }
}
