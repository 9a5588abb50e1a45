//! Measurements over attention traces: grounding and dependence ratios,
//! attention entropy, activation histograms and attention gains.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExpertKind;
use crate::error::{Error, Result};
use crate::model::AttentionTrace;
use crate::router::{Modality, RoutingDecision};

/// `a_evd / (a_evd + a_mem)`.
pub fn grounding_ratio(a_evd: f64, a_mem: f64) -> Result<f64> {
    if a_evd < 0.0 || a_mem < 0.0 {
        return Err(Error::InvalidArgument("attention masses must be ≥ 0".into()));
    }
    if a_evd + a_mem <= 0.0 {
        return Err(Error::UndefinedRatio("no attention mass".into()));
    }
    Ok(a_evd / (a_evd + a_mem))
}

/// Mean attention masses `(context, elsewhere)` from tokens routed to
/// `expert`, averaged over tokens, heads, layers and samples.
pub fn expert_attention_masses(traces: &[AttentionTrace], expert: usize) -> Result<(f64, f64)> {
    let (mut evd, mut mem, mut n) = (0.0, 0.0, 0usize);
    for t in traces {
        for layer in &t.layers {
            for d in layer.routing.iter().filter(|d| d.experts.contains(&expert)) {
                for a in &layer.attention {
                    let row = a.row(d.token);
                    let ctx: f64 = t.context.iter().map(|&j| row[j]).sum();
                    let total: f64 = row.iter().sum();
                    evd += ctx;
                    mem += total - ctx;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedRatio(format!("expert {expert} was never activated")));
    }
    Ok((evd / n as f64, mem / n as f64))
}

/// Evidence-grounding ratio of one expert.
pub fn evidence_grounding_ratio(traces: &[AttentionTrace], expert: usize) -> Result<f64> {
    let (evd, mem) = expert_attention_masses(traces, expert)?;
    grounding_ratio(evd, mem)
}

/// `(f_evd − f_mem) / (f_evd + f_mem)`.
pub fn evidence_dependence_ratio(f_evd: f64, f_mem: f64) -> Result<f64> {
    if f_evd < 0.0 || f_mem < 0.0 {
        return Err(Error::InvalidArgument("activation frequencies must be ≥ 0".into()));
    }
    if f_evd + f_mem <= 0.0 {
        return Err(Error::UndefinedRatio("expert inactive on both splits".into()));
    }
    Ok((f_evd - f_mem) / (f_evd + f_mem))
}

/// Fraction of routing decisions in which `expert` is selected.
pub fn activation_frequency(traces: &[AttentionTrace], expert: usize) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for d in traces.iter().flat_map(|t| t.layers.iter().flat_map(|l| &l.routing)) {
        total += 1;
        if d.experts.contains(&expert) {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedRatio("no routing decisions".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Natural-log entropy of one attention row.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>()
}

/// Mean row entropy over heads and query positions of `modality` at `layer`,
/// averaged over all traces.
pub fn attention_entropy(traces: &[AttentionTrace], modality: Modality, layer: usize) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in traces {
        let l = t.layers.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} beyond depth {}", t.layers.len()))
        })?;
        for a in &l.attention {
            for (i, _) in t.modalities.iter().enumerate().filter(|(_, m)| **m == modality) {
                sum += row_entropy(a.row(i));
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no {} query tokens", modality.name())));
    }
    Ok(sum / n as f64)
}

/// Least-squares line `H(l) = h0 + β·l` over layer indices `l = 0, 1, …`.
pub fn fit_entropy_slope(series: &[f64]) -> Result<(f64, f64)> {
    let n = series.len();
    if n < 2 {
        return Err(Error::InvalidArgument("line fit needs at least two layers".into()));
    }
    let nf = n as f64;
    let mean_x = (nf - 1.0) / 2.0;
    let mean_y = series.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in series.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let beta = sxy / sxx;
    Ok((mean_y - beta * mean_x, beta))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupHistogram {
    pub visual: f64,
    pub evidence: f64,
    pub shared: f64,
}

impl GroupHistogram {
    pub fn total(&self) -> f64 {
        self.visual + self.evidence + self.shared
    }
}

/// Normalised top-1 expert-group frequencies per task label.
pub fn expert_activation_histogram<'a, I>(decisions: I, kinds: &[ExpertKind]) -> Result<BTreeMap<String, GroupHistogram>>
where
    I: IntoIterator<Item = (&'a str, &'a RoutingDecision)>,
{
    let mut counts: BTreeMap<String, (GroupHistogram, usize)> = BTreeMap::new();
    for (label, d) in decisions {
        let kind = *kinds
            .get(d.top1())
            .ok_or_else(|| Error::InvalidArgument(format!("expert {} has no kind", d.top1())))?;
        let (h, n) = counts.entry(label.to_string()).or_default();
        match kind {
            ExpertKind::Visual => h.visual += 1.0,
            ExpertKind::Evidence => h.evidence += 1.0,
            ExpertKind::Hyperbolic | ExpertKind::Shared => h.shared += 1.0,
        }
        *n += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(k, (h, n))| {
            let n = n as f64;
            (
                k,
                GroupHistogram {
                    visual: h.visual / n,
                    evidence: h.evidence / n,
                    shared: h.shared / n,
                },
            )
        })
        .collect())
}

/// Mean attention mass per layer onto context and answer positions, over
/// samples, heads and all query rows.
pub fn attention_masses(traces: &[AttentionTrace]) -> Result<Vec<(f64, f64)>> {
    let depth = traces
        .first()
        .map(|t| t.layers.len())
        .ok_or_else(|| Error::InvalidArgument("no traces".into()))?;
    let mut out = vec![(0.0, 0.0); depth];
    let mut rows = vec![0usize; depth];
    for t in traces {
        if t.layers.len() != depth {
            return Err(Error::InvalidArgument("traces differ in depth".into()));
        }
        for (l, layer) in t.layers.iter().enumerate() {
            for a in &layer.attention {
                for i in 0..a.rows() {
                    let row = a.row(i);
                    out[l].0 += t.context.iter().map(|&j| row[j]).sum::<f64>();
                    out[l].1 += t.answers.iter().map(|&j| row[j]).sum::<f64>();
                    rows[l] += 1;
                }
            }
        }
    }
    for (m, n) in out.iter_mut().zip(&rows) {
        if *n > 0 {
            m.0 /= *n as f64;
            m.1 /= *n as f64;
        }
    }
    Ok(out)
}

/// Per-layer `(CAG, AAG)`: masses relative to the first layer, minus one.
pub fn attention_gains(traces: &[AttentionTrace]) -> Result<Vec<(f64, f64)>> {
    let masses = attention_masses(traces)?;
    let (c0, a0) = masses[0];
    if c0 <= 0.0 || a0 <= 0.0 {
        return Err(Error::UndefinedRatio("first-layer baseline mass is zero".into()));
    }
    Ok(masses.iter().map(|(c, a)| (c / c0 - 1.0, a / a0 - 1.0)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertDiagnostics {
    pub expert: usize,
    pub kind: ExpertKind,
    /// `None` when the expert was never activated.
    pub grounding_ratio: Option<f64>,
    /// `None` without a conflict/consistent split pair or when inactive on both.
    pub dependence_ratio: Option<f64>,
    pub context_mass: Option<f64>,
    pub other_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub experts: Vec<ExpertDiagnostics>,
    pub entropy_visual: Vec<f64>,
    pub entropy_language: Vec<f64>,
    pub entropy_fit_h0: f64,
    pub entropy_fit_beta: f64,
    pub histograms: BTreeMap<String, GroupHistogram>,
    pub cag: Vec<f64>,
    pub aag: Vec<f64>,
}

/// Traces of one labelled evaluation split.
pub struct LabelledTraces<'a> {
    pub label: &'a str,
    pub traces: &'a [AttentionTrace],
}

/// Computes the full report. `evidence` / `memory` name the splits used for
/// the dependence ratio (conflict and consistent splits of the conflict task).
pub fn diagnose(
    kinds: &[ExpertKind],
    splits: &[LabelledTraces],
    evidence: Option<&str>,
    memory: Option<&str>,
) -> Result<DiagnosticsReport> {
    let all: Vec<AttentionTrace> = splits.iter().flat_map(|s| s.traces.iter().cloned()).collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("no traces to diagnose".into()));
    }
    let find = |name: Option<&str>| name.and_then(|n| splits.iter().find(|s| s.label == n));
    let (evd_split, mem_split) = (find(evidence), find(memory));
    let mut experts = Vec::with_capacity(kinds.len());
    for (e, &kind) in kinds.iter().enumerate() {
        let masses = expert_attention_masses(&all, e).ok();
        let dependence = match (evd_split, mem_split) {
            (Some(a), Some(b)) => {
                let fe = activation_frequency(a.traces, e)?;
                let fm = activation_frequency(b.traces, e)?;
                evidence_dependence_ratio(fe, fm).ok()
            }
            _ => None,
        };
        experts.push(ExpertDiagnostics {
            expert: e,
            kind,
            grounding_ratio: masses.and_then(|(a, b)| grounding_ratio(a, b).ok()),
            dependence_ratio: dependence,
            context_mass: masses.map(|m| m.0),
            other_mass: masses.map(|m| m.1),
        });
    }
    let depth = all[0].layers.len();
    let entropy_visual = (0..depth)
        .map(|l| attention_entropy(&all, Modality::Visual, l))
        .collect::<Result<Vec<_>>>()?;
    let entropy_language = (0..depth)
        .map(|l| attention_entropy(&all, Modality::Language, l))
        .collect::<Result<Vec<_>>>()?;
    let (h0, beta) = if depth >= 2 {
        fit_entropy_slope(&entropy_language)?
    } else {
        (entropy_language[0], 0.0)
    };
    let labelled = splits.iter().flat_map(|s| {
        s.traces
            .iter()
            .flat_map(move |t| t.layers.iter().flat_map(move |l| l.routing.iter().map(move |d| (s.label, d))))
    });
    let histograms = expert_activation_histogram(labelled, kinds)?;
    let gains = attention_gains(&all)?;
    Ok(DiagnosticsReport {
        experts,
        entropy_visual,
        entropy_language,
        entropy_fit_h0: h0,
        entropy_fit_beta: beta,
        histograms,
        cag: gains.iter().map(|g| g.0).collect(),
        aag: gains.iter().map(|g| g.1).collect(),
    })
}

impl DiagnosticsReport {
    /// Flat `section,index,key,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["section", "index", "key", "value"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        for e in &self.experts {
            let i = e.expert.to_string();
            w.write_record(["expert", &i, "kind", e.kind.name()])?;
            w.write_record(["expert", &i, "grounding_ratio", &opt(e.grounding_ratio)])?;
            w.write_record(["expert", &i, "dependence_ratio", &opt(e.dependence_ratio)])?;
        }
        for (l, (hv, hl)) in self.entropy_visual.iter().zip(&self.entropy_language).enumerate() {
            let i = l.to_string();
            w.write_record(["layer", &i, "entropy_visual", &format!("{hv:e}")])?;
            w.write_record(["layer", &i, "entropy_language", &format!("{hl:e}")])?;
            w.write_record(["layer", &i, "cag", &format!("{:e}", self.cag[l])])?;
            w.write_record(["layer", &i, "aag", &format!("{:e}", self.aag[l])])?;
        }
        w.write_record(["fit", "", "h0", &format!("{:e}", self.entropy_fit_h0)])?;
        w.write_record(["fit", "", "beta", &format!("{:e}", self.entropy_fit_beta)])?;
        for (label, h) in &self.histograms {
            w.write_record(["histogram", label, "visual", &format!("{:e}", h.visual)])?;
            w.write_record(["histogram", label, "evidence", &format!("{:e}", h.evidence)])?;
            w.write_record(["histogram", label, "shared", &format!("{:e}", h.shared)])?;
        }
        w.flush()?;
        Ok(())
    }
}
