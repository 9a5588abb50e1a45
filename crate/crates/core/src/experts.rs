//! Expert networks: plain FFN experts, evidence-priority language experts and
//! hyperbolic inter-modality experts.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{Activation, ExpertKind};
use crate::error::{Error, Result};
use crate::hyperbolic::{self, raw};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Curvature, clip radius and cone constant shared by the hyperbolic pieces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub curvature: f64,
    pub max_norm: f64,
    pub cone_k: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            curvature: hyperbolic::DEFAULT_CURVATURE,
            max_norm: hyperbolic::DEFAULT_MAX_NORM,
            cone_k: hyperbolic::DEFAULT_CONE_K,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FfnExpert {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub activation: Activation,
    pub d_in: usize,
    pub d_out: usize,
}

impl FfnExpert {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_ff: usize,
        d_out: usize,
        activation: Activation,
        std: f64,
        rng: &mut R,
    ) -> Self {
        FfnExpert {
            w_in: store.matrix(format!("{name}.w_in"), d_in, d_ff, std, rng),
            b_in: store.filled(format!("{name}.b_in"), &[d_ff], 0.0),
            w_out: store.matrix(format!("{name}.w_out"), d_ff, d_out, std, rng),
            b_out: store.filled(format!("{name}.b_out"), &[d_out], 0.0),
            activation,
            d_in,
            d_out,
        }
    }

    /// Row-wise FFN over `x: [m×d_in]`.
    pub fn apply(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.d_in {
            return Err(Error::dim(
                "ffn_forward",
                format!("input width {} for expert width {}", tape.value(x).cols(), self.d_in),
            ));
        }
        let (w_in, b_in, w_out, b_out) = (
            b.var(tape, self.w_in),
            b.var(tape, self.b_in),
            b.var(tape, self.w_out),
            b.var(tape, self.b_out),
        );
        let z = tape.matmul(x, w_in)?;
        let z = tape.add_row(z, b_in)?;
        let a = match self.activation {
            Activation::Gelu => tape.gelu(z)?,
            Activation::Relu => tape.relu(z)?,
            Activation::Linear => z,
        };
        let y = tape.matmul(a, w_out)?;
        tape.add_row(y, b_out)
    }
}

/// `α·F_mem(h) + (1−α)·F_evd(h, c)` with `α = σ(alpha_logit)`.
#[derive(Clone, Debug)]
pub struct EvidencePriorityExpert {
    pub mem: FfnExpert,
    /// Consumes `[h ‖ c]`, width `2d`.
    pub evd: FfnExpert,
    pub alpha_logit: ParamId,
}

impl EvidencePriorityExpert {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ff: usize,
        activation: Activation,
        std: f64,
        frozen_alpha: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let mem = FfnExpert::new(store, &format!("{name}.mem"), d, d_ff, d, activation, std, rng);
        let evd = FfnExpert::new(store, &format!("{name}.evd"), 2 * d, d_ff, d, activation, std, rng);
        let logit = frozen_alpha.map_or(0.0, |a| (a / (1.0 - a)).ln());
        let alpha_logit = store.filled(format!("{name}.alpha_logit"), &[1], logit);
        if frozen_alpha.is_some() {
            store.get_mut(alpha_logit).trainable = false;
        }
        EvidencePriorityExpert { mem, evd, alpha_logit }
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        crate::tensor::kernels::sigmoid(store.value(self.alpha_logit).item())
    }

    /// `x: [m×d]`, `c: [1×d]` pooled context.
    pub fn apply(&self, tape: &mut Tape, b: &mut Binder, x: Var, c: Var) -> Result<Var> {
        let m = tape.value(x).rows();
        if tape.value(c).numel() != self.mem.d_in {
            return Err(Error::dim("evidence_priority_forward", "context width differs from model width"));
        }
        let mem = self.mem.apply(tape, b, x)?;
        let c_rows = tape.repeat_rows(c, m)?;
        let hc = tape.concat_cols(&[x, c_rows])?;
        let evd = self.evd.apply(tape, b, hc)?;
        let logit = b.var(tape, self.alpha_logit);
        let alpha = tape.sigmoid(logit)?;
        let neg = tape.scale(logit, -1.0)?;
        let one_minus = tape.sigmoid(neg)?;
        let a = tape.scale_by(mem, alpha)?;
        let e = tape.scale_by(evd, one_minus)?;
        tape.add(a, e)
    }
}

/// Lift to the hyperboloid, map back to the tangent space at the origin and
/// apply an FFN there.
#[derive(Clone, Debug)]
pub struct HyperbolicExpert {
    pub ffn: FfnExpert,
    pub geometry: Geometry,
}

impl HyperbolicExpert {
    pub fn lift(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.exp_map_origin(x, self.geometry.curvature, self.geometry.max_norm)
    }

    pub fn apply(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        let p = self.lift(tape, x)?;
        let t = tape.log_map_origin(p, self.geometry.curvature)?;
        self.ffn.apply(tape, b, t)
    }
}

#[derive(Clone, Debug)]
pub enum Expert {
    Visual(FfnExpert),
    Shared(FfnExpert),
    Evidence(EvidencePriorityExpert),
    Hyperbolic(HyperbolicExpert),
}

impl Expert {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        kind: ExpertKind,
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ff: usize,
        activation: Activation,
        std: f64,
        geometry: Geometry,
        frozen_alpha: Option<f64>,
        rng: &mut R,
    ) -> Self {
        match kind {
            ExpertKind::Visual => Expert::Visual(FfnExpert::new(store, name, d, d_ff, d, activation, std, rng)),
            ExpertKind::Shared => Expert::Shared(FfnExpert::new(store, name, d, d_ff, d, activation, std, rng)),
            ExpertKind::Evidence => Expert::Evidence(EvidencePriorityExpert::new(
                store,
                name,
                d,
                d_ff,
                activation,
                std,
                frozen_alpha,
                rng,
            )),
            ExpertKind::Hyperbolic => Expert::Hyperbolic(HyperbolicExpert {
                ffn: FfnExpert::new(store, name, d, d_ff, d, activation, std, rng),
                geometry,
            }),
        }
    }

    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::Visual(_) => ExpertKind::Visual,
            Expert::Shared(_) => ExpertKind::Shared,
            Expert::Evidence(_) => ExpertKind::Evidence,
            Expert::Hyperbolic(_) => ExpertKind::Hyperbolic,
        }
    }

    /// Applies the expert to rows `x`; `context` is the pooled context row
    /// required by evidence-priority experts.
    pub fn apply(&self, tape: &mut Tape, b: &mut Binder, x: Var, context: Option<Var>) -> Result<Var> {
        match self {
            Expert::Visual(f) | Expert::Shared(f) => f.apply(tape, b, x),
            Expert::Hyperbolic(h) => h.apply(tape, b, x),
            Expert::Evidence(e) => {
                let c = context.ok_or_else(|| {
                    Error::Contract("evidence-priority expert needs a pooled context".into())
                })?;
                e.apply(tape, b, x, c)
            }
        }
    }
}

fn as_rows(h: &Tensor) -> Tensor {
    if h.shape().len() == 1 {
        Tensor::from_parts(vec![1, h.numel()], h.data().to_vec())
    } else {
        h.clone()
    }
}

fn restore_shape(like: &Tensor, out: Tensor) -> Tensor {
    if like.shape().len() == 1 {
        Tensor::from_parts(vec![out.numel()], out.into_data())
    } else {
        out
    }
}

/// Evaluates an FFN expert on `h` (`[d]` or `[n×d]`).
pub fn ffn_forward(store: &ParamStore, e: &FfnExpert, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut b = Binder::new(store, false);
    let x = tape.constant(as_rows(h));
    let y = e.apply(&mut tape, &mut b, x)?;
    Ok(restore_shape(h, tape.value(y).clone()))
}

pub fn evidence_priority_forward(store: &ParamStore, e: &EvidencePriorityExpert, h: &Tensor, c: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut b = Binder::new(store, false);
    let x = tape.constant(as_rows(h));
    let cv = tape.constant(as_rows(c));
    let y = e.apply(&mut tape, &mut b, x, cv)?;
    Ok(restore_shape(h, tape.value(y).clone()))
}

pub fn hyperbolic_expert_forward(store: &ParamStore, e: &HyperbolicExpert, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut b = Binder::new(store, false);
    let x = tape.constant(as_rows(h));
    let y = e.apply(&mut tape, &mut b, x)?;
    Ok(restore_shape(h, tape.value(y).clone()))
}

/// Squared Lorentzian distance between the lifts of a pooled visual
/// representation and a pooled evidence-conditioned language representation.
pub fn cross_modal_alignment(xv: &Tensor, xl: &Tensor, geometry: Geometry) -> Result<f64> {
    if xv.numel() != xl.numel() {
        return Err(Error::dim("cross_modal_alignment", "representations differ in width"));
    }
    let v = raw::exp0(xv.data(), geometry.curvature, geometry.max_norm);
    let t = raw::exp0(xl.data(), geometry.curvature, geometry.max_norm);
    Ok(raw::distance_sq(&v, &t, geometry.curvature))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_ffn_outputs_zero() {
        let mut s = ParamStore::new();
        let e = FfnExpert::new(&mut s, "e", 4, 8, 4, Activation::Gelu, 0.0, &mut rng());
        let h = Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]);
        assert!(ffn_forward(&s, &e, &h).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_slices_reproduce_input() {
        let mut s = ParamStore::new();
        let e = FfnExpert::new(&mut s, "e", 3, 5, 3, Activation::Linear, 0.0, &mut rng());
        for i in 0..3 {
            s.value_mut(e.w_in).data_mut()[i * 5 + i] = 1.0;
            s.value_mut(e.w_out).data_mut()[i * 3 + i] = 1.0;
        }
        let h = Tensor::vector(vec![0.3, -1.2, 2.5]);
        assert_eq!(ffn_forward(&s, &e, &h).unwrap().data(), h.data());
    }

    #[test]
    fn ffn_matches_two_loop_oracle() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let e = FfnExpert::new(&mut s, "e", 5, 7, 5, Activation::Gelu, 0.5, &mut r);
        for p in [e.b_in, e.b_out] {
            *s.value_mut(p) = Tensor::randn(s.value(p).shape(), 0.3, &mut r);
        }
        let h = Tensor::randn(&[5], 1.0, &mut r);
        let (wi, bi, wo, bo) = (s.value(e.w_in), s.value(e.b_in), s.value(e.w_out), s.value(e.b_out));
        let mut hidden = [0.0; 7];
        for j in 0..7 {
            let mut z = bi.data()[j];
            for i in 0..5 {
                z += h.data()[i] * wi.get2(i, j);
            }
            hidden[j] = crate::tensor::kernels::gelu(z);
        }
        let got = ffn_forward(&s, &e, &h).unwrap();
        for o in 0..5 {
            let mut y = bo.data()[o];
            for j in 0..7 {
                y += hidden[j] * wo.get2(j, o);
            }
            assert!((got.data()[o] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_width_mismatch_errors() {
        let mut s = ParamStore::new();
        let e = FfnExpert::new(&mut s, "e", 4, 8, 4, Activation::Gelu, 0.1, &mut rng());
        assert!(matches!(
            ffn_forward(&s, &e, &Tensor::zeros(&[3])),
            Err(Error::Dimension { .. })
        ));
    }

    fn evidence_fixture() -> (ParamStore, EvidencePriorityExpert, Tensor, Tensor) {
        let mut r = rng();
        let mut s = ParamStore::new();
        let e = EvidencePriorityExpert::new(&mut s, "evd", 4, 6, Activation::Gelu, 0.6, None, &mut r);
        let h = Tensor::randn(&[4], 1.0, &mut r);
        let c = Tensor::randn(&[4], 1.0, &mut r);
        (s, e, h, c)
    }

    fn branches(s: &ParamStore, e: &EvidencePriorityExpert, h: &Tensor, c: &Tensor) -> (Tensor, Tensor) {
        let mem = ffn_forward(s, &e.mem, h).unwrap();
        let hc = Tensor::vector(h.data().iter().chain(c.data()).copied().collect());
        let evd = ffn_forward(s, &e.evd, &hc).unwrap();
        (mem, evd)
    }

    fn set_alpha(s: &mut ParamStore, e: &EvidencePriorityExpert, alpha: f64) {
        s.value_mut(e.alpha_logit).data_mut()[0] = (alpha / (1.0 - alpha)).ln();
    }

    #[test]
    fn evidence_initialises_at_half() {
        let (s, e, _, _) = evidence_fixture();
        assert_eq!(e.alpha(&s), 0.5);
    }

    #[test]
    fn evidence_endpoints() {
        let (mut s, e, h, c) = evidence_fixture();
        let (mem, evd) = branches(&s, &e, &h, &c);
        set_alpha(&mut s, &e, 1.0 - 1e-9);
        assert!(evidence_priority_forward(&s, &e, &h, &c).unwrap().max_abs_diff(&mem) < 1e-6);
        set_alpha(&mut s, &e, 1e-9);
        assert!(evidence_priority_forward(&s, &e, &h, &c).unwrap().max_abs_diff(&evd) < 1e-6);
    }

    #[test]
    fn evidence_is_affine_in_alpha() {
        let (mut s, e, h, c) = evidence_fixture();
        let (mem, evd) = branches(&s, &e, &h, &c);
        for alpha in [0.25, 0.5, 0.75] {
            set_alpha(&mut s, &e, alpha);
            let out = evidence_priority_forward(&s, &e, &h, &c).unwrap();
            let exact = e.alpha(&s);
            for i in 0..4 {
                let want = exact * mem.data()[i] + (1.0 - exact) * evd.data()[i];
                assert!((out.data()[i] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_branches_make_alpha_irrelevant() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let e = EvidencePriorityExpert::new(&mut s, "evd", 3, 4, Activation::Gelu, 0.0, None, &mut r);
        // both branches ignore the context half and share weights
        let wi = Tensor::randn(&[3, 4], 0.7, &mut r);
        let wo = Tensor::randn(&[4, 3], 0.7, &mut r);
        *s.value_mut(e.mem.w_in) = wi.clone();
        *s.value_mut(e.mem.w_out) = wo.clone();
        let mut wide = vec![0.0; 24];
        wide[..12].copy_from_slice(wi.data());
        *s.value_mut(e.evd.w_in) = Tensor::new(vec![6, 4], wide).unwrap();
        *s.value_mut(e.evd.w_out) = wo;
        let h = Tensor::randn(&[3], 1.0, &mut r);
        let c = Tensor::randn(&[3], 1.0, &mut r);
        set_alpha(&mut s, &e, 0.2);
        let a = evidence_priority_forward(&s, &e, &h, &c).unwrap();
        set_alpha(&mut s, &e, 0.9);
        let b = evidence_priority_forward(&s, &e, &h, &c).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn frozen_alpha_is_not_trainable() {
        let mut s = ParamStore::new();
        let e = EvidencePriorityExpert::new(&mut s, "evd", 2, 2, Activation::Gelu, 0.1, Some(0.3), &mut rng());
        assert!((e.alpha(&s) - 0.3).abs() < 1e-15);
        assert!(!s.get(e.alpha_logit).trainable);
    }

    #[test]
    fn hyperbolic_with_zero_ffn_is_round_trip_identity() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let ffn = FfnExpert::new(&mut s, "hyp", 4, 4, 4, Activation::Linear, 0.0, &mut r);
        for i in 0..4 {
            s.value_mut(ffn.w_in).data_mut()[i * 4 + i] = 1.0;
            s.value_mut(ffn.w_out).data_mut()[i * 4 + i] = 1.0;
        }
        let e = HyperbolicExpert {
            ffn,
            geometry: Geometry::default(),
        };
        for _ in 0..50 {
            let h = Tensor::randn(&[4], 2.0, &mut r);
            let out = hyperbolic_expert_forward(&s, &e, &h).unwrap();
            assert!(out.max_abs_diff(&h) < 1e-8);
            let p = raw::exp0(h.data(), 1.0, 10.0);
            let lp = hyperbolic::LorentzPoint::new(p, 1.0).unwrap();
            assert!(lp.constraint_residual() < 1e-9);
        }
    }

    #[test]
    fn alignment_matches_manual_composition() {
        let mut r = rng();
        let g = Geometry::default();
        let a = Tensor::randn(&[3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        assert_eq!(cross_modal_alignment(&a, &a, g).unwrap(), 0.0);
        let ab = cross_modal_alignment(&a, &b, g).unwrap();
        assert_eq!(ab, cross_modal_alignment(&b, &a, g).unwrap());
        let pa = hyperbolic::exp_map_origin(a.data(), 1.0).unwrap();
        let pb = hyperbolic::exp_map_origin(b.data(), 1.0).unwrap();
        let d = hyperbolic::lorentz_distance(&pa, &pb).unwrap();
        assert!((ab - d * d).abs() < 1e-10);
    }
}
