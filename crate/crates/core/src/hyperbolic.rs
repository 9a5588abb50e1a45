//! Lorentz-model hyperbolic geometry.
//!
//! Points live on the upper sheet of `⟨x,x⟩_L = −1/c` with the time
//! coordinate first. The public functions validate their inputs; the
//! `raw` kernels work on plain coordinate slices and also return analytic
//! gradients so the tape can reuse them.

use crate::error::{Error, Result};

pub const DEFAULT_CURVATURE: f64 = 1.0;
pub const DEFAULT_MAX_NORM: f64 = 10.0;
pub const DEFAULT_CONE_K: f64 = 0.1;
pub const HYPERBOLOID_TOL: f64 = 1e-9;

/// Lower clamp on the arcosh argument in the angle formulas.
const ARCOSH_MIN: f64 = 1.0 + 1e-15;
const DEGENERATE_EPS: f64 = 1e-10;

/// Minkowski bilinear form `−x₀y₀ + Σ xᵢyᵢ`.
pub fn minkowski(x: &[f64], y: &[f64]) -> f64 {
    -x[0] * y[0] + x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum::<f64>()
}

/// Residual tolerance for the hyperboloid constraint. `−x₀² + ‖x_s‖²` cancels
/// two terms of size `x₀²`, so the absolute tolerance is widened by that
/// magnitude once it exceeds one.
pub fn constraint_tolerance(x0: f64, c: f64) -> f64 {
    HYPERBOLOID_TOL * (c * x0 * x0).max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
    curvature: f64,
}

impl LorentzPoint {
    pub fn new(coords: Vec<f64>, curvature: f64) -> Result<Self> {
        check_curvature(curvature)?;
        if coords.len() < 2 {
            return Err(Error::Geometry("a Lorentz point needs d ≥ 1 space coordinates".into()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("non-finite coordinates".into()));
        }
        let residual = minkowski(&coords, &coords) + 1.0 / curvature;
        if residual.abs() > constraint_tolerance(coords[0], curvature) {
            return Err(Error::Geometry(format!(
                "point is off the hyperboloid (residual {residual:e})"
            )));
        }
        if coords[0] < 1.0 / curvature.sqrt() - HYPERBOLOID_TOL {
            return Err(Error::Geometry("point is on the lower sheet".into()));
        }
        Ok(LorentzPoint { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: f64) -> Self {
        let mut coords = vec![0.0; dim + 1];
        coords[0] = 1.0 / curvature.sqrt();
        LorentzPoint { coords, curvature }
    }

    /// Lifts space coordinates onto the hyperboloid by solving for `x₀`.
    pub fn from_space(space: &[f64], curvature: f64) -> Result<Self> {
        check_curvature(curvature)?;
        let s2: f64 = space.iter().map(|v| v * v).sum();
        let mut coords = Vec::with_capacity(space.len() + 1);
        coords.push((1.0 / curvature + s2).sqrt());
        coords.extend_from_slice(space);
        LorentzPoint::new(coords, curvature)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn time(&self) -> f64 {
        self.coords[0]
    }

    pub fn space(&self) -> &[f64] {
        &self.coords[1..]
    }

    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    pub fn space_norm(&self) -> f64 {
        norm(self.space())
    }

    /// `⟨x,x⟩_L + 1/c`; zero on the manifold.
    pub fn constraint_residual(&self) -> f64 {
        minkowski(&self.coords, &self.coords) + 1.0 / self.curvature
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    base: LorentzPoint,
}

impl TangentVector {
    pub fn new(coords: Vec<f64>, base: LorentzPoint) -> Result<Self> {
        if coords.len() != base.coords.len() {
            return Err(Error::dim(
                "tangent_vector",
                format!("{} coords at a {}-dim base", coords.len(), base.coords.len()),
            ));
        }
        let scale = base.time() * coords.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let ip = minkowski(&coords, &base.coords);
        if ip.abs() > HYPERBOLOID_TOL * scale.max(1.0) {
            return Err(Error::Geometry(format!(
                "vector is not tangent at its base point (⟨v,p⟩ = {ip:e})"
            )));
        }
        Ok(TangentVector { coords, base })
    }

    /// Embeds a Euclidean vector as a tangent vector at the origin.
    pub fn at_origin(v: &[f64], curvature: f64) -> Self {
        let mut coords = Vec::with_capacity(v.len() + 1);
        coords.push(0.0);
        coords.extend_from_slice(v);
        TangentVector {
            coords,
            base: LorentzPoint::origin(v.len(), curvature),
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn base(&self) -> &LorentzPoint {
        &self.base
    }

    /// Lorentzian norm `√⟨v,v⟩_L` (tangent vectors are spacelike).
    pub fn norm(&self) -> f64 {
        minkowski(&self.coords, &self.coords).max(0.0).sqrt()
    }
}

fn check_curvature(c: f64) -> Result<()> {
    if c.is_finite() && c > 0.0 {
        Ok(())
    } else {
        Err(Error::Geometry(format!("curvature must be positive, got {c}")))
    }
}

fn check_pair(x: &LorentzPoint, y: &LorentzPoint) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::dim("lorentz", format!("dimension {} vs {}", x.dim(), y.dim())));
    }
    if x.curvature != y.curvature {
        return Err(Error::Geometry(format!(
            "curvature mismatch: {} vs {}",
            x.curvature, y.curvature
        )));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn lorentz_inner(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    check_pair(x, y)?;
    Ok(minkowski(&x.coords, &y.coords))
}

/// Exponential map at the origin with the default tangent-norm clip.
pub fn exp_map_origin(v: &[f64], curvature: f64) -> Result<LorentzPoint> {
    exp_map_origin_clipped(v, curvature, DEFAULT_MAX_NORM)
}

pub fn exp_map_origin_clipped(v: &[f64], curvature: f64, max_norm: f64) -> Result<LorentzPoint> {
    check_curvature(curvature)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("tangent vector must be finite".into()));
    }
    Ok(LorentzPoint {
        coords: raw::exp0(v, curvature, max_norm),
        curvature,
    })
}

pub fn log_map_origin(x: &LorentzPoint) -> Result<Vec<f64>> {
    // re-validate: the point may have been built before a caller mutated it
    LorentzPoint::new(x.coords.clone(), x.curvature)?;
    Ok(raw::log0(&x.coords, x.curvature))
}

/// Exponential map at an arbitrary base point.
pub fn exp_map(v: &TangentVector) -> LorentzPoint {
    let c = v.base.curvature;
    let n = v.norm();
    let r = c.sqrt() * n;
    let coords = v
        .base
        .coords
        .iter()
        .zip(&v.coords)
        .map(|(p, w)| r.cosh() * p + raw::sinhc(r) * w)
        .collect();
    LorentzPoint { coords, curvature: c }
}

/// Logarithmic map at `base`, the inverse of [`exp_map`].
pub fn log_map(base: &LorentzPoint, x: &LorentzPoint) -> Result<TangentVector> {
    check_pair(base, x)?;
    let c = base.curvature;
    let ip = minkowski(&base.coords, &x.coords);
    let proj: Vec<f64> = x
        .coords
        .iter()
        .zip(&base.coords)
        .map(|(xi, pi)| xi + c * ip * pi)
        .collect();
    let pn = minkowski(&proj, &proj).max(0.0).sqrt();
    let d = lorentz_distance(base, x)?;
    let coords = if pn < 1e-300 {
        vec![0.0; proj.len()]
    } else {
        proj.iter().map(|w| d * w / pn).collect()
    };
    Ok(TangentVector {
        coords,
        base: base.clone(),
    })
}

pub fn lorentz_distance(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    check_pair(x, y)?;
    Ok(raw::distance(&x.coords, &y.coords, x.curvature))
}

/// Angle at apex `v` between the outward extension of the geodesic
/// origin→v and the geodesic v→t, in `[0, π]`.
pub fn exterior_angle(v: &LorentzPoint, t: &LorentzPoint) -> Result<f64> {
    check_pair(v, t)?;
    raw::exterior_angle(&v.coords, &t.coords, v.curvature)
        .map(|(ea, _, _)| ea)
        .ok_or_else(|| Error::Geometry("exterior angle undefined: apex at origin or v = t".into()))
}

/// Half-aperture `arcsin(2K / (√c ‖v_space‖))` of the entailment cone at `v`.
pub fn half_aperture(v: &LorentzPoint, cone_k: f64) -> Result<f64> {
    let arg = aperture_arg(v.space_norm(), v.curvature, cone_k)?;
    if arg > 1.0 {
        return Err(Error::Geometry(format!(
            "point lies inside the aperture guard region (‖v_space‖ = {} < 2K/√c)",
            v.space_norm()
        )));
    }
    Ok(arg.asin())
}

fn aperture_arg(space_norm: f64, c: f64, cone_k: f64) -> Result<f64> {
    if !(cone_k > 0.0) {
        return Err(Error::InvalidArgument(format!("cone constant must be positive, got {cone_k}")));
    }
    if space_norm == 0.0 {
        return Err(Error::Geometry("cone apex at the origin".into()));
    }
    Ok(2.0 * cone_k / (c.sqrt() * space_norm))
}

/// Entailment-cone hinge `max(0, EA(v,t) − HA(v))`.
pub fn order_loss(v: &LorentzPoint, t: &LorentzPoint, cone_k: f64) -> Result<f64> {
    let ha = half_aperture(v, cone_k)?;
    let ea = exterior_angle(v, t)?;
    Ok((ea - ha).max(0.0))
}

pub(crate) mod raw {
    //! Coordinate-slice kernels. Each backward is the exact derivative of
    //! the matching forward as a function of ambient coordinates.

    use super::{minkowski, ARCOSH_MIN, DEGENERATE_EPS};

    /// `sinh(r)/r`.
    pub fn sinhc(r: f64) -> f64 {
        if r.abs() < 1e-4 {
            1.0 + r * r / 6.0
        } else {
            r.sinh() / r
        }
    }

    /// `(r cosh r − sinh r)/r³`, the radial derivative factor of `sinhc`.
    fn sinhc_q(r: f64) -> f64 {
        if r.abs() < 1e-3 {
            1.0 / 3.0 + r * r / 30.0
        } else {
            (r * r.cosh() - r.sinh()) / (r * r * r)
        }
    }

    /// `asinh(ρ)/ρ`.
    fn asinhc(rho: f64) -> f64 {
        if rho.abs() < 1e-4 {
            1.0 - rho * rho / 6.0
        } else {
            rho.asinh() / rho
        }
    }

    /// `(ρ/√(1+ρ²) − asinh ρ)/ρ³`.
    fn asinhc_q(rho: f64) -> f64 {
        if rho.abs() < 1e-3 {
            -1.0 / 3.0 + 0.3 * rho * rho
        } else {
            (rho / (1.0 + rho * rho).sqrt() - rho.asinh()) / (rho * rho * rho)
        }
    }

    /// `arcosh(1 + u)` without forming `1 + u`.
    pub fn acosh1p(u: f64) -> f64 {
        (u + (u * (2.0 + u)).sqrt()).ln_1p()
    }

    fn clip_factor(n: f64, max_norm: f64) -> f64 {
        if n > max_norm {
            max_norm / n
        } else {
            1.0
        }
    }

    pub fn exp0(v: &[f64], c: f64, max_norm: f64) -> Vec<f64> {
        let n0 = super::norm(v);
        let s = clip_factor(n0, max_norm);
        let n = n0 * s;
        let r = c.sqrt() * n;
        let f = sinhc(r) * s;
        let mut out = Vec::with_capacity(v.len() + 1);
        out.push(r.cosh() / c.sqrt());
        out.extend(v.iter().map(|x| f * x));
        out
    }

    pub fn exp0_backward(v: &[f64], c: f64, max_norm: f64, g: &[f64]) -> Vec<f64> {
        let n0 = super::norm(v);
        let s = clip_factor(n0, max_norm);
        let vc: Vec<f64> = v.iter().map(|x| x * s).collect();
        let r = c.sqrt() * n0 * s;
        let (g0, gs) = (g[0], &g[1..]);
        let gdotv: f64 = gs.iter().zip(&vc).map(|(a, b)| a * b).sum();
        let sc = sinhc(r);
        let coef = c * sinhc_q(r) * gdotv + g0 * c.sqrt() * sc;
        let gc: Vec<f64> = gs.iter().zip(&vc).map(|(gi, vi)| sc * gi + coef * vi).collect();
        if s == 1.0 {
            return gc;
        }
        // through v ↦ v·M/‖v‖
        let vhat: Vec<f64> = v.iter().map(|x| x / n0).collect();
        let proj: f64 = gc.iter().zip(&vhat).map(|(a, b)| a * b).sum();
        gc.iter().zip(&vhat).map(|(gi, hi)| s * (gi - hi * proj)).collect()
    }

    /// Log map at the origin, expressed through the space coordinates only.
    pub fn log0(x: &[f64], c: f64) -> Vec<f64> {
        let xs = &x[1..];
        let rho = c.sqrt() * super::norm(xs);
        let g = asinhc(rho);
        xs.iter().map(|v| g * v).collect()
    }

    /// Gradient w.r.t. all `d+1` coordinates (the time slot receives zero).
    pub fn log0_backward(x: &[f64], c: f64, g: &[f64]) -> Vec<f64> {
        let xs = &x[1..];
        let rho = c.sqrt() * super::norm(xs);
        let a = asinhc(rho);
        let q = c * asinhc_q(rho);
        let gdotx: f64 = g.iter().zip(xs).map(|(a, b)| a * b).sum();
        let mut out = Vec::with_capacity(x.len());
        out.push(0.0);
        out.extend(g.iter().zip(xs).map(|(gi, xi)| a * gi + q * gdotx * xi));
        out
    }

    /// `u = (c/2)·⟨x−y, x−y⟩_L`, so that `−c⟨x,y⟩ = 1 + u` on the manifold.
    fn half_gap(x: &[f64], y: &[f64], c: f64) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        (0.5 * c * minkowski(&diff, &diff), diff)
    }

    pub fn distance(x: &[f64], y: &[f64], c: f64) -> f64 {
        let (u, _) = half_gap(x, y, c);
        acosh1p(u.max(0.0)) / c.sqrt()
    }

    pub fn distance_sq(x: &[f64], y: &[f64], c: f64) -> f64 {
        let d = distance(x, y, c);
        d * d
    }

    pub fn distance_sq_backward(x: &[f64], y: &[f64], c: f64, g: f64) -> (Vec<f64>, Vec<f64>) {
        let (u, diff) = half_gap(x, y, c);
        if u <= 0.0 {
            // clamped region: d ≡ 0 locally
            let mut gx = vec![0.0; x.len()];
            // one-sided limit of the derivative, 2/c · c·J(x−y) = 2·J(x−y)
            for (i, w) in diff.iter().enumerate() {
                gx[i] = g * 2.0 * if i == 0 { -w } else { *w };
            }
            let gy = gx.iter().map(|v| -v).collect();
            return (gx, gy);
        }
        let ratio = if u < 1e-12 {
            1.0 - u / 3.0
        } else {
            acosh1p(u) / (u * (2.0 + u)).sqrt()
        };
        let dd_du = 2.0 * ratio / c;
        let gx: Vec<f64> = diff
            .iter()
            .enumerate()
            .map(|(i, w)| g * dd_du * c * if i == 0 { -w } else { *w })
            .collect();
        let gy = gx.iter().map(|v| -v).collect();
        (gx, gy)
    }

    /// Exterior angle at `v` and its gradients w.r.t. `v` and `t`.
    /// `None` when the apex sits at the origin or `t` coincides with `v`.
    pub fn exterior_angle(v: &[f64], t: &[f64], c: f64) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let vs = &v[1..];
        let s = super::norm(vs);
        let p = minkowski(v, t);
        let diff: Vec<f64> = v.iter().zip(t).map(|(a, b)| a - b).collect();
        let u = (0.5 * c * minkowski(&diff, &diff)).max(0.0);
        if s < DEGENERATE_EPS || (u * (u + 2.0)).sqrt() < DEGENERATE_EPS {
            return None;
        }
        let z_raw = -c * p;
        let z = z_raw.max(ARCOSH_MIN);
        let r = (z * z - 1.0).sqrt();
        let num = t[0] + c * v[0] * p;
        let q = num / (s * r);
        let qc = q.clamp(-1.0, 1.0);
        let ea = qc.acos();

        let dea_dq = if q.abs() < 1.0 {
            -1.0 / (1.0 - q * q).sqrt()
        } else {
            0.0
        };
        let dr_dp = if z_raw > ARCOSH_MIN { -c * z / r } else { 0.0 };
        let dq_dp = c * v[0] / (s * r) - q / r * dr_dp;
        let dq_dn = 1.0 / (s * r);
        let mut gv = vec![0.0; v.len()];
        let mut gt = vec![0.0; t.len()];
        // P = ⟨v,t⟩_L: ∂P/∂v = J t, ∂P/∂t = J v
        for i in 0..v.len() {
            let jt = if i == 0 { -t[i] } else { t[i] };
            let jv = if i == 0 { -v[i] } else { v[i] };
            gv[i] = dea_dq * dq_dp * jt;
            gt[i] = dea_dq * dq_dp * jv;
        }
        gv[0] += dea_dq * dq_dn * c * p;
        gt[0] += dea_dq * dq_dn;
        for i in 1..v.len() {
            gv[i] += dea_dq * (-q / s) * (v[i] / s);
        }
        Some((ea, gv, gt))
    }

    /// Half-aperture with the arcsin argument clamped to 1 inside the guard
    /// region (zero gradient there). Gradient is w.r.t. `v`.
    pub fn half_aperture_clamped(v: &[f64], c: f64, cone_k: f64) -> (f64, Vec<f64>) {
        let vs = &v[1..];
        let s = super::norm(vs);
        let w = 2.0 * cone_k / (c.sqrt() * s);
        let mut g = vec![0.0; v.len()];
        if w >= 1.0 {
            return (std::f64::consts::FRAC_PI_2, g);
        }
        let dha_ds = -w / (s * (1.0 - w * w).sqrt());
        for i in 1..v.len() {
            g[i] = dha_ds * v[i] / s;
        }
        (w.asin(), g)
    }

    /// Hinge value and gradients. Degenerate configurations contribute
    /// nothing.
    pub fn order_loss(v: &[f64], t: &[f64], c: f64, cone_k: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let zeros = || (0.0, vec![0.0; v.len()], vec![0.0; t.len()]);
        let Some((ea, gv_ea, gt_ea)) = exterior_angle(v, t, c) else {
            return zeros();
        };
        let (ha, gv_ha) = half_aperture_clamped(v, c, cone_k);
        let loss = ea - ha;
        if loss <= 0.0 {
            return zeros();
        }
        let gv = gv_ea.iter().zip(&gv_ha).map(|(a, b)| a - b).collect();
        (loss, gv, gt_ea)
    }
}
