//! Dense row-major tensors of `f64` and the numeric kernels shared by the
//! tape and the plain (non-differentiable) entry points.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tensor values must be finite, found {bad}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Construction without the finiteness scan; used by kernels whose
    /// outputs are checked by the tape in checked mode.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.len() {
        1 => Ok((1, t.shape[0])),
        2 => Ok((t.shape[0], t.shape[1])),
        _ => Err(Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape))),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    Ok(Tensor::from_parts(vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n)))
}

/// Softmax along `axis` with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    Ok(Tensor::from_parts(
        x.shape.clone(),
        kernels::softmax_axis(&x.data, &x.shape, axis, None),
    ))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape.clone(), x.data.iter().map(|&v| kernels::sigmoid(v)).collect())
}

/// Single-head scaled dot-product attention: `softmax(q kᵀ / √w) v`.
/// Returns the output together with the row-stochastic weight matrix.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (nq, w) = as_matrix(q, "scaled_dot_attention")?;
    let (nk, wk) = as_matrix(k, "scaled_dot_attention")?;
    let (nv, dv) = as_matrix(v, "scaled_dot_attention")?;
    if w != wk {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!("query width {w} vs key width {wk}"),
        ));
    }
    if nk != nv {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!("{nk} keys vs {nv} values"),
        ));
    }
    let mut scores = kernels::matmul_bt(&q.data, &k.data, nq, w, nk);
    let scale = 1.0 / (w as f64).sqrt();
    scores.iter_mut().for_each(|s| *s *= scale);
    let weights = kernels::softmax_axis(&scores, &[nq, nk], 1, None);
    let out = kernels::matmul(&weights, &v.data, nq, nk, dv);
    Ok((
        Tensor::from_parts(vec![nq, dv], out),
        Tensor::from_parts(vec![nq, nk], weights),
    ))
}

pub(crate) mod kernels {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `a[k×m]ᵀ · b[k×n]`.
    pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    /// tanh-approximated GELU.
    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    /// Iterates `(base, stride, len)` lanes of a row-major tensor along `axis`.
    pub fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * len * inner + i, inner, len)))
    }

    /// Softmax along `axis`. Entries whose mask is `false` get probability
    /// exactly zero; a lane with every entry masked yields all zeros.
    pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, mask: Option<&[bool]>) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (base, stride, len) in lanes(shape, axis) {
            let keep = |j: usize| mask.is_none_or(|m| m[base + j * stride]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                if keep(j) {
                    max = max.max(x[base + j * stride]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..len {
                if keep(j) {
                    let e = (x[base + j * stride] - max).exp();
                    out[base + j * stride] = e;
                    sum += e;
                }
            }
            for j in 0..len {
                out[base + j * stride] /= sum;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_and_annihilator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[4, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let c = 3.7;
        let p = softmax(&Tensor::vector(vec![c, c + 2f64.ln()]), 0).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_axis_zero_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 3], 5.0, &mut rng);
        let p = softmax(&x, 0).unwrap();
        for j in 0..3 {
            let s: f64 = (0..4).map(|i| p.get2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&Tensor::vector(vec![1e300, 0.0, -1e300]), 0).unwrap();
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_symmetry() {
        let s = sigmoid(&Tensor::vector(vec![0.0, 2.5, -2.5, 800.0, -800.0]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] + s.data()[2] - 1.0).abs() < 1e-15);
        assert!(s.data()[3] <= 1.0 && s.data()[4] >= 0.0);
    }

    #[test]
    fn attention_degenerate_cases() {
        let q = Tensor::matrix(1, 2, vec![0.3, -1.0]).unwrap();
        let k = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let (out, w) = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out.data(), v.data());

        let k3 = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let v3 = Tensor::zeros(&[3, 1]);
        let (_, w) = scaled_dot_attention(&q, &k3, &v3).unwrap();
        for x in w.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_two_by_three_by_hand() {
        // 2 queries, 3 keys, width 2.
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, -0.5]).unwrap();
        let k = Tensor::matrix(3, 2, vec![1.0, 1.0, 0.0, 2.0, -1.0, 0.5]).unwrap();
        let v = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let (out, w) = scaled_dot_attention(&q, &k, &v).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let rows = [
            [1.0 * s, 0.0 * s, -1.0 * s],
            [0.0 * s, -1.0 * s, -0.75 * s],
        ];
        for (i, r) in rows.iter().enumerate() {
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            let p: Vec<f64> = r.iter().map(|x| x.exp() / z).collect();
            for j in 0..3 {
                assert!((w.get2(i, j) - p[j]).abs() < 1e-12);
            }
            let o0 = p[0] * 1.0 + p[2] * 2.0;
            let o1 = p[1] * 1.0 + p[2] * 2.0;
            assert!((out.get2(i, 0) - o0).abs() < 1e-12);
            assert!((out.get2(i, 1) - o1).abs() < 1e-12);
        }
        let bad = Tensor::zeros(&[3, 3]);
        assert!(scaled_dot_attention(&q, &bad, &v).is_err());
    }
}
