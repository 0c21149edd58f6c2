//! Dense row-major `f64` tensors and the handful of kernels the attention
//! code needs: pairwise axis contraction, masked row softmax and the
//! sign-preserving power used by the power-law feature map.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};

/// Dense row-major array of 64-bit floats.
///
/// `data.len()` always equals the product of `shape`; a scalar has an empty
/// shape and one element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = GamError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor { shape: t.shape, data: t.data }
    }
}

impl Tensor {
    /// Builds a tensor, validating extents, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(GamError::Shape(format!("zero extent in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(GamError::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GamError::NonFinite(format!("element {i} of tensor with shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(GamError::Shape("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Unchecked constructor for kernels whose output shape is known correct.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn value(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn add_scaled_assign(&mut self, other: &Tensor, k: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of the elementwise product.
    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Max-norm of the difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(GamError::Shape(format!(
                "elementwise op on shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.rows() {
            return Err(GamError::Shape(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        let out = matmul_unchecked(self, other);
        if !out.is_finite() {
            return Err(GamError::NonFinite(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        Ok(out)
    }

    /// Columns of all parts side by side; every part needs the same row count.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let rows = parts
            .first()
            .ok_or_else(|| GamError::Shape("concat of zero tensors".into()))?
            .rows();
        if parts.iter().any(|p| !p.is_matrix() || p.rows() != rows) {
            return Err(GamError::Shape("concat_cols needs matrices with equal row counts".into()));
        }
        let total: usize = parts.iter().map(Tensor::cols).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor::from_parts(vec![rows, total], data))
    }

    fn permuted(&self, perm: &[usize]) -> Tensor {
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides = strides(&self.shape);
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * src_strides[p]).sum();
            data.push(self.data[off]);
            // odometer increment over the permuted shape
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor::from_parts(shape, data)
    }
}

pub(crate) fn matmul_unchecked(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(k, b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

/// Sums the products of `a` and `b` over each paired axis `(a_axes[k], b_axes[k])`.
///
/// The result carries `a`'s free axes (in order) followed by `b`'s free axes.
/// Contracting every axis yields a scalar.
pub fn contract(a: &Tensor, b: &Tensor, a_axes: &[usize], b_axes: &[usize]) -> Result<Tensor> {
    let mismatch = |why: &str| {
        GamError::Shape(format!(
            "cannot contract {:?} (axes {a_axes:?}) with {:?} (axes {b_axes:?}): {why}",
            a.shape, b.shape
        ))
    };
    if a_axes.len() != b_axes.len() {
        return Err(mismatch("axis lists differ in length"));
    }
    let check_axes = |axes: &[usize], rank: usize| {
        let mut seen = vec![false; rank];
        axes.iter().all(|&ax| ax < rank && !std::mem::replace(&mut seen[ax], true))
    };
    if !check_axes(a_axes, a.rank()) || !check_axes(b_axes, b.rank()) {
        return Err(mismatch("axis out of range or repeated"));
    }
    if a_axes.iter().zip(b_axes).any(|(&i, &j)| a.shape[i] != b.shape[j]) {
        return Err(mismatch("paired extents differ"));
    }

    let a_free: Vec<usize> = (0..a.rank()).filter(|ax| !a_axes.contains(ax)).collect();
    let b_free: Vec<usize> = (0..b.rank()).filter(|ax| !b_axes.contains(ax)).collect();
    let inner: usize = a_axes.iter().map(|&ax| a.shape[ax]).product();
    let a_outer: usize = a_free.iter().map(|&ax| a.shape[ax]).product();
    let b_outer: usize = b_free.iter().map(|&ax| b.shape[ax]).product();

    let a_perm: Vec<usize> = a_free.iter().chain(a_axes).copied().collect();
    let b_perm: Vec<usize> = b_axes.iter().chain(&b_free).copied().collect();
    let a2 = a.permuted(&a_perm);
    let b2 = b.permuted(&b_perm);
    let a2 = Tensor::from_parts(vec![a_outer, inner], a2.data);
    let b2 = Tensor::from_parts(vec![inner, b_outer], b2.data);
    let prod = matmul_unchecked(&a2, &b2);

    let shape: Vec<usize> = a_free
        .iter()
        .map(|&ax| a.shape[ax])
        .chain(b_free.iter().map(|&ax| b.shape[ax]))
        .collect();
    if !prod.is_finite() {
        return Err(GamError::NonFinite(format!("contraction of {:?} with {:?}", a.shape, b.shape)));
    }
    Ok(Tensor::from_parts(shape, prod.data))
}

/// Square boolean mask; `true` marks an entry that takes part in the softmax.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn full(n: usize) -> Self {
        Mask { n, allowed: vec![true; n * n] }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(GamError::Shape("mask must be square".into()));
        }
        Ok(Mask { n, allowed: rows.concat() })
    }

    /// Key-padding mask: column `β` is usable iff `valid[β]`; optionally causal (`β ≤ α`).
    pub fn from_valid(valid: &[bool], causal: bool) -> Self {
        let n = valid.len();
        let mut allowed = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                allowed[a * n + b] = valid[b] && (!causal || b <= a);
            }
        }
        Mask { n, allowed }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.n + col]
    }
}

/// Row-wise softmax over the unmasked entries; masked entries come out as exactly 0.
pub fn masked_softmax_rows(scores: &Tensor, mask: &Mask) -> Result<Tensor> {
    if !scores.is_matrix() || scores.rows() != mask.n || scores.cols() != mask.n {
        return Err(GamError::Shape(format!(
            "softmax scores {:?} vs {}x{} mask",
            scores.shape, mask.n, mask.n
        )));
    }
    let n = mask.n;
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        let row = scores.row(r);
        let allowed = &mask.allowed[r * n..(r + 1) * n];
        let max = row
            .iter()
            .zip(allowed)
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(GamError::FullyMaskedRow { row: r });
        }
        let orow = &mut out[r * n..(r + 1) * n];
        let mut total = 0.0;
        for ((o, &v), &ok) in orow.iter_mut().zip(row).zip(allowed) {
            if ok {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

/// Plain softmax of a vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Largest exponent treated as an integer power by [`signed_pow`].
const MAX_INTEGER_POWER: f64 = 64.0;

/// Integer power by left-to-right repeated multiplication.
pub fn int_pow(x: f64, k: u32) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut acc = x;
    for _ in 1..k {
        acc *= x;
    }
    acc
}

fn as_small_integer(n1: f64) -> Option<u32> {
    (n1.fract() == 0.0 && (1.0..=MAX_INTEGER_POWER).contains(&n1)).then_some(n1 as u32)
}

/// Power-law feature: the exact power for integer `n1`, `sign(x)·|x|^n1` otherwise.
pub fn signed_pow(x: f64, n1: f64) -> Result<f64> {
    if !(n1.is_finite() && n1 > 0.0) {
        return Err(GamError::Config(format!("power-law exponent must be positive, got {n1}")));
    }
    Ok(signed_pow_unchecked(x, n1))
}

pub(crate) fn signed_pow_unchecked(x: f64, n1: f64) -> f64 {
    match as_small_integer(n1) {
        Some(k) => int_pow(x, k),
        None => x.signum() * x.abs().powf(n1),
    }
}

/// Derivative of [`signed_pow`] in `x`. At `x = 0` with `n1 < 1` the true
/// derivative is unbounded; 0 is returned there.
pub(crate) fn signed_pow_derivative(x: f64, n1: f64) -> f64 {
    match as_small_integer(n1) {
        Some(k) => k as f64 * int_pow(x, k - 1),
        None if x == 0.0 => 0.0,
        None => n1 * x.abs().powf(n1 - 1.0),
    }
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(GamError::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    /// Like [`ParamSet::get`] but reports a missing name as an error.
    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| GamError::Config(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// True when both sets have identical names (in order) and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Euclidean norm over every entry of every parameter.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A scalar loss together with its gradient for every parameter.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: f64,
    pub grads: ParamSet,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_contraction() {
        let a = Tensor::identity(2);
        let b = Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        let c = contract(&a, &b, &[1], &[0]).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn dot_product_contraction_is_scalar() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap();
        let c = contract(&a, &b, &[0], &[0]).unwrap();
        assert!(c.shape().is_empty());
        assert_eq!(c.value(), 32.0);
    }

    #[test]
    fn contraction_matches_naive_matmul() {
        let a = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let c = contract(&a, &b, &[1], &[0]).unwrap();
        let oracle = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(oracle.data()) {
            assert!((x - y).abs() <= 1e-14 * y.abs().max(1.0));
        }
    }

    #[test]
    fn contraction_shape_errors_name_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = contract(&a, &b, &[1], &[0]).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("axes [1]") && err.contains("axes [0]"), "{err}");
        assert!(contract(&a, &b, &[0, 1], &[0]).is_err());
        assert!(contract(&a, &b, &[2], &[0]).is_err());
    }

    #[test]
    fn uniform_softmax_on_equal_scores() {
        let s = Tensor::zeros(&[3, 3]);
        let p = masked_softmax_rows(&s, &Mask::full(3)).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entry_renormalizes() {
        let s = Tensor::from_rows(&[vec![0.3, -1e300, 0.3], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        let mask = Mask::from_rows(&[
            vec![true, false, true],
            vec![true, true, true],
            vec![true, true, true],
        ])
        .unwrap();
        let p = masked_softmax_rows(&s, &mask).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn large_scores_are_shift_invariant() {
        let big = Tensor::from_rows(&vec![vec![1000.0, 1001.0, 1002.0]; 3]).unwrap();
        let small = Tensor::from_rows(&vec![vec![0.0, 1.0, 2.0]; 3]).unwrap();
        let mask = Mask::full(3);
        let p = masked_softmax_rows(&big, &mask).unwrap();
        let q = masked_softmax_rows(&small, &mask).unwrap();
        assert!(p.is_finite());
        assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_reported() {
        let mask = Mask::from_rows(&[vec![true, true], vec![false, false]]).unwrap();
        let err = masked_softmax_rows(&Tensor::zeros(&[2, 2]), &mask).unwrap_err();
        assert!(matches!(err, GamError::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn signed_pow_examples() {
        assert_eq!(signed_pow(-2.0, 3.0).unwrap(), -8.0);
        assert_eq!(signed_pow(-4.0, 0.5).unwrap(), -2.0);
        assert_eq!(signed_pow(0.0, 2.5).unwrap(), 0.0);
        assert_eq!(signed_pow(-3.0, 2.0).unwrap(), 9.0);
        assert!(signed_pow(1.0, 0.0).is_err());
        assert!(signed_pow(1.0, -1.0).is_err());
        assert!(signed_pow(1.0, f64::NAN).is_err());
    }

    #[test]
    fn tensor_constructor_validates() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![], vec![2.0]).is_ok());
    }

    #[test]
    fn param_set_rejects_duplicates_and_keeps_order() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::scalar(1.0)).unwrap();
        p.insert("a", Tensor::scalar(2.0)).unwrap();
        assert!(p.insert("b", Tensor::scalar(3.0)).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["b", "a"]);
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 - 5.5).collect()).unwrap();
        let b = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64).sqrt()).collect()).unwrap();
        let c = Tensor::new(vec![3, 5], (0..15).map(|i| 0.5 * i as f64).collect()).unwrap();
        assert!(matmul_nt(&a, &b).max_abs_diff(&a.matmul(&b.transpose()).unwrap()) < 1e-12);
        assert!(matmul_tn(&a, &c).max_abs_diff(&a.transpose().matmul(&c).unwrap()) < 1e-12);
    }
}
