//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a flat buffer. Differentiable
//! computation happens on [`crate::numerics::Var`], which wraps tensors in
//! graph nodes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; `f64` is used by the
/// finite-difference checker, where `f32` rounding would swamp the signal.
pub trait Element:
    Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::input(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::input(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![F::zero(); n])
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data: Vec<F> = rows.iter().flatten().copied().collect();
        Tensor::from_parts(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view: the last axis is columns, everything before is rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| G::of(v.to_f64_lossless()))
                .collect(),
        )
    }

    pub fn sum_squares(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<F: Element>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::input(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    x.ensure_finite("softmax input")?;
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |k: usize| base + k * inner;
            let mut max = F::neg_infinity();
            for k in 0..len {
                max = max.max(data[idx(k)]);
            }
            let mut total = F::zero();
            for k in 0..len {
                let e = (data[idx(k)] - max).exp();
                data[idx(k)] = e;
                total = total + e;
            }
            for k in 0..len {
                data[idx(k)] = data[idx(k)] / total;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax on a contiguous slice, in place.
pub(crate) fn softmax_in_place<F: Element>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul_into<F: Element>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_into<F: Element>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_into<F: Element>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::new(vec![2], vec![0.0f32, 0.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_values() {
        // e^1, e^2, e^3 normalised by their sum 30.19287...
        let x = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        for (got, want) in y.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = Tensor::new(vec![2, 3], vec![0.3f64, -1.0, 2.0, 5.0, 5.5, -3.0]).unwrap();
        let shifted = x.map(|v| v + 17.25);
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::new(vec![2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let x = Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(Error::Numeric(_))));
        let y = Tensor::new(vec![2], vec![0.0f32, 0.0]).unwrap();
        assert!(matches!(softmax(&y, 1), Err(Error::Input(_))));
    }

    #[test]
    fn constructor_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }
}
