//! Plain dense `f64` arrays: storage, broadcasting, reductions and batched
//! matrix products. Nothing here records gradients; [`super::Tensor`] wraps
//! these values for that.

use std::fmt;

use crate::error::{shape_err, Result};

/// Dense row-major n-dimensional array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        s[ax] = acc;
        acc *= shape[ax];
    }
    s
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `input` viewed in the broadcast shape `out` (zero on expanded axes).
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(input);
    let offset = out.len() - input.len();
    (0..out.len())
        .map(|ax| {
            if ax < offset || input[ax - offset] == 1 {
                0
            } else {
                own[ax - offset]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// matching flat offsets under two stride sets.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        f(oa, ob);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl Array {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// Rank-1 array.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn from_shape_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single element of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on array of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Broadcasting elementwise combination.
    pub fn zip_with(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self { shape: self.shape.clone(), data });
        }
        let shape = broadcast_shapes(&self.shape, &other.shape)?;
        if other.data.len() == 1 {
            let b = other.data[0];
            let mut out = self.broadcast_to(&shape)?;
            out.data.iter_mut().for_each(|a| *a = f(*a, b));
            return Ok(out);
        }
        if self.data.len() == 1 {
            let a = self.data[0];
            let mut out = other.broadcast_to(&shape)?;
            out.data.iter_mut().for_each(|b| *b = f(a, *b));
            return Ok(out);
        }
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        walk2(&shape, &sa, &sb, |ia, ib| data.push(f(self.data[ia], other.data[ib])));
        Ok(Self { shape, data })
    }

    pub fn add(&self, other: &Array) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Array) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Array) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Array) -> Result<Self> {
        self.zip_with(other, |a, b| a / b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Array) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("in-place add of {:?} into {:?}", other.shape, self.shape));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let target = broadcast_shapes(&self.shape, shape)?;
        if target != shape {
            return shape_err(format!("cannot broadcast {:?} to {shape:?}", self.shape));
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let sa = broadcast_strides(&self.shape, shape);
        let zero = vec![0; shape.len()];
        let mut data = Vec::with_capacity(shape.iter().product());
        walk2(shape, &sa, &zero, |ia, _| data.push(self.data[ia]));
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Sums a broadcast result back down to `shape`; the inverse of
    /// [`Array::broadcast_to`] for gradients.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if broadcast_shapes(shape, &self.shape)? != self.shape {
            return shape_err(format!("cannot sum {:?} down to {shape:?}", self.shape));
        }
        let mut out = Array::zeros(shape.to_vec());
        let so = broadcast_strides(shape, &self.shape);
        let own = strides(&self.shape);
        walk2(&self.shape, &own, &so, |ig, io| out.data[io] += self.data[ig]);
        Ok(out)
    }

    fn check_axes(&self, axes: &[usize]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.rank()];
        for &ax in axes {
            if ax >= self.rank() {
                return shape_err(format!(
                    "axis {ax} out of range for shape {:?}",
                    self.shape
                ));
            }
            mask[ax] = true;
        }
        Ok(mask)
    }

    /// Shape after reducing `axes` with dimensions kept as size 1.
    pub fn reduced_shape(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let mask = self.check_axes(axes)?;
        Ok(self
            .shape
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if m { 1 } else { d })
            .collect())
    }

    fn fold_axes(
        &self,
        axes: &[usize],
        keep_dims: bool,
        init: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let kept = self.reduced_shape(axes)?;
        let mut out = Array::full(kept.clone(), init);
        let so = broadcast_strides(&kept, &self.shape);
        let own = strides(&self.shape);
        walk2(&self.shape, &own, &so, |ii, io| out.data[io] = f(out.data[io], self.data[ii]));
        if !keep_dims {
            out.shape = squeeze_axes(&kept, axes);
        }
        Ok(out)
    }

    pub fn sum_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Self> {
        self.fold_axes(axes, keep_dims, 0.0, |acc, v| acc + v)
    }

    pub fn max_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Self> {
        self.fold_axes(axes, keep_dims, f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Self> {
        let count = self.reduced_count(axes)?;
        Ok(self.sum_axes(axes, keep_dims)?.scale(1.0 / count as f64))
    }

    /// Max-shifted log-sum-exp. Slices that are entirely `-inf` reduce to `-inf`.
    pub fn logsumexp_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Self> {
        let m = self.max_axes(axes, true)?;
        let shift = m.map(|v| if v.is_finite() { v } else { 0.0 });
        let shifted = self.sub(&shift)?.map(f64::exp);
        let s = shifted.sum_axes(axes, true)?;
        let mut out = s.zip_with(&shift, |s, c| s.ln() + c)?;
        if !keep_dims {
            out.shape = squeeze_axes(&out.shape, axes);
        }
        Ok(out)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    pub(crate) fn reduced_count(&self, axes: &[usize]) -> Result<usize> {
        let mask = self.check_axes(axes)?;
        Ok(self
            .shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&d, _)| d)
            .product())
    }

    /// Swaps the trailing two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return shape_err(format!("transpose needs rank >= 2, got {:?}", self.shape));
        }
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.numel() / (m * n).max(1);
        let mut data = vec![0.0; self.numel()];
        for b in 0..batch {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[base + j * m + i] = self.data[base + i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self { shape, data })
    }

    /// Batched matrix product over the trailing two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Array) -> Result<Self> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return shape_err(format!(
                "matmul needs rank >= 2 operands, got {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        let batch_a = &self.shape[..ra - 2];
        let batch_b = &other.shape[..rb - 2];
        let batch = broadcast_shapes(batch_a, batch_b)?;
        let mut sa = broadcast_strides(batch_a, &batch);
        let mut sb = broadcast_strides(batch_b, &batch);
        sa.iter_mut().for_each(|s| *s *= m * k);
        sb.iter_mut().for_each(|s| *s *= k * n);
        let nb: usize = batch.iter().product();
        let mut data = vec![0.0; nb * m * n];
        let mut bi = 0;
        let mut kernel = |oa: usize, ob: usize| {
            let out = &mut data[bi * m * n..(bi + 1) * m * n];
            let a = &self.data[oa..oa + m * k];
            let b = &other.data[ob..ob + k * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            bi += 1;
        };
        if batch.is_empty() {
            kernel(0, 0);
        } else {
            walk2(&batch, &sa, &sb, &mut kernel);
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(Self { shape, data })
    }
}

/// Gathers `logits[..., idx]` along the last axis; index batch axes
/// broadcast against the logits' leading axes.
pub(crate) fn take_last(logits: &Array, idx: &Array) -> Result<Array> {
    let (batch_shape, k) = split_last(logits)?;
    let shape = broadcast_shapes(&batch_shape, idx.shape())?;
    let mut sl = broadcast_strides(&batch_shape, &shape);
    sl.iter_mut().for_each(|s| *s *= k);
    let si = broadcast_strides(idx.shape(), &shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut bad = None;
    walk2(&shape, &sl, &si, |ol, oi| {
        let c = idx.data[oi];
        if c < 0.0 || c >= k as f64 || c.fract() != 0.0 {
            bad = Some(c);
            data.push(f64::NAN);
        } else {
            data.push(logits.data[ol + c as usize]);
        }
    });
    if let Some(c) = bad {
        return Err(crate::Error::Domain(format!(
            "class index {c} outside [0, {k})"
        )));
    }
    Ok(Array { shape, data })
}

pub(crate) fn take_last_backward(grad: &Array, idx: &Array, logits_shape: &[usize]) -> Array {
    let k = *logits_shape.last().expect("rank checked in forward");
    let batch_shape = &logits_shape[..logits_shape.len() - 1];
    let mut sl = broadcast_strides(batch_shape, grad.shape());
    sl.iter_mut().for_each(|s| *s *= k);
    let si = broadcast_strides(idx.shape(), grad.shape());
    let mut out = Array::zeros(logits_shape.to_vec());
    let mut n = 0;
    walk2(grad.shape(), &sl, &si, |ol, oi| {
        out.data[ol + idx.data[oi] as usize] += grad.data[n];
        n += 1;
    });
    out
}

fn split_last(a: &Array) -> Result<(Vec<usize>, usize)> {
    match a.shape().split_last() {
        Some((&k, batch)) if k > 0 => Ok((batch.to_vec(), k)),
        _ => shape_err(format!("expected a non-empty last axis, got {:?}", a.shape())),
    }
}

pub(crate) fn squeeze_axes(kept: &[usize], axes: &[usize]) -> Vec<usize> {
    kept.iter()
        .enumerate()
        .filter(|(ax, _)| !axes.contains(ax))
        .map(|(_, &d)| d)
        .collect()
}

/// Per-lane view helper: splits `shape` around `axis` into
/// `(outer, extent, inner)` so element `(o, k, i)` lives at
/// `(o * extent + k) * inner + i`.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
