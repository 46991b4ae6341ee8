//! Dense row-major `f64` arrays.
//!
//! Only what the layers need: moments over an axis set, broadcast affine maps,
//! and 2-D matrix products. There are no views or strides; every operation
//! returns a fresh tensor.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major buffer. A zero extent is
    /// accepted so that empty batches can be represented; reductions over
    /// them fail with [`Error::Domain`].
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::arg(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor over `values`.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::arg(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::arg(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Inner product of the flat buffers.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::arg(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `indices` along axis 0, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let Some(&rows) = self.shape.first() else {
            return Err(Error::arg("cannot select rows of a scalar"));
        };
        let row_len = if rows == 0 { 0 } else { self.data.len() / rows };
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(Error::arg(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = self.shape[..] else {
            return Err(Error::arg(format!(
                "transpose needs a matrix, got shape {:?}",
                self.shape
            )));
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }
}

/// Mean and population variance over `reduce_axes`.
///
/// The result has the shape of `x` with the reduced axes removed (a scalar
/// when every axis is reduced). Two passes: the mean first, then the average
/// squared deviation from it, always in flat index order.
pub fn reduce_moments(x: &Tensor, reduce_axes: &[usize]) -> Result<(Tensor, Tensor)> {
    if reduce_axes.is_empty() {
        return Err(Error::arg("reduce_moments needs at least one axis"));
    }
    let rank = x.rank();
    let mut reduced = vec![false; rank];
    for &a in reduce_axes {
        if a >= rank {
            return Err(Error::arg(format!("axis {a} out of range for rank {rank}")));
        }
        if reduced[a] {
            return Err(Error::arg(format!("axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = (0..rank)
        .filter(|&a| !reduced[a])
        .map(|a| x.shape[a])
        .collect();
    let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| x.shape[a]).product();
    if count == 0 {
        return Err(Error::Domain("reduction over an empty slice".into()));
    }
    let out_len = numel(&out_shape);

    // For each input axis, the stride it contributes to the output index.
    let out_strides = strides(&out_shape);
    let mut axis_out_stride = vec![0usize; rank];
    let mut k = 0;
    for a in 0..rank {
        if !reduced[a] {
            axis_out_stride[a] = out_strides[k];
            k += 1;
        }
    }
    let target: Vec<usize> = {
        let mut idx = vec![0usize; rank];
        let mut t = Vec::with_capacity(x.len());
        for _ in 0..x.len() {
            t.push(idx.iter().zip(&axis_out_stride).map(|(i, s)| i * s).sum());
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < x.shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        t
    };

    let mut mean = vec![0.0; out_len];
    for (v, &o) in x.data.iter().zip(&target) {
        mean[o] += v;
    }
    let n = count as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; out_len];
    for (v, &o) in x.data.iter().zip(&target) {
        let d = v - mean[o];
        var[o] += d * d;
    }
    var.iter_mut().for_each(|s| *s /= n);

    Ok((
        Tensor {
            shape: out_shape.clone(),
            data: mean,
        },
        Tensor {
            shape: out_shape,
            data: var,
        },
    ))
}

/// Operand strides aligned to `target`, with zero stride on broadcast axes.
fn broadcast_strides(operand: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if operand.len() > target.len() {
        return Err(Error::arg(format!(
            "cannot broadcast {operand:?} to {target:?}"
        )));
    }
    let offset = target.len() - operand.len();
    let own = strides(operand);
    let mut out = vec![0; target.len()];
    for (i, &extent) in operand.iter().enumerate() {
        let t = target[offset + i];
        if extent == t {
            out[offset + i] = own[i];
        } else if extent != 1 {
            return Err(Error::arg(format!(
                "cannot broadcast {operand:?} to {target:?}"
            )));
        }
    }
    Ok(out)
}

/// `x * scale + shift` with numpy-style broadcasting of `scale` and `shift`
/// onto the shape of `x`.
pub fn affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let ss = broadcast_strides(&scale.shape, &x.shape)?;
    let bs = broadcast_strides(&shift.shape, &x.shape)?;
    let rank = x.rank();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(x.len());
    for &v in &x.data {
        let si: usize = idx.iter().zip(&ss).map(|(i, s)| i * s).sum();
        let bi: usize = idx.iter().zip(&bs).map(|(i, s)| i * s).sum();
        out.push(v * scale.data[si] + shift.data[bi]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < x.shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (&a.shape[..], &b.shape[..]) else {
        return Err(Error::arg(format!(
            "matmul needs two matrices, got {:?} and {:?}",
            a.shape, b.shape
        )));
    };
    if k != k2 {
        return Err(Error::arg(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}
