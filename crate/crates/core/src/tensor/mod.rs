//! Dense row-major `f64` tensors and the forward kernels shared by the
//! autodiff graph and the incremental inference path.

mod io;

pub use io::{
    read_tensor, read_tensor_from, read_tensors, write_tensor, write_tensor_to, write_tensors, TENSOR_MAGIC, TENSOR_VERSION,
};

use crate::error::{shape_err, Result, TksgError};

/// A dense tensor value. Gradients live on graph nodes and parameters, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns when viewed as a matrix; a 1-D tensor is one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err("dims2", format!("expected 1-D or 2-D, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `c[m×n] += a[m×k] · b[k×n]` on raw row-major slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Matrix product. A 1-D left operand is treated as a single row and the
/// result is 1-D as well.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = match b.shape.as_slice() {
        [r, c] => (*r, *c),
        s => return Err(shape_err("matmul", format!("rhs must be 2-D, got {s:?}"))),
    };
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}: inner dimensions differ", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    let shape = if a.ndim() == 1 { vec![n] } else { vec![m, n] };
    Tensor::new(shape, out)
}

/// `a · bᵀ` for two matrices sharing their column count.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(shape_err(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_nt_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = match a.shape.as_slice() {
        [r, c] => (*r, *c),
        s => return Err(shape_err("transpose", format!("expected 2-D, got {s:?}"))),
    };
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Adds a length-`d` vector to every row of a `[.. × d]` tensor.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = a.cols();
    if bias.numel() != d || bias.ndim() != 1 {
        return Err(shape_err(
            "add_bias",
            format!("{:?} + {:?}", a.shape, bias.shape),
        ));
    }
    let mut out = a.clone();
    for row in out.data.chunks_mut(d.max(1)) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(a: &Tensor) -> Tensor {
    a.map(gelu_scalar)
}

/// (outer, len, inner) strides for a reduction along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(
            "softmax",
            format!("axis {axis} invalid for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(&a.shape, axis)?;
    let mut out = a.data.clone();
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| o * len * inner + i * inner + j;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(out[idx(i)]);
            }
            let mut s = 0.0;
            for i in 0..len {
                let e = (out[idx(i)] - mx).exp();
                out[idx(i)] = e;
                s += e;
            }
            for i in 0..len {
                out[idx(i)] /= s;
            }
        }
    }
    Tensor::new(a.shape.clone(), out)
}

/// Softmax over the last axis where row `i` only sees columns `0..=i + offset`.
/// Masked entries are exactly zero.
pub fn causal_softmax(a: &Tensor, offset: usize) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let visible = (i + offset + 1).min(c);
        let row = &a.data[i * c..i * c + visible];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[i * c + j] = e;
            s += e;
        }
        for v in &mut out[i * c..i * c + visible] {
            *v /= s;
        }
    }
    Tensor::new(a.shape.clone(), out)
}

/// Per-row statistics of a layer norm forward pass: (mean, 1/sqrt(var+eps)).
pub(crate) fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let denom = (var + eps).sqrt();
    // eps = 0 on a constant row: normalized values are all zero, output is beta
    let rstd = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, rstd)
}

/// Layer normalization over the last dimension with affine `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(shape_err(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape, gamma.shape, beta.shape),
        ));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d.max(1)) {
        let (mean, rstd) = layer_norm_stats(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gamma.data[j] + beta.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Column means of an `N×d` matrix.
pub fn mean_pool(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if n == 0 {
        return Err(TksgError::Empty("mean_pool"));
    }
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(&x.data[i * d..(i + 1) * d]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(Tensor::vector(out))
}

/// Stacks `a`'s rows above `b`'s. Either side may have zero rows.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, d) = a.dims2()?;
    let (q, d2) = b.dims2()?;
    if d != d2 {
        return Err(shape_err(
            "concat_rows",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor::new(vec![p + q, d], data)
}

/// Joins 1-D vectors end to end.
pub fn concat_vec(parts: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::new();
    for p in parts {
        if p.ndim() != 1 {
            return Err(shape_err("concat_vec", format!("expected 1-D, got {:?}", p.shape)));
        }
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::vector(data))
}

/// Horizontal concatenation of matrices sharing a row count.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |t| t.rows());
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows || p.ndim() != 2 {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![rows, total], data)
}

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    if start + len > c || a.ndim() != 2 {
        return Err(shape_err(
            "slice_cols",
            format!("cols {start}..{} of {:?}", start + len, a.shape),
        ));
    }
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&a.data[i * c + start..i * c + start + len]);
    }
    Tensor::new(vec![r, len], data)
}

/// Gathers rows of a `V×d` table.
pub fn gather_rows(table: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (v, d) = table.dims2()?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= v {
            return Err(TksgError::IndexOutOfRange {
                what: "embedding table",
                index: i,
                size: v,
            });
        }
        data.extend_from_slice(&table.data[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn new_rejects_wrong_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert!(matmul(&a, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert!(close(s.data(), &[0.5, 0.5], 1e-15));
        let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]), 0).unwrap();
        assert!(close(s.data(), &[0.25, 0.75], 1e-12));
        assert!(softmax(&Tensor::vector(vec![1.0]), 1).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(close(s.data(), &[0.5, 0.5, 0.5, 0.5], 1e-15));
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn layer_norm_analytic_and_constant_row() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&x, &ones, &zeros, 0.0).unwrap();
        assert!(close(y.data(), &[-1.224744871391589, 0.0, 1.224744871391589], 1e-12));

        let c = Tensor::full(&[2, 3], 7.0);
        let gamma = Tensor::vector(vec![2.0, -1.0, 0.5]);
        let beta = Tensor::vector(vec![0.1, 0.2, 0.3]);
        for eps in [0.0, 1e-5] {
            let y = layer_norm(&c, &gamma, &beta, eps).unwrap();
            assert!(close(y.data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3], 1e-12));
        }
    }

    #[test]
    fn mean_pool_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mean_pool(&x).unwrap().data(), &[2.0, 3.0]);
        let one = Tensor::from_rows(&[vec![5.0, -1.0]]).unwrap();
        assert_eq!(mean_pool(&one).unwrap().data(), &[5.0, -1.0]);
        assert!(mean_pool(&Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn concat_rows_cases() {
        let a = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(concat_rows(&a, &b).unwrap().data(), &[1.0, 2.0]);
        let empty = Tensor::zeros(&[0, 1]);
        assert_eq!(concat_rows(&a, &empty).unwrap(), a);
        assert!(concat_rows(&a, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn gather_rows_cases() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(gather_rows(&t, &[0]).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(gather_rows(&t, &[1, 1]).unwrap().data(), &[3.0, 4.0, 3.0, 4.0]);
        assert!(gather_rows(&t, &[2]).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let x = Tensor::zeros(&[3, 3]);
        let s = causal_softmax(&x, 0).unwrap();
        assert!(close(
            s.data(),
            &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            1e-15
        ));
    }

    #[test]
    fn concat_and_slice_cols_invert() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(slice_cols(&c, 0, 2).unwrap(), a);
        assert_eq!(slice_cols(&c, 2, 1).unwrap(), b);
    }
}
