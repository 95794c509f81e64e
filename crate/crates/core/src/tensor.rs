//! Dense row-major `f64` tensors and the handful of kernels the inference
//! graph needs.
//!
//! Every reduction runs in a fixed left-to-right order so that repeated
//! evaluations are bit-identical.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting shape mismatches and
    /// NaN/Inf values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; n])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    /// Number of samples along the leading (batch) axis.
    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    fn sample_stride(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = self.batch_len();
        if start > end || end > n {
            return Err(Error::Shape(format!(
                "batch range {start}..{end} out of bounds for {n} samples"
            )));
        }
        let stride = self.sample_stride();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * stride..end * stride].to_vec(),
        ))
    }

    /// Gathers the given rows of the leading axis, in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.batch_len();
        if indices.is_empty() {
            return Err(Error::Shape("empty batch selection".into()));
        }
        let stride = self.sample_stride();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(Error::Shape(format!("sample {i} out of bounds for {n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.batch_len();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self
            .data
            .iter()
            .fold(0.0, |acc, &v| acc + (v - m) * (v - m))
            / self.data.len() as f64;
        var.sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &v| acc.max(v.abs()))
    }
}

/// `[m,k] x [k,n] -> [m,n]`, accumulating over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (kk, &av) in row.iter().enumerate() {
                acc += av * b.data[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Fully connected layer: `x[N,in] * w[out,in]^T + bias[out]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[1] {
        return Err(Error::Shape(format!(
            "linear input {:?} with weight {:?}",
            x.shape, w.shape
        )));
    }
    let (n, k, out_f) = (x.shape[0], x.shape[1], w.shape[0]);
    if let Some(b) = bias {
        if b.len() != out_f {
            return Err(Error::Shape(format!(
                "bias of length {} for {out_f} outputs",
                b.len()
            )));
        }
    }
    let mut out = vec![0.0; n * out_f];
    for s in 0..n {
        let row = &x.data[s * k..(s + 1) * k];
        for o in 0..out_f {
            let wrow = &w.data[o * k..(o + 1) * k];
            let mut acc = 0.0;
            for (xv, wv) in row.iter().zip(wrow) {
                acc += xv * wv;
            }
            if let Some(b) = bias {
                acc += b.data[o];
            }
            out[s * out_f + o] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![n, out_f], out))
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "non-integral output size ({input} + 2*{pad} - {kernel}) / {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Direct 2-D cross-correlation of `x[N,C,H,W]` with `w[F,C,kh,kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_bias(x, w, None, stride, pad)
}

pub fn conv2d_bias(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 || x.shape[1] != w.shape[1] {
        return Err(Error::Shape(format!(
            "conv2d input {:?} with kernel {:?}",
            x.shape, w.shape
        )));
    }
    let [n, c, h, wd] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let [f, _, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
    if let Some(b) = bias {
        if b.len() != f {
            return Err(Error::Shape(format!("bias of length {} for {f} filters", b.len())));
        }
    }
    let oh = conv_output_size(h, kh, stride, pad)?;
    let ow = conv_output_size(wd, kw, stride, pad)?;
    // each output position's receptive field, zero padded, in (ci, ky, kx)
    // order so that every output is one contiguous dot product
    let patch = c * kh * kw;
    let mut cols = vec![0.0; oh * ow * patch];
    let mut out = vec![0.0; n * f * oh * ow];
    for s in 0..n {
        let img = &x.data[s * c * h * wd..(s + 1) * c * h * wd];
        for oy in 0..oh {
            for ox in 0..ow {
                let col = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            col[(ci * kh + ky) * kw + kx] =
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    0.0
                                } else {
                                    img[(ci * h + iy as usize) * wd + ix as usize]
                                };
                        }
                    }
                }
            }
        }
        for fo in 0..f {
            let wrow = &w.data[fo * patch..(fo + 1) * patch];
            let b = bias.map_or(0.0, |b| b.data[fo]);
            let dst = &mut out[(s * f + fo) * oh * ow..(s * f + fo + 1) * oh * ow];
            for (o, col) in dst.iter_mut().zip(cols.chunks_exact(patch)) {
                let mut acc = 0.0;
                for (xv, wv) in col.iter().zip(wrow) {
                    acc += xv * wv;
                }
                *o = acc + b;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, f, oh, ow], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Non-overlapping average pooling with a square window of side `size`.
pub fn avgpool2d(x: &Tensor, size: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("avgpool2d on {:?}", x.shape)));
    }
    if size == 0 || !x.shape[2].is_multiple_of(size) || !x.shape[3].is_multiple_of(size) {
        return Err(Error::Shape(format!(
            "pool size {size} does not tile {:?}",
            x.shape
        )));
    }
    let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let (oh, ow) = (h / size, w / size);
    let norm = (size * size) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..size {
                    for kx in 0..size {
                        acc += x.data[(plane * h + oy * size + ky) * w + ox * size + kx];
                    }
                }
                out[(plane * oh + oy) * ow + ox] = acc / norm;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// `[N, ...] -> [N, prod(...)]`.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 1 {
        return Err(Error::Shape("flatten of a rank-0 tensor".into()));
    }
    let rest = x.shape[1..].iter().product();
    x.reshape(vec![x.shape[0], rest])
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("add {:?} + {:?}", a.shape, b.shape)));
    }
    Ok(Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::Shape(format!("transpose of {:?}", a.shape)));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}
