//! Dense row-major `f64` tensors and the pure kernels the autograd graph is
//! built from.

use crate::error::{KdsmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(KdsmError::Config(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(KdsmError::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(KdsmError::Validation("ragged rows".into()));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [m, n] => Ok((m, n)),
            _ => Err(KdsmError::Dimension {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(KdsmError::Dimension {
                op: "dims3",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(KdsmError::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c (+)= op(a) * op(b)` where `op` optionally transposes. `a` is stored
/// row-major as `m x k` (or `k x m` when transposed), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(KdsmError::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_rows_slice(x: &[f64], n: usize, out: &mut [f64]) {
    for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = vec![0.0; m * n];
    softmax_rows_slice(&x.data, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Geometry of a 2-D (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn conv_out(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return Err(KdsmError::Config(format!(
                "conv kernel {kernel} does not fit input {input} with padding {} stride {}",
                self.padding, self.stride
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    pub fn deconv_out(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.output_padding >= self.stride.max(1) {
            return Err(KdsmError::Config(format!(
                "output padding {} must be smaller than stride {}",
                self.output_padding, self.stride
            )));
        }
        let full = (input - 1) * self.stride + kernel + self.output_padding;
        if full <= 2 * self.padding {
            return Err(KdsmError::Config(format!(
                "transposed conv produces non-positive extent (input {input}, kernel {kernel})"
            )));
        }
        Ok(full - 2 * self.padding)
    }
}

/// Unfold `x [c, h, w]` into `[c*kh*kw, oh*ow]` patches.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geo: ConvGeometry,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    let s = geo.stride as isize;
    let p = geo.padding as isize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patches back into `out [c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geo: ConvGeometry,
    out: &mut [f64],
) {
    let s = geo.stride as isize;
    let p = geo.padding as isize;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let src = &cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShape {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_shape(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<ConvShape> {
    let (cin, h, wd) = x.dims3()?;
    let [cout, wcin, kh, kw] = *w.shape() else {
        return Err(KdsmError::Dimension {
            op: "conv2d weight",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    };
    if wcin != cin {
        return Err(KdsmError::Dimension {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok(ConvShape {
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh: geo.conv_out(h, kh)?,
        ow: geo.conv_out(wd, kw)?,
    })
}

/// Weight layout `[c_in, c_out, kh, kw]`, matching a conv2d weight with the
/// roles of input and output channels swapped.
pub(crate) fn deconv_shape(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<ConvShape> {
    let (cin, h, wd) = x.dims3()?;
    let [wcin, cout, kh, kw] = *w.shape() else {
        return Err(KdsmError::Dimension {
            op: "deconv2d weight",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    };
    if wcin != cin {
        return Err(KdsmError::Dimension {
            op: "deconv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok(ConvShape {
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh: geo.deconv_out(h, kh)?,
        ow: geo.deconv_out(wd, kw)?,
    })
}

/// Cross-correlation of `x [c_in, h, w]` with `w [c_out, c_in, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let s = conv_shape(x, w, geo)?;
    let cols = im2col(x.data(), s.cin, s.h, s.w, s.kh, s.kw, s.oh, s.ow, geo);
    let kdim = s.cin * s.kh * s.kw;
    let mut out = vec![0.0; s.cout * s.oh * s.ow];
    gemm(s.cout, kdim, s.oh * s.ow, w.data(), false, &cols, false, &mut out, false);
    Tensor::new(vec![s.cout, s.oh, s.ow], out)
}

/// Transposed convolution of `x [c_in, h, w]` with `w [c_in, c_out, kh, kw]`.
pub fn deconv2d(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let s = deconv_shape(x, w, geo)?;
    let kdim = s.cout * s.kh * s.kw;
    let mut cols = vec![0.0; kdim * s.h * s.w];
    gemm(kdim, s.cin, s.h * s.w, w.data(), true, x.data(), false, &mut cols, false);
    let mut out = vec![0.0; s.cout * s.oh * s.ow];
    col2im(&cols, s.cout, s.oh, s.ow, s.kh, s.kw, s.h, s.w, geo, &mut out);
    Tensor::new(vec![s.cout, s.oh, s.ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_worked_examples() {
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), t(&[&[19.0, 22.0], &[43.0, 50.0]]));
        let z = matmul(&Tensor::zeros(&[3, 2]), &b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, KdsmError::Dimension { .. }));
    }

    #[test]
    fn softmax_worked_examples() {
        let u = softmax_rows(&t(&[&[2.0, 2.0, 2.0, 2.0]])).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax_rows(&t(&[&[0.0, 3f64.ln()]])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
        let shifted = softmax_rows(&t(&[&[1000.0, 1000.0 + 3f64.ln()]])).unwrap();
        assert!(shifted.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn conv_identity_and_impulse() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let one = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &one, ConvGeometry::new(1, 0)).unwrap(), x);

        let mut imp = Tensor::zeros(&[1, 5, 5]);
        imp.data_mut()[2 * 5 + 2] = 1.0;
        let k = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let out = conv2d(&imp, &k, ConvGeometry::new(1, 1)).unwrap();
        // cross-correlation of an impulse yields the kernel flipped about the centre
        for dy in 0..3 {
            for dx in 0..3 {
                let v = out.data()[(1 + dy) * 5 + 1 + dx];
                assert_eq!(v, k.data()[(2 - dy) * 3 + (2 - dx)]);
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, ConvGeometry::new(1, 0)),
            Err(KdsmError::Config(_))
        ));
    }

    #[test]
    fn deconv_zero_input_and_doubling() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::full(&[2, 3, 4, 4], 0.5);
        let out = deconv2d(&x, &w, ConvGeometry::new(2, 1)).unwrap();
        assert_eq!(out.shape(), &[3, 8, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let geo3 = ConvGeometry::new(2, 1).with_output_padding(1);
        let w3 = Tensor::full(&[2, 3, 3, 3], 0.5);
        assert_eq!(deconv2d(&x, &w3, geo3).unwrap().shape(), &[3, 8, 8]);
    }
}
