//! im2col convolution kernels and the shared GEMM wrapper.

use super::{Result, Tensor, TensorError};

/// `c = a · b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`.
/// Transposed operands are expressed through the stride arguments.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the stride pairs describe matrices fully contained in the
    // given slices; callers derive them from checked tensor shapes.
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

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let (ph, pw) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if w[2] > ph || w[3] > pw {
            return Err(TensorError::KernelTooLarge {
                kernel: (w[2], w[3]),
                padded: (ph, pw),
            });
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            oh: conv_output_size(x[2], w[2], stride, pad),
            ow: conv_output_size(x[3], w[3], stride, pad),
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output position `o` and kernel offset `r`, if inside.
    #[inline]
    fn src(&self, o: usize, r: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + r) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Columns laid out as `K × (B·P)` with `K = cin·kh·kw`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let bp = g.batch * p;
    let mut cols = vec![0.0; k * bp];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * bp..(row + 1) * bp];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let base = b * p + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                dst[base + ox] = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.p();
    let bp = g.batch * p;
    let mut dx = vec![0.0; g.batch * g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * bp..(row + 1) * bp];
                for b in 0..g.batch {
                    let plane = &mut dx[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let base = b * p + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                plane[iy * g.w + ix] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Cross-correlation of `x: B×Cin×H×W` with `w: Cout×Cin×kH×kW`.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    Ok(conv2d_forward_cols(x, w, bias, stride, pad)?.0)
}

pub(crate) fn conv2d_forward_cols(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<f64>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (k, p) = (g.k(), g.p());
    let bp = g.batch * p;
    let cols = im2col(x.data(), &g);
    let mut out_t = vec![0.0; g.cout * bp];
    gemm(
        g.cout,
        k,
        bp,
        w.data(),
        (k as isize, 1),
        &cols,
        (bp as isize, 1),
        &mut out_t,
        false,
    );
    let mut out = vec![0.0; g.batch * g.cout * p];
    for co in 0..g.cout {
        let bias_v = bias.map_or(0.0, |b| b.data()[co]);
        for b in 0..g.batch {
            let src = &out_t[co * bp + b * p..][..p];
            let dst = &mut out[(b * g.cout + co) * p..][..p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias_v;
            }
        }
    }
    let out = Tensor::new(&[g.batch, g.cout, g.oh, g.ow], out)?;
    Ok((out, cols, g))
}

/// Returns `(dx, dw, dbias)` for upstream gradient `dout: B×Cout×oH×oW`.
pub(crate) fn conv2d_backward(
    dout: &[f64],
    w: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (k, p) = (g.k(), g.p());
    let bp = g.batch * p;
    let mut dout_t = vec![0.0; g.cout * bp];
    let mut dbias = vec![0.0; g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let src = &dout[(b * g.cout + co) * p..][..p];
            dout_t[co * bp + b * p..][..p].copy_from_slice(src);
            dbias[co] += src.iter().sum::<f64>();
        }
    }
    let mut dw = vec![0.0; g.cout * k];
    // dW = dOutᵀ-layout · colsᵀ
    gemm(
        g.cout,
        bp,
        k,
        &dout_t,
        (bp as isize, 1),
        cols,
        (1, bp as isize),
        &mut dw,
        false,
    );
    let dx = need_x.then(|| {
        let mut dcols = vec![0.0; k * bp];
        gemm(
            k,
            g.cout,
            bp,
            w,
            (1, k as isize),
            &dout_t,
            (bp as isize, 1),
            &mut dcols,
            false,
        );
        col2im(&dcols, g)
    });
    (dx, dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_ones_kernel_sums() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::new(&[2, 1, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(conv_output_size(32, 3, 2, 1), 16);
        assert_eq!(conv_output_size(16, 3, 2, 1), 8);
        assert_eq!(conv_output_size(5, 3, 1, 0), 3);
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, 0),
            Err(TensorError::KernelTooLarge { .. })
        ));
        assert!(conv2d_forward(&x, &w, None, 1, 1).is_ok());
    }

    #[test]
    fn matches_direct_loop() {
        let x = Tensor::new(&[2, 2, 5, 4], (0..80).map(|i| ((i * 7) % 11) as f64 - 5.0).collect())
            .unwrap();
        let w = Tensor::new(&[3, 2, 3, 2], (0..36).map(|i| ((i * 5) % 7) as f64 - 3.0).collect())
            .unwrap();
        let bias = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let (stride, pad) = (2, 1);
        let y = conv2d_forward(&x, &w, Some(&bias), stride, pad).unwrap();
        let (oh, ow) = (
            conv_output_size(5, 3, stride, pad),
            conv_output_size(4, 2, stride, pad),
        );
        assert_eq!(y.shape(), &[2, 3, oh, ow]);
        for b in 0..2 {
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..2 {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    let xv = x.data()[((b * 2 + ci) * 5 + iy as usize) * 4 + ix as usize];
                                    let wv = w.data()[((co * 2 + ci) * 3 + ki) * 2 + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + co) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }
}
