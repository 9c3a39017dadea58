//! Raw NCHW kernels shared by the tape ops.

use crate::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            F::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y[n] = W · im2col(x[n])`, weights `[c_out, c_in, k, k]`.
pub fn conv2d_forward<F: Scalar>(x: &[F], wt: &[F], n: usize, g: &ConvGeom) -> Vec<F> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.col_cols();
    let mut y = vec![F::zero(); n * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); g.col_rows() * g.col_cols()]
    };
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let yi = &mut y[i * out_len..(i + 1) * out_len];
        let src: &[F] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        gemm(wt, false, src, false, g.c_out, g.col_rows(), g.col_cols(), yi, false);
    }
    y
}

/// Accumulates input and/or weight gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    x: &[F],
    wt: &[F],
    dy: &[F],
    n: usize,
    g: &ConvGeom,
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
) {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.col_cols();
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![F::zero(); rows * ncols];
    let mut dcols = vec![F::zero(); rows * ncols];
    let mut dx = dx;
    let mut dw = dw;
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let dyi = &dy[i * out_len..(i + 1) * out_len];
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[F] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            // dW[c_out, rows] += dy[c_out, ncols] · cols^T
            gemm(dyi, false, src, true, g.c_out, ncols, rows, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm(wt, true, dyi, false, rows, g.c_out, ncols, dxi, true);
            } else {
                gemm(wt, true, dyi, false, rows, g.c_out, ncols, &mut dcols, false);
                col2im(&dcols, g, dxi);
            }
        }
    }
}

/// 2x2 max pooling with stride 2. Returns output and flat argmax indices into `x`.
pub fn max_pool2_forward<F: Scalar>(x: &[F], n: usize, c: usize, h: usize, w: usize) -> (Vec<F>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (y, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; g.c_out * ho * wo];
        for co in 0..g.c_out {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                if ii < 0 || jj < 0 || ii >= g.h as isize || jj >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + ii as usize) * g.w + jj as usize]
                                    * wt[((co * g.c_in + ci) * g.k + ki) * g.k + kj];
                            }
                        }
                    }
                    y[(co * ho + oi) * wo + oj] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let g = ConvGeom {
                c_in: 2,
                h: 5,
                w: 6,
                c_out: 3,
                k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.3).sin()).collect();
            let wt: Vec<f64> = (0..3 * 2 * k * k).map(|i| (i as f64 * 0.7).cos()).collect();
            let y = conv2d_forward(&x, &wt, 1, &g);
            let want = naive_conv(&x, &wt, &g);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn max_pool_picks_largest() {
        let x = [1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 9.0];
        let (y, arg) = max_pool2_forward(&x, 1, 1, 2, 4);
        assert_eq!(y, vec![5.0, 9.0]);
        assert_eq!(arg, vec![1, 7]);
    }
}
