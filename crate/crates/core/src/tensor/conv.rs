use super::{Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let end = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (first.min(end), end)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let ix0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (d, s) in line[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let n = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kj - g.pad;
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, s) in dst[ix0..ix0 + hi - lo].iter_mut().zip(line) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst[ix0..].iter_mut().step_by(g.stride).zip(line) {
                            *d += *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// C[m,n] = beta*C + A[m,k] * B[k,n], with explicit (row, col) strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: index bounds follow from the strides above and slice lengths
    // checked by the callers (m*k, k*n, m*n elements).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    /// 2-D cross-correlation. `x` is [N,C,H,W], `w` is [O,C,KH,KW], `b` is [O].
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let [n, c, h, wd] = vx.dims4("conv2d")?;
        let [o, wc, kh, kw] = vw.dims4("conv2d weight")?;
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("weight with {c} input channels"),
                vw.shape(),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        if let Some(b) = b {
            let s = self.shape(b);
            if s != [o] {
                return Err(shape_err("conv2d bias", format!("[{o}]"), &s));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let in_len = c * h * wd;
        let out_len = o * ncols;
        let mut out = Tensor::zeros(&[n, o, geom.ho, geom.wo]);
        let mut cols = vec![0.0; rows * ncols];
        let bias = b.map(|b| self.value(b));
        for s in 0..n {
            im2col(&vx.data()[s * in_len..(s + 1) * in_len], &geom, &mut cols);
            let dst = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
            if let Some(bias) = &bias {
                for (oc, chunk) in dst.chunks_mut(ncols).enumerate() {
                    chunk.fill(bias.data()[oc]);
                }
            }
            gemm(
                o,
                rows,
                ncols,
                vw.data(),
                (rows, 1),
                &cols,
                (ncols, 1),
                if bias.is_some() { 1.0 } else { 0.0 },
                dst,
            );
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        let need_dx = self.requires_grad(x);
        let need_dw = self.requires_grad(w);
        Ok(self.op(out, &parents, move |g, _, p| {
            let (xv, wv) = (&p[0], &p[1]);
            let mut dx = need_dx.then(|| Tensor::zeros(xv.shape()));
            let mut dw = need_dw.then(|| Tensor::zeros(wv.shape()));
            let mut cols = vec![0.0; rows * ncols];
            let mut dcols = vec![0.0; rows * ncols];
            for s in 0..n {
                let gy = &g.data()[s * out_len..(s + 1) * out_len];
                if let Some(dw) = dw.as_mut() {
                    im2col(&xv.data()[s * in_len..(s + 1) * in_len], &geom, &mut cols);
                    // dW += dY * cols^T
                    gemm(o, ncols, rows, gy, (ncols, 1), &cols, (1, ncols), 1.0, dw.data_mut());
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols = W^T * dY
                    gemm(rows, o, ncols, wv.data(), (1, rows), gy, (ncols, 1), 0.0, &mut dcols);
                    col2im(&dcols, &geom, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
                }
            }
            let mut res = vec![dx, dw];
            if has_bias {
                let mut db = Tensor::zeros(&[o]);
                for s in 0..n {
                    let gy = &g.data()[s * out_len..(s + 1) * out_len];
                    for (oc, chunk) in gy.chunks(ncols).enumerate() {
                        db.data_mut()[oc] += chunk.iter().sum::<f64>();
                    }
                }
                res.push(Some(db));
            }
            res
        }))
    }

    /// Non-overlapping k×k block means.
    pub fn avg_pool2d(&self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims4("avg_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(invalid(
                "avg_pool2d",
                format!("spatial size {h}x{w} not divisible by {k}"),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            for plane in 0..n * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for dy in 0..k {
                            let row = plane * h * w + (oy * k + dy) * w + ox * k;
                            s += src[row..row + k].iter().sum::<f64>();
                        }
                        dst[plane * ho * wo + oy * wo + ox] = s * inv;
                    }
                }
            }
        }
        Ok(self.op(out, &[x], move |g, _, _| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            let (gd, dst) = (g.data(), gi.data_mut());
            for plane in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        dst[plane * h * w + y * w + xx] =
                            gd[plane * ho * wo + (y / k) * wo + xx / k] * inv;
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Nearest-neighbour up-sampling by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(invalid("upsample_nearest", "factor must be >= 1"));
        }
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims4("upsample_nearest")?;
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            for plane in 0..n * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        dst[plane * ho * wo + y * wo + xx] =
                            src[plane * h * w + (y / factor) * w + xx / factor];
                    }
                }
            }
        }
        Ok(self.op(out, &[x], move |g, _, _| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            let (gd, dst) = (g.data(), gi.data_mut());
            for plane in 0..n * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        dst[plane * h * w + (y / factor) * w + xx / factor] +=
                            gd[plane * ho * wo + y * wo + xx];
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Nearest-neighbour resize in normalized coordinates.
    ///
    /// Output lattice point `i` reads the input lattice point whose
    /// normalized coordinate is closest, so values (including normalized
    /// flow vectors) are picked, never rescaled.
    pub fn resize_nearest(&self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims4("resize_nearest")?;
        if ho == 0 || wo == 0 {
            return Err(invalid("resize_nearest", "output size must be positive"));
        }
        if (ho, wo) == (h, w) {
            return Ok(x);
        }
        let pick = |i: usize, from: usize, to: usize| -> usize {
            if to == 1 {
                (from - 1) / 2
            } else {
                ((i * (from - 1)) as f64 / (to - 1) as f64).round() as usize
            }
        };
        let ys: Vec<usize> = (0..ho).map(|i| pick(i, h, ho)).collect();
        let xs: Vec<usize> = (0..wo).map(|i| pick(i, w, wo)).collect();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            for plane in 0..n * c {
                for (oy, &iy) in ys.iter().enumerate() {
                    for (ox, &ix) in xs.iter().enumerate() {
                        dst[plane * ho * wo + oy * wo + ox] = src[plane * h * w + iy * w + ix];
                    }
                }
            }
        }
        Ok(self.op(out, &[x], move |g, _, _| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            let (gd, dst) = (g.data(), gi.data_mut());
            for plane in 0..n * c {
                for (oy, &iy) in ys.iter().enumerate() {
                    for (ox, &ix) in xs.iter().enumerate() {
                        dst[plane * h * w + iy * w + ix] += gd[plane * ho * wo + oy * wo + ox];
                    }
                }
            }
            vec![Some(gi)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_center_is_nine() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.value(g.conv2d(x, w, None, 1, 1).unwrap());
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let g = Graph::new();
        let xt = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f64 * 0.37).sin());
        let mut wt = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            wt.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let x = g.constant(xt.clone());
        let w = g.constant(wt);
        let y = g.value(g.conv2d(x, w, None, 1, 1).unwrap());
        assert_eq!(*y, xt);
    }

    #[test]
    fn conv_rejects_mismatched_channels_and_oversized_kernel() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 3, 3]"), "{err}");
        let big = g.constant(Tensor::ones(&[1, 2, 7, 7]));
        assert!(g.conv2d(x, big, None, 1, 1).is_err());
    }

    #[test]
    fn strided_conv_shape() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 8, 8]));
        let w = g.constant(Tensor::ones(&[2, 1, 4, 4]));
        assert_eq!(g.shape(g.conv2d(x, w, None, 2, 1).unwrap()), vec![1, 2, 4, 4]);
    }

    #[test]
    fn avg_pool_values_and_errors() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        assert_eq!(g.value(g.avg_pool2d(x, 2).unwrap()).data(), &[4.0]);
        let c = g.constant(Tensor::full(&[1, 2, 4, 4], 2.5));
        assert!(g.value(g.avg_pool2d(c, 2).unwrap()).data().iter().all(|&v| v == 2.5));
        let odd = g.constant(Tensor::ones(&[1, 1, 3, 4]));
        assert!(g.avg_pool2d(odd, 2).is_err());
    }

    #[test]
    fn upsample_blocks() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.value(g.upsample_nearest(x, 2).unwrap());
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert_eq!(g.value(g.upsample_nearest(x, 1).unwrap()).data(), &[1., 2., 3., 4.]);
        assert!(g.upsample_nearest(x, 0).is_err());
    }

    #[test]
    fn resize_nearest_picks_values() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 8, 8], 0.3));
        let y = g.value(g.resize_nearest(x, 2, 2).unwrap());
        assert!(y.data().iter().all(|&v| v == 0.3));
        let ramp = g.constant(Tensor::from_fn(&[1, 1, 1, 5], |i| i as f64));
        let y = g.value(g.resize_nearest(ramp, 1, 3).unwrap());
        assert_eq!(y.data(), &[0.0, 2.0, 4.0]);
    }
}
