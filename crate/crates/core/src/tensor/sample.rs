use super::{Graph, Tensor, Var};
use crate::error::{shape_err, Result};

/// Normalized coordinate of lattice index `i` along an axis of `n` points.
/// The first and last pixel centres sit at -1 and +1.
pub fn lattice_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Distance between adjacent pixel centres in normalized units.
pub fn pixel_pitch(n: usize) -> f64 {
    2.0 / (n.max(2) - 1) as f64
}

/// Sampling grid [N,H,W,2] whose (x, y) entries are the lattice coordinates.
pub fn identity_grid(n: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, h, w, 2]);
    let d = t.data_mut();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let k = ((b * h + i) * w + j) * 2;
                d[k] = lattice_coord(j, w);
                d[k + 1] = lattice_coord(i, h);
            }
        }
    }
    t
}

/// Normalized -> pixel coordinate, clamped to the border. Returns the
/// clamped coordinate and d(pixel)/d(normalized) (zero when clamped).
#[inline]
fn to_pixel(g: f64, n: usize) -> (f64, f64) {
    let scale = (n - 1) as f64 * 0.5;
    let mut p = (g + 1.0) * scale;
    // snap round-off so lattice coordinates land exactly on pixel centres
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        p = r;
    }
    let hi = (n - 1) as f64;
    if p < 0.0 {
        (0.0, 0.0)
    } else if p > hi {
        (hi, 0.0)
    } else {
        (p, scale)
    }
}

#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    dx: f64,
    dy: f64,
}

fn tap(gx: f64, gy: f64, h: usize, w: usize) -> Tap {
    let (px, dx) = to_pixel(gx, w);
    let (py, dy) = to_pixel(gy, h);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    Tap {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        fx: px - x0 as f64,
        fy: py - y0 as f64,
        dx,
        dy,
    }
}

impl Graph {
    /// Bilinear sampling of `x` [N,C,H,W] at `grid` [N,H',W',2] (normalized
    /// (x, y) coordinates). Samples outside the lattice are clamped to the
    /// border. Differentiable with respect to both inputs.
    pub fn grid_sample(&self, x: Var, grid: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(grid));
        let [n, c, h, w] = vx.dims4("grid_sample")?;
        let [gn, ho, wo, two] = vg.dims4("grid_sample grid")?;
        if gn != n || two != 2 {
            return Err(shape_err(
                "grid_sample",
                format!("grid [{n}, H', W', 2]"),
                vg.shape(),
            ));
        }
        let hw = h * w;
        let ohw = ho * wo;
        let mut taps = Vec::with_capacity(n * ohw);
        for k in 0..n * ohw {
            taps.push(tap(vg.data()[2 * k], vg.data()[2 * k + 1], h, w));
        }
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            for b in 0..n {
                for ch in 0..c {
                    let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let o = &mut dst[(b * c + ch) * ohw..(b * c + ch + 1) * ohw];
                    for (p, t) in taps[b * ohw..(b + 1) * ohw].iter().enumerate() {
                        let v00 = plane[t.y0 * w + t.x0];
                        let v01 = plane[t.y0 * w + t.x1];
                        let v10 = plane[t.y1 * w + t.x0];
                        let v11 = plane[t.y1 * w + t.x1];
                        o[p] = (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01)
                            + t.fy * ((1.0 - t.fx) * v10 + t.fx * v11);
                    }
                }
            }
        }
        let need_dx = self.requires_grad(x);
        let need_dg = self.requires_grad(grid);
        Ok(self.op(out, &[x, grid], move |g, _, p| {
            let src = p[0].data();
            let gd = g.data();
            let mut dx = need_dx.then(|| Tensor::zeros(&[n, c, h, w]));
            let mut dgrid = need_dg.then(|| Tensor::zeros(&[n, ho, wo, 2]));
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let plane = &src[base..base + hw];
                    let up = &gd[(b * c + ch) * ohw..(b * c + ch + 1) * ohw];
                    for (q, t) in taps[b * ohw..(b + 1) * ohw].iter().enumerate() {
                        let u = up[q];
                        if u == 0.0 {
                            continue;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let d = &mut dx.data_mut()[base..base + hw];
                            d[t.y0 * w + t.x0] += u * (1.0 - t.fy) * (1.0 - t.fx);
                            d[t.y0 * w + t.x1] += u * (1.0 - t.fy) * t.fx;
                            d[t.y1 * w + t.x0] += u * t.fy * (1.0 - t.fx);
                            d[t.y1 * w + t.x1] += u * t.fy * t.fx;
                        }
                        if let Some(dg) = dgrid.as_mut() {
                            let v00 = plane[t.y0 * w + t.x0];
                            let v01 = plane[t.y0 * w + t.x1];
                            let v10 = plane[t.y1 * w + t.x0];
                            let v11 = plane[t.y1 * w + t.x1];
                            let dpx = (1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
                            let dpy = (1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
                            let k = (b * ohw + q) * 2;
                            dg.data_mut()[k] += u * dpx * t.dx;
                            dg.data_mut()[k + 1] += u * dpy * t.dy;
                        }
                    }
                }
            }
            vec![dx, dgrid]
        }))
    }

    /// Backward warp: output pixel p samples `x` at p + flow(p).
    /// `flow` is [N,2,H',W'] in normalized units.
    pub fn warp(&self, x: Var, flow: Var) -> Result<Var> {
        let [n, two, h, w] = self.value(flow).dims4("warp flow")?;
        if two != 2 {
            return Err(shape_err("warp", "flow [N, 2, H, W]", &self.shape(flow)));
        }
        let offsets = self.nchw_to_nhwc(flow)?;
        let base = self.constant(identity_grid(n, h, w));
        let grid = self.add(base, offsets)?;
        self.grid_sample(x, grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[n, c, h, w], |i| ((i * 7919) % 101) as f64 / 101.0)
    }

    #[test]
    fn identity_grid_reproduces_input_exactly() {
        let g = Graph::new();
        for (h, w) in [(64, 64), (7, 13), (32, 16)] {
            let xt = image(2, 3, h, w);
            let x = g.constant(xt.clone());
            let grid = g.constant(identity_grid(2, h, w));
            assert_eq!(*g.value(g.grid_sample(x, grid).unwrap()), xt);
        }
    }

    #[test]
    fn one_pitch_shift_moves_image_by_one_pixel() {
        let g = Graph::new();
        let (h, w) = (16, 20);
        let xt = image(1, 2, h, w);
        let x = g.constant(xt.clone());
        let mut gt = identity_grid(1, h, w);
        let pitch = pixel_pitch(w);
        for k in 0..h * w {
            gt.data_mut()[2 * k] += pitch;
        }
        let y = g.value(g.grid_sample(x, g.constant(gt)).unwrap());
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w - 1 {
                    let got = y.data()[(c * h + i) * w + j];
                    let want = xt.data()[(c * h + i) * w + j + 1];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_range_samples_clamp_to_border() {
        let g = Graph::new();
        let xt = image(1, 1, 4, 4);
        let x = g.constant(xt.clone());
        let grid = g.constant(Tensor::new(&[1, 1, 2, 2], vec![-5.0, -5.0, 3.0, 0.0]).unwrap());
        let y = g.value(g.grid_sample(x, grid).unwrap());
        assert_eq!(y.data()[0], xt.data()[0]);
        // x clamped to the right border, y at the vertical centre (row 1.5)
        let want = 0.5 * (xt.data()[7] + xt.data()[11]);
        assert!((y.data()[1] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let g = Graph::new();
        let xt = image(2, 3, 8, 8);
        let x = g.constant(xt.clone());
        let flow = g.constant(Tensor::zeros(&[2, 2, 8, 8]));
        assert_eq!(*g.value(g.warp(x, flow).unwrap()), xt);
    }
}
