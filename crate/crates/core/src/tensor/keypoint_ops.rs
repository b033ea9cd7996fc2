//! Moment fitting of confidence maps and Gaussian re-rendering.

use super::{lattice_coord, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

fn coords(n: usize) -> Vec<f64> {
    (0..n).map(|i| lattice_coord(i, n)).collect()
}

fn inverse2(m: [f64; 4]) -> Option<[f64; 4]> {
    let det = m[0] * m[3] - m[1] * m[2];
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    Some([m[3] / det, -m[1] / det, -m[2] / det, m[0] / det])
}

impl Graph {
    /// Expected lattice coordinate of each map: [N,K,H,W] -> [N,K,2] as (x, y).
    pub fn heatmap_mean(&self, heat: Var) -> Result<Var> {
        let vh = self.value(heat);
        let [n, k, h, w] = vh.dims4("heatmap_mean")?;
        let (xs, ys) = (coords(w), coords(h));
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, k, 2]);
        for (m, map) in vh.data().chunks(hw).enumerate() {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let v = map[i * w + j];
                    sx += v * xs[j];
                    sy += v * ys[i];
                }
            }
            out.data_mut()[2 * m] = sx;
            out.data_mut()[2 * m + 1] = sy;
        }
        Ok(self.op(out, &[heat], move |g, _, _| {
            let mut gi = Tensor::zeros(&[n, k, h, w]);
            for (m, dst) in gi.data_mut().chunks_mut(hw).enumerate() {
                let (gx, gy) = (g.data()[2 * m], g.data()[2 * m + 1]);
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = gx * xs[j] + gy * ys[i];
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Second central moment of each map around `mean`: [N,K,2,2].
    pub fn heatmap_cov(&self, heat: Var, mean: Var) -> Result<Var> {
        let (vh, vm) = (self.value(heat), self.value(mean));
        let [n, k, h, w] = vh.dims4("heatmap_cov")?;
        if vm.shape() != [n, k, 2] {
            return Err(shape_err("heatmap_cov", format!("mean [{n}, {k}, 2]"), vm.shape()));
        }
        let (xs, ys) = (coords(w), coords(h));
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, k, 2, 2]);
        for (m, map) in vh.data().chunks(hw).enumerate() {
            let (mx, my) = (vm.data()[2 * m], vm.data()[2 * m + 1]);
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for i in 0..h {
                let dy = ys[i] - my;
                for j in 0..w {
                    let v = map[i * w + j];
                    let dx = xs[j] - mx;
                    sxx += v * dx * dx;
                    sxy += v * dx * dy;
                    syy += v * dy * dy;
                }
            }
            out.data_mut()[4 * m..4 * m + 4].copy_from_slice(&[sxx, sxy, sxy, syy]);
        }
        Ok(self.op(out, &[heat, mean], move |g, _, p| {
            let (hd, md) = (p[0].data(), p[1].data());
            let mut gh = Tensor::zeros(&[n, k, h, w]);
            let mut gm = Tensor::zeros(&[n, k, 2]);
            for m in 0..n * k {
                let gg = &g.data()[4 * m..4 * m + 4];
                let (mx, my) = (md[2 * m], md[2 * m + 1]);
                let map = &hd[m * hw..(m + 1) * hw];
                let dst = &mut gh.data_mut()[m * hw..(m + 1) * hw];
                let (mut ax, mut ay) = (0.0, 0.0);
                for i in 0..h {
                    let dy = ys[i] - my;
                    for j in 0..w {
                        let dx = xs[j] - mx;
                        dst[i * w + j] =
                            gg[0] * dx * dx + (gg[1] + gg[2]) * dx * dy + gg[3] * dy * dy;
                        let v = map[i * w + j];
                        ax += v * (2.0 * gg[0] * dx + (gg[1] + gg[2]) * dy);
                        ay += v * ((gg[1] + gg[2]) * dx + 2.0 * gg[3] * dy);
                    }
                }
                gm.data_mut()[2 * m] = -ax;
                gm.data_mut()[2 * m + 1] = -ay;
            }
            vec![Some(gh), Some(gm)]
        }))
    }

    /// Renders `exp(-(p - h)^T cov^-1 (p - h))` on an H×W lattice for every
    /// keypoint. Peak value is 1 at p = h. `mean` is [N,K,2], `cov` [N,K,2,2].
    pub fn render_gaussians(&self, mean: Var, cov: Var, h: usize, w: usize) -> Result<Var> {
        let (vm, vc) = (self.value(mean), self.value(cov));
        let (n, k) = match vm.shape() {
            [n, k, 2] => (*n, *k),
            s => return Err(shape_err("render_gaussians", "mean [N, K, 2]", s)),
        };
        if vc.shape() != [n, k, 2, 2] {
            return Err(shape_err(
                "render_gaussians",
                format!("cov [{n}, {k}, 2, 2]"),
                vc.shape(),
            ));
        }
        let mut inverses = Vec::with_capacity(n * k);
        for m in 0..n * k {
            let c = &vc.data()[4 * m..4 * m + 4];
            let inv = inverse2([c[0], c[1], c[2], c[3]])
                .ok_or_else(|| invalid("render_gaussians", format!("singular covariance {c:?}")))?;
            inverses.push(inv);
        }
        let (xs, ys) = (coords(w), coords(h));
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, k, h, w]);
        for (m, dst) in out.data_mut().chunks_mut(hw).enumerate() {
            let a = inverses[m];
            let (mx, my) = (vm.data()[2 * m], vm.data()[2 * m + 1]);
            for i in 0..h {
                let uy = ys[i] - my;
                for j in 0..w {
                    let ux = xs[j] - mx;
                    let q = ux * (a[0] * ux + a[1] * uy) + uy * (a[2] * ux + a[3] * uy);
                    dst[i * w + j] = (-q).exp();
                }
            }
        }
        Ok(self.op(out, &[mean, cov], move |g, y, p| {
            let md = p[0].data();
            let mut gm = Tensor::zeros(&[n, k, 2]);
            let mut gc = Tensor::zeros(&[n, k, 2, 2]);
            for m in 0..n * k {
                let a = inverses[m];
                let (mx, my) = (md[2 * m], md[2 * m + 1]);
                let gs = &g.data()[m * hw..(m + 1) * hw];
                let vs = &y.data()[m * hw..(m + 1) * hw];
                let (mut dhx, mut dhy) = (0.0, 0.0);
                let mut dc = [0.0; 4];
                for i in 0..h {
                    let uy = ys[i] - my;
                    for j in 0..w {
                        let s = gs[i * w + j] * vs[i * w + j];
                        if s == 0.0 {
                            continue;
                        }
                        let ux = xs[j] - mx;
                        // A u and A^T u
                        let (au0, au1) = (a[0] * ux + a[1] * uy, a[2] * ux + a[3] * uy);
                        let (atu0, atu1) = (a[0] * ux + a[2] * uy, a[1] * ux + a[3] * uy);
                        dhx += s * (au0 + atu0);
                        dhy += s * (au1 + atu1);
                        dc[0] += s * atu0 * au0;
                        dc[1] += s * atu0 * au1;
                        dc[2] += s * atu1 * au0;
                        dc[3] += s * atu1 * au1;
                    }
                }
                gm.data_mut()[2 * m] = dhx;
                gm.data_mut()[2 * m + 1] = dhy;
                gc.data_mut()[4 * m..4 * m + 4].copy_from_slice(&dc);
            }
            vec![Some(gm), Some(gc)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_map_has_point_mean_and_zero_spread() {
        let g = Graph::new();
        let (h, w) = (9, 11);
        let mut t = Tensor::zeros(&[1, 1, h, w]);
        t.data_mut()[3 * w + 7] = 1.0;
        let heat = g.constant(t);
        let mean = g.heatmap_mean(heat).unwrap();
        let cov = g.heatmap_cov(heat, mean).unwrap();
        assert_eq!(g.value(mean).data(), &[lattice_coord(7, w), lattice_coord(3, h)]);
        assert!(g.value(cov).data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn render_peak_is_one_and_rejects_singular() {
        let g = Graph::new();
        let mean = g.constant(Tensor::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap());
        let cov = g.constant(Tensor::new(&[1, 1, 2, 2], vec![0.05, 0.0, 0.0, 0.05]).unwrap());
        let r = g.value(g.render_gaussians(mean, cov, 9, 9).unwrap());
        assert_eq!(r.data()[4 * 9 + 4], 1.0);
        let singular = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.render_gaussians(mean, singular, 9, 9).is_err());
    }
}
