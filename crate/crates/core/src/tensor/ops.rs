use std::rc::Rc;

use super::{check_same_shape, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

fn outer_len_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x + y)?;
        Ok(self.op(out, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x - y)?;
        Ok(self.op(out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.op(out, &[a, b], |g, _, p| {
            vec![
                Some(g.zip_map(&p[1], |u, y| u * y).unwrap()),
                Some(g.zip_map(&p[0], |u, x| u * x).unwrap()),
            ]
        }))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.op(out, &[a], move |g, _, _| vec![Some(g.map(|u| u * s))])
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.op(out, &[a], |g, _, _| vec![Some(g.clone())])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.op(out, &[a], |g, _, p| {
            vec![Some(
                g.zip_map(&p[0], |u, x| if x > 0.0 { u } else { 0.0 })
                    .unwrap(),
            )]
        })
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.op(out, &[a], move |g, _, p| {
            vec![Some(
                g.zip_map(&p[0], |u, x| if x > 0.0 { u } else { slope * u })
                    .unwrap(),
            )]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.op(out, &[a], |g, y, _| {
            vec![Some(g.zip_map(y, |u, s| u * s * (1.0 - s)).unwrap())]
        })
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.op(out, &[a], move |g, _, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute difference.
    pub fn l1_mean(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape("l1_mean", &va, &vb)?;
        let n = va.numel() as f64;
        let out = Tensor::scalar(
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n,
        );
        Ok(self.op(out, &[a, b], move |g, _, p| {
            let s = g.item() / n;
            let ga = p[0]
                .zip_map(&p[1], |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                })
                .unwrap();
            let gb = ga.map(|v| -v);
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Mean squared difference.
    pub fn square_mean(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape("square_mean", &va, &vb)?;
        let n = va.numel() as f64;
        let out = Tensor::scalar(
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n,
        );
        Ok(self.op(out, &[a, b], move |g, _, p| {
            let s = 2.0 * g.item() / n;
            let ga = p[0].zip_map(&p[1], |x, y| s * (x - y)).unwrap();
            let gb = ga.map(|v| -v);
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Mean of `(a - target)^2` against a constant target value.
    pub fn square_mean_to(&self, a: Var, target: f64) -> Var {
        let va = self.value(a);
        let t = self.constant(Tensor::full(va.shape(), target));
        self.square_mean(a, t).expect("same shape by construction")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = (*va).clone().reshape(shape)?;
        Ok(self.op(out, &[a], move |g, _, _| {
            vec![Some(g.clone().reshape(&old).unwrap())]
        }))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let first = vals.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &vals {
            let s = v.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{:?}", first.shape()), s));
            }
            shape[axis] += s[axis];
        }
        let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let (outer, total, inner) = outer_len_inner(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in vals.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.op(out, xs, move |g, _, _| {
            let mut parts: Vec<Vec<f64>> = lens
                .iter()
                .map(|l| Vec::with_capacity(outer * l * inner))
                .collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (part, &l) in parts.iter_mut().zip(&lens) {
                    part.extend_from_slice(&gd[off..off + l * inner]);
                    off += l * inner;
                }
            }
            parts
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::new(s, d).unwrap()))
                .collect()
        }))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let in_shape = va.shape().to_vec();
        if axis >= in_shape.len() || start + len > in_shape[axis] {
            return Err(invalid(
                "narrow",
                format!("axis {axis} range {start}..{} invalid for {in_shape:?}", start + len),
            ));
        }
        let (outer, total, inner) = outer_len_inner(&in_shape, axis);
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.op(out, &[a], move |g, _, _| {
            let mut gi = Tensor::zeros(&in_shape);
            let gd = g.data();
            for o in 0..outer {
                let base = (o * total + start) * inner;
                gi.data_mut()[base..base + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gi)]
        }))
    }

    /// [N,C,H,W] -> [N,H,W,C].
    pub fn nchw_to_nhwc(&self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4("nchw_to_nhwc")?;
        self.permute4(a, [n, c, h, w], [0, 2, 3, 1])
    }

    /// [N,H,W,C] -> [N,C,H,W].
    pub fn nhwc_to_nchw(&self, a: Var) -> Result<Var> {
        let [n, h, w, c] = self.value(a).dims4("nhwc_to_nchw")?;
        self.permute4(a, [n, h, w, c], [0, 3, 1, 2])
    }

    fn permute4(&self, a: Var, dims: [usize; 4], perm: [usize; 4]) -> Result<Var> {
        let va = self.value(a);
        let out_dims = perm.map(|p| dims[p]);
        let in_strides = [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1];
        // stride in the input for each output axis
        let s = perm.map(|p| in_strides[p]);
        let gather = move |src: &[f64], dst: &mut Vec<f64>| {
            for i0 in 0..out_dims[0] {
                for i1 in 0..out_dims[1] {
                    for i2 in 0..out_dims[2] {
                        let base = i0 * s[0] + i1 * s[1] + i2 * s[2];
                        for i3 in 0..out_dims[3] {
                            dst.push(src[base + i3 * s[3]]);
                        }
                    }
                }
            }
        };
        let mut data = Vec::with_capacity(va.numel());
        gather(va.data(), &mut data);
        let out = Tensor::new(&out_dims, data)?;
        Ok(self.op(out, &[a], move |g, _, _| {
            let mut gi = vec![0.0; g.numel()];
            let gd = g.data();
            let mut k = 0;
            for i0 in 0..out_dims[0] {
                for i1 in 0..out_dims[1] {
                    for i2 in 0..out_dims[2] {
                        let base = i0 * s[0] + i1 * s[1] + i2 * s[2];
                        for i3 in 0..out_dims[3] {
                            gi[base + i3 * s[3]] = gd[k];
                            k += 1;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&dims, gi).unwrap())]
        }))
    }

    /// Softmax over the spatial extent of each (n, k) slice of `logits / temperature`.
    pub fn softmax_spatial(&self, logits: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(invalid(
                "softmax_spatial",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        let v = self.value(logits);
        let [n, k, h, w] = v.dims4("softmax_spatial")?;
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, k, h, w]);
        for (src, dst) in v.data().chunks(hw).zip(out.data_mut().chunks_mut(hw)) {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((s - m) / temperature).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        Ok(self.op(out, &[logits], move |g, y, _| {
            let mut gi = Tensor::zeros(y.shape());
            for ((gs, ys), gd) in g
                .data()
                .chunks(hw)
                .zip(y.data().chunks(hw))
                .zip(gi.data_mut().chunks_mut(hw))
            {
                let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in gd.iter_mut().zip(gs).zip(ys) {
                    *d = yv * (gv - dot) / temperature;
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Softmax across channels at every pixel of an [N,C,H,W] tensor.
    pub fn softmax_channels(&self, logits: Var) -> Result<Var> {
        let v = self.value(logits);
        let [n, c, h, w] = v.dims4("softmax_channels")?;
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let src = v.data();
            let dst = out.data_mut();
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let m = (0..c)
                        .map(|ch| src[base + ch * hw + p])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for ch in 0..c {
                        let e = (src[base + ch * hw + p] - m).exp();
                        dst[base + ch * hw + p] = e;
                        z += e;
                    }
                    for ch in 0..c {
                        dst[base + ch * hw + p] /= z;
                    }
                }
            }
        }
        Ok(self.op(out, &[logits], move |g, y, _| {
            let mut gi = Tensor::zeros(y.shape());
            let (gd, yd) = (g.data(), y.data());
            let out = gi.data_mut();
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let dot: f64 = (0..c)
                        .map(|ch| gd[base + ch * hw + p] * yd[base + ch * hw + p])
                        .sum();
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        out[i] = yd[i] * (gd[i] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Repeats each per-sample 2-vector `v[N,2]` over an H×W lattice: [N,2,H,W].
    pub fn broadcast_vector(&self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vv = self.value(v);
        let n = match vv.shape() {
            [n, 2] => *n,
            s => return Err(shape_err("broadcast_vector", "[N, 2]", s)),
        };
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, 2, h, w]);
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            chunk.fill(vv.data()[i]);
        }
        Ok(self.op(out, &[v], move |g, _, _| {
            let d = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
            vec![Some(Tensor::new(&[n, 2], d).unwrap())]
        }))
    }

    /// Mask-weighted sum of constant displacement fields.
    ///
    /// `masks` is [N,K+1,H,W] with the last channel reserved for the static
    /// background; `disp` is [N,K,2]. Output flow is [N,2,H,W] with
    /// `flow(p) = sum_k masks_k(p) * disp_k` (the background contributes zero).
    pub fn mask_weighted_flow(&self, masks: Var, disp: Var) -> Result<Var> {
        let (vm, vd) = (self.value(masks), self.value(disp));
        let [n, k1, h, w] = vm.dims4("mask_weighted_flow")?;
        if k1 == 0 || vd.shape() != [n, k1 - 1, 2] {
            return Err(shape_err(
                "mask_weighted_flow",
                format!("displacements [{n}, {}, 2]", k1.saturating_sub(1)),
                vd.shape(),
            ));
        }
        let k = k1 - 1;
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, 2, h, w]);
        {
            let (m, d, o) = (vm.data(), vd.data(), out.data_mut());
            for b in 0..n {
                for c in 0..2 {
                    let dst = &mut o[(b * 2 + c) * hw..(b * 2 + c + 1) * hw];
                    for j in 0..k {
                        let dv = d[(b * k + j) * 2 + c];
                        let src = &m[(b * k1 + j) * hw..(b * k1 + j + 1) * hw];
                        for (x, &mv) in dst.iter_mut().zip(src) {
                            *x += mv * dv;
                        }
                    }
                }
            }
        }
        Ok(self.op(out, &[masks, disp], move |g, _, p| {
            let (m, d, gd) = (p[0].data(), p[1].data(), g.data());
            let mut gm = Tensor::zeros(&[n, k1, h, w]);
            let mut gdisp = Tensor::zeros(&[n, k, 2]);
            for b in 0..n {
                for j in 0..k {
                    let mrow = &m[(b * k1 + j) * hw..(b * k1 + j + 1) * hw];
                    for c in 0..2 {
                        let grow = &gd[(b * 2 + c) * hw..(b * 2 + c + 1) * hw];
                        gdisp.data_mut()[(b * k + j) * 2 + c] =
                            grow.iter().zip(mrow).map(|(a, b)| a * b).sum();
                    }
                    let dx = d[(b * k + j) * 2];
                    let dy = d[(b * k + j) * 2 + 1];
                    let gx = &gd[(b * 2) * hw..(b * 2 + 1) * hw];
                    let gy = &gd[(b * 2 + 1) * hw..(b * 2 + 2) * hw];
                    let dst = &mut gm.data_mut()[(b * k1 + j) * hw..(b * k1 + j + 1) * hw];
                    for i in 0..hw {
                        dst[i] = gx[i] * dx + gy[i] * dy;
                    }
                }
            }
            vec![Some(gm), Some(gdisp)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        assert_eq!(g.value(g.relu(x)).data(), &[0.0, 2.0]);
    }

    #[test]
    fn concat_channel_axis_shape() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::ones(&[1, 3, 4, 4]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), vec![1, 5, 4, 4]);
        let v = g.value(c);
        assert_eq!(v.data()[..32].iter().sum::<f64>(), 0.0);
        assert_eq!(v.data()[32..].iter().sum::<f64>(), 48.0);
    }

    #[test]
    fn concat_rejects_bad_axis_and_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 2, 3, 4]));
        assert!(g.concat(&[a, a], 4).is_err());
        assert!(g.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn softmax_spatial_uniform_and_spike() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 8]));
        let y = g.value(g.softmax_spatial(x, 0.1).unwrap());
        assert!(y.data().iter().all(|&v| (v - 1.0 / 32.0).abs() < 1e-15));

        let mut spike = Tensor::zeros(&[1, 1, 8, 8]);
        spike.data_mut()[27] = 20.0;
        let s = g.constant(spike);
        let y = g.value(g.softmax_spatial(s, 0.1).unwrap());
        assert!(y.data()[27] > 1.0 - 1e-6);
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.softmax_spatial(x, 0.0).is_err());
        assert!(g.softmax_spatial(x, -1.0).is_err());
    }

    #[test]
    fn broadcast_vector_fills_lattice() {
        let g = Graph::new();
        let v = g.constant(t(&[1, 2], &[0.1, -0.2]));
        let f = g.value(g.broadcast_vector(v, 3, 5).unwrap());
        assert!(f.data()[..15].iter().all(|&x| x == 0.1));
        assert!(f.data()[15..].iter().all(|&x| x == -0.2));
        assert!((f.data()[..15].iter().sum::<f64>() - 15.0 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_blocks_path() {
        let g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.stop_gradient(x);
        assert_eq!(g.value(s).data(), g.value(x).data());
        let loss = g.sum(g.mul(s, x).unwrap());
        let grads = g.backward(loss).unwrap();
        // d/dx [sg(x) * x] = x, not 2x
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, -2.0, 0.5]);

        let only = g.sum(g.scale(s, 3.0));
        let grads = g.backward(only).unwrap();
        assert!(grads.get(x).is_none());
    }
}
