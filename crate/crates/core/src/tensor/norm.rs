use super::{Graph, Tensor, Var};
use crate::error::{shape_err, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_affine(g: &Graph, gamma: Var, beta: Var, c: usize) -> Result<()> {
    for v in [gamma, beta] {
        let s = g.shape(v);
        if s != [c] {
            return Err(shape_err("norm affine", format!("[{c}]"), &s));
        }
    }
    Ok(())
}

/// Normalizes each group of `len` elements (`groups` gives the flat indices
/// per group) and returns x_hat and the per-group inverse std.
fn standardize(x: &[f64], groups: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(groups.len());
    let mut vars = Vec::with_capacity(groups.len());
    let mut inv = Vec::with_capacity(groups.len());
    for ranges in groups {
        let m: usize = ranges.iter().map(|(a, b)| b - a).sum();
        let mean = ranges
            .iter()
            .map(|&(a, b)| x[a..b].iter().sum::<f64>())
            .sum::<f64>()
            / m as f64;
        let var = ranges
            .iter()
            .map(|&(a, b)| x[a..b].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / m as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for &(a, b) in ranges {
            for i in a..b {
                xhat[i] = (x[i] - mean) * is;
            }
        }
        means.push(mean);
        vars.push(var);
        inv.push(is);
    }
    (xhat, means, vars, inv)
}

impl Graph {
    fn normalize_groups(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        batch_stats: bool,
    ) -> Result<(Var, NormStats)> {
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims4("norm")?;
        check_affine(self, gamma, beta, c)?;
        let hw = h * w;
        // group g covers channel ch (batch mode) or (sample, channel) (instance mode)
        let groups: Vec<Vec<(usize, usize)>> = if batch_stats {
            (0..c)
                .map(|ch| {
                    (0..n)
                        .map(|b| ((b * c + ch) * hw, (b * c + ch + 1) * hw))
                        .collect()
                })
                .collect()
        } else {
            (0..n * c).map(|p| vec![(p * hw, (p + 1) * hw)]).collect()
        };
        let channel_of = move |gi: usize| if batch_stats { gi } else { gi % c };
        let (xhat, means, vars, inv) = standardize(vx.data(), &groups);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut out = Tensor::zeros(vx.shape());
        for (gi, ranges) in groups.iter().enumerate() {
            let ch = channel_of(gi);
            let (ga, be) = (vg.data()[ch], vb.data()[ch]);
            for &(a, b) in ranges {
                for i in a..b {
                    out.data_mut()[i] = ga * xhat[i] + be;
                }
            }
        }
        let stats = NormStats {
            mean: means,
            var: vars,
        };
        let var = self.op(out, &[x, gamma, beta], move |g, _, p| {
            let gd = g.data();
            let gam = p[1].data();
            let mut dx = Tensor::zeros(p[0].shape());
            let mut dgam = Tensor::zeros(&[c]);
            let mut dbet = Tensor::zeros(&[c]);
            for (gi, ranges) in groups.iter().enumerate() {
                let ch = channel_of(gi);
                let m: usize = ranges.iter().map(|(a, b)| b - a).sum();
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for &(a, b) in ranges {
                    for i in a..b {
                        sum_dy += gd[i];
                        sum_dy_xhat += gd[i] * xhat[i];
                    }
                }
                dgam.data_mut()[ch] += sum_dy_xhat;
                dbet.data_mut()[ch] += sum_dy;
                let k = gam[ch] * inv[gi] / m as f64;
                for &(a, b) in ranges {
                    for i in a..b {
                        dx.data_mut()[i] =
                            k * (m as f64 * gd[i] - sum_dy - xhat[i] * sum_dy_xhat);
                    }
                }
            }
            vec![Some(dx), Some(dgam), Some(dbet)]
        });
        Ok((var, stats))
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var) -> Result<(Var, NormStats)> {
        self.normalize_groups(x, gamma, beta, true)
    }

    /// Per-sample, per-channel normalization.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        Ok(self.normalize_groups(x, gamma, beta, false)?.0)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims4("batch_norm_eval")?;
        check_affine(self, gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm_eval stats", format!("[{c}]"), &[mean.len()]));
        }
        let hw = h * w;
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mean = mean.to_vec();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut out = Tensor::zeros(vx.shape());
        for p in 0..n * c {
            let ch = p % c;
            let (s, t) = (vg.data()[ch] * inv[ch], vb.data()[ch]);
            for i in p * hw..(p + 1) * hw {
                out.data_mut()[i] = s * (vx.data()[i] - mean[ch]) + t;
            }
        }
        Ok(self.op(out, &[x, gamma, beta], move |g, _, p| {
            let gd = g.data();
            let (xv, gam) = (p[0].data(), p[1].data());
            let mut dx = Tensor::zeros(p[0].shape());
            let mut dgam = Tensor::zeros(&[c]);
            let mut dbet = Tensor::zeros(&[c]);
            for pl in 0..n * c {
                let ch = pl % c;
                for i in pl * hw..(pl + 1) * hw {
                    dx.data_mut()[i] = gd[i] * gam[ch] * inv[ch];
                    dgam.data_mut()[ch] += gd[i] * (xv[i] - mean[ch]) * inv[ch];
                    dbet.data_mut()[ch] += gd[i];
                }
            }
            vec![Some(dx), Some(dgam), Some(dbet)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_mode_standardizes_each_channel() {
        let g = Graph::new();
        let xt = Tensor::from_fn(&[4, 3, 5, 5], |i| 10.0 * ((i as f64) * 1.3).sin() + i as f64 * 0.01);
        let x = g.constant(xt);
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta).unwrap();
        let y = g.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-6, "var {v}");
            assert!(stats.var[ch] > 10.0);
        }
    }

    #[test]
    fn eval_mode_with_batch_stats_matches_train_mode() {
        let g = Graph::new();
        let xt = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 31) % 17) as f64 * 0.2);
        let x = g.constant(xt);
        let gamma = g.constant(Tensor::new(&[2], vec![1.5, 0.5]).unwrap());
        let beta = g.constant(Tensor::new(&[2], vec![0.1, -0.2]).unwrap());
        let (y, stats) = g.batch_norm_train(x, gamma, beta).unwrap();
        let ye = g.batch_norm_eval(x, gamma, beta, &stats.mean, &stats.var).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ye).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_affine_shape() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3, 2, 2]));
        let gamma = g.constant(Tensor::ones(&[2]));
        assert!(g.instance_norm(x, gamma, gamma).is_err());
    }
}
