//! The finite-difference suite covering every differentiable op, shared by
//! the test targets and the `check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, GradCheckConfig};
use super::{identity_grid, pixel_pitch, Graph, Tensor, Var};
use crate::error::Result;

pub const SUITE_SEEDS: u64 = 20;
pub const SMOOTH_TOL: f64 = 1e-5;
pub const SAMPLER_TOL: f64 = 1e-4;

type OpFn = Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>;
type MakeFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub f: OpFn,
    pub make: MakeFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCaseResult {
    pub name: &'static str,
    pub tol: f64,
    pub worst: f64,
    pub seeds: u64,
}

impl GradCaseResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

fn case(
    name: &'static str,
    tol: f64,
    f: impl Fn(&Graph, &[Var]) -> Result<Var> + 'static,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
) -> GradCase {
    GradCase {
        name,
        tol,
        f: Box::new(f),
        make: Box::new(make),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so piecewise-linear kinks are not crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Grid points jittered away from cell boundaries; about 10% of coordinates
/// lie clearly outside the lattice to exercise border clamping.
fn jittered_grid(r: &mut ChaCha8Rng, n: usize, ho: usize, wo: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, ho, wo, 2]);
    for k in 0..n * ho * wo {
        for (axis, size) in [(0, w), (1, h)] {
            let v = if r.gen_bool(0.1) {
                let m = r.gen_range(1.2..1.6);
                if r.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            } else {
                let cell = r.gen_range(0..size - 1) as f64;
                let frac = r.gen_range(0.1..0.9);
                -1.0 + (cell + frac) * pixel_pitch(size)
            };
            t.data_mut()[2 * k + axis] = v;
        }
    }
    t
}

fn random_cov(r: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, 2, 2]);
    for m in 0..n {
        let a = r.gen_range(0.02..0.1);
        let b = r.gen_range(0.02..0.1);
        let th: f64 = r.gen_range(0.0..std::f64::consts::PI);
        let (c, s) = (th.cos(), th.sin());
        let xx = a * c * c + b * s * s;
        let yy = a * s * s + b * c * c;
        let xy = (a - b) * c * s;
        t.data_mut()[4 * m..4 * m + 4].copy_from_slice(&[xx, xy, xy, yy]);
    }
    t
}

/// Every differentiable op with its input generator and tolerance.
pub fn op_suite() -> Vec<GradCase> {
    vec![
        case(
            "conv2d",
            1e-6,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
            |r| {
                vec![
                    uniform(r, &[2, 3, 8, 8], -1.0, 1.0),
                    uniform(r, &[4, 3, 3, 3], -0.5, 0.5),
                    uniform(r, &[4], -0.5, 0.5),
                ]
            },
        ),
        case(
            "conv2d stride 2",
            1e-6,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
            |r| {
                vec![
                    uniform(r, &[2, 2, 8, 8], -1.0, 1.0),
                    uniform(r, &[3, 2, 4, 4], -0.5, 0.5),
                    uniform(r, &[3], -0.5, 0.5),
                ]
            },
        ),
        case("avg_pool2d", 1e-6, |g, v| g.avg_pool2d(v[0], 2), |r| {
            vec![uniform(r, &[2, 3, 8, 6], -1.0, 1.0)]
        }),
        case("upsample_nearest", 1e-6, |g, v| g.upsample_nearest(v[0], 2), |r| {
            vec![uniform(r, &[1, 2, 3, 4], -1.0, 1.0)]
        }),
        case("resize_nearest", 1e-6, |g, v| g.resize_nearest(v[0], 4, 3), |r| {
            vec![uniform(r, &[1, 2, 16, 12], -1.0, 1.0)]
        }),
        case("softmax_spatial", SMOOTH_TOL, |g, v| g.softmax_spatial(v[0], 0.1), |r| {
            vec![uniform(r, &[2, 3, 5, 6], -0.3, 0.3)]
        }),
        case("softmax_channels", SMOOTH_TOL, |g, v| g.softmax_channels(v[0]), |r| {
            vec![uniform(r, &[2, 4, 3, 3], -2.0, 2.0)]
        }),
        case(
            "grid_sample",
            SAMPLER_TOL,
            |g, v| g.grid_sample(v[0], v[1]),
            |r| vec![uniform(r, &[2, 3, 6, 7], -1.0, 1.0), jittered_grid(r, 2, 4, 5, 6, 7)],
        ),
        case(
            "warp",
            SAMPLER_TOL,
            |g, v| g.warp(v[0], v[1]),
            |r| {
                let (h, w) = (6, 6);
                let grid = jittered_grid(r, 1, h, w, h, w);
                let id = identity_grid(1, h, w);
                let mut flow = Tensor::zeros(&[1, 2, h, w]);
                for i in 0..h * w {
                    for c in 0..2 {
                        flow.data_mut()[c * h * w + i] = grid.data()[2 * i + c] - id.data()[2 * i + c];
                    }
                }
                vec![uniform(r, &[1, 2, h, w], -1.0, 1.0), flow]
            },
        ),
        case(
            "batch_norm_train",
            SMOOTH_TOL,
            |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2])?.0),
            |r| {
                vec![
                    uniform(r, &[3, 2, 4, 4], -2.0, 2.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -0.5, 0.5),
                ]
            },
        ),
        case(
            "instance_norm",
            SMOOTH_TOL,
            |g, v| g.instance_norm(v[0], v[1], v[2]),
            |r| {
                vec![
                    uniform(r, &[2, 3, 4, 4], -2.0, 2.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -0.5, 0.5),
                ]
            },
        ),
        case(
            "batch_norm_eval",
            SMOOTH_TOL,
            |g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.5, 2.0]),
            |r| {
                vec![
                    uniform(r, &[2, 2, 3, 3], -2.0, 2.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -0.5, 0.5),
                ]
            },
        ),
        case("relu", SMOOTH_TOL, |g, v| Ok(g.relu(v[0])), |r| {
            vec![away_from_zero(r, &[2, 3, 4])]
        }),
        case("leaky_relu", SMOOTH_TOL, |g, v| Ok(g.leaky_relu(v[0], 0.2)), |r| {
            vec![away_from_zero(r, &[2, 3, 4])]
        }),
        case("sigmoid", SMOOTH_TOL, |g, v| Ok(g.sigmoid(v[0])), |r| {
            vec![uniform(r, &[3, 5], -4.0, 4.0)]
        }),
        case(
            "add/sub/mul",
            SMOOTH_TOL,
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[2])?;
                g.mul(d, v[1])
            },
            |r| (0..3).map(|_| uniform(r, &[2, 3], -1.0, 1.0)).collect(),
        ),
        case(
            "concat/narrow",
            SMOOTH_TOL,
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let n = g.narrow(c, 1, 1, 3)?;
                g.mul(n, n)
            },
            |r| vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
        ),
        case(
            "nchw<->nhwc",
            SMOOTH_TOL,
            |g, v| {
                let a = g.nchw_to_nhwc(v[0])?;
                let sq = g.mul(a, a)?;
                g.nhwc_to_nchw(sq)
            },
            |r| vec![uniform(r, &[2, 3, 4, 5], -1.0, 1.0)],
        ),
        case(
            "reshape",
            SMOOTH_TOL,
            |g, v| {
                let a = g.reshape(v[0], &[6, 4])?;
                g.mul(a, a)
            },
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
        ),
        case(
            "l1_mean",
            SMOOTH_TOL,
            |g, v| g.l1_mean(v[0], v[1]),
            |r| {
                let a = uniform(r, &[2, 3, 4], -1.0, 1.0);
                let off = away_from_zero(r, &[2, 3, 4]);
                let b = a.zip_map(&off, |x, o| x + o).unwrap();
                vec![a, b]
            },
        ),
        case("square_mean", SMOOTH_TOL, |g, v| g.square_mean(v[0], v[1]), |r| {
            vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 4], -1.0, 1.0)]
        }),
        case("square_mean_to", SMOOTH_TOL, |g, v| Ok(g.square_mean_to(v[0], 1.0)), |r| {
            vec![uniform(r, &[2, 1, 3, 3], -1.0, 2.0)]
        }),
        case(
            "mean/sum/scale",
            SMOOTH_TOL,
            |g, v| {
                let m = g.add(g.mean(v[0]), g.sum(v[0]))?;
                Ok(g.add_scalar(g.scale(m, 3.0), 1.0))
            },
            |r| vec![uniform(r, &[4, 5], -1.0, 1.0)],
        ),
        case(
            "broadcast_vector",
            SMOOTH_TOL,
            |g, v| {
                let b = g.broadcast_vector(v[0], 3, 4)?;
                g.mul(b, b)
            },
            |r| vec![uniform(r, &[2, 2], -1.0, 1.0)],
        ),
        case(
            "mask_weighted_flow",
            SMOOTH_TOL,
            |g, v| g.mask_weighted_flow(v[0], v[1]),
            |r| vec![uniform(r, &[2, 4, 3, 5], 0.0, 1.0), uniform(r, &[2, 3, 2], -0.5, 0.5)],
        ),
        case("heatmap_mean", SMOOTH_TOL, |g, v| g.heatmap_mean(v[0]), |r| {
            vec![uniform(r, &[2, 3, 6, 7], 0.0, 0.05)]
        }),
        case(
            "heatmap_cov",
            SMOOTH_TOL,
            |g, v| g.heatmap_cov(v[0], v[1]),
            |r| vec![uniform(r, &[2, 3, 6, 7], 0.0, 0.05), uniform(r, &[2, 3, 2], -0.3, 0.3)],
        ),
        case(
            "moments of softmax",
            SMOOTH_TOL,
            |g, v| {
                let s = g.softmax_spatial(v[0], 0.1)?;
                let m = g.heatmap_mean(s)?;
                let c = g.heatmap_cov(s, m)?;
                let flat_m = g.reshape(m, &[8])?;
                let flat_c = g.reshape(c, &[16])?;
                g.concat(&[flat_m, flat_c], 0)
            },
            |r| vec![uniform(r, &[2, 2, 6, 6], -0.2, 0.2)],
        ),
        case(
            "render_gaussians",
            SMOOTH_TOL,
            |g, v| g.render_gaussians(v[0], v[1], 8, 9),
            |r| {
                let cov = random_cov(r, 4).reshape(&[2, 2, 2, 2]).unwrap();
                vec![uniform(r, &[2, 2, 2], -0.6, 0.6), cov]
            },
        ),
    ]
}

/// Worst relative error of one case over `seeds` seeds.
pub fn run_case(c: &GradCase, seeds: u64, cfg: GradCheckConfig) -> Result<GradCaseResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let inputs = (c.make)(&mut rng);
        worst = worst.max(check(&*c.f, &inputs, seed, cfg)?.max_rel_err());
    }
    Ok(GradCaseResult {
        name: c.name,
        tol: c.tol,
        worst,
        seeds,
    })
}

pub fn run_suite(seeds: u64, cfg: GradCheckConfig) -> Result<Vec<GradCaseResult>> {
    op_suite().iter().map(|c| run_case(c, seeds, cfg)).collect()
}

/// Checks d/dx [sg(x) · x] against the finite difference of the frozen
/// composite c · x (c held at x), whose derivative is x. Returns the worst
/// absolute error over seeds.
pub fn stop_gradient_error(seeds: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x0 = uniform(&mut r, &[6], -1.0, 1.0);
        let g = Graph::new();
        let x = g.param(x0.clone());
        let s = g.stop_gradient(x);
        let loss = g.sum(g.mul(s, x)?);
        let analytic = g.backward(loss)?.take(x).unwrap_or_else(|| Tensor::zeros(&[6]));
        let eps = 1e-6;
        for i in 0..6 {
            let frozen = |xi: f64| -> f64 {
                (0..6)
                    .map(|j| x0.data()[j] * if j == i { xi } else { x0.data()[j] })
                    .sum()
            };
            let xi = x0.data()[i];
            let numeric = (frozen(xi + eps) - frozen(xi - eps)) / (2.0 * eps);
            worst = worst.max((analytic.data()[i] - numeric).abs());
        }
    }
    Ok(worst)
}
