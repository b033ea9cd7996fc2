//! Unsupervised keypoint detector, Gaussian moment fitting and re-rendering.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, io_err, shape_err, Error, Result};
use crate::nn::{Conv2d, Ctx, NormKind, ParamStore, UNet, UNetWidth};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_NUM_KEYPOINTS: usize = 10;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Added to every fitted covariance so that near-delta maps stay invertible.
pub const COV_EPS: f64 = 1e-4;
/// Isotropic variance used when covariance estimation is disabled.
pub const FIXED_VARIANCE: f64 = 0.01;
/// Tolerance on the unit mass of a confidence map.
const MASS_TOL: f64 = 1e-6;

/// K keypoints: normalized (x, y) locations and symmetric 2×2 covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub locations: Vec<[f64; 2]>,
    pub covariances: Vec<[[f64; 2]; 2]>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Splits batched [N,K,2] / [N,K,2,2] tensors into one set per sample.
    pub fn from_tensors(mean: &Tensor, cov: &Tensor) -> Result<Vec<KeypointSet>> {
        let (n, k) = match mean.shape() {
            [n, k, 2] => (*n, *k),
            s => return Err(shape_err("KeypointSet::from_tensors", "[N, K, 2]", s)),
        };
        if cov.shape() != [n, k, 2, 2] {
            return Err(shape_err(
                "KeypointSet::from_tensors",
                format!("[{n}, {k}, 2, 2]"),
                cov.shape(),
            ));
        }
        Ok((0..n)
            .map(|b| KeypointSet {
                locations: (0..k)
                    .map(|j| {
                        let i = (b * k + j) * 2;
                        [mean.data()[i], mean.data()[i + 1]]
                    })
                    .collect(),
                covariances: (0..k)
                    .map(|j| {
                        let c = &cov.data()[(b * k + j) * 4..(b * k + j) * 4 + 4];
                        [[c[0], c[1]], [c[2], c[3]]]
                    })
                    .collect(),
            })
            .collect())
    }

    /// Stacks sets into [N,K,2] and [N,K,2,2] tensors.
    pub fn to_tensors(sets: &[KeypointSet]) -> Result<(Tensor, Tensor)> {
        let k = sets.first().map_or(0, KeypointSet::len);
        if sets.iter().any(|s| s.len() != k || s.covariances.len() != k) {
            return Err(invalid("KeypointSet::to_tensors", "keypoint counts differ"));
        }
        let n = sets.len();
        let mean = sets.iter().flat_map(|s| s.locations.iter().flatten().copied()).collect();
        let cov = sets
            .iter()
            .flat_map(|s| s.covariances.iter().flatten().flatten().copied())
            .collect();
        Ok((
            Tensor::new(&[n, k, 2], mean)?,
            Tensor::new(&[n, k, 2, 2], cov)?,
        ))
    }
}

/// Keypoint locations [N,K,2] and covariances [N,K,2,2] on a graph.
#[derive(Clone, Copy, Debug)]
pub struct KeypointVars {
    pub mean: Var,
    pub cov: Var,
}

impl KeypointVars {
    pub fn to_sets(&self, g: &Graph) -> Result<Vec<KeypointSet>> {
        KeypointSet::from_tensors(&g.value(self.mean), &g.value(self.cov))
    }

    /// Replaces the covariances with `FIXED_VARIANCE * I`.
    pub fn with_fixed_variance(self, g: &Graph) -> Result<Self> {
        let s = g.shape(self.mean);
        let (n, k) = (s[0], s[1]);
        let cov = Tensor::from_fn(&[n, k, 2, 2], |i| match i % 4 {
            0 | 3 => FIXED_VARIANCE,
            _ => 0.0,
        });
        Ok(KeypointVars {
            mean: self.mean,
            cov: g.constant(cov),
        })
    }
}

/// Gaussian fit of each confidence map: expected lattice coordinate and
/// second central moment, plus `COV_EPS * I`.
pub fn heatmaps_to_keypoints(g: &Graph, heat: Var) -> Result<KeypointVars> {
    {
        let v = g.value(heat);
        let [n, k, h, w] = v.dims4("heatmaps_to_keypoints")?;
        for (m, map) in v.data().chunks(h * w).enumerate() {
            let mass: f64 = map.iter().sum();
            if map.iter().any(|&x| x < 0.0) {
                return Err(invalid("heatmaps_to_keypoints", format!("map {m} has negative values")));
            }
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(invalid(
                    "heatmaps_to_keypoints",
                    format!("map {} of {}x{} has mass {mass}, expected 1", m, n, k),
                ));
            }
        }
    }
    let mean = g.heatmap_mean(heat)?;
    let raw = g.heatmap_cov(heat, mean)?;
    let s = g.shape(raw);
    let eps = g.constant(Tensor::from_fn(&s, |i| match i % 4 {
        0 | 3 => COV_EPS,
        _ => 0.0,
    }));
    let cov = g.add(raw, eps)?;
    Ok(KeypointVars { mean, cov })
}

/// Peak-normalized Gaussian maps [N,K,H,W] for a set of keypoints.
pub fn keypoints_to_gaussian_maps(g: &Graph, kp: &KeypointVars, h: usize, w: usize) -> Result<Var> {
    g.render_gaussians(kp.mean, kp.cov, h, w)
}

/// `moved - reference`, elementwise.
pub fn heatmap_difference(g: &Graph, moved: Var, reference: Var) -> Result<Var> {
    g.sub(moved, reference)
}

/// U-Net producing K spatial-softmax confidence maps.
#[derive(Clone, Debug)]
pub struct KeypointDetector {
    pub num_keypoints: usize,
    pub temperature: f64,
    unet: UNet,
    head: Conv2d,
}

impl KeypointDetector {
    pub const PREFIX: &'static str = "detector";

    pub fn new(num_keypoints: usize, temperature: f64, width: UNetWidth, norm: NormKind) -> Self {
        let unet = UNet::new(&format!("{}.unet", Self::PREFIX), 3, 0, width, norm);
        let head = Conv2d::same3(
            format!("{}.head", Self::PREFIX),
            unet.out_channels(),
            num_keypoints,
        );
        KeypointDetector {
            num_keypoints,
            temperature,
            unet,
            head,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.unet.init(store, seed);
        self.head.init(store, seed);
    }

    /// Confidence maps [N,K,H,W] for images [N,3,H,W]; every map sums to 1.
    pub fn detect(&self, ctx: &Ctx, image: Var) -> Result<Var> {
        let features = self.unet.forward(ctx, image)?;
        let logits = self.head.forward(ctx, features)?;
        ctx.g.softmax_spatial(logits, self.temperature)
    }
}

/// Writes keypoint tracks, one row per (frame, keypoint):
/// `frame,k,h_x,h_y,s_xx,s_xy,s_yy`. Values use shortest round-trip formatting.
pub fn format_tracks(tracks: &[KeypointSet]) -> String {
    let mut out = String::from("frame,k,h_x,h_y,s_xx,s_xy,s_yy\n");
    for (t, set) in tracks.iter().enumerate() {
        for (k, (h, s)) in set.locations.iter().zip(&set.covariances).enumerate() {
            let _ = writeln!(out, "{t},{k},{},{},{},{},{}", h[0], h[1], s[0][0], s[0][1], s[1][1]);
        }
    }
    out
}

pub fn parse_tracks(text: &str) -> Result<Vec<KeypointSet>> {
    let mut tracks: Vec<KeypointSet> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("frame") || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Format(format!("track line {}: {msg}", lineno + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let t: usize = f[0].parse().map_err(|_| bad("frame index"))?;
        let k: usize = f[1].parse().map_err(|_| bad("keypoint index"))?;
        let v: Vec<f64> = f[2..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("number"))?;
        if t == tracks.len() {
            tracks.push(KeypointSet {
                locations: Vec::new(),
                covariances: Vec::new(),
            });
        }
        if t + 1 != tracks.len() || k != tracks[t].len() {
            return Err(bad("rows must be ordered by frame then keypoint"));
        }
        tracks[t].locations.push([v[0], v[1]]);
        tracks[t].covariances.push([[v[2], v[3]], [v[3], v[4]]]);
    }
    Ok(tracks)
}

pub fn write_tracks(path: &Path, tracks: &[KeypointSet]) -> Result<()> {
    std::fs::write(path, format_tracks(tracks)).map_err(|e| io_err(path, e))
}

pub fn read_tracks(path: &Path) -> Result<Vec<KeypointSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_tracks(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::lattice_coord;

    #[test]
    fn uniform_map_centres_at_origin() {
        let g = Graph::new();
        let (h, w) = (16, 16);
        let heat = g.constant(Tensor::full(&[1, 1, h, w], 1.0 / (h * w) as f64));
        let kp = heatmaps_to_keypoints(&g, heat).unwrap();
        let m = g.value(kp.mean);
        assert!(m.data().iter().all(|v| v.abs() < 1e-15));
        let var: f64 = (0..w).map(|j| lattice_coord(j, w).powi(2)).sum::<f64>() / w as f64;
        let c = g.value(kp.cov);
        assert!((c.data()[0] - (var + COV_EPS)).abs() < 1e-12);
        assert!((c.data()[3] - (var + COV_EPS)).abs() < 1e-12);
        assert!(c.data()[1].abs() < 1e-15);
    }

    #[test]
    fn one_hot_map_gives_eps_covariance() {
        let g = Graph::new();
        let mut t = Tensor::zeros(&[1, 1, 8, 8]);
        t.data_mut()[2 * 8 + 5] = 1.0;
        let kp = heatmaps_to_keypoints(&g, g.constant(t)).unwrap();
        assert_eq!(g.value(kp.mean).data(), &[lattice_coord(5, 8), lattice_coord(2, 8)]);
        let c = g.value(kp.cov);
        assert_eq!(c.data(), &[COV_EPS, 0.0, 0.0, COV_EPS]);
    }

    #[test]
    fn zero_mass_map_is_rejected() {
        let g = Graph::new();
        let heat = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(heatmaps_to_keypoints(&g, heat).is_err());
    }

    #[test]
    fn heatmap_difference_identity_and_antisymmetry() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.1).sin().abs()));
        let b = g.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.3).cos().abs()));
        let zero = g.value(heatmap_difference(&g, a, a).unwrap());
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let ab = g.value(heatmap_difference(&g, a, b).unwrap());
        let ba = g.value(heatmap_difference(&g, b, a).unwrap());
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert_eq!(*x, -*y);
        }
        let c = g.constant(Tensor::zeros(&[1, 2, 4, 5]));
        assert!(heatmap_difference(&g, a, c).is_err());
    }

    #[test]
    fn detector_maps_sum_to_one_and_are_deterministic() {
        let width = UNetWidth {
            base: 4,
            max: 32,
            blocks: 5,
        };
        let det = KeypointDetector::new(DEFAULT_NUM_KEYPOINTS, DEFAULT_TEMPERATURE, width, NormKind::Batch);
        let mut store = ParamStore::new();
        det.init(&mut store, 3);
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 13) % 29) as f64 / 29.0);
        let run = || {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, Mode::Eval, false);
            let x = g.constant(img.clone());
            let heat = det.detect(&ctx, x).unwrap();
            (*g.value(heat)).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[1, 10, 32, 32]);
        for map in a.data().chunks(32 * 32) {
            assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(map.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(a, run());

        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval, false);
        let odd = g.constant(Tensor::zeros(&[1, 3, 48, 48]));
        assert!(det.detect(&ctx, odd).is_err());
    }

    #[test]
    fn tracks_round_trip_text() {
        let tracks = vec![
            KeypointSet {
                locations: vec![[0.1, -0.25], [1.5, 0.3333333333333333]],
                covariances: vec![[[0.01, 0.002], [0.002, 0.03]], [[1e-4, 0.0], [0.0, 1e-4]]],
            };
            3
        ];
        let text = format_tracks(&tracks);
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert_eq!(parse_tracks(&text).unwrap(), tracks);
        assert!(parse_tracks("0,1,0,0,0,0,0\n").is_err());
    }
}
