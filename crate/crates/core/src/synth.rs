//! Deterministic moving-shapes videos with analytic ground-truth tracks.
//!
//! Each video has 1–3 rigid shapes (ellipses or affinely stretched regular
//! polygons) translating with bounces and rotating at a constant rate over a
//! static sinusoidal texture. Ground truth per shape is its centroid and the
//! covariance of the uniform distribution over its area.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, io_err, Error, Result};
use crate::keypoints::{read_tracks, write_tracks, KeypointSet};
use crate::tensor::{lattice_coord, Tensor};
use crate::video::{frame_name, VideoClip};

/// Supersampling factor per axis for anti-aliased rendering.
const SUPERSAMPLE: usize = 4;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRACK_FILE: &str = "tracks.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub max_rotation_deg: f64,
    pub max_speed: f64,
    /// Every `test_every`-th video (index % test_every == test_every - 1) is held out.
    pub test_every: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            num_videos: 200,
            frames_per_video: 16,
            size: 64,
            min_shapes: 1,
            max_shapes: 3,
            max_rotation_deg: 15.0,
            max_speed: 2.0,
            test_every: 10,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.frames_per_video < 2 {
            return Err(invalid("SynthSpec", "need at least one video of at least 2 frames"));
        }
        if self.size < 16 {
            return Err(invalid("SynthSpec", "canvas must be at least 16 pixels"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(invalid("SynthSpec", "need 1 <= min_shapes <= max_shapes"));
        }
        if !(0.0..=15.0).contains(&self.max_rotation_deg) {
            return Err(invalid("SynthSpec", "rotation per frame must be within 15 degrees"));
        }
        if !(self.max_speed >= 0.0) || self.test_every < 2 {
            return Err(invalid("SynthSpec", "need max_speed >= 0 and test_every >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Outline {
    Ellipse { a: f64, b: f64 },
    /// Convex polygon, counter-clockwise, centroid at the origin.
    Polygon(Vec<[f64; 2]>),
}

/// A rigid shape and its motion script, in pixel units.
#[derive(Clone, Debug, PartialEq)]
struct Shape {
    outline: Outline,
    color: [f64; 3],
    center: [f64; 2],
    velocity: [f64; 2],
    angle: f64,
    omega: f64,
    /// Centre stays within [margin, size - 1 - margin].
    margin: f64,
}

impl Shape {
    fn contains(&self, p: [f64; 2], center: [f64; 2], angle: f64) -> bool {
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
        let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
        match &self.outline {
            Outline::Ellipse { a, b } => (lx / a).powi(2) + (ly / b).powi(2) <= 1.0,
            Outline::Polygon(v) => (0..v.len()).all(|i| {
                let (p0, p1) = (v[i], v[(i + 1) % v.len()]);
                (p1[0] - p0[0]) * (ly - p0[1]) - (p1[1] - p0[1]) * (lx - p0[0]) >= 0.0
            }),
        }
    }

    /// Second central moments of the outline in its own frame.
    fn local_covariance(&self) -> [[f64; 2]; 2] {
        match &self.outline {
            Outline::Ellipse { a, b } => [[a * a / 4.0, 0.0], [0.0, b * b / 4.0]],
            Outline::Polygon(v) => polygon_covariance(v),
        }
    }

    fn covariance(&self, angle: f64) -> [[f64; 2]; 2] {
        let l = self.local_covariance();
        let (s, c) = angle.sin_cos();
        let r = [[c, -s], [s, c]];
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = (0..2)
                    .flat_map(|a| (0..2).map(move |b| (a, b)))
                    .map(|(a, b)| r[i][a] * l[a][b] * r[j][b])
                    .sum();
            }
        }
        out
    }
}

/// Area-normalized second central moments of a simple polygon (shoelace form).
pub fn polygon_covariance(v: &[[f64; 2]]) -> [[f64; 2]; 2] {
    let (mut a, mut cx, mut cy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..v.len() {
        let ([x0, y0], [x1, y1]) = (v[i], v[(i + 1) % v.len()]);
        let cr = x0 * y1 - x1 * y0;
        a += cr;
        cx += (x0 + x1) * cr;
        cy += (y0 + y1) * cr;
        sxx += (x0 * x0 + x0 * x1 + x1 * x1) * cr;
        syy += (y0 * y0 + y0 * y1 + y1 * y1) * cr;
        sxy += (x0 * y1 + 2.0 * x0 * y0 + 2.0 * x1 * y1 + x1 * y0) * cr;
    }
    a /= 2.0;
    let (mx, my) = (cx / (6.0 * a), cy / (6.0 * a));
    let exx = sxx / (12.0 * a) - mx * mx;
    let eyy = syy / (12.0 * a) - my * my;
    let exy = sxy / (24.0 * a) - mx * my;
    [[exx, exy], [exy, eyy]]
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * (k.min(4.0 - k)).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn random_shape(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Shape {
    let size = spec.size as f64;
    let scale = size / 64.0;
    let (outline, radius) = if rng.gen_bool(0.35) {
        let a = rng.gen_range(6.0..11.0) * scale;
        let b = a * rng.gen_range(0.45..0.9);
        (Outline::Ellipse { a, b }, a)
    } else {
        let n = rng.gen_range(3..=5);
        let r = rng.gen_range(7.0..12.0) * scale;
        let stretch = rng.gen_range(0.6..1.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let verts: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let t = phase + 2.0 * PI * i as f64 / n as f64;
                [r * t.cos(), r * stretch * t.sin()]
            })
            .collect();
        (Outline::Polygon(verts), r)
    };
    let margin = 0.5 * radius;
    let speed = rng.gen_range(0.0..=spec.max_speed) * scale;
    let dir = rng.gen_range(0.0..2.0 * PI);
    let max_rot = spec.max_rotation_deg.to_radians();
    Shape {
        outline,
        color: hsv(rng.gen_range(0.0..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.75..1.0)),
        center: [
            rng.gen_range(margin..size - 1.0 - margin),
            rng.gen_range(margin..size - 1.0 - margin),
        ],
        velocity: [speed * dir.cos(), speed * dir.sin()],
        angle: rng.gen_range(0.0..2.0 * PI),
        omega: if max_rot > 0.0 { rng.gen_range(-max_rot..=max_rot) } else { 0.0 },
        margin,
    }
}

/// Centre and angle per frame, reflecting off the margins.
fn trajectory(shape: &Shape, frames: usize, size: usize) -> Vec<([f64; 2], f64)> {
    let (lo, hi) = (shape.margin, size as f64 - 1.0 - shape.margin);
    let mut c = shape.center;
    let mut v = shape.velocity;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        out.push((c, shape.angle + shape.omega * t as f64));
        for d in 0..2 {
            let mut next = c[d] + v[d];
            if next < lo {
                next = 2.0 * lo - next;
                v[d] = -v[d];
            } else if next > hi {
                next = 2.0 * hi - next;
                v[d] = -v[d];
            }
            c[d] = next.clamp(lo, hi);
        }
    }
    out
}

/// Static background: per-channel base level plus three plane waves.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<[f64; 3]> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let waves: Vec<([f64; 3], f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = std::array::from_fn(|_| rng.gen_range(0.03..0.12));
            let freq = rng.gen_range(0.08..0.45);
            let dir = rng.gen_range(0.0..PI);
            (amp, freq * dir.cos(), freq * dir.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    (0..size * size)
        .map(|p| {
            let (x, y) = ((p % size) as f64, (p / size) as f64);
            std::array::from_fn(|c| {
                let v = base[c]
                    + waves
                        .iter()
                        .map(|(amp, fx, fy, ph)| amp[c] * (fx * x + fy * y + ph).sin())
                        .sum::<f64>();
                v.clamp(0.0, 1.0)
            })
        })
        .collect()
}

fn render(bg: &[[f64; 3]], shapes: &[Shape], poses: &[([f64; 2], f64)], size: usize) -> Tensor {
    let mut img = bg.to_vec();
    let n = SUPERSAMPLE;
    for (shape, &(center, angle)) in shapes.iter().zip(poses) {
        for (p, px) in img.iter_mut().enumerate() {
            let (x, y) = ((p % size) as f64, (p / size) as f64);
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let q = [
                        x + (sx as f64 + 0.5) / n as f64 - 0.5,
                        y + (sy as f64 + 0.5) / n as f64 - 0.5,
                    ];
                    hits += shape.contains(q, center, angle) as usize;
                }
            }
            let a = hits as f64 / (n * n) as f64;
            if a > 0.0 {
                for c in 0..3 {
                    px[c] = (1.0 - a) * px[c] + a * shape.color[c];
                }
            }
        }
    }
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / (size * size), i % (size * size));
        q(img[p][c])
    })
}

/// Converts a pixel-space centre and covariance to normalized coordinates.
fn to_normalized(center: [f64; 2], cov: [[f64; 2]; 2], size: usize) -> ([f64; 2], [[f64; 2]; 2]) {
    let s = 2.0 / (size as f64 - 1.0);
    let loc = [lattice_coord(0, size) + s * center[0], lattice_coord(0, size) + s * center[1]];
    let cov = [[s * s * cov[0][0], s * s * cov[0][1]], [s * s * cov[1][0], s * s * cov[1][1]]];
    (loc, cov)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub id: usize,
    pub split: Split,
    pub clip: VideoClip,
    /// One set per frame, one keypoint per shape.
    pub tracks: Vec<KeypointSet>,
}

fn video_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Renders one video; depends only on (spec, index).
pub fn generate_video(spec: &SynthSpec, index: usize) -> Result<SynthVideo> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(spec.seed, index));
    let bg = background(&mut rng, spec.size);
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let shapes: Vec<Shape> = (0..count).map(|_| random_shape(&mut rng, spec)).collect();
    let trajs: Vec<Vec<([f64; 2], f64)>> = shapes
        .iter()
        .map(|s| trajectory(s, spec.frames_per_video, spec.size))
        .collect();
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut tracks = Vec::with_capacity(spec.frames_per_video);
    for t in 0..spec.frames_per_video {
        let poses: Vec<([f64; 2], f64)> = trajs.iter().map(|tr| tr[t]).collect();
        frames.push(render(&bg, &shapes, &poses, spec.size));
        let (locations, covariances) = shapes
            .iter()
            .zip(&poses)
            .map(|(s, &(c, a))| to_normalized(c, s.covariance(a), spec.size))
            .unzip();
        tracks.push(KeypointSet {
            locations,
            covariances,
        });
    }
    Ok(SynthVideo {
        id: index,
        split: if index % spec.test_every == spec.test_every - 1 {
            Split::Test
        } else {
            Split::Train
        },
        clip: VideoClip::new(frames)?,
        tracks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub frame_count: usize,
    /// Relative to the dataset root.
    pub track_file: PathBuf,
}

impl ManifestEntry {
    pub fn frame_dir(&self) -> PathBuf {
        video_dir(self.id)
    }
}

fn video_dir(id: usize) -> PathBuf {
    Path::new("videos").join(format!("{id:04}"))
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# id split frame_count track_file\n");
    for e in entries {
        s.push_str(&format!(
            "{:04} {} {} {}\n",
            e.id,
            e.split.as_str(),
            e.frame_count,
            e.track_file.display()
        ));
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let bad = |m: &str| Error::Format(format!("manifest line {}: {m}", i + 1));
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            Ok(ManifestEntry {
                id: f[0].parse().map_err(|_| bad("bad id"))?,
                split: match f[1] {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return Err(bad("split must be train or test")),
                },
                frame_count: f[2].parse().map_err(|_| bad("bad frame count"))?,
                track_file: PathBuf::from(f[3]),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<SynthVideo>,
}

impl Dataset {
    pub fn generate(spec: &SynthSpec) -> Result<Self> {
        Ok(Dataset {
            videos: (0..spec.num_videos)
                .map(|i| generate_video(spec, i))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthVideo> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn clips(&self, split: Split) -> Vec<VideoClip> {
        self.split(split).map(|v| v.clip.clone()).collect()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.videos
            .iter()
            .map(|v| ManifestEntry {
                id: v.id,
                split: v.split,
                frame_count: v.clip.len(),
                track_file: video_dir(v.id).join(TRACK_FILE),
            })
            .collect()
    }

    /// Writes frames, tracks and the manifest under `root`.
    pub fn write(&self, root: &Path) -> Result<Vec<ManifestEntry>> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let manifest = self.manifest();
        for (v, e) in self.videos.iter().zip(&manifest) {
            let dir = root.join(e.frame_dir());
            v.clip.save_pngs(&dir)?;
            write_tracks(&root.join(&e.track_file), &v.tracks)?;
        }
        let p = root.join(MANIFEST_FILE);
        fs::write(&p, format_manifest(&manifest)).map_err(|e| io_err(&p, e))?;
        Ok(manifest)
    }

    /// Reads a dataset written by [`Dataset::write`].
    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST_FILE);
        let manifest = parse_manifest(&fs::read_to_string(&p).map_err(|e| io_err(&p, e))?)?;
        let videos = manifest
            .iter()
            .map(|e| {
                let clip = VideoClip::load_dir(&root.join(e.frame_dir()))?;
                if clip.len() != e.frame_count {
                    return Err(Error::Format(format!(
                        "video {} has {} frames, manifest says {}",
                        e.id,
                        clip.len(),
                        e.frame_count
                    )));
                }
                if clip.len() < 2 {
                    return Err(invalid("Dataset::load", format!("video {} has fewer than 2 frames", e.id)));
                }
                let tracks = read_tracks(&root.join(&e.track_file))?;
                if tracks.len() != clip.len() {
                    return Err(Error::Format(format!("video {} track length differs from frames", e.id)));
                }
                Ok(SynthVideo {
                    id: e.id,
                    split: e.split,
                    clip,
                    tracks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { videos })
    }
}

/// Frame file paths of a written video, in order.
pub fn frame_paths(root: &Path, e: &ManifestEntry) -> Vec<PathBuf> {
    (0..e.frame_count).map(|t| root.join(e.frame_dir()).join(frame_name(t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            seed: 5,
            num_videos: 4,
            frames_per_video: 6,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn polygon_covariance_matches_known_shapes() {
        // axis-aligned 4 x 2 rectangle: var = w^2/12, h^2/12
        let r = polygon_covariance(&[[-2.0, -1.0], [2.0, -1.0], [2.0, 1.0], [-2.0, 1.0]]);
        assert!((r[0][0] - 16.0 / 12.0).abs() < 1e-12);
        assert!((r[1][1] - 4.0 / 12.0).abs() < 1e-12);
        assert!(r[0][1].abs() < 1e-12);
        // equilateral triangle of side a: var = a^2 / 24 on both axes
        let a: f64 = 3.0;
        let h = a * 3f64.sqrt() / 2.0;
        let tri = [[-a / 2.0, -h / 3.0], [a / 2.0, -h / 3.0], [0.0, 2.0 * h / 3.0]];
        let t = polygon_covariance(&tri);
        assert!((t[0][0] - a * a / 24.0).abs() < 1e-12 && (t[1][1] - a * a / 24.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_moments_match_rasterized_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = SynthSpec::default();
        for _ in 0..6 {
            let mut s = random_shape(&mut rng, &spec);
            s.center = [31.3, 30.8];
            let angle = 0.7;
            let (n, step) = (400, 64.0 / 400.0);
            let (mut m, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let p = [(j as f64 + 0.5) * step, (i as f64 + 0.5) * step];
                    if s.contains(p, s.center, angle) {
                        m += 1.0;
                        sx += p[0];
                        sy += p[1];
                        sxx += p[0] * p[0];
                        syy += p[1] * p[1];
                        sxy += p[0] * p[1];
                    }
                }
            }
            let (mx, my) = (sx / m, sy / m);
            assert!((mx - s.center[0]).abs() < 0.05 && (my - s.center[1]).abs() < 0.05);
            let cov = s.covariance(angle);
            let got = [sxx / m - mx * mx, sxy / m - mx * my, syy / m - my * my];
            let want = [cov[0][0], cov[0][1], cov[1][1]];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 0.02 * (cov[0][0] + cov[1][1]), "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_bounds() {
        let spec = small_spec();
        let a = Dataset::generate(&spec).unwrap();
        assert_eq!(a, Dataset::generate(&spec).unwrap());
        for v in &a.videos {
            assert_eq!(v.clip.len(), 6);
            let g = v.tracks[0].len();
            assert!((1..=3).contains(&g));
            for set in &v.tracks {
                assert_eq!(set.len(), g);
                for l in &set.locations {
                    assert!(l[0].abs() <= 1.0 && l[1].abs() <= 1.0);
                }
            }
            for f in v.clip.frames() {
                assert!(f.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
        let other = Dataset::generate(&SynthSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.videos[0].clip, other.videos[0].clip);
    }

    #[test]
    fn rotation_and_translation_follow_script() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_shape(&mut rng, &spec);
        let tr = trajectory(&s, 40, spec.size);
        for w in tr.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!((b.1 - a.1).abs() <= 15f64.to_radians() + 1e-12);
            let step = ((b.0[0] - a.0[0]).powi(2) + (b.0[1] - a.0[1]).powi(2)).sqrt();
            assert!(step <= spec.max_speed + 1e-9);
            for d in 0..2 {
                assert!(b.0[d] >= s.margin && b.0[d] <= 63.0 - s.margin);
            }
        }
    }

    #[test]
    fn write_load_round_trip_and_split() {
        let spec = SynthSpec {
            num_videos: 10,
            frames_per_video: 3,
            ..small_spec()
        };
        let ds = Dataset::generate(&spec).unwrap();
        assert_eq!(ds.split(Split::Test).count(), 1);
        let dir = tempfile::tempdir().unwrap();
        let m = ds.write(dir.path()).unwrap();
        assert_eq!(parse_manifest(&format_manifest(&m)).unwrap(), m);
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.videos.len(), 10);
        for (a, b) in ds.videos.iter().zip(&back.videos) {
            assert_eq!(a.clip, b.clip);
            assert_eq!(a.split, b.split);
            for (ta, tb) in a.tracks.iter().zip(&b.tracks) {
                for (la, lb) in ta.locations.iter().zip(&tb.locations) {
                    assert!((la[0] - lb[0]).abs() < 1e-12 && (la[1] - lb[1]).abs() < 1e-12);
                }
            }
        }
        assert!(frame_paths(dir.path(), &m[0]).iter().all(|p| p.exists()));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(Dataset::generate(&SynthSpec {
            frames_per_video: 1,
            ..small_spec()
        })
        .is_err());
        assert!(Dataset::generate(&SynthSpec {
            max_rotation_deg: 20.0,
            ..small_spec()
        })
        .is_err());
        assert!(small_spec().validate().is_ok());
    }
}
