//! Acceptance checks. The test suite and the `check` command both run these
//! functions and render the same report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{io_err, Result};
use crate::eval::evaluate;
use crate::inference::{pose_pair, TransferMode};
use crate::keypoints::{heatmaps_to_keypoints, KeypointSet, COV_EPS};
use crate::metrics::MetricReport;
use crate::model::{keypoint_constants, Model};
use crate::motion::compose_flow;
use crate::nn::{Ctx, Mode};
use crate::synth::{Dataset, Split, SynthSpec};
use crate::tensor::grad_suite::{run_suite, SUITE_SEEDS};
use crate::tensor::gradcheck::GradCheckConfig;
use crate::tensor::{identity_grid, pixel_pitch, Graph, Tensor};
use crate::trainer::{
    discriminator_loss, forward_pair, generator_losses, run_training, Adam, RunOptions, TrainConfig, CHECKPOINT_FILE,
};

/// One acceptance criterion: how to reproduce it and what it must meet.
#[derive(Clone, Debug, PartialEq)]
pub struct ReproScript {
    pub id: u32,
    pub name: &'static str,
    pub command: &'static str,
    pub artifact: &'static str,
    pub tolerance: &'static str,
}

pub fn scripts() -> Vec<ReproScript> {
    let s = |id, name, command, artifact, tolerance| ReproScript {
        id,
        name,
        command,
        artifact,
        tolerance,
    };
    vec![
        s(1, "gradient soundness", "kpanim check --only 1", "report.csv row 1",
          "rel err < 1e-5 smooth, < 1e-4 sampling, 20 seeds, < 120 s"),
        s(2, "keypoint render round trip", "kpanim check --only 2", "report.csv row 2",
          "h within 0.5 px, cov within 10%, 100 samples, < 10 s"),
        s(3, "flow composition oracle", "kpanim check --only 3", "report.csv row 3",
          "L1 < 1e-6 outside a 2 px band, < 5 s"),
        s(4, "zero-motion fixpoint", "kpanim check --only 4", "report.csv row 4", "bit-exact"),
        s(5, "stop-gradient contract", "kpanim check --only 5", "report.csv row 5", "exactly zero"),
        s(6, "end-to-end learning signal", "kpanim check --only 6", "runs/k4/checkpoint.bin",
          "held-out L1 reduced >= 50%, AKD < 4 px"),
        s(7, "keypoint-count trend", "kpanim check --only 7", "runs/k*/checkpoint.bin",
          "L1(K') <= 1.05 L1(K) for consecutive K"),
        s(8, "ablation ordering", "kpanim check --only 8", "runs/no_flow/checkpoint.bin",
          "L1(no_flow) - L1(full) > 0"),
        s(9, "determinism and persistence", "kpanim check --only 9", "report.csv row 9", "byte-exact"),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub id: u32,
    pub name: String,
    pub measured: String,
    pub threshold: String,
    pub passed: bool,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {} {:<28} {}  measured: {}  threshold: {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.measured,
            self.threshold
        )
    }
}

fn result(id: u32, measured: String, passed: bool) -> CheckResult {
    let s = scripts().into_iter().find(|s| s.id == id).expect("known criterion");
    CheckResult {
        id,
        name: s.name.to_string(),
        measured,
        threshold: s.tolerance.to_string(),
        passed,
    }
}

fn failed(id: u32, e: crate::Error) -> CheckResult {
    result(id, format!("error: {e}"), false)
}

/// Finite-difference check of every differentiable op. `corrupt` scales the
/// analytic gradients by (1 + corrupt) to exercise the failure path.
pub fn check_gradients(corrupt: f64) -> CheckResult {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        corrupt,
        ..GradCheckConfig::default()
    };
    match run_suite(SUITE_SEEDS, cfg) {
        Err(e) => failed(1, e),
        Ok(rs) => {
            let secs = start.elapsed().as_secs_f64();
            let worst = rs.iter().map(|r| r.worst / r.tol).fold(0.0, f64::max);
            let bad: Vec<&str> = rs.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
            let mut m = format!("{} ops, worst err/tol {:.3}", rs.len(), worst);
            if !bad.is_empty() {
                let _ = write!(m, ", failing: {}", bad.join(" "));
            }
            result(1, m, bad.is_empty() && secs < 120.0)
        }
    }
}

/// Renders random Gaussians, fits moments and compares with the inputs.
///
/// The rendered map exp(-uᵀΣ⁻¹u) is a density with covariance Σ/2, so the
/// rendering parameter is recovered as 2(Ĉ - εI). Samples keep the 3σ
/// footprint of that density inside the central 80% of the lattice.
pub fn check_round_trip() -> CheckResult {
    let run = || -> Result<(f64, f64)> {
        let size = 64;
        let pitch = pixel_pitch(size);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut worst_h, mut worst_s) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let l1 = rng.gen_range(0.01..=0.1);
            let l2 = rng.gen_range(0.01..=0.1);
            let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = th.sin_cos();
            let cov = [
                [l1 * c * c + l2 * s * s, (l1 - l2) * c * s],
                [(l1 - l2) * c * s, l1 * s * s + l2 * c * c],
            ];
            let reach = 3.0 * (0.5 * l1.max(l2)).sqrt();
            let lim = 0.8 - reach;
            let h = [rng.gen_range(-lim..=lim), rng.gen_range(-lim..=lim)];
            let g = Graph::new();
            let kp = keypoint_constants(
                &g,
                Tensor::new(&[1, 1, 2], h.to_vec())?,
                Tensor::new(&[1, 1, 2, 2], vec![cov[0][0], cov[0][1], cov[1][0], cov[1][1]])?,
            );
            let map = (*g.value(g.render_gaussians(kp.mean, kp.cov, size, size)?)).clone();
            let mass: f64 = map.data().iter().sum();
            let density = map.map(|v| v / mass);
            let fit = heatmaps_to_keypoints(&g, g.constant(density))?;
            let m = (*g.value(fit.mean)).clone();
            let r = (*g.value(fit.cov)).clone();
            for a in 0..2 {
                worst_h = worst_h.max((m.data()[a] - h[a]).abs() / pitch);
            }
            for (i, want) in [cov[0][0], cov[0][1], cov[1][0], cov[1][1]].iter().enumerate() {
                let eps = if i == 0 || i == 3 { COV_EPS } else { 0.0 };
                let got = 2.0 * (r.data()[i] - eps);
                worst_s = worst_s.max((got - want).abs() / l1.max(l2));
            }
        }
        Ok((worst_h, worst_s))
    };
    let start = Instant::now();
    match run() {
        Err(e) => failed(2, e),
        Ok((h, s)) => result(
            2,
            format!("worst h err {h:.4} px, worst cov err {:.2}%", 100.0 * s),
            h < 0.5 && s < 0.1 && start.elapsed().as_secs_f64() < 10.0,
        ),
    }
}

fn interior_l1(a: &Tensor, b: &Tensor, band: usize) -> f64 {
    let s = a.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let (mut sum, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for i in band..h - band {
            for j in band..w - band {
                let k = (ch * h + i) * w + j;
                sum += (a.data()[k] - b.data()[k]).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Piecewise translations with one-hot part masks: the composed flow must
/// warp the source onto an independently built target.
pub fn check_flow_composition() -> CheckResult {
    let run = || -> Result<f64> {
        let size = 64;
        let pitch = pixel_pitch(size);
        let region = |i: usize, j: usize| if i < 10 { 3 } else { (j * 3 / size).min(2) };
        let masks = Tensor::from_fn(&[1, 4, size, size], |idx| {
            let (k, p) = (idx / (size * size), idx % (size * size));
            if region(p / size, p % size) == k {
                1.0
            } else {
                0.0
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let texture = Tensor::from_fn(&[1, 3, size, size], |_| rng.gen_range(0.0..1.0));
        let coef: Vec<[f64; 4]> = (0..3)
            .map(|_| [0.3, rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-1e-4..1e-4)])
            .collect();
        let bilinear = |c: usize, x: f64, y: f64| {
            let k = coef[c];
            k[0] + k[1] * x + k[2] * y + k[3] * x * y
        };
        let smooth = Tensor::from_fn(&[1, 3, size, size], |idx| {
            let (c, p) = (idx / (size * size), idx % (size * size));
            bilinear(c, (p % size) as f64, (p / size) as f64)
        });
        let integer = [[2.0, -1.0], [-2.0, 1.0], [1.0, 2.0]];
        let fractional = [[1.5, -0.75], [-1.25, 0.5], [0.3, 1.7]];
        let mut worst = 0.0f64;
        for (src, shifts, exact) in [(&texture, integer, false), (&smooth, fractional, true)] {
            let shift_at = |i: usize, j: usize| match region(i, j) {
                3 => [0.0, 0.0],
                k => shifts[k],
            };
            let target = Tensor::from_fn(&[1, 3, size, size], |idx| {
                let (c, p) = (idx / (size * size), idx % (size * size));
                let (i, j) = (p / size, p % size);
                let d = shift_at(i, j);
                if exact {
                    bilinear(c, j as f64 + d[0], i as f64 + d[1])
                } else {
                    let (si, sj) = ((i as f64 + d[1]).clamp(0.0, 63.0), (j as f64 + d[0]).clamp(0.0, 63.0));
                    src.data()[(c * size + si as usize) * size + sj as usize]
                }
            });
            let g = Graph::new();
            let disp: Vec<f64> = shifts.iter().flat_map(|d| [d[0] * pitch, d[1] * pitch]).collect();
            let flow = compose_flow(
                &g,
                g.constant(masks.clone()),
                g.constant(Tensor::new(&[1, 3, 2], disp)?),
                Some(g.constant(Tensor::zeros(&[1, 2, size, size]))),
            )?;
            let out = (*g.value(g.warp(g.constant(src.clone()), flow)?)).clone();
            worst = worst.max(interior_l1(&out, &target, 2));
        }
        Ok(worst)
    };
    let start = Instant::now();
    match run() {
        Err(e) => failed(3, e),
        Ok(l1) => result(
            3,
            format!("interior L1 {l1:.2e}"),
            l1 < 1e-6 && start.elapsed().as_secs_f64() < 5.0,
        ),
    }
}

fn small_config(k: usize) -> TrainConfig {
    TrainConfig {
        k,
        epochs: 2,
        batch_size: 4,
        seed: 11,
        base_channels: 4,
        max_channels: 16,
        disc_base: 4,
        disc_max: 16,
        ..TrainConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
    Tensor::from_fn(&[n, 3, size, size], |_| rng.gen_range(0.0..1.0))
}

/// Identical keypoints at initialization give an all-zero flow and an
/// identity warp; relative transfer with a static driver returns the source.
pub fn check_zero_motion() -> CheckResult {
    let run = || -> Result<(f64, f64, f64)> {
        let cfg = small_config(3);
        let model = Model::new(cfg.model_config())?;
        let params = model.init(cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let size = 32;
        let x = random_image(&mut rng, 2, size);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &params.gen, Mode::Eval, false);
        let xv = g.constant(x.clone());
        let (_, kp) = model.detect(&ctx, xv)?;
        let gen = model.generate(&ctx, xv, &kp, &kp)?;
        let flow = (*g.value(gen.flow)).clone();
        let flow_max = flow.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let warped = (*g.value(g.warp(xv, g.constant(flow.clone()))?)).clone();
        let sampled = (*g.value(g.grid_sample(xv, g.constant(identity_grid(2, size, size)))?)).clone();
        let warp_diff = warped
            .data()
            .iter()
            .chain(sampled.data())
            .zip(x.data().iter().chain(x.data()))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let mut loc_diff = 0.0f64;
        for _ in 0..50 {
            let mut set = || KeypointSet {
                locations: (0..5).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
                covariances: vec![[[0.01, 0.0], [0.0, 0.01]]; 5],
            };
            let (src, first) = (set(), set());
            let (_, moved) = pose_pair(TransferMode::Relative, &src, &first, &first)?;
            for (a, b) in moved.locations.iter().zip(&src.locations) {
                loc_diff = loc_diff.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
            }
        }
        Ok((flow_max, warp_diff, loc_diff))
    };
    match run() {
        Err(e) => failed(4, e),
        Ok((f, w, l)) => result(
            4,
            format!("max |flow| {f:e}, max warp diff {w:e}, max transfer diff {l:e}"),
            f == 0.0 && w == 0.0 && l == 0.0,
        ),
    }
}

/// Generator gradients with the detached H′ must equal those obtained with H′
/// replaced by a constant copy, while an undetached H′ must change them. The
/// discriminator step must produce no generator gradient and leave the
/// generator parameters untouched.
pub fn check_stop_gradient() -> CheckResult {
    #[derive(Clone, Copy, PartialEq)]
    enum Feed {
        Detached,
        Constant,
        Attached,
    }
    let run = || -> Result<(f64, f64, usize, bool)> {
        let cfg = small_config(3);
        let model = Model::new(cfg.model_config())?;
        let mut params = model.init(cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (src, drv) = (random_image(&mut rng, 2, 32), random_image(&mut rng, 2, 32));
        let gen_grads = |feed: Feed| -> Result<Vec<Tensor>> {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &params.gen, Mode::Train, true);
            let fwd = forward_pair(&model, &ctx, src.clone(), drv.clone())?;
            let heat = match feed {
                Feed::Detached => g.stop_gradient(fwd.generated.heat_driving),
                Feed::Constant => g.constant((*g.value(fwd.generated.heat_driving)).clone()),
                Feed::Attached => fwd.generated.heat_driving,
            };
            let dctx = Ctx::new(&g, &params.disc, Mode::Train, false);
            let losses = generator_losses(&model, &dctx, fwd.driving, fwd.generated.image, heat, cfg.lambda_rec)?;
            let grads = g.backward(losses.total)?;
            Ok(ctx
                .bound()
                .values()
                .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&g.shape(*v))))
                .collect())
        };
        let max_diff = |a: &[Tensor], b: &[Tensor]| {
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
                .fold(0.0f64, f64::max)
        };
        let detached = gen_grads(Feed::Detached)?;
        let through_path = max_diff(&detached, &gen_grads(Feed::Constant)?);
        let path_exists = max_diff(&detached, &gen_grads(Feed::Attached)?);

        let before = params.gen.digest("");
        let g = Graph::new();
        let ctx = Ctx::new(&g, &params.gen, Mode::Train, true);
        let fwd = forward_pair(&model, &ctx, src.clone(), drv.clone())?;
        let fake = g.stop_gradient(fwd.generated.image);
        let heat = g.stop_gradient(fwd.generated.heat_driving);
        let dctx = Ctx::new(&g, &params.disc, Mode::Train, true);
        let loss = discriminator_loss(&model, &dctx, fwd.driving, fake, heat)?;
        let grads = g.backward(loss)?;
        let nonzero = ctx
            .bound()
            .values()
            .filter_map(|v| grads.get(*v))
            .map(|t| t.data().iter().filter(|x| **x != 0.0).count())
            .sum();
        let d_grads: Vec<(String, Tensor)> = dctx
            .bound()
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.clone())))
            .collect();
        drop(dctx);
        drop(ctx);
        Adam::default().step(&mut params.disc, &d_grads, cfg.lr, cfg.precision);
        let unchanged = params.gen.digest("") == before;
        Ok((through_path, path_exists, nonzero, unchanged))
    };
    match run() {
        Err(e) => failed(5, e),
        Ok((through, exists, nonzero, unchanged)) => result(
            5,
            format!(
                "H'->D grad diff {through:e} (undetached {exists:.1e}), D-step generator grads nonzero {nonzero}, generator digest {}",
                if unchanged { "unchanged" } else { "changed" }
            ),
            through == 0.0 && exists > 0.0 && nonzero == 0 && unchanged,
        ),
    }
}

/// Training runs shared by criteria 6-8.
#[derive(Clone, Debug)]
pub struct TrainingScale {
    pub data: SynthSpec,
    pub base: TrainConfig,
    pub sweep: Vec<usize>,
}

impl TrainingScale {
    /// 200 videos × 16 frames of 64×64, seed 7, T = 20, at reduced width.
    pub fn standard() -> Self {
        TrainingScale {
            data: SynthSpec {
                seed: 7,
                ..SynthSpec::default()
            },
            base: TrainConfig {
                k: 4,
                epochs: 20,
                seed: 7,
                base_channels: 8,
                max_channels: 64,
                disc_base: 8,
                disc_max: 64,
                ..TrainConfig::default()
            },
            sweep: vec![2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub initial: MetricReport,
    pub trained: MetricReport,
    /// Mean reconstruction loss over the first and last 10% of steps.
    pub rec_first: f64,
    pub rec_last: f64,
    pub seconds: f64,
}

impl RunSummary {
    pub fn l1_reduction(&self) -> f64 {
        1.0 - self.trained.l1 / self.initial.l1
    }
}

/// Trains one configuration on the training split and evaluates the
/// initialized and final models on the held-out split.
pub fn train_and_evaluate(
    label: &str,
    data: &Dataset,
    cfg: TrainConfig,
    out_dir: Option<PathBuf>,
    verbose: bool,
) -> Result<RunSummary> {
    let start = Instant::now();
    let test: Vec<_> = data.split(Split::Test).collect();
    let model = Model::new(cfg.model_config())?;
    let initial = evaluate(&model, &model.init(cfg.seed), &test)?.mean;
    let opts = RunOptions {
        out_dir,
        verbose,
        ..RunOptions::default()
    };
    let out = run_training(cfg, &data.clips(Split::Train), &opts)?;
    let trained = evaluate(&out.trainer.model, &out.trainer.params, &test)?.mean;
    let tenth = (out.losses.len() / 10).max(1);
    let mean = |s: &[crate::adversarial::LossReport]| s.iter().map(|r| r.loss_rec).sum::<f64>() / s.len() as f64;
    let summary = RunSummary {
        label: label.to_string(),
        initial,
        trained,
        rec_first: mean(&out.losses[..tenth]),
        rec_last: mean(&out.losses[out.losses.len() - tenth..]),
        seconds: start.elapsed().as_secs_f64(),
    };
    if verbose {
        eprintln!(
            "{label}: L1 {:.4} -> {:.4}, AKD {:.2} -> {:.2} px, rec loss {:.4} -> {:.4}, {:.0} s",
            initial.l1, trained.l1, initial.akd, trained.akd, summary.rec_first, summary.rec_last, summary.seconds
        );
    }
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingRuns {
    /// Full model, one per swept K.
    pub sweep: Vec<(usize, RunSummary)>,
    pub no_flow: Option<RunSummary>,
}

impl TrainingRuns {
    pub fn full(&self, k: usize) -> Option<&RunSummary> {
        self.sweep.iter().find(|(kk, _)| *kk == k).map(|(_, r)| r)
    }
}

/// Runs every configuration needed by criteria 6-8. `work_dir` receives one
/// run directory per configuration.
pub fn run_training_suite(scale: &TrainingScale, work_dir: Option<&Path>, verbose: bool) -> Result<TrainingRuns> {
    let data = Dataset::generate(&scale.data)?;
    let dir = |name: &str| work_dir.map(|d| d.join("runs").join(name));
    let mut runs = TrainingRuns::default();
    for &k in &scale.sweep {
        let cfg = TrainConfig { k, ..scale.base.clone() };
        let label = format!("k{k}");
        runs.sweep.push((k, train_and_evaluate(&label, &data, cfg, dir(&label), verbose)?));
    }
    let mut cfg = scale.base.clone();
    cfg.ablation.no_flow = true;
    runs.no_flow = Some(train_and_evaluate("no_flow", &data, cfg, dir("no_flow"), verbose)?);
    Ok(runs)
}

pub fn check_learning_signal(runs: &TrainingRuns, k: usize) -> CheckResult {
    match runs.full(k) {
        None => result(6, format!("no run with K={k}"), false),
        Some(r) => result(
            6,
            format!(
                "L1 {:.4} -> {:.4} ({:.1}% reduction), AKD {:.2} px; rec loss last/first 10% {:.3}",
                r.initial.l1,
                r.trained.l1,
                100.0 * r.l1_reduction(),
                r.trained.akd,
                r.rec_last / r.rec_first
            ),
            r.l1_reduction() >= 0.5 && r.trained.akd < 4.0,
        ),
    }
}

pub fn check_keypoint_trend(runs: &TrainingRuns) -> CheckResult {
    let mut sweep: Vec<(usize, f64)> = runs.sweep.iter().map(|(k, r)| (*k, r.trained.l1)).collect();
    sweep.sort_by_key(|(k, _)| *k);
    if sweep.len() < 2 {
        return result(7, "fewer than two K values".into(), false);
    }
    let ok = sweep.windows(2).all(|w| w[1].1 <= 1.05 * w[0].1);
    let m = sweep
        .iter()
        .map(|(k, l)| format!("K={k}: {l:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    result(7, m, ok)
}

pub fn check_ablation(runs: &TrainingRuns, k: usize) -> CheckResult {
    match (runs.full(k), &runs.no_flow) {
        (Some(full), Some(nf)) => {
            let margin = nf.trained.l1 - full.trained.l1;
            result(
                8,
                format!("no_flow {:.4} vs full {:.4} (margin {margin:+.4})", nf.trained.l1, full.trained.l1),
                margin > 0.0,
            )
        }
        _ => result(8, "missing run".into(), false),
    }
}

/// Two identical runs, a save/load cycle and an interrupted-then-resumed
/// run, all compared byte for byte.
pub fn check_determinism(work_dir: &Path) -> CheckResult {
    let run = || -> Result<(bool, bool, bool)> {
        let data = Dataset::generate(&SynthSpec {
            seed: 9,
            num_videos: 10,
            frames_per_video: 4,
            size: 32,
            ..SynthSpec::default()
        })?;
        let clips = data.clips(Split::Train);
        let cfg = small_config(2);
        let a = run_training(cfg.clone(), &clips, &RunOptions::default())?;
        let b = run_training(cfg.clone(), &clips, &RunOptions::default())?;
        let bytes = a.checkpoint.to_bytes();
        let identical = bytes == b.checkpoint.to_bytes();

        std::fs::create_dir_all(work_dir).map_err(|e| io_err(work_dir, e))?;
        let path = work_dir.join("determinism.bin");
        a.checkpoint.save(&path)?;
        let on_disk = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        let round_trip = on_disk == bytes && Checkpoint::load(&path)?.to_bytes() == bytes;

        let resume_dir = work_dir.join("resume");
        let first = RunOptions {
            out_dir: Some(resume_dir.clone()),
            stop_after_epoch: Some(1),
            ..RunOptions::default()
        };
        run_training(cfg.clone(), &clips, &first)?;
        let second = RunOptions {
            out_dir: Some(resume_dir.clone()),
            resume: Some(Checkpoint::load(&resume_dir.join(CHECKPOINT_FILE))?),
            ..RunOptions::default()
        };
        let resumed = run_training(cfg, &clips, &second)?.checkpoint.to_bytes() == bytes;
        Ok((identical, round_trip, resumed))
    };
    let yn = |b: bool| if b { "equal" } else { "DIFFERENT" };
    match run() {
        Err(e) => failed(9, e),
        Ok((i, r, s)) => result(
            9,
            format!("repeat run {}, save/load {}, resume {}", yn(i), yn(r), yn(s)),
            i && r && s,
        ),
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Criteria to run; empty means all.
    pub only: Vec<u32>,
    /// Multiplies analytic gradients by (1 + corrupt) in criterion 1.
    pub corrupt: f64,
    pub scale: TrainingScale,
    pub work_dir: PathBuf,
    pub verbose: bool,
}

impl CheckOptions {
    pub fn new(work_dir: PathBuf) -> Self {
        CheckOptions {
            only: Vec::new(),
            corrupt: 0.0,
            scale: TrainingScale::standard(),
            work_dir,
            verbose: false,
        }
    }

    fn wants(&self, id: u32) -> bool {
        self.only.is_empty() || self.only.contains(&id)
    }
}

/// Runs the selected criteria in order. Errors inside a check become a
/// failed row rather than aborting the run.
pub fn run_all_checks(opts: &CheckOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |r: CheckResult| {
        if opts.verbose {
            eprintln!("{}", r.line());
        }
        out.push(r);
    };
    if opts.wants(1) {
        push(check_gradients(opts.corrupt));
    }
    if opts.wants(2) {
        push(check_round_trip());
    }
    if opts.wants(3) {
        push(check_flow_composition());
    }
    if opts.wants(4) {
        push(check_zero_motion());
    }
    if opts.wants(5) {
        push(check_stop_gradient());
    }
    if opts.wants(6) || opts.wants(7) || opts.wants(8) {
        let mut scale = opts.scale.clone();
        if !opts.wants(7) {
            scale.sweep = vec![scale.base.k];
        }
        let runs = if opts.wants(8) {
            run_training_suite(&scale, Some(&opts.work_dir), opts.verbose)
        } else {
            Dataset::generate(&scale.data).and_then(|data| {
                let mut runs = TrainingRuns::default();
                for &k in &scale.sweep {
                    let cfg = TrainConfig { k, ..scale.base.clone() };
                    let label = format!("k{k}");
                    let dir = Some(opts.work_dir.join("runs").join(&label));
                    runs.sweep.push((k, train_and_evaluate(&label, &data, cfg, dir, opts.verbose)?));
                }
                Ok(runs)
            })
        };
        let k = scale.base.k;
        match runs {
            Ok(runs) => {
                if opts.wants(6) {
                    push(check_learning_signal(&runs, k));
                }
                if opts.wants(7) {
                    push(check_keypoint_trend(&runs));
                }
                if opts.wants(8) {
                    push(check_ablation(&runs, k));
                }
            }
            Err(e) => {
                for id in [6, 7, 8].into_iter().filter(|id| opts.wants(*id)) {
                    push(result(id, format!("error: {e}"), false));
                }
            }
        }
    }
    if opts.wants(9) {
        push(check_determinism(&opts.work_dir.join("determinism")));
    }
    out
}

pub fn format_markdown(results: &[CheckResult]) -> String {
    let mut s = String::from("| criterion | name | measured | threshold | verdict |\n|---|---|---|---|---|\n");
    for r in results {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            r.id,
            r.name,
            r.measured,
            r.threshold,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    s
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

pub fn format_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("criterion,name,measured,threshold,passed\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.id,
            csv_field(&r.name),
            csv_field(&r.measured),
            csv_field(&r.threshold),
            r.passed
        );
    }
    s
}

/// Writes `report.md` and `report.csv` into `dir`.
pub fn write_report(dir: &Path, results: &[CheckResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, text) in [("report.md", format_markdown(results)), ("report.csv", format_csv(results))] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_criterion_has_one_script() {
        let ids: Vec<u32> = scripts().iter().map(|s| s.id).collect();
        assert_eq!(ids, (1..=9).collect::<Vec<_>>());
    }

    #[test]
    fn reports_quote_commas_and_mark_failures() {
        let rs = vec![
            result(3, "a, b".into(), true),
            result(4, "x".into(), false),
        ];
        let csv = format_csv(&rs);
        assert!(csv.contains("\"a, b\""));
        assert!(csv.lines().nth(2).unwrap().ends_with(",false"));
        let md = format_markdown(&rs);
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("FAIL"));
    }

    #[test]
    fn trend_allows_noise_band() {
        let run = |l1| RunSummary {
            label: String::new(),
            initial: MetricReport { l1: 0.2, akd: 0.0 },
            trained: MetricReport { l1, akd: 0.0 },
            rec_first: 1.0,
            rec_last: 0.1,
            seconds: 0.0,
        };
        let runs = |a, b, c| TrainingRuns {
            sweep: vec![(2, run(a)), (4, run(b)), (8, run(c))],
            no_flow: None,
        };
        assert!(check_keypoint_trend(&runs(0.10, 0.104, 0.09)).passed);
        assert!(!check_keypoint_trend(&runs(0.10, 0.106, 0.09)).passed);
        assert!(!check_ablation(&runs(0.1, 0.1, 0.1), 4).passed);
    }
}
