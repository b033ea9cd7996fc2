//! Self-supervised training: frame-pair sampling, alternating discriminator
//! and generator updates with Adam, checkpointing and resume.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    loss_discriminator, loss_feature_matching, loss_generator_gan, loss_total, LossReport, DEFAULT_LAMBDA_REC,
};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, io_err, Error, Result};
use crate::keypoints::{KeypointVars, DEFAULT_NUM_KEYPOINTS, DEFAULT_TEMPERATURE};
use crate::model::{Ablation, Generated, Model, ModelConfig, Params};
use crate::nn::{Ctx, Mode, NormKind, ParamStore, UNetWidth};
use crate::tensor::{Graph, Precision, Tensor, Var};
use crate::video::VideoClip;
use std::collections::BTreeMap;

/// Normalization choice; `Auto` picks batch norm for batches of four or more.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormChoice {
    Auto,
    Batch,
    Instance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_phase2: f64,
    pub lambda_rec: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub base_channels: usize,
    pub max_channels: usize,
    pub disc_base: usize,
    pub disc_max: usize,
    pub disc_scales: usize,
    pub res_blocks: usize,
    pub temperature: f64,
    pub norm: NormChoice,
    pub precision: Precision,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            k: DEFAULT_NUM_KEYPOINTS,
            epochs: 20,
            lr: 2e-4,
            lr_phase2: 2e-5,
            lambda_rec: DEFAULT_LAMBDA_REC,
            batch_size: 8,
            seed: 0,
            ablation: Ablation::default(),
            base_channels: m.width.base,
            max_channels: m.width.max,
            disc_base: m.disc_base,
            disc_max: m.disc_max,
            disc_scales: m.disc_scales,
            res_blocks: m.res_blocks,
            temperature: DEFAULT_TEMPERATURE,
            norm: NormChoice::Auto,
            precision: Precision::F64,
            checkpoint_every: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k" | "K" | "num_keypoints" => self.k = parse_num(key, v)?,
            "epochs" | "T" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_phase2" => self.lr_phase2 = parse_num(key, v)?,
            "lambda_rec" => self.lambda_rec = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "ablation" => {
                for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    self.ablation.set(name).map_err(|e| Error::Config(e.to_string()))?;
                }
            }
            "base_channels" => self.base_channels = parse_num(key, v)?,
            "max_channels" => self.max_channels = parse_num(key, v)?,
            "disc_base" => self.disc_base = parse_num(key, v)?,
            "disc_max" => self.disc_max = parse_num(key, v)?,
            "disc_scales" => self.disc_scales = parse_num(key, v)?,
            "res_blocks" => self.res_blocks = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "norm" => {
                self.norm = match v {
                    "auto" => NormChoice::Auto,
                    "batch" => NormChoice::Batch,
                    "instance" => NormChoice::Instance,
                    _ => return Err(Error::Config(format!("norm must be auto, batch or instance, got {v:?}"))),
                }
            }
            "precision" => {
                self.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(Error::Config(format!("precision must be f64 or f32, got {v:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad("need 0 < base_channels <= max_channels");
        }
        if self.disc_base == 0 || self.disc_max < self.disc_base || self.disc_scales == 0 {
            return bad("need 0 < disc_base <= disc_max and disc_scales >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lambda_rec >= 0.0) {
            return bad("lambda_rec must be non-negative");
        }
        self.ablation.flow_composition().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let norm = match self.norm {
            NormChoice::Auto => "auto",
            NormChoice::Batch => "batch",
            NormChoice::Instance => "instance",
        };
        let precision = match self.precision {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        };
        let _ = write!(
            s,
            "k = {}\nepochs = {}\nlr = {:?}\nlr_phase2 = {:?}\nlambda_rec = {:?}\nbatch_size = {}\nseed = {}\n\
             ablation = {}\nbase_channels = {}\nmax_channels = {}\ndisc_base = {}\ndisc_max = {}\n\
             disc_scales = {}\nres_blocks = {}\ntemperature = {:?}\nnorm = {norm}\nprecision = {precision}\n\
             checkpoint_every = {}\n",
            self.k,
            self.epochs,
            self.lr,
            self.lr_phase2,
            self.lambda_rec,
            self.batch_size,
            self.seed,
            self.ablation.names().join(","),
            self.base_channels,
            self.max_channels,
            self.disc_base,
            self.disc_max,
            self.disc_scales,
            self.res_blocks,
            self.temperature,
            self.checkpoint_every,
        );
        s
    }

    /// FNV-1a hash of the canonical text.
    pub fn hash(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf29ce484222325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100000001b3)
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_keypoints: self.k,
            temperature: self.temperature,
            width: UNetWidth {
                base: self.base_channels,
                max: self.max_channels,
                ..UNetWidth::default()
            },
            disc_base: self.disc_base,
            disc_max: self.disc_max,
            disc_scales: self.disc_scales,
            res_blocks: self.res_blocks,
            norm: match self.norm {
                NormChoice::Auto => NormKind::for_batch_size(self.batch_size),
                NormChoice::Batch => NormKind::Batch,
                NormChoice::Instance => NormKind::Instance,
            },
            ablation: self.ablation,
        }
    }

    /// T epochs at the first rate followed by T/2 at the second.
    pub fn total_epochs(&self) -> usize {
        self.epochs + self.epochs / 2
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.epochs {
            self.lr
        } else {
            self.lr_phase2
        }
    }
}

/// Adam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)], lr: f64, precision: Precision) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = store.param_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
            if precision == Precision::F32 {
                p.round_f32();
            }
        }
    }

    fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_u64(format!("{prefix}/t"), self.t);
        for (n, t) in &self.m {
            ck.insert(format!("{prefix}/m/{n}"), t.clone());
        }
        for (n, t) in &self.v {
            ck.insert(format!("{prefix}/v/{n}"), t.clone());
        }
    }

    fn load(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut a = Adam {
            t: ck.get_u64(&format!("{prefix}/t"))?,
            ..Adam::default()
        };
        for (name, t) in &ck.tensors {
            if let Some(n) = name.strip_prefix(&format!("{prefix}/m/")) {
                a.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix(&format!("{prefix}/v/")) {
                a.v.insert(n.to_string(), t.clone());
            }
        }
        Ok(a)
    }
}

/// One training example: two frames of the same video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FramePair {
    pub video: usize,
    pub source: usize,
    pub driving: usize,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rejects videos that cannot supply a pair.
pub fn check_trainable(videos: &[VideoClip]) -> Result<()> {
    if videos.is_empty() {
        return Err(invalid("training data", "no training videos"));
    }
    if let Some(i) = videos.iter().position(|v| v.len() < 2) {
        return Err(invalid("training data", format!("video {i} has fewer than 2 frames")));
    }
    let (h, w) = (videos[0].height(), videos[0].width());
    if let Some(i) = videos.iter().position(|v| v.height() != h || v.width() != w) {
        return Err(invalid("training data", format!("video {i} size differs from video 0")));
    }
    Ok(())
}

/// One uniformly drawn unordered pair per video, in random order and with
/// random orientation; deterministic in (seed, epoch).
pub fn sample_pairs(frame_counts: &[usize], seed: u64, epoch: u64) -> Result<Vec<FramePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch + 1));
    let mut pairs = frame_counts
        .iter()
        .enumerate()
        .map(|(video, &n)| {
            if n < 2 {
                return Err(invalid("sample_pairs", format!("video {video} has {n} frame(s)")));
            }
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            Ok(FramePair {
                video,
                source: a,
                driving: b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Generator-side forward for a batch of (source, driving) frames.
pub struct PairForward {
    pub source: Var,
    pub driving: Var,
    pub kp_source: KeypointVars,
    pub kp_driving: KeypointVars,
    pub generated: Generated,
}

fn split_kp(g: &Graph, kp: &KeypointVars, n: usize) -> Result<(KeypointVars, KeypointVars)> {
    let part = |start| -> Result<KeypointVars> {
        Ok(KeypointVars {
            mean: g.narrow(kp.mean, 0, start, n)?,
            cov: g.narrow(kp.cov, 0, start, n)?,
        })
    };
    Ok((part(0)?, part(n)?))
}

/// Detects keypoints on both frames in one detector pass and generates the
/// driving frame from the source.
pub fn forward_pair(model: &Model, ctx: &Ctx, source: Tensor, driving: Tensor) -> Result<PairForward> {
    let g = ctx.g;
    let n = source.shape()[0];
    if source.shape() != driving.shape() {
        return Err(invalid("forward_pair", "source and driving batches differ in shape"));
    }
    let x = g.constant(source);
    let xp = g.constant(driving);
    let both = g.concat(&[x, xp], 0)?;
    let (_, kp) = model.detect(ctx, both)?;
    let (kp_source, kp_driving) = split_kp(g, &kp, n)?;
    let generated = model.generate(ctx, x, &kp_source, &kp_driving)?;
    Ok(PairForward {
        source: x,
        driving: xp,
        kp_source,
        kp_driving,
        generated,
    })
}

/// Discriminator-side losses. `heat` is the H′ fed to D and must already be
/// detached by the caller.
pub struct GenLosses {
    pub rec: Var,
    pub gan: Var,
    pub total: Var,
}

pub fn generator_losses(
    model: &Model,
    dctx: &Ctx,
    real: Var,
    fake: Var,
    heat: Var,
    lambda_rec: f64,
) -> Result<GenLosses> {
    let g = dctx.g;
    let n = g.shape(real)[0];
    let out = model
        .discriminator
        .discriminate(dctx, g.concat(&[real, fake], 0)?, g.concat(&[heat, heat], 0)?)?;
    let halves = |vs: &[Var], start| vs.iter().map(|&v| g.narrow(v, 0, start, n)).collect::<Result<Vec<_>>>();
    let (fr, ff) = (halves(&out.features, 0)?, halves(&out.features, n)?);
    let fake_scores = halves(&out.scores, n)?;
    let rec = loss_feature_matching(g, &fr, &ff)?;
    let gan = loss_generator_gan(g, &fake_scores)?;
    let total = loss_total(g, rec, gan, lambda_rec)?;
    Ok(GenLosses { rec, gan, total })
}

pub fn discriminator_loss(model: &Model, dctx: &Ctx, real: Var, fake: Var, heat: Var) -> Result<Var> {
    let g = dctx.g;
    let n = g.shape(real)[0];
    let out = model
        .discriminator
        .discriminate(dctx, g.concat(&[real, fake], 0)?, g.concat(&[heat, heat], 0)?)?;
    let halves = |start| {
        out.scores
            .iter()
            .map(|&v| g.narrow(v, 0, start, n))
            .collect::<Result<Vec<_>>>()
    };
    loss_discriminator(g, &halves(0)?, &halves(n)?)
}

fn collect_grads(grads: &crate::tensor::Grads, bound: &BTreeMap<String, Var>) -> Vec<(String, Tensor)> {
    bound
        .iter()
        .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.clone())))
        .collect()
}

fn grads_finite(grads: &[(String, Tensor)]) -> Option<&str> {
    grads.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n.as_str())
}

/// Training state: model, parameters, optimizers and counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: Params,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub step: u64,
    pub epoch: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config())?;
        let params = model.init(cfg.seed);
        Ok(Trainer {
            cfg,
            model,
            params,
            adam_g: Adam::default(),
            adam_d: Adam::default(),
            step: 0,
            epoch: 0,
        })
    }

    /// One discriminator update followed by one generator-side update.
    pub fn train_step(&mut self, source: Tensor, driving: Tensor, lr: f64) -> Result<LossReport> {
        let g = Graph::with_precision(self.cfg.precision);
        let ctx = Ctx::new(&g, &self.params.gen, Mode::Train, true);
        let fwd = forward_pair(&self.model, &ctx, source, driving)?;
        let heat_d = g.stop_gradient(fwd.generated.heat_driving);
        let fake_d = g.stop_gradient(fwd.generated.image);

        let (loss_d, d_grads) = {
            let dctx = Ctx::new(&g, &self.params.disc, Mode::Train, true);
            let loss = discriminator_loss(&self.model, &dctx, fwd.driving, fake_d, heat_d)?;
            let grads = g.backward(loss)?;
            (g.value(loss).item(), collect_grads(&grads, &dctx.bound()))
        };
        if !loss_d.is_finite() || grads_finite(&d_grads).is_some() {
            return Err(Error::Diverged {
                step: self.step,
                msg: format!("discriminator loss {loss_d}"),
            });
        }
        self.adam_d.step(&mut self.params.disc, &d_grads, lr, self.cfg.precision);

        let dctx = Ctx::new(&g, &self.params.disc, Mode::Train, false);
        let losses = generator_losses(
            &self.model,
            &dctx,
            fwd.driving,
            fwd.generated.image,
            heat_d,
            self.cfg.lambda_rec,
        )?;
        let grads = g.backward(losses.total)?;
        let g_grads = collect_grads(&grads, &ctx.bound());
        let stats = ctx.take_stats();
        let report = LossReport {
            loss_d,
            loss_g_gan: g.value(losses.gan).item(),
            loss_rec: g.value(losses.rec).item(),
            loss_total: g.value(losses.total).item(),
        };
        if !report.is_finite() || grads_finite(&g_grads).is_some() {
            return Err(Error::Diverged {
                step: self.step,
                msg: format!("non-finite generator loss or gradient: {report:?}"),
            });
        }
        drop(dctx);
        drop(ctx);
        self.adam_g.step(&mut self.params.gen, &g_grads, lr, self.cfg.precision);
        for (name, s, count) in stats {
            self.params.gen.update_running(&name, &s, count);
        }
        self.step += 1;
        Ok(report)
    }

    /// Runs the next epoch over `videos`, calling `on_step` after each step.
    pub fn run_epoch(
        &mut self,
        videos: &[VideoClip],
        mut on_step: impl FnMut(u64, &LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        check_trainable(videos)?;
        let counts: Vec<usize> = videos.iter().map(VideoClip::len).collect();
        let pairs = sample_pairs(&counts, self.cfg.seed, self.epoch)?;
        let lr = self.cfg.lr_for_epoch(self.epoch as usize);
        let mut reports = Vec::new();
        for chunk in pairs.chunks(self.cfg.batch_size) {
            let mut src = Vec::with_capacity(chunk.len());
            let mut drv = Vec::with_capacity(chunk.len());
            for p in chunk {
                src.push(videos[p.video].batch(&[p.source])?);
                drv.push(videos[p.video].batch(&[p.driving])?);
            }
            let r = self.train_step(Tensor::stack0(&src)?, Tensor::stack0(&drv)?, lr)?;
            on_step(self.step, &r)?;
            reports.push(r);
        }
        self.epoch += 1;
        Ok(reports)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch as usize >= self.cfg.total_epochs()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        save_params(&mut ck, &self.params);
        self.adam_g.save(&mut ck, "adam_g");
        self.adam_d.save(&mut ck, "adam_d");
        ck.insert_u64("meta/step", self.step);
        ck.insert_u64("meta/epoch", self.epoch);
        ck.insert_u64("meta/config_hash", self.cfg.hash());
        ck.text.insert("config".into(), self.cfg.to_text());
        ck
    }

    /// Restores training state; the stored config must hash to `cfg`'s.
    pub fn from_checkpoint(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let stored = ck.get_u64("meta/config_hash")?;
        if stored != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {stored:016x} does not match {:016x}",
                cfg.hash()
            )));
        }
        let mut t = Trainer::new(cfg)?;
        t.params = load_params(ck, &t.params)?;
        t.adam_g = Adam::load(ck, "adam_g")?;
        t.adam_d = Adam::load(ck, "adam_d")?;
        t.step = ck.get_u64("meta/step")?;
        t.epoch = ck.get_u64("meta/epoch")?;
        Ok(t)
    }
}

fn store_entries<'a>(ck: &mut Checkpoint, prefix: &str, store: &'a ParamStore) {
    for (n, t) in store.params() {
        ck.insert(format!("{prefix}/param/{n}"), t.clone());
    }
    for (n, t) in store.buffers() {
        ck.insert(format!("{prefix}/buffer/{n}"), t.clone());
    }
}

pub fn save_params(ck: &mut Checkpoint, params: &Params) {
    store_entries(ck, "gen", &params.gen);
    store_entries(ck, "disc", &params.disc);
}

/// Reads parameters named like those in `template`, checking shapes.
pub fn load_params(ck: &Checkpoint, template: &Params) -> Result<Params> {
    let load = |prefix: &str, tmpl: &ParamStore| -> Result<ParamStore> {
        let mut s = ParamStore::new();
        let fetch = |kind: &str, n: &str, want: &Tensor| -> Result<Tensor> {
            let t = ck.get(&format!("{prefix}/{kind}/{n}"))?;
            if t.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "checkpoint {kind} {n} has shape {:?}, model expects {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            Ok(t.clone())
        };
        for (n, t) in tmpl.params() {
            s.insert_param(n.clone(), fetch("param", n, t)?);
        }
        for (n, t) in tmpl.buffers() {
            s.insert_buffer(n.clone(), fetch("buffer", n, t)?);
        }
        Ok(s)
    };
    Ok(Params {
        gen: load("gen", &template.gen)?,
        disc: load("disc", &template.disc)?,
    })
}

/// Rebuilds the model and parameters stored in a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Model, Params)> {
    let text = ck
        .text
        .get("config")
        .ok_or_else(|| Error::Format("checkpoint has no config".into()))?;
    let cfg = TrainConfig::parse(text)?;
    let model = Model::new(cfg.model_config())?;
    let params = load_params(ck, &model.init(cfg.seed))?;
    Ok((cfg, model, params))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoints, loss CSV and divergence dumps go here when set.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (counted from the start of training).
    pub stop_after_epoch: Option<u64>,
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub losses: Vec<LossReport>,
    pub checkpoint: Checkpoint,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "losses.csv";
pub const DIVERGED_FILE: &str = "diverged_last_good.bin";

/// Runs the full schedule (T epochs at `lr`, T/2 at `lr_phase2`).
pub fn run_training(cfg: TrainConfig, videos: &[VideoClip], opts: &RunOptions) -> Result<TrainOutcome> {
    check_trainable(videos)?;
    let mut trainer = match &opts.resume {
        Some(ck) => Trainer::from_checkpoint(cfg, ck)?,
        None => Trainer::new(cfg)?,
    };
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let p = dir.join(LOSS_FILE);
            let fresh = opts.resume.is_none() || !p.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&p)
                .map_err(|e| io_err(&p, e))?;
            if fresh {
                writeln!(f, "{}", LossReport::CSV_HEADER).map_err(|e| io_err(&p, e))?;
            }
            Some((f, p))
        }
        None => None,
    };
    let mut losses = Vec::new();
    while !trainer.is_finished() && opts.stop_after_epoch.map_or(true, |s| trainer.epoch < s) {
        let last_good = trainer.clone();
        let result = trainer.run_epoch(videos, |step, r| {
            if let Some((f, p)) = &mut log {
                writeln!(f, "{}", r.csv_row(step)).map_err(|e| io_err(&*p, e))?;
            }
            Ok(())
        });
        let reports = match result {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                if let Some(dir) = &opts.out_dir {
                    last_good.to_checkpoint().save(&dir.join(DIVERGED_FILE))?;
                    let diag = format!(
                        "{e}\nlast good state: epoch {} step {}\nconfig:\n{}",
                        last_good.epoch,
                        last_good.step,
                        last_good.cfg.to_text()
                    );
                    let p = dir.join("diverged.txt");
                    fs::write(&p, diag).map_err(|err| io_err(&p, err))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if opts.verbose {
            let n = reports.len().max(1) as f64;
            let mean_rec = reports.iter().map(|r| r.loss_rec).sum::<f64>() / n;
            let mean_d = reports.iter().map(|r| r.loss_d).sum::<f64>() / n;
            eprintln!(
                "epoch {}/{} step {} loss_rec {mean_rec:.5} loss_D {mean_d:.5}",
                trainer.epoch,
                trainer.cfg.total_epochs(),
                trainer.step
            );
        }
        losses.extend(reports);
        let every = trainer.cfg.checkpoint_every as u64;
        if let Some(dir) = &opts.out_dir {
            if every > 0 && trainer.epoch % every == 0 {
                trainer.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    let checkpoint = trainer.to_checkpoint();
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        trainer,
        losses,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip_and_overrides() {
        let mut cfg = TrainConfig::parse("k = 4\n# comment\nepochs=3\nablation = no_flow, fixed_sigma\n").unwrap();
        assert_eq!(cfg.k, 4);
        assert!(cfg.ablation.no_flow && cfg.ablation.fixed_sigma);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let h = cfg.hash();
        cfg.set("seed", "9").unwrap();
        assert_ne!(cfg.hash(), h);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("k = 0").is_err());
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("k 4").is_err());
    }

    #[test]
    fn schedule_adds_half_phase() {
        let cfg = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.total_epochs(), 6);
        assert_eq!(cfg.lr_for_epoch(3), 2e-4);
        assert_eq!(cfg.lr_for_epoch(4), 2e-5);
    }

    #[test]
    fn pairs_are_one_per_video_and_deterministic() {
        let counts = vec![2, 5, 16, 3];
        let a = sample_pairs(&counts, 7, 0).unwrap();
        assert_eq!(a.len(), counts.len());
        let mut vids: Vec<usize> = a.iter().map(|p| p.video).collect();
        vids.sort();
        assert_eq!(vids, vec![0, 1, 2, 3]);
        for p in &a {
            assert_ne!(p.source, p.driving);
            assert!(p.source < counts[p.video] && p.driving < counts[p.video]);
        }
        assert_eq!(a, sample_pairs(&counts, 7, 0).unwrap());
        assert_ne!(a, sample_pairs(&counts, 7, 1).unwrap());
        assert!(sample_pairs(&[3, 1], 0, 0).is_err());
    }

    #[test]
    fn two_frame_video_pairs_cover_both_orders() {
        let mut seen = [false; 2];
        for e in 0..64 {
            let p = sample_pairs(&[2], 1, e).unwrap()[0];
            seen[p.source] = true;
            assert_eq!(p.source + p.driving, 1);
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn pair_sampling_is_uniform_over_unordered_pairs() {
        let n = 4;
        let mut counts = BTreeMap::new();
        let trials = 12000u64;
        for e in 0..trials {
            let p = sample_pairs(&[n], 3, e).unwrap()[0];
            *counts.entry((p.source.min(p.driving), p.source.max(p.driving))).or_insert(0u64) += 1;
        }
        assert_eq!(counts.len(), n * (n - 1) / 2);
        let expected = trials as f64 / 6.0;
        for c in counts.values() {
            assert!((*c as f64 - expected).abs() < 0.1 * expected, "{counts:?}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::default();
        let g = vec![("w".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap())];
        adam.step(&mut store, &g, 0.1, Precision::F64);
        let w = store.param("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::new(&[1], vec![5.0]).unwrap());
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let w = store.param("w").unwrap().data()[0];
            let g = vec![("w".to_string(), Tensor::new(&[1], vec![2.0 * (w - 1.5)]).unwrap())];
            adam.step(&mut store, &g, 0.01, Precision::F64);
        }
        assert!((store.param("w").unwrap().data()[0] - 1.5).abs() < 1e-2);
    }
}
