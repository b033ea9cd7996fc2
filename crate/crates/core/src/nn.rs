//! Parameter storage and the convolutional building blocks shared by all
//! networks.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Graph, NormStats, Tensor, Var};

/// Momentum of the running-statistics update for batch normalization.
pub const RUNNING_MOMENTUM: f64 = 0.1;

/// Named trainable parameters plus non-trainable buffers (running
/// normalization statistics). Ordered maps keep iteration deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Exponential moving average update of running mean/var buffers.
    pub fn update_running(&mut self, name: &str, stats: &NormStats, count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        if let Some(m) = self.buffers.get_mut(&format!("{name}.running_mean")) {
            for (r, s) in m.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * s;
            }
        }
        if let Some(v) = self.buffers.get_mut(&format!("{name}.running_var")) {
            for (r, s) in v.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * s * unbias;
            }
        }
    }

    /// Order-independent 64-bit digest of every parameter whose name starts
    /// with `prefix` (FNV-1a over names and raw bits).
    pub fn digest(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            name.bytes().for_each(&mut eat);
            for v in t.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// Deterministic per-parameter RNG: the same name and seed always give the
/// same initial values regardless of creation order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds stored parameters onto a graph for one forward pass.
pub struct Ctx<'a> {
    pub g: &'a Graph,
    store: &'a ParamStore,
    pub mode: Mode,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var>>,
    stats: RefCell<Vec<(String, NormStats, usize)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore, mode: Mode, trainable: bool) -> Self {
        Ctx {
            g,
            store,
            mode,
            trainable,
            bound: RefCell::default(),
            stats: RefCell::default(),
        }
    }

    /// The graph variable for a stored parameter (bound once per context).
    pub fn p(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .param(name)
            .ok_or_else(|| invalid("Ctx::p", format!("unknown parameter {name}")))?;
        let v = self.g.leaf(t.clone(), self.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.store
            .buffer(name)
            .ok_or_else(|| invalid("Ctx::buffer", format!("unknown buffer {name}")))
    }

    /// Parameters bound so far, by name.
    pub fn bound(&self) -> BTreeMap<String, Var> {
        self.bound.borrow().clone()
    }

    pub fn record_stats(&self, name: &str, stats: NormStats, count: usize) {
        self.stats.borrow_mut().push((name.to_string(), stats, count));
    }

    pub fn take_stats(&self) -> Vec<(String, NormStats, usize)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 3, 1, 1)
    }

    fn wname(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bname(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let bound = 1.0 / ((self.cin * self.k * self.k) as f64).sqrt();
        let mut rng = param_rng(seed, &self.wname());
        let w = Tensor::from_fn(&[self.cout, self.cin, self.k, self.k], |_| {
            rng.gen_range(-bound..bound)
        });
        let mut rng = param_rng(seed, &self.bname());
        let b = Tensor::from_fn(&[self.cout], |_| rng.gen_range(-bound..bound));
        store.insert_param(self.wname(), w);
        store.insert_param(self.bname(), b);
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(&self.wname())?;
        let b = ctx.p(&self.bname())?;
        ctx.g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Batch statistics while training, running statistics at evaluation.
    Batch,
    /// Per-sample statistics in both modes.
    Instance,
}

impl NormKind {
    /// Batch statistics are too noisy below four samples.
    pub fn for_batch_size(batch: usize) -> Self {
        if batch >= 4 {
            NormKind::Batch
        } else {
            NormKind::Instance
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub kind: NormKind,
}

impl Norm {
    pub fn new(name: impl Into<String>, channels: usize, kind: NormKind) -> Self {
        Norm {
            name: name.into(),
            channels,
            kind,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        store.insert_param(format!("{}.gamma", self.name), Tensor::ones(&[c]));
        store.insert_param(format!("{}.beta", self.name), Tensor::zeros(&[c]));
        if self.kind == NormKind::Batch {
            store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&[c]));
            store.insert_buffer(format!("{}.running_var", self.name), Tensor::ones(&[c]));
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.p(&format!("{}.gamma", self.name))?;
        let beta = ctx.p(&format!("{}.beta", self.name))?;
        match (self.kind, ctx.mode) {
            (NormKind::Instance, _) => ctx.g.instance_norm(x, gamma, beta),
            (NormKind::Batch, Mode::Train) => {
                let s = ctx.g.shape(x);
                let (y, stats) = ctx.g.batch_norm_train(x, gamma, beta)?;
                ctx.record_stats(&self.name, stats, s[0] * s[2] * s[3]);
                Ok(y)
            }
            (NormKind::Batch, Mode::Eval) => {
                let mean = ctx.buffer(&format!("{}.running_mean", self.name))?;
                let var = ctx.buffer(&format!("{}.running_var", self.name))?;
                ctx.g.batch_norm_eval(x, gamma, beta, mean.data(), var.data())
            }
        }
    }
}

/// 3×3 conv, normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvNormRelu {
    pub fn new(name: &str, cin: usize, cout: usize, kind: NormKind) -> Self {
        ConvNormRelu {
            conv: Conv2d::same3(format!("{name}.conv"), cin, cout),
            norm: Norm::new(format!("{name}.norm"), cout, kind),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.conv.init(store, seed);
        self.norm.init(store);
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.g.relu(y))
    }
}

/// Two conv/norm/ReLU layers with an identity shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    a: ConvNormRelu,
    b: ConvNormRelu,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize, kind: NormKind) -> Self {
        ResBlock {
            a: ConvNormRelu::new(&format!("{name}.a"), channels, channels, kind),
            b: ConvNormRelu::new(&format!("{name}.b"), channels, channels, kind),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.a.init(store, seed);
        self.b.init(store, seed);
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let y = self.a.forward(ctx, x)?;
        let y = self.b.forward(ctx, y)?;
        ctx.g.add(x, y)
    }
}

/// Channel widths shared by every U-Net in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetWidth {
    /// Filters of the first encoder block; doubled at every block.
    pub base: usize,
    pub max: usize,
    pub blocks: usize,
}

impl Default for UNetWidth {
    fn default() -> Self {
        UNetWidth {
            base: 32,
            max: 512,
            blocks: 5,
        }
    }
}

impl UNetWidth {
    /// Output channels of encoder block `r` (1-based).
    pub fn channels(&self, r: usize) -> usize {
        (self.base << (r - 1)).min(self.max)
    }
}

/// Encoder of conv/norm/ReLU/avg-pool blocks and a decoder of
/// upsample/conv/norm/ReLU blocks. Level 0 is the input itself; level r is
/// the output of encoder block r at 1/2^r resolution.
///
/// `extra` channels are appended to every skip tensor by the caller (the
/// generator concatenates heatmap differences there).
#[derive(Clone, Debug)]
pub struct UNet {
    pub width: UNetWidth,
    pub in_ch: usize,
    pub extra: usize,
    down: Vec<ConvNormRelu>,
    up: Vec<ConvNormRelu>,
}

impl UNet {
    pub fn new(name: &str, in_ch: usize, extra: usize, width: UNetWidth, kind: NormKind) -> Self {
        let l = width.blocks;
        let down = (1..=l)
            .map(|r| {
                let cin = if r == 1 { in_ch } else { width.channels(r - 1) };
                ConvNormRelu::new(&format!("{name}.down{r}"), cin, width.channels(r), kind)
            })
            .collect();
        let skip = |r: usize| {
            if r == 0 {
                in_ch + extra
            } else {
                width.channels(r) + extra
            }
        };
        // decoder block r lifts level r to level r-1 with channels(r) filters
        let up = (1..=l)
            .rev()
            .map(|r| {
                let cin = if r == l {
                    skip(l)
                } else {
                    width.channels(r + 1) + skip(r)
                };
                ConvNormRelu::new(&format!("{name}.up{r}"), cin, width.channels(r), kind)
            })
            .collect();
        UNet {
            width,
            in_ch,
            extra,
            down,
            up,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for b in self.down.iter().chain(&self.up) {
            b.init(store, seed);
        }
    }

    /// Channels of the decoder output (last decoder block ⊕ level-0 skip).
    pub fn out_channels(&self) -> usize {
        self.width.channels(1) + self.in_ch + self.extra
    }

    /// Required divisor of the input's spatial size.
    pub fn divisor(&self) -> usize {
        1 << self.width.blocks
    }

    /// Returns levels 0..=blocks (level 0 is `x`).
    pub fn encode(&self, ctx: &Ctx, x: Var) -> Result<Vec<Var>> {
        let s = ctx.g.shape(x);
        let d = self.divisor();
        if s.len() != 4 || s[2] % d != 0 || s[3] % d != 0 {
            return Err(invalid(
                "unet encode",
                format!("spatial size of {s:?} must be a multiple of {d}"),
            ));
        }
        if s[1] != self.in_ch {
            return Err(invalid(
                "unet encode",
                format!("expected {} input channels, got {}", self.in_ch, s[1]),
            ));
        }
        let mut levels = vec![x];
        for block in &self.down {
            let y = block.forward(ctx, *levels.last().unwrap())?;
            levels.push(ctx.g.avg_pool2d(y, 2)?);
        }
        Ok(levels)
    }

    /// Decodes skip tensors (one per level, deepest last) to full resolution.
    pub fn decode(&self, ctx: &Ctx, skips: &[Var]) -> Result<Var> {
        let l = self.width.blocks;
        if skips.len() != l + 1 {
            return Err(invalid(
                "unet decode",
                format!("expected {} skip tensors, got {}", l + 1, skips.len()),
            ));
        }
        let mut out = skips[l];
        for (i, block) in self.up.iter().enumerate() {
            let r = l - i;
            let up = ctx.g.upsample_nearest(out, 2)?;
            let y = block.forward(ctx, up)?;
            out = ctx.g.concat(&[y, skips[r - 1]], 1)?;
        }
        Ok(out)
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let levels = self.encode(ctx, x)?;
        self.decode(ctx, &levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_width_follows_doubling_schedule() {
        let w = UNetWidth::default();
        let c: Vec<usize> = (1..=5).map(|r| w.channels(r)).collect();
        assert_eq!(c, vec![32, 64, 128, 256, 512]);
    }

    #[test]
    fn unet_levels_and_output_shape() {
        let width = UNetWidth {
            base: 4,
            max: 64,
            blocks: 5,
        };
        let net = UNet::new("u", 3, 0, width, NormKind::Batch);
        let mut store = ParamStore::new();
        net.init(&mut store, 1);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Train, true);
        let x = g.constant(Tensor::from_fn(&[2, 3, 64, 64], |i| (i % 7) as f64 / 7.0));
        let levels = net.encode(&ctx, x).unwrap();
        let sizes: Vec<usize> = levels.iter().map(|v| g.shape(*v)[2]).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4, 2]);
        let chans: Vec<usize> = levels[1..].iter().map(|v| g.shape(*v)[1]).collect();
        assert_eq!(chans, vec![4, 8, 16, 32, 64]);
        let y = net.decode(&ctx, &levels).unwrap();
        assert_eq!(g.shape(y), vec![2, net.out_channels(), 64, 64]);
        assert_eq!(ctx.take_stats().len(), 10);

        let bad = g.constant(Tensor::zeros(&[1, 3, 48, 40]));
        assert!(net.encode(&ctx, bad).is_err());
    }

    #[test]
    fn init_is_order_independent() {
        let a = Conv2d::same3("a", 2, 3);
        let b = Conv2d::same3("b", 3, 3);
        let mut s1 = ParamStore::new();
        a.init(&mut s1, 9);
        b.init(&mut s1, 9);
        let mut s2 = ParamStore::new();
        b.init(&mut s2, 9);
        a.init(&mut s2, 9);
        assert_eq!(s1, s2);
        assert_eq!(s1.digest(""), s2.digest(""));
        assert_ne!(s1.digest("a"), s1.digest("b"));
    }
}
