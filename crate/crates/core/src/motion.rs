//! Dense motion: part masks and residual flow from sparse keypoint motion,
//! composed into a backward flow field.
//!
//! Flow convention: `flow(p)` is a normalized offset such that the output
//! pixel `p` (aligned with the driving frame) samples the source image at
//! `p + flow(p)`. The per-keypoint displacement is therefore
//! `source_keypoint - driving_keypoint`.

use std::io::Write;
use std::path::Path;

use crate::error::{invalid, io_err, shape_err, Error, Result};
use crate::keypoints::KeypointVars;
use crate::nn::{Conv2d, Ctx, NormKind, ParamStore, UNet, UNetWidth};
use crate::tensor::{Graph, Tensor, Var};

/// Per-keypoint displacements [N,K,2]: source location minus driving location.
pub fn displacements(g: &Graph, source: &KeypointVars, driving: &KeypointVars) -> Result<Var> {
    g.sub(source.mean, driving.mean)
}

/// Constant field [N,2,H,W] repeating each sample's 2-vector `v` [N,2].
pub fn broadcast_vector(g: &Graph, v: Var, h: usize, w: usize) -> Result<Var> {
    g.broadcast_vector(v, h, w)
}

/// `x` [N,3,H,W] translated by each keypoint's displacement: K images.
pub fn locally_aligned_inputs(g: &Graph, x: Var, disp: Var) -> Result<Vec<Var>> {
    let xs = g.shape(x);
    let ds = g.shape(disp);
    if ds.len() != 3 || ds[0] != xs[0] || ds[2] != 2 {
        return Err(shape_err("locally_aligned_inputs", format!("[{}, K, 2]", xs[0]), &ds));
    }
    let (n, k) = (ds[0], ds[1]);
    (0..k)
        .map(|j| {
            let dj = g.narrow(disp, 1, j, 1)?;
            let dj = g.reshape(dj, &[n, 2])?;
            let field = g.broadcast_vector(dj, xs[2], xs[3])?;
            g.warp(x, field)
        })
        .collect()
}

/// Mask-weighted sum of constant displacement fields plus optional residual.
/// `masks` [N,K+1,H,W] (last channel = static background), `disp` [N,K,2],
/// `residual` [N,2,H,W].
pub fn compose_flow(g: &Graph, masks: Var, disp: Var, residual: Option<Var>) -> Result<Var> {
    let coarse = g.mask_weighted_flow(masks, disp)?;
    match residual {
        Some(r) => g.add(coarse, r),
        None => Ok(coarse),
    }
}

/// Which flow components are used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlowComposition {
    #[default]
    CoarsePlusResidual,
    CoarseOnly,
    ResidualOnly,
}

/// U-Net predicting K+1 part masks (per-pixel softmax) and a 2-channel residual flow.
#[derive(Clone, Debug)]
pub struct DenseMotionNet {
    pub num_keypoints: usize,
    pub use_appearance: bool,
    unet: UNet,
    head: Conv2d,
}

impl DenseMotionNet {
    pub const PREFIX: &'static str = "motion";

    /// Input channels: heatmap difference (K), aligned images (3K), source (3).
    pub fn input_channels(k: usize, use_appearance: bool) -> usize {
        if use_appearance {
            k + 3 * k + 3
        } else {
            k
        }
    }

    pub fn new(num_keypoints: usize, use_appearance: bool, width: UNetWidth, norm: NormKind) -> Self {
        let cin = Self::input_channels(num_keypoints, use_appearance);
        let unet = UNet::new(&format!("{}.unet", Self::PREFIX), cin, 0, width, norm);
        let head = Conv2d::same3(
            format!("{}.head", Self::PREFIX),
            unet.out_channels(),
            num_keypoints + 1 + 2,
        );
        DenseMotionNet {
            num_keypoints,
            use_appearance,
            unet,
            head,
        }
    }

    /// Random init, except the residual-flow output rows which start at zero.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.unet.init(store, seed);
        self.head.init(store, seed);
        let k1 = self.num_keypoints + 1;
        let per_out = self.unet.out_channels() * 9;
        if let Some(w) = store.param_mut(&format!("{}.head.weight", Self::PREFIX)) {
            w.data_mut()[k1 * per_out..].fill(0.0);
        }
        if let Some(b) = store.param_mut(&format!("{}.head.bias", Self::PREFIX)) {
            b.data_mut()[k1..].fill(0.0);
        }
    }

    /// Returns (masks [N,K+1,H,W], residual [N,2,H,W]).
    pub fn predict_masks_residual(
        &self,
        ctx: &Ctx,
        hdot: Var,
        x: Var,
        aligned: &[Var],
    ) -> Result<(Var, Var)> {
        let g = ctx.g;
        let k = self.num_keypoints;
        if g.shape(hdot)[1] != k {
            return Err(invalid(
                "predict_masks_residual",
                format!("expected {k} heatmap-difference channels, got {}", g.shape(hdot)[1]),
            ));
        }
        let input = if self.use_appearance {
            if aligned.len() != k {
                return Err(invalid(
                    "predict_masks_residual",
                    format!("expected {k} aligned images, got {}", aligned.len()),
                ));
            }
            let mut parts = vec![hdot];
            parts.extend_from_slice(aligned);
            parts.push(x);
            g.concat(&parts, 1)?
        } else {
            hdot
        };
        let cin = g.shape(input)[1];
        if cin != Self::input_channels(k, self.use_appearance) {
            return Err(invalid(
                "predict_masks_residual",
                format!("input has {cin} channels, network expects {}", self.unet.in_ch),
            ));
        }
        let features = self.unet.forward(ctx, input)?;
        let out = self.head.forward(ctx, features)?;
        let logits = g.narrow(out, 1, 0, k + 1)?;
        let masks = g.softmax_channels(logits)?;
        let residual = g.narrow(out, 1, k + 1, 2)?;
        Ok((masks, residual))
    }
}

const FLO_TAG: f32 = 202021.25;

/// Writes a flow field [2,H,W] (normalized units) as `.flo`: tag, width,
/// height, then row-major little-endian f32 (dx, dy) pairs.
pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    let [c, h, w] = match flow.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(shape_err("write_flo", "[2, H, W]", s)),
    };
    if c != 2 {
        return Err(shape_err("write_flo", "[2, H, W]", flow.shape()));
    }
    let mut bytes = Vec::with_capacity(12 + 8 * h * w);
    bytes.extend_from_slice(&FLO_TAG.to_le_bytes());
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for p in 0..h * w {
        bytes.extend_from_slice(&(flow.data()[p] as f32).to_le_bytes());
        bytes.extend_from_slice(&(flow.data()[h * w + p] as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or_else(|| Error::Format(format!("{}: truncated flow file", path.display())))
    };
    if f32::from_le_bytes(word(0)?) != FLO_TAG {
        return Err(Error::Format(format!("{}: bad flow tag", path.display())));
    }
    let w = i32::from_le_bytes(word(1)?) as usize;
    let h = i32::from_le_bytes(word(2)?) as usize;
    let mut t = Tensor::zeros(&[2, h, w]);
    for p in 0..h * w {
        t.data_mut()[p] = f32::from_le_bytes(word(3 + 2 * p)?) as f64;
        t.data_mut()[h * w + p] = f32::from_le_bytes(word(4 + 2 * p)?) as f64;
    }
    Ok(t)
}

/// Colour coding of a flow field: hue from direction, saturation from
/// magnitude relative to the largest vector. Returns RGB bytes, row-major.
pub fn flow_to_rgb(flow: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let [h, w] = match flow.shape() {
        [2, h, w] => [*h, *w],
        s => return Err(shape_err("flow_to_rgb", "[2, H, W]", s)),
    };
    let hw = h * w;
    let (dx, dy) = flow.data().split_at(hw);
    let max = dx
        .iter()
        .zip(dy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut rgb = Vec::with_capacity(hw * 3);
    for p in 0..hw {
        let mag = (dx[p] * dx[p] + dy[p] * dy[p]).sqrt() / max;
        let hue = (dy[p].atan2(dx[p]) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
        let sector = hue.floor();
        let f = hue - sector;
        let (r, g, b) = match sector as i32 {
            0 => (1.0, f, 0.0),
            1 => (1.0 - f, 1.0, 0.0),
            2 => (0.0, 1.0, f),
            3 => (0.0, 1.0 - f, 1.0),
            4 => (f, 0.0, 1.0),
            _ => (1.0, 0.0, 1.0 - f),
        };
        for c in [r, g, b] {
            rgb.push((255.0 * (1.0 - mag * (1.0 - c))).round() as u8);
        }
    }
    Ok((h, w, rgb))
}
