//! Image generator with a deformation module: encoder features are warped
//! by the dense flow, joined with heatmap-difference skips, decoded and
//! refined by residual blocks.

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, ConvNormRelu, Ctx, NormKind, ParamStore, ResBlock, UNet, UNetWidth};
use crate::tensor::{Graph, Var};

pub const NUM_RES_BLOCKS: usize = 4;

/// Encoder outputs by level; level 0 is the input image, level r has
/// spatial size H/2^r.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub num_keypoints: usize,
    unet: UNet,
    entry: ConvNormRelu,
    res: Vec<ResBlock>,
    out: Conv2d,
}

impl Generator {
    pub const PREFIX: &'static str = "generator";

    pub fn new(num_keypoints: usize, width: UNetWidth, norm: NormKind, res_blocks: usize) -> Self {
        let p = Self::PREFIX;
        let unet = UNet::new(&format!("{p}.unet"), 3, num_keypoints, width, norm);
        let c = width.base;
        Generator {
            num_keypoints,
            entry: ConvNormRelu::new(&format!("{p}.entry"), unet.out_channels(), c, norm),
            res: (0..res_blocks)
                .map(|i| ResBlock::new(&format!("{p}.res{i}"), c, norm))
                .collect(),
            out: Conv2d::same3(format!("{p}.out"), c, 3),
            unet,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.unet.init(store, seed);
        self.entry.init(store, seed);
        for r in &self.res {
            r.init(store, seed);
        }
        self.out.init(store, seed);
    }

    pub fn encode(&self, ctx: &Ctx, x: Var) -> Result<FeaturePyramid> {
        Ok(FeaturePyramid {
            levels: self.unet.encode(ctx, x)?,
        })
    }

    /// Output image (N,3,H,W) in (0, 1).
    pub fn decode(&self, ctx: &Ctx, warped: &FeaturePyramid, hdot: Var) -> Result<Var> {
        let g = ctx.g;
        if g.shape(hdot)[1] != self.num_keypoints {
            return Err(invalid(
                "generator decode",
                format!("expected {} heatmap channels", self.num_keypoints),
            ));
        }
        let skips = warped
            .levels
            .iter()
            .map(|&xi| {
                let s = g.shape(xi);
                let h = g.resize_nearest(hdot, s[2], s[3])?;
                g.concat(&[xi, h], 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut y = self.unet.decode(ctx, &skips)?;
        y = self.entry.forward(ctx, y)?;
        for r in &self.res {
            y = r.forward(ctx, y)?;
        }
        let y = self.out.forward(ctx, y)?;
        Ok(g.sigmoid(y))
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, flow: Var, hdot: Var) -> Result<Var> {
        let pyr = self.encode(ctx, x)?;
        let warped = warp_pyramid(ctx.g, &pyr, flow)?;
        self.decode(ctx, &warped, hdot)
    }
}

/// Warps every pyramid level by the flow, nearest-downsampled to the level's
/// resolution. Normalized flow values carry over unchanged.
pub fn warp_pyramid(g: &Graph, pyr: &FeaturePyramid, flow: Var) -> Result<FeaturePyramid> {
    let levels = pyr
        .levels
        .iter()
        .map(|&xi| {
            let s = g.shape(xi);
            let f = g.resize_nearest(flow, s[2], s[3])?;
            g.warp(xi, f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{pixel_pitch, Tensor};

    fn small() -> (Generator, ParamStore) {
        let width = UNetWidth {
            base: 4,
            max: 32,
            blocks: 5,
        };
        let gen = Generator::new(2, width, NormKind::Instance, NUM_RES_BLOCKS);
        let mut store = ParamStore::new();
        gen.init(&mut store, 11);
        (gen, store)
    }

    #[test]
    fn pyramid_levels_and_zero_flow() {
        let (gen, store) = small();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Train, true);
        let x = g.constant(Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 31) % 37) as f64 / 37.0));
        let pyr = gen.encode(&ctx, x).unwrap();
        let sizes: Vec<usize> = pyr.levels[1..].iter().map(|v| g.shape(*v)[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        let flow = g.constant(Tensor::zeros(&[1, 2, 64, 64]));
        let warped = warp_pyramid(&g, &pyr, flow).unwrap();
        for (a, b) in pyr.levels.iter().zip(&warped.levels) {
            assert_eq!(*g.value(*a), *g.value(*b));
        }
        let hdot = g.constant(Tensor::zeros(&[1, 2, 64, 64]));
        let out = g.value(gen.decode(&ctx, &warped, hdot).unwrap());
        assert_eq!(out.shape(), &[1, 3, 64, 64]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn constant_flow_shifts_every_level() {
        let g = Graph::new();
        let h = 16;
        let xt = Tensor::from_fn(&[1, 1, h, h], |i| ((i * 7) % 13) as f64);
        let coarse = Tensor::from_fn(&[1, 1, h / 4, h / 4], |i| i as f64);
        let pyr = FeaturePyramid {
            levels: vec![g.constant(xt.clone()), g.constant(coarse.clone())],
        };
        // one pixel at the coarse level is (h/4 - 1) / (h - 1) of the full range
        let shift = pixel_pitch(h / 4);
        let mut f = Tensor::zeros(&[1, 2, h, h]);
        f.data_mut()[..h * h].fill(shift);
        let warped = warp_pyramid(&g, &pyr, g.constant(f)).unwrap();
        let c = g.value(warped.levels[1]);
        let w = h / 4;
        for i in 0..w {
            for j in 0..w - 1 {
                assert!((c.data()[i * w + j] - coarse.data()[i * w + j + 1]).abs() < 1e-12);
            }
        }
    }
}
