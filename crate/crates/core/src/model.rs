//! The full animation model: detector, dense motion, generator and
//! discriminator, with the ablation switches.

use crate::adversarial::Discriminator;
use crate::error::{invalid, Result};
use crate::generator::{Generator, NUM_RES_BLOCKS};
use crate::keypoints::{
    heatmap_difference, heatmaps_to_keypoints, keypoints_to_gaussian_maps, KeypointDetector,
    KeypointVars, DEFAULT_NUM_KEYPOINTS, DEFAULT_TEMPERATURE,
};
use crate::motion::{compose_flow, displacements, locally_aligned_inputs, DenseMotionNet, FlowComposition};
use crate::nn::{Ctx, NormKind, ParamStore, UNetWidth};
use crate::tensor::{Graph, Tensor, Var};

/// Switches that remove one part of the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Flow fixed to zero; the motion network is not built.
    pub no_flow: bool,
    /// Flow is the residual only.
    pub no_coarse: bool,
    /// Flow is the mask-weighted coarse flow only.
    pub no_residual: bool,
    /// Covariances fixed to `FIXED_VARIANCE * I` instead of estimated.
    pub fixed_sigma: bool,
    /// Motion network sees only the heatmap difference.
    pub no_appearance: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["no_flow", "no_coarse", "no_residual", "fixed_sigma", "no_appearance"];

    pub fn set(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "no_flow" => &mut self.no_flow,
            "no_coarse" => &mut self.no_coarse,
            "no_residual" => &mut self.no_residual,
            "fixed_sigma" => &mut self.fixed_sigma,
            "no_appearance" | "no_appearance_to_M" => &mut self.no_appearance,
            other => return Err(invalid("ablation", format!("unknown ablation {other}"))),
        };
        *flag = true;
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [self.no_flow, self.no_coarse, self.no_residual, self.fixed_sigma, self.no_appearance];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn flow_composition(&self) -> Result<FlowComposition> {
        match (self.no_coarse, self.no_residual) {
            (true, true) => Err(invalid(
                "ablation",
                "no_coarse and no_residual together leave no flow; use no_flow",
            )),
            (true, false) => Ok(FlowComposition::ResidualOnly),
            (false, true) => Ok(FlowComposition::CoarseOnly),
            (false, false) => Ok(FlowComposition::CoarsePlusResidual),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_keypoints: usize,
    pub temperature: f64,
    pub width: UNetWidth,
    pub disc_base: usize,
    pub disc_max: usize,
    pub disc_scales: usize,
    pub res_blocks: usize,
    pub norm: NormKind,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_keypoints: DEFAULT_NUM_KEYPOINTS,
            temperature: DEFAULT_TEMPERATURE,
            width: UNetWidth::default(),
            disc_base: 64,
            disc_max: 512,
            disc_scales: 1,
            res_blocks: NUM_RES_BLOCKS,
            norm: NormKind::Batch,
            ablation: Ablation::default(),
        }
    }
}

/// Trainable state, split so the discriminator can be updated while the
/// generator-side parameters are still bound to the current graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub gen: ParamStore,
    pub disc: ParamStore,
}

/// Everything produced by one pass from (source image, source keypoints,
/// driving keypoints) to a generated frame.
#[derive(Clone, Debug)]
pub struct Generated {
    pub image: Var,
    pub flow: Var,
    pub masks: Option<Var>,
    /// Rendered source-pose maps H.
    pub heat_source: Var,
    /// Rendered driving-pose maps H'.
    pub heat_driving: Var,
    pub hdot: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub detector: KeypointDetector,
    pub motion: Option<DenseMotionNet>,
    pub generator: Generator,
    pub discriminator: Discriminator,
    flow_mode: FlowComposition,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let k = cfg.num_keypoints;
        if k == 0 {
            return Err(invalid("Model::new", "need at least one keypoint"));
        }
        let flow_mode = cfg.ablation.flow_composition()?;
        Ok(Model {
            detector: KeypointDetector::new(k, cfg.temperature, cfg.width, cfg.norm),
            motion: (!cfg.ablation.no_flow)
                .then(|| DenseMotionNet::new(k, !cfg.ablation.no_appearance, cfg.width, cfg.norm)),
            generator: Generator::new(k, cfg.width, cfg.norm, cfg.res_blocks),
            discriminator: Discriminator::new(k, cfg.disc_base, cfg.disc_max, cfg.disc_scales),
            flow_mode,
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::default();
        self.detector.init(&mut p.gen, seed);
        if let Some(m) = &self.motion {
            m.init(&mut p.gen, seed);
        }
        self.generator.init(&mut p.gen, seed);
        self.discriminator.init(&mut p.disc, seed);
        p
    }

    /// Detector confidence maps and fitted keypoints for images [N,3,H,W].
    pub fn detect(&self, ctx: &Ctx, images: Var) -> Result<(Var, KeypointVars)> {
        let heat = self.detector.detect(ctx, images)?;
        let kp = heatmaps_to_keypoints(ctx.g, heat)?;
        let kp = if self.cfg.ablation.fixed_sigma {
            kp.with_fixed_variance(ctx.g)?
        } else {
            kp
        };
        Ok((heat, kp))
    }

    /// Generates the frame aligned with `driving` keypoints from `source`
    /// [N,3,H,W] and its keypoints.
    pub fn generate(
        &self,
        ctx: &Ctx,
        source: Var,
        src_kp: &KeypointVars,
        drv_kp: &KeypointVars,
    ) -> Result<Generated> {
        let g = ctx.g;
        let s = g.shape(source);
        let (n, h, w) = (s[0], s[2], s[3]);
        let heat_source = keypoints_to_gaussian_maps(g, src_kp, h, w)?;
        let heat_driving = keypoints_to_gaussian_maps(g, drv_kp, h, w)?;
        let hdot = heatmap_difference(g, heat_driving, heat_source)?;
        let (flow, masks) = match &self.motion {
            None => (g.constant(Tensor::zeros(&[n, 2, h, w])), None),
            Some(net) => {
                let disp = displacements(g, src_kp, drv_kp)?;
                let aligned = if net.use_appearance {
                    locally_aligned_inputs(g, source, disp)?
                } else {
                    Vec::new()
                };
                let (masks, residual) = net.predict_masks_residual(ctx, hdot, source, &aligned)?;
                let flow = match self.flow_mode {
                    FlowComposition::CoarsePlusResidual => compose_flow(g, masks, disp, Some(residual))?,
                    FlowComposition::CoarseOnly => compose_flow(g, masks, disp, None)?,
                    FlowComposition::ResidualOnly => residual,
                };
                (flow, Some(masks))
            }
        };
        let image = self.generator.forward(ctx, source, flow, hdot)?;
        Ok(Generated {
            image,
            flow,
            masks,
            heat_source,
            heat_driving,
            hdot,
        })
    }

    /// Required divisor of image height and width.
    pub fn size_divisor(&self) -> usize {
        1 << self.cfg.width.blocks
    }
}

/// Graph constants for a keypoint set batch.
pub fn keypoint_constants(g: &Graph, mean: Tensor, cov: Tensor) -> KeypointVars {
    KeypointVars {
        mean: g.constant(mean),
        cov: g.constant(cov),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    pub(crate) fn tiny(k: usize) -> ModelConfig {
        ModelConfig {
            num_keypoints: k,
            width: UNetWidth {
                base: 4,
                max: 16,
                blocks: 5,
            },
            disc_base: 4,
            disc_max: 16,
            norm: NormKind::Batch,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        let mut a = Ablation::default();
        for n in Ablation::NAMES {
            a.set(n).unwrap();
        }
        assert_eq!(a.names(), Ablation::NAMES.to_vec());
        assert!(a.set("bogus").is_err());
        assert!(a.flow_composition().is_err());
    }

    #[test]
    fn identical_keypoints_make_output_depend_on_image_only() {
        let model = Model::new(tiny(3)).unwrap();
        let params = model.init(1);
        let x = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 29) % 31) as f64 / 31.0);
        let gen_with = |loc: f64, var: f64| {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &params.gen, Mode::Eval, false);
            let mean = Tensor::from_fn(&[1, 3, 2], |i| loc * (i as f64 - 2.0));
            let cov = Tensor::from_fn(&[1, 3, 2, 2], |i| if i % 4 == 0 || i % 4 == 3 { var } else { 0.0 });
            let kp = keypoint_constants(&g, mean, cov);
            let src = g.constant(x.clone());
            let out = model.generate(&ctx, src, &kp, &kp).unwrap();
            (*g.value(out.image)).clone()
        };
        // zero heatmap difference and zero displacement: keypoints are unreachable
        assert_eq!(gen_with(0.1, 0.01), gen_with(-0.3, 0.05));
    }
}
