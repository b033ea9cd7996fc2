//! Patch discriminator and the loss stack: least-squares GAN pair,
//! discriminator feature matching, and the weighted total.

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, Ctx, Norm, NormKind, ParamStore};
use crate::tensor::{Graph, Var};

pub const DEFAULT_LAMBDA_REC: f64 = 10.0;
pub const DISC_BLOCKS: usize = 4;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
struct DiscBlock {
    conv: Conv2d,
    norm: Option<Norm>,
}

#[derive(Clone, Debug)]
struct SingleScale {
    blocks: Vec<DiscBlock>,
    score: Conv2d,
}

/// Stack of stride-2 4×4 conv blocks followed by a 1-channel score map.
/// With `scales > 1`, additional copies run on 2×, 4×, ... average-pooled input.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub in_channels: usize,
    scales: Vec<SingleScale>,
}

/// Score maps (one per scale) and intermediate features (input first, then
/// every block output, per scale).
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub scores: Vec<Var>,
    pub features: Vec<Var>,
}

impl Discriminator {
    pub const PREFIX: &'static str = "disc";

    pub fn new(num_keypoints: usize, base: usize, max: usize, scales: usize) -> Self {
        let in_channels = 3 + num_keypoints;
        let scales = (0..scales.max(1))
            .map(|s| {
                let p = format!("{}.s{s}", Self::PREFIX);
                let mut cin = in_channels;
                let blocks = (0..DISC_BLOCKS)
                    .map(|i| {
                        let cout = (base << i).min(max);
                        let b = DiscBlock {
                            conv: Conv2d::new(format!("{p}.block{i}.conv"), cin, cout, 4, 2, 1),
                            norm: (i > 0).then(|| Norm::new(format!("{p}.block{i}.norm"), cout, NormKind::Instance)),
                        };
                        cin = cout;
                        b
                    })
                    .collect();
                SingleScale {
                    blocks,
                    score: Conv2d::same3(format!("{p}.score"), cin, 1),
                }
            })
            .collect();
        Discriminator { in_channels, scales }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for s in &self.scales {
            for b in &s.blocks {
                b.conv.init(store, seed);
                if let Some(n) = &b.norm {
                    n.init(store);
                }
            }
            s.score.init(store, seed);
        }
    }

    /// Scores `image ⊕ heat` where `heat` holds the driving-frame keypoint maps.
    pub fn discriminate(&self, ctx: &Ctx, image: Var, heat: Var) -> Result<DiscOutput> {
        let g = ctx.g;
        let (si, sh) = (g.shape(image), g.shape(heat));
        if si.len() != 4 || sh.len() != 4 || si[0] != sh[0] || si[2..] != sh[2..] {
            return Err(invalid(
                "discriminate",
                format!("image {si:?} and heatmaps {sh:?} must share N, H, W"),
            ));
        }
        let x = g.concat(&[image, heat], 1)?;
        if g.shape(x)[1] != self.in_channels {
            return Err(invalid(
                "discriminate",
                format!("expected {} input channels, got {}", self.in_channels, g.shape(x)[1]),
            ));
        }
        let mut out = DiscOutput {
            scores: Vec::new(),
            features: Vec::new(),
        };
        let mut input = x;
        for (s, scale) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2d(input, 2)?;
            }
            out.features.push(input);
            let mut y = input;
            for b in &scale.blocks {
                y = b.conv.forward(ctx, y)?;
                if let Some(n) = &b.norm {
                    y = n.forward(ctx, y)?;
                }
                y = g.leaky_relu(y, LEAKY_SLOPE);
                out.features.push(y);
            }
            out.scores.push(scale.score.forward(ctx, y)?);
        }
        Ok(out)
    }
}

fn sum_all(g: &Graph, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| invalid("loss", "no terms"))?;
    it.try_fold(first, |acc, t| g.add(acc, t))
}

/// mean[(real - 1)^2] + mean[fake^2], summed over scales.
pub fn loss_discriminator(g: &Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(invalid("loss_discriminator", "score list lengths differ"));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| g.add(g.square_mean_to(r, 1.0), g.square_mean_to(f, 0.0)))
        .collect::<Result<Vec<_>>>()?;
    sum_all(g, terms)
}

/// mean[(fake - 1)^2], summed over scales.
pub fn loss_generator_gan(g: &Graph, fake: &[Var]) -> Result<Var> {
    sum_all(g, fake.iter().map(|&f| g.square_mean_to(f, 1.0)).collect())
}

/// Sum over layers of the mean absolute feature difference.
pub fn loss_feature_matching(g: &Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(invalid(
            "loss_feature_matching",
            format!("feature lists differ in length: {} vs {}", real.len(), fake.len()),
        ));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| g.l1_mean(f, r))
        .collect::<Result<Vec<_>>>()?;
    sum_all(g, terms)
}

pub fn loss_total(g: &Graph, rec: Var, gan: Var, lambda_rec: f64) -> Result<Var> {
    g.add(g.scale(rec, lambda_rec), gan)
}

/// Scalar losses from one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub loss_d: f64,
    pub loss_g_gan: f64,
    pub loss_rec: f64,
    pub loss_total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,loss_D,loss_G_gan,loss_rec,loss_total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{}",
            self.loss_d, self.loss_g_gan, self.loss_rec, self.loss_total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.loss_d, self.loss_g_gan, self.loss_rec, self.loss_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn discriminator_loss_extremes() {
        let g = Graph::new();
        let ones = g.constant(Tensor::ones(&[2, 1, 4, 4]));
        let zeros = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
        assert_eq!(scalar(&g, loss_discriminator(&g, &[ones], &[zeros]).unwrap()), 0.0);
        assert_eq!(scalar(&g, loss_discriminator(&g, &[zeros], &[ones]).unwrap()), 2.0);
        assert_eq!(scalar(&g, loss_generator_gan(&g, &[ones]).unwrap()), 0.0);
        assert_eq!(scalar(&g, loss_generator_gan(&g, &[zeros]).unwrap()), 1.0);
    }

    #[test]
    fn discriminator_loss_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Graph::new();
        let rt = Tensor::from_fn(&[3, 1, 5, 5], |_| rng.gen_range(-2.0..2.0));
        let ft = Tensor::from_fn(&[3, 1, 5, 5], |_| rng.gen_range(-2.0..2.0));
        let brute = rt.data().iter().map(|r| (r - 1.0) * (r - 1.0)).sum::<f64>() / 75.0
            + ft.data().iter().map(|f| f * f).sum::<f64>() / 75.0;
        let got = scalar(
            &g,
            loss_discriminator(&g, &[g.constant(rt)], &[g.constant(ft)]).unwrap(),
        );
        assert!((got - brute).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights_reconstruction() {
        let g = Graph::new();
        let rec = g.constant(Tensor::scalar(0.1));
        let gan = g.constant(Tensor::scalar(0.5));
        assert!((scalar(&g, loss_total(&g, rec, gan, DEFAULT_LAMBDA_REC).unwrap()) - 1.5).abs() < 1e-15);
        let zero = g.constant(Tensor::scalar(0.0));
        assert_eq!(scalar(&g, loss_total(&g, zero, gan, DEFAULT_LAMBDA_REC).unwrap()), 0.5);
    }

    #[test]
    fn feature_matching_properties() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64).sqrt()));
        assert_eq!(scalar(&g, loss_feature_matching(&g, &[a, b], &[a, b]).unwrap()), 0.0);
        let ab = scalar(&g, loss_feature_matching(&g, &[a], &[b]).unwrap());
        let ba = scalar(&g, loss_feature_matching(&g, &[b], &[a]).unwrap());
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
        assert!(loss_feature_matching(&g, &[a], &[a, b]).is_err());
    }

    #[test]
    fn discriminator_features_and_channels() {
        let k = 3;
        let d = Discriminator::new(k, 4, 32, 1);
        assert_eq!(d.in_channels, 3 + k);
        let mut store = ParamStore::new();
        d.init(&mut store, 2);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Train, true);
        let img = g.constant(Tensor::from_fn(&[2, 3, 32, 32], |i| (i % 9) as f64 / 9.0));
        let heat = g.constant(Tensor::zeros(&[2, k, 32, 32]));
        let out = d.discriminate(&ctx, img, heat).unwrap();
        assert_eq!(out.features.len(), DISC_BLOCKS + 1);
        assert_eq!(g.shape(out.scores[0]), vec![2, 1, 2, 2]);
        let again = d.discriminate(&ctx, img, heat).unwrap();
        assert_eq!(*g.value(out.scores[0]), *g.value(again.scores[0]));

        let wrong = g.constant(Tensor::zeros(&[2, k + 1, 32, 32]));
        assert!(d.discriminate(&ctx, img, wrong).is_err());
        let d2 = Discriminator::new(k, 4, 32, 2);
        let mut s2 = ParamStore::new();
        d2.init(&mut s2, 2);
        let ctx2 = Ctx::new(&g, &s2, Mode::Train, true);
        let out2 = d2.discriminate(&ctx2, img, heat).unwrap();
        assert_eq!(out2.scores.len(), 2);
        assert_eq!(out2.features.len(), 2 * (DISC_BLOCKS + 1));
    }
}
