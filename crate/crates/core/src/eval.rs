//! Held-out evaluation: reconstruction L1 and AKD against ground-truth tracks.

use crate::error::{invalid, Result};
use crate::inference::{detect_keypoints, reconstruct_video};
use crate::metrics::{metric_akd, metric_l1, MetricReport};
use crate::model::{Model, Params};
use crate::synth::SynthVideo;

/// Per-video metrics and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_video: Vec<(usize, MetricReport)>,
    pub mean: MetricReport,
}

/// Reconstructs every video from its first frame. L1 compares the
/// reconstruction with the input; AKD compares keypoints detected on the
/// reconstruction with the ground-truth tracks.
pub fn evaluate(model: &Model, params: &Params, videos: &[&SynthVideo]) -> Result<Evaluation> {
    if videos.is_empty() {
        return Err(invalid("evaluate", "no videos to evaluate"));
    }
    let mut per_video = Vec::with_capacity(videos.len());
    for v in videos {
        let rec = reconstruct_video(model, params, &v.clip)?;
        let l1 = metric_l1(&rec, &v.clip)?;
        let learned = detect_keypoints(model, params, rec.frames())?;
        let akd = metric_akd(&v.tracks, &learned, v.clip.width(), v.clip.height())?;
        per_video.push((v.id, MetricReport { l1, akd }));
    }
    let n = per_video.len() as f64;
    let mean = MetricReport {
        l1: per_video.iter().map(|(_, r)| r.l1).sum::<f64>() / n,
        akd: per_video.iter().map(|(_, r)| r.akd).sum::<f64>() / n,
    };
    Ok(Evaluation { per_video, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::{NormKind, UNetWidth};
    use crate::synth::{generate_video, SynthSpec};

    #[test]
    fn evaluates_untrained_model() {
        let model = Model::new(ModelConfig {
            num_keypoints: 3,
            width: UNetWidth {
                base: 4,
                max: 8,
                blocks: 5,
            },
            disc_base: 4,
            disc_max: 8,
            norm: NormKind::Batch,
            ..ModelConfig::default()
        })
        .unwrap();
        let params = model.init(0);
        let spec = SynthSpec {
            frames_per_video: 3,
            ..SynthSpec::default()
        };
        let v = generate_video(&spec, 0).unwrap();
        let e = evaluate(&model, &params, &[&v]).unwrap();
        assert_eq!(e.per_video.len(), 1);
        assert!(e.mean.l1 > 0.0 && e.mean.l1 <= 1.0);
        assert!(e.mean.akd >= 0.0);
        assert!(evaluate(&model, &params, &[]).is_err());
    }
}
