//! Evaluation-time procedures: video reconstruction and image animation by
//! relative or absolute keypoint transfer.

use crate::error::{invalid, Result};
use crate::keypoints::KeypointSet;
use crate::model::{keypoint_constants, Model, Params};
use crate::nn::{Ctx, Mode};
use crate::tensor::{Graph, Tensor};
use crate::video::VideoClip;

/// Frames per forward pass at evaluation time. Samples never interact, so
/// this only affects memory use.
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferMode {
    /// Source keypoints moved by the driving video's displacement from its first frame.
    Relative,
    /// Driving keypoints used directly.
    Absolute,
}

impl std::str::FromStr for TransferMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(TransferMode::Relative),
            "absolute" => Ok(TransferMode::Absolute),
            other => Err(invalid("TransferMode", format!("expected relative or absolute, got {other:?}"))),
        }
    }
}

fn check_frame(model: &Model, f: &Tensor) -> Result<()> {
    let s = f.shape();
    let d = model.size_divisor();
    if s.len() != 3 || s[0] != 3 || s[1] % d != 0 || s[2] % d != 0 || s[1] == 0 || s[2] == 0 {
        return Err(invalid(
            "inference",
            format!("frames must be [3,H,W] with H and W multiples of {d}, got {s:?}"),
        ));
    }
    Ok(())
}

/// Keypoints of each frame, evaluation mode.
pub fn detect_keypoints(model: &Model, params: &Params, frames: &[Tensor]) -> Result<Vec<KeypointSet>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(EVAL_CHUNK) {
        for f in chunk {
            check_frame(model, f)?;
        }
        let g = Graph::new();
        let ctx = Ctx::new(&g, &params.gen, Mode::Eval, false);
        let batch = stack(chunk)?;
        let (_, kp) = model.detect(&ctx, g.constant(batch))?;
        out.extend(kp.to_sets(&g)?);
    }
    Ok(out)
}

fn stack(frames: &[Tensor]) -> Result<Tensor> {
    let parts = frames
        .iter()
        .map(|f| {
            let mut s = vec![1];
            s.extend_from_slice(f.shape());
            f.clone().reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack0(&parts)
}

/// Relative transfer of locations: h' = h^s + (h^t - h^1).
///
/// Evaluated per coordinate so both collapse cases are exact:
/// h^t = h^1 returns h^s and h^s = h^1 returns h^t.
pub fn transfer_locations(src: &[[f64; 2]], first: &[[f64; 2]], current: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if src.len() != first.len() || src.len() != current.len() {
        return Err(invalid(
            "transfer_keypoints_relative",
            format!(
                "keypoint counts differ: source {}, first {}, current {}",
                src.len(),
                first.len(),
                current.len()
            ),
        ));
    }
    let one = |s: f64, a: f64, t: f64| if s == a { t } else { s + (t - a) };
    Ok(src
        .iter()
        .zip(first)
        .zip(current)
        .map(|((s, a), t)| [one(s[0], a[0], t[0]), one(s[1], a[1], t[1])])
        .collect())
}

/// Relative transfer; covariances of the result come from the current driving frame.
pub fn transfer_keypoints_relative(
    src: &KeypointSet,
    first: &KeypointSet,
    current: &KeypointSet,
) -> Result<KeypointSet> {
    Ok(KeypointSet {
        locations: transfer_locations(&src.locations, &first.locations, &current.locations)?,
        covariances: current.covariances.clone(),
    })
}

/// The (source-pose, driving-pose) keypoints used to generate one frame.
///
/// Relative mode renders the source pose with the first driving frame's
/// covariances and the transferred pose with the current frame's.
pub fn pose_pair(
    mode: TransferMode,
    src: &KeypointSet,
    first: &KeypointSet,
    current: &KeypointSet,
) -> Result<(KeypointSet, KeypointSet)> {
    match mode {
        TransferMode::Relative => {
            let source_pose = KeypointSet {
                locations: src.locations.clone(),
                covariances: first.covariances.clone(),
            };
            Ok((source_pose, transfer_keypoints_relative(src, first, current)?))
        }
        TransferMode::Absolute => {
            if src.len() != current.len() {
                return Err(invalid("animate", "keypoint counts differ"));
            }
            Ok((src.clone(), current.clone()))
        }
    }
}

/// Locations clamped to the lattice [-1, 1]; the flag reports whether any moved.
pub fn clip_to_lattice(kp: &KeypointSet) -> (KeypointSet, bool) {
    let mut moved = false;
    let locations = kp
        .locations
        .iter()
        .map(|l| {
            let c = [l[0].clamp(-1.0, 1.0), l[1].clamp(-1.0, 1.0)];
            moved |= c != *l;
            c
        })
        .collect();
    (
        KeypointSet {
            locations,
            covariances: kp.covariances.clone(),
        },
        moved,
    )
}

/// Generates one frame per pose pair from a single source image.
pub fn generate_frames(
    model: &Model,
    params: &Params,
    source: &Tensor,
    poses: &[(KeypointSet, KeypointSet)],
) -> Result<Vec<Tensor>> {
    check_frame(model, source)?;
    let mut out = Vec::with_capacity(poses.len());
    for chunk in poses.chunks(EVAL_CHUNK) {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &params.gen, Mode::Eval, false);
        let src_sets: Vec<KeypointSet> = chunk.iter().map(|p| p.0.clone()).collect();
        let drv_sets: Vec<KeypointSet> = chunk.iter().map(|p| p.1.clone()).collect();
        let (sm, sc) = KeypointSet::to_tensors(&src_sets)?;
        let (dm, dc) = KeypointSet::to_tensors(&drv_sets)?;
        let x = stack(&vec![source.clone(); chunk.len()])?;
        let gen = model.generate(
            &ctx,
            g.constant(x),
            &keypoint_constants(&g, sm, sc),
            &keypoint_constants(&g, dm, dc),
        )?;
        out.extend(VideoClip::from_batch(&g.value(gen.image))?.into_frames());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Animation {
    pub clip: VideoClip,
    /// Driving-pose keypoints per frame, before clipping.
    pub tracks: Vec<KeypointSet>,
    pub warnings: Vec<String>,
}

pub fn animate(
    model: &Model,
    params: &Params,
    source: &Tensor,
    driving: &VideoClip,
    mode: TransferMode,
) -> Result<Animation> {
    check_frame(model, source)?;
    if driving.frame(0).shape() != source.shape() {
        return Err(invalid(
            "animate",
            format!(
                "source {:?} and driving frames {:?} differ in size",
                source.shape(),
                driving.frame(0).shape()
            ),
        ));
    }
    let src_kp = detect_keypoints(model, params, std::slice::from_ref(source))?.remove(0);
    let drv_kp = detect_keypoints(model, params, driving.frames())?;
    let mut poses = Vec::with_capacity(drv_kp.len());
    let mut tracks = Vec::with_capacity(drv_kp.len());
    let mut warnings = Vec::new();
    for (t, cur) in drv_kp.iter().enumerate() {
        let (s, d) = pose_pair(mode, &src_kp, &drv_kp[0], cur)?;
        let (d_clipped, moved) = clip_to_lattice(&d);
        if moved {
            warnings.push(format!(
                "frame {t}: transferred keypoints left the image and were clipped; source and driving poses may be misaligned"
            ));
        }
        tracks.push(d);
        poses.push((s, d_clipped));
    }
    let frames = generate_frames(model, params, source, &poses)?;
    Ok(Animation {
        clip: VideoClip::new(frames)?,
        tracks,
        warnings,
    })
}

/// Frame 0 is copied; frame t is generated from frame 0 and the keypoints of
/// frames 0 and t, through the relative-animation path.
pub fn reconstruct_video(model: &Model, params: &Params, clip: &VideoClip) -> Result<VideoClip> {
    if clip.len() < 2 {
        return Err(invalid("reconstruct_video", "clip needs at least 2 frames"));
    }
    let kps = detect_keypoints(model, params, clip.frames())?;
    let poses = kps[1..]
        .iter()
        .map(|cur| {
            let (s, d) = pose_pair(TransferMode::Relative, &kps[0], &kps[0], cur)?;
            Ok((s, clip_to_lattice(&d).0))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut frames = vec![clip.frame(0).clone()];
    frames.extend(generate_frames(model, params, clip.frame(0), &poses)?);
    VideoClip::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::{NormKind, UNetWidth};

    fn set(locs: &[[f64; 2]], var: f64) -> KeypointSet {
        KeypointSet {
            locations: locs.to_vec(),
            covariances: vec![[[var, 0.0], [0.0, var]]; locs.len()],
        }
    }

    fn tiny_model() -> (Model, Params) {
        let model = Model::new(ModelConfig {
            num_keypoints: 2,
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
        let params = model.init(3);
        (model, params)
    }

    fn clip(n: usize) -> VideoClip {
        VideoClip::new(
            (0..n)
                .map(|t| Tensor::from_fn(&[3, 32, 32], |i| (((i + 5 * t) * 13) % 29) as f64 / 29.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn relative_transfer_arithmetic() {
        let out = transfer_locations(&[[0.2, 0.3]], &[[0.0, 0.0]], &[[0.1, -0.1]]).unwrap();
        assert!((out[0][0] - 0.3).abs() < 1e-15 && (out[0][1] - 0.2).abs() < 1e-15);
        let s = [[0.123, -0.77]];
        let a = [[0.31, 0.05]];
        assert_eq!(transfer_locations(&s, &a, &a).unwrap(), s.to_vec());
        let t = [[-0.4, 0.9]];
        assert_eq!(transfer_locations(&a, &a, &t).unwrap(), t.to_vec());
        assert!(transfer_locations(&s, &a, &[]).is_err());
    }

    #[test]
    fn relative_covariances_come_from_driving() {
        let src = set(&[[0.1, 0.1]], 0.5);
        let first = set(&[[0.0, 0.0]], 0.02);
        let cur = set(&[[0.2, 0.0]], 0.03);
        let (s, d) = pose_pair(TransferMode::Relative, &src, &first, &cur).unwrap();
        assert_eq!(s.covariances, first.covariances);
        assert_eq!(d.covariances, cur.covariances);
        let (s, d) = pose_pair(TransferMode::Absolute, &src, &first, &cur).unwrap();
        assert_eq!((s, d), (src, cur));
    }

    #[test]
    fn clipping_flags_out_of_range() {
        let (c, moved) = clip_to_lattice(&set(&[[1.2, -0.5], [0.0, -3.0]], 0.01));
        assert!(moved);
        assert_eq!(c.locations, vec![[1.0, -0.5], [0.0, -1.0]]);
        assert!(!clip_to_lattice(&set(&[[0.9, -1.0]], 0.01)).1);
    }

    #[test]
    fn reconstruction_copies_first_frame_and_matches_relative_animation() {
        let (model, params) = tiny_model();
        let c = clip(4);
        let rec = reconstruct_video(&model, &params, &c).unwrap();
        assert_eq!(rec.len(), c.len());
        assert_eq!(rec.frame(0), c.frame(0));
        let anim = animate(&model, &params, c.frame(0), &c, TransferMode::Relative).unwrap();
        assert_eq!(anim.clip.len(), c.len());
        for t in 1..c.len() {
            assert_eq!(rec.frame(t), anim.clip.frame(t));
        }
        assert!(reconstruct_video(&model, &params, &clip(1)).is_err());
    }

    #[test]
    fn static_driving_gives_constant_output() {
        let (model, params) = tiny_model();
        let still = VideoClip::new(vec![clip(1).frame(0).clone(); 3]).unwrap();
        let src = clip(3).frame(2).clone();
        let anim = animate(&model, &params, &src, &still, TransferMode::Relative).unwrap();
        assert_eq!(anim.clip.frame(0), anim.clip.frame(1));
        assert_eq!(anim.clip.frame(1), anim.clip.frame(2));
    }

    #[test]
    fn rejects_bad_sizes() {
        let (model, params) = tiny_model();
        let odd = Tensor::zeros(&[3, 30, 32]);
        assert!(detect_keypoints(&model, &params, &[odd]).is_err());
        let small = Tensor::zeros(&[3, 64, 64]);
        assert!(animate(&model, &params, &small, &clip(2), TransferMode::Absolute).is_err());
    }
}
