//! Keypoint overlays: a marker per keypoint and its 2σ covariance ellipse.

use crate::error::{invalid, Result};
use crate::keypoints::KeypointSet;
use crate::tensor::Tensor;

/// Fixed per-index colours; index k uses `PALETTE[k % len]`.
pub const PALETTE: [[f64; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.10],
    [0.15, 0.35, 0.95],
    [0.95, 0.85, 0.05],
    [0.85, 0.10, 0.85],
    [0.05, 0.85, 0.85],
    [1.00, 0.55, 0.00],
    [0.55, 0.25, 0.05],
    [1.00, 1.00, 1.00],
    [0.00, 0.00, 0.00],
];

const ELLIPSE_SAMPLES: usize = 96;

pub fn keypoint_color(k: usize) -> [f64; 3] {
    PALETTE[k % PALETTE.len()]
}

/// Principal axes of the 2σ contour: unit eigenvectors of Σ paired with
/// 2·sqrt(eigenvalue), larger first.
pub fn ellipse_axes(cov: [[f64; 2]; 2]) -> [([f64; 2], f64); 2] {
    let (a, b, d) = (cov[0][0], 0.5 * (cov[0][1] + cov[1][0]), cov[1][1]);
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (mean + r, mean - r);
    let v1 = if b.abs() > 1e-15 * (a.abs() + d.abs()).max(f64::MIN_POSITIVE) {
        let (x, y) = (l1 - d, b);
        let n = (x * x + y * y).sqrt();
        [x / n, y / n]
    } else if a >= d {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let v2 = [-v1[1], v1[0]];
    [(v1, 2.0 * l1.max(0.0).sqrt()), (v2, 2.0 * l2.max(0.0).sqrt())]
}

fn put(img: &mut Tensor, x: f64, y: f64, color: [f64; 3]) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (xi, yi) = (x.round(), y.round());
    if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
        return;
    }
    let (xi, yi) = (xi as usize, yi as usize);
    for (c, v) in color.iter().enumerate() {
        img.data_mut()[(c * h + yi) * w + xi] = *v;
    }
}

/// Draws markers (a plus sign) and 2σ ellipses onto a copy of `frame` [3,H,W].
pub fn draw_keypoints(frame: &Tensor, kp: &KeypointSet) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid("draw_keypoints", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let (sx, sy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut img = frame.clone();
    for (k, (loc, cov)) in kp.locations.iter().zip(&kp.covariances).enumerate() {
        let color = keypoint_color(k);
        let (cx, cy) = ((loc[0] + 1.0) * sx, (loc[1] + 1.0) * sy);
        let [(v1, r1), (v2, r2)] = ellipse_axes(*cov);
        for i in 0..ELLIPSE_SAMPLES {
            let t = 2.0 * std::f64::consts::PI * i as f64 / ELLIPSE_SAMPLES as f64;
            let (c, s) = (t.cos() * r1, t.sin() * r2);
            put(&mut img, cx + (c * v1[0] + s * v2[0]) * sx, cy + (c * v1[1] + s * v2[1]) * sy, color);
        }
        for d in -2i32..=2 {
            put(&mut img, cx + d as f64, cy, color);
            put(&mut img, cx, cy + d as f64, color);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn axes_of_diagonal_and_rotated_covariances() {
        let [(v1, r1), (v2, r2)] = ellipse_axes([[0.04, 0.0], [0.0, 0.01]]);
        assert_eq!((v1, v2), ([1.0, 0.0], [0.0, 1.0]));
        assert!(close(r1, 0.4) && close(r2, 0.2));
        // Σ = R diag(9, 1) Rᵀ with R a 30° rotation
        let (s, c) = 30f64.to_radians().sin_cos();
        let cov = [
            [9.0 * c * c + s * s, 8.0 * c * s],
            [8.0 * c * s, 9.0 * s * s + c * c],
        ];
        let [(v1, r1), (v2, r2)] = ellipse_axes(cov);
        assert!(close(r1, 6.0) && close(r2, 2.0));
        assert!(close(v1[0].abs(), c) && close(v1[1].abs(), s));
        assert!(close(v1[0] * v2[0] + v1[1] * v2[1], 0.0));
        for (v, l) in [(v1, 9.0), (v2, 1.0)] {
            let mv = [cov[0][0] * v[0] + cov[0][1] * v[1], cov[1][0] * v[0] + cov[1][1] * v[1]];
            assert!((mv[0] - l * v[0]).abs() < 1e-9 && (mv[1] - l * v[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn overlay_draws_each_keypoint_in_its_color() {
        let frame = Tensor::full(&[3, 32, 32], 0.5);
        let kp = KeypointSet {
            locations: vec![[0.0, 0.0], [-0.5, 0.5]],
            covariances: vec![[[0.01, 0.0], [0.0, 0.01]]; 2],
        };
        let out = draw_keypoints(&frame, &kp).unwrap();
        let px = |x: usize, y: usize| [0, 1, 2].map(|c| out.data()[(c * 32 + y) * 32 + x]);
        let centre = |l: [f64; 2]| (((l[0] + 1.0) * 15.5).round() as usize, ((l[1] + 1.0) * 15.5).round() as usize);
        for (k, l) in kp.locations.iter().enumerate() {
            let (x, y) = centre(*l);
            assert_eq!(px(x, y), keypoint_color(k));
        }
        assert_eq!(keypoint_color(3), keypoint_color(13));
    }
}
