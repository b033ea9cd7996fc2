//! Evaluation metrics: mean absolute pixel error and average keypoint
//! distance under a fixed first-frame assignment.

use crate::error::{invalid, Result};
use crate::keypoints::KeypointSet;
use crate::video::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub l1: f64,
    pub akd: f64,
}

/// Mean |a - b| over all pixels, channels and frames.
pub fn metric_l1(generated: &VideoClip, reference: &VideoClip) -> Result<f64> {
    if generated.len() != reference.len() || generated.frame(0).shape() != reference.frame(0).shape() {
        return Err(invalid(
            "metric_l1",
            format!(
                "clip shapes differ: {} x {:?} vs {} x {:?}",
                generated.len(),
                generated.frame(0).shape(),
                reference.len(),
                reference.frame(0).shape()
            ),
        ));
    }
    let (sum, n) = generated
        .frames()
        .iter()
        .zip(reference.frames())
        .fold((0.0, 0usize), |(s, n), (a, b)| {
            let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
            (s + d, n + a.numel())
        });
    Ok(sum / n as f64)
}

/// Minimum-cost assignment of every row to a distinct column
/// (rows <= columns). Returns the column for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(invalid("hungarian", "ragged cost matrix"));
    }
    if n > m {
        return Err(invalid("hungarian", format!("{n} rows cannot be assigned to {m} columns")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(invalid("hungarian", "non-finite cost"));
    }
    // Potentials-based shortest augmenting path, 1-indexed with a virtual column 0.
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

fn pixel_distance(a: [f64; 2], b: [f64; 2], width: usize, height: usize) -> f64 {
    let dx = (a[0] - b[0]) * (width as f64 - 1.0) / 2.0;
    let dy = (a[1] - b[1]) * (height as f64 - 1.0) / 2.0;
    (dx * dx + dy * dy).sqrt()
}

/// Pairs (index in `a`, index in `b`) minimizing total first-frame distance.
/// The smaller set is matched completely.
pub fn match_first_frame(a: &KeypointSet, b: &KeypointSet) -> Result<Vec<(usize, usize)>> {
    let d = |i: usize, j: usize| {
        let (p, q) = (a.locations[i], b.locations[j]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };
    if a.len() <= b.len() {
        let cost: Vec<Vec<f64>> = (0..a.len()).map(|i| (0..b.len()).map(|j| d(i, j)).collect()).collect();
        Ok(hungarian(&cost)?.into_iter().enumerate().collect())
    } else {
        let cost: Vec<Vec<f64>> = (0..b.len()).map(|j| (0..a.len()).map(|i| d(i, j)).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = hungarian(&cost)?.into_iter().enumerate().map(|(j, i)| (i, j)).collect();
        pairs.sort();
        Ok(pairs)
    }
}

/// Mean pixel distance over matched pairs and frames, with the matching
/// fixed from the first frame.
pub fn metric_akd_with(
    a: &[KeypointSet],
    b: &[KeypointSet],
    matching: &[(usize, usize)],
    width: usize,
    height: usize,
) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid(
            "metric_akd",
            format!("track lengths differ or are empty: {} vs {}", a.len(), b.len()),
        ));
    }
    if matching.is_empty() {
        return Err(invalid("metric_akd", "empty matching"));
    }
    let (ka, kb) = (a[0].len(), b[0].len());
    let mut sum = 0.0;
    for (t, (sa, sb)) in a.iter().zip(b).enumerate() {
        if sa.len() != ka || sb.len() != kb {
            return Err(invalid("metric_akd", format!("keypoint count changes at frame {t}")));
        }
        for &(i, j) in matching {
            if i >= ka || j >= kb {
                return Err(invalid("metric_akd", "matching refers to a missing keypoint"));
            }
            sum += pixel_distance(sa.locations[i], sb.locations[j], width, height);
        }
    }
    Ok(sum / (a.len() * matching.len()) as f64)
}

/// AKD with the minimum-cost first-frame matching.
pub fn metric_akd(a: &[KeypointSet], b: &[KeypointSet], width: usize, height: usize) -> Result<f64> {
    let (fa, fb) = match (a.first(), b.first()) {
        (Some(fa), Some(fb)) => (fa, fb),
        _ => return Err(invalid("metric_akd", "empty tracks")),
    };
    let m = match_first_frame(fa, fb)?;
    metric_akd_with(a, b, &m, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(v: f64, n: usize) -> VideoClip {
        VideoClip::new(vec![Tensor::full(&[3, 4, 4], v); n]).unwrap()
    }

    fn set(locs: Vec<[f64; 2]>) -> KeypointSet {
        let k = locs.len();
        KeypointSet {
            locations: locs,
            covariances: vec![[[0.01, 0.0], [0.0, 0.01]]; k],
        }
    }

    #[test]
    fn l1_reference_values() {
        assert_eq!(metric_l1(&clip(0.3, 2), &clip(0.3, 2)).unwrap(), 0.0);
        assert_eq!(metric_l1(&clip(0.0, 2), &clip(1.0, 2)).unwrap(), 1.0);
        let half = Tensor::from_fn(&[3, 4, 4], |i| if (i % 16) < 8 { 1.0 } else { 0.0 });
        let a = VideoClip::new(vec![half]).unwrap();
        assert_eq!(metric_l1(&a, &clip(0.0, 1)).unwrap(), 0.5);
        assert!(metric_l1(&clip(0.0, 2), &clip(0.0, 3)).is_err());
    }

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost[0].len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(n..=7);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
            let a = hungarian(&cost).unwrap();
            let mut cols = a.clone();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), n);
            let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            assert!((total - brute_force(&cost)).abs() < 1e-9);
        }
        assert!(hungarian(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn akd_reference_values() {
        let w = 64;
        let px = 2.0 / (w as f64 - 1.0);
        let a: Vec<KeypointSet> = (0..5).map(|t| set(vec![[0.1 * t as f64, 0.0], [-0.5, 0.5]])).collect();
        assert_eq!(metric_akd(&a, &a, w, w).unwrap(), 0.0);
        let shifted: Vec<KeypointSet> = a
            .iter()
            .map(|s| set(s.locations.iter().map(|l| [l[0] + px, l[1]]).collect()))
            .collect();
        assert!((metric_akd(&a, &shifted, w, w).unwrap() - 1.0).abs() < 1e-12);
        // unordered: swapping keypoint order changes nothing
        let swapped: Vec<KeypointSet> = shifted
            .iter()
            .map(|s| set(vec![s.locations[1], s.locations[0]]))
            .collect();
        assert!((metric_akd(&a, &swapped, w, w).unwrap() - 1.0).abs() < 1e-12);
        assert!(metric_akd(&a, &a[..3], w, w).is_err());
    }

    #[test]
    fn akd_matches_direct_summation_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut r = || rng.gen_range(-1.0..1.0);
        let a: Vec<KeypointSet> = (0..6).map(|_| set((0..3).map(|_| [r(), r()]).collect())).collect();
        let b: Vec<KeypointSet> = (0..6).map(|_| set((0..3).map(|_| [r(), r()]).collect())).collect();
        let m = match_first_frame(&a[0], &b[0]).unwrap();
        let mut direct = 0.0;
        for t in 0..6 {
            for &(i, j) in &m {
                let (p, q) = (a[t].locations[i], b[t].locations[j]);
                direct += (((p[0] - q[0]) * 31.5).powi(2) + ((p[1] - q[1]) * 31.5).powi(2)).sqrt();
            }
        }
        direct /= 18.0;
        assert!((metric_akd(&a, &b, 64, 64).unwrap() - direct).abs() < 1e-12);
        let flipped: Vec<(usize, usize)> = m.iter().map(|&(i, j)| (j, i)).collect();
        assert_eq!(
            metric_akd_with(&a, &b, &m, 64, 64).unwrap(),
            metric_akd_with(&b, &a, &flipped, 64, 64).unwrap()
        );
    }

    #[test]
    fn rectangular_matching_covers_smaller_set() {
        let gt = set(vec![[0.5, 0.5]]);
        let learned = set(vec![[-0.9, -0.9], [0.45, 0.5], [0.0, 0.0]]);
        assert_eq!(match_first_frame(&gt, &learned).unwrap(), vec![(0, 1)]);
        assert_eq!(match_first_frame(&learned, &gt).unwrap(), vec![(1, 0)]);
    }
}
