//! Equal error rate and minimum detection cost.
//!
//! A trial is accepted when its score is at least the threshold. Thresholds
//! are swept over every distinct score plus `+∞` (reject all), which visits
//! every operating point of the score list.

use crate::error::{Error, Result};

/// `(FAR, FRR)` at every threshold, ordered by increasing threshold.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("operating_points", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "operating_points" });
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least one target and one nontarget trial, got {n_tar} and {n_non}"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::with_capacity(scores.len() + 1);
    // threshold at the lowest score accepts everything
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        points.push((
            (n_non - non_below) as f64 / n_non as f64,
            tar_below as f64 / n_tar as f64,
        ));
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push((0.0, 1.0));
    Ok(points)
}

/// Equal error rate with linear interpolation between the two operating
/// points where `FRR − FAR` changes sign.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = operating_points(scores, labels)?;
    for w in pts.windows(2) {
        let ((far0, frr0), (far1, frr1)) = (w[0], w[1]);
        let (d0, d1) = (frr0 - far0, frr1 - far1);
        if d0 == 0.0 {
            return Ok(far0);
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let a = -d0 / (d1 - d0);
            return Ok(far0 + a * (far1 - far0));
        }
    }
    // the last point (0, 1) always has FRR > FAR
    unreachable!("operating points end with FRR = 1, FAR = 0")
}

/// Minimum of `p·c_miss·FRR + (1−p)·c_fa·FAR`, divided by
/// `min(p·c_miss, (1−p)·c_fa)`.
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::InvalidArgument(format!("p_target {p_target} outside (0, 1)")));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(Error::InvalidArgument("detection costs must be positive".into()));
    }
    let pts = operating_points(scores, labels)?;
    let best = pts
        .iter()
        .map(|&(far, frr)| p_target * c_miss * frr + (1.0 - p_target) * c_fa * far)
        .fold(f64::INFINITY, f64::min);
    Ok(best / (p_target * c_miss).min((1.0 - p_target) * c_fa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Operating points at every midpoint between adjacent distinct scores,
    /// plus below the minimum and above the maximum, by direct counting.
    fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
        let mut distinct: Vec<f64> = scores.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut thresholds = vec![distinct[0] - 1.0];
        for w in distinct.windows(2) {
            thresholds.push(0.5 * (w[0] + w[1]));
        }
        thresholds.push(distinct[distinct.len() - 1] + 1.0);
        let nt = labels.iter().filter(|&&l| l).count() as f64;
        let nn = labels.len() as f64 - nt;
        thresholds
            .iter()
            .map(|&th| {
                let mut fa = 0.0;
                let mut miss = 0.0;
                for (&s, &l) in scores.iter().zip(labels) {
                    if l && s < th {
                        miss += 1.0;
                    }
                    if !l && s >= th {
                        fa += 1.0;
                    }
                }
                (fa / nn, miss / nt)
            })
            .collect()
    }

    fn brute_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let p = sweep(scores, labels);
        for i in 0..p.len() - 1 {
            let (a, b) = (p[i].1 - p[i].0, p[i + 1].1 - p[i + 1].0);
            if a == 0.0 {
                return p[i].0;
            }
            if a < 0.0 && b >= 0.0 {
                let t = a / (a - b);
                return p[i].1 + t * (p[i + 1].1 - p[i].1);
            }
        }
        panic!("no crossing");
    }

    fn brute_dcf(scores: &[f64], labels: &[bool], p: f64) -> f64 {
        sweep(scores, labels)
            .iter()
            .map(|&(fa, miss)| p * miss + (1.0 - p) * fa)
            .fold(f64::INFINITY, f64::min)
            / p.min(1.0 - p)
    }

    fn random_set(seed: u64, n: usize) -> (Vec<f64>, Vec<bool>) {
        let mut s = seed.wrapping_add(17);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64
        };
        let mut labels: Vec<bool> = (0..n).map(|_| next() < 0.5).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse grid so ties occur
        let scores = labels
            .iter()
            .map(|&l| ((next() + if l { 0.3 } else { 0.0 }) * 20.0).round() / 20.0)
            .collect();
        (scores, labels)
    }

    #[test]
    fn reference_cases() {
        let l = [true, true, true, false, false, false];
        assert_eq!(compute_eer(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1], &l).unwrap(), 0.0);
        assert_eq!(compute_eer(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9], &l).unwrap(), 1.0);
        let eer = compute_eer(&[0.9, 0.8, 0.6, 0.7, 0.3, 0.2], &l).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(compute_min_dcf(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1], &l, 0.01, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(compute_min_dcf(&[0.5; 6], &l, 0.05, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(compute_min_dcf(&[0.5; 6], &l, 0.01, 1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(compute_eer(&[0.1, 0.2], &[true, true]).is_err());
        assert!(compute_min_dcf(&[0.1, 0.2], &[false, false], 0.05, 1.0, 1.0).is_err());
        assert!(compute_min_dcf(&[0.1, 0.2], &[true, false], 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn matches_midpoint_sweep() {
        for seed in 0..100 {
            let (s, l) = random_set(seed, 50);
            assert!((compute_eer(&s, &l).unwrap() - brute_eer(&s, &l)).abs() < 1e-9, "seed {seed}");
            for p in [0.01, 0.05, 0.5] {
                let a = compute_min_dcf(&s, &l, p, 1.0, 1.0).unwrap();
                assert!((a - brute_dcf(&s, &l, p)).abs() < 1e-9, "seed {seed}");
            }
        }
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transforms(seed in 0u64..10_000, a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let (s, l) = random_set(seed, 40);
            let t: Vec<f64> = s.iter().map(|&x| (a * x + b).exp()).collect();
            let e = compute_eer(&s, &l).unwrap();
            prop_assert!((e - compute_eer(&t, &l).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&e));
            let d = compute_min_dcf(&s, &l, 0.05, 1.0, 1.0).unwrap();
            prop_assert!((d - compute_min_dcf(&t, &l, 0.05, 1.0, 1.0).unwrap()).abs() < 1e-12);
            prop_assert!(d >= 0.0 && d <= 1.0 + 1e-12);
        }
    }
}
