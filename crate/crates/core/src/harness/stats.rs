//! Rank statistics used by the separability check.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` statistic of the first sample.
    pub u: f64,
    pub z: f64,
    pub p_two_sided: f64,
    /// p-value for the alternative that the first sample tends to be smaller.
    pub p_less: f64,
}

/// Mann-Whitney U test, normal approximation with tie and continuity corrections.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> MannWhitney {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let r = ranks(&pooled);
    let r1: f64 = r[..a.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let mu = n1 * n2 / 2.0;
    let sd = (n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)))).sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    if !(sd > 0.0) {
        return MannWhitney { u, z: 0.0, p_two_sided: 1.0, p_less: 1.0 };
    }
    let z_two = ((u - mu).abs() - 0.5).max(0.0) / sd;
    let z_less = (u - mu + 0.5) / sd;
    MannWhitney {
        u,
        z: (u - mu) / sd,
        p_two_sided: (2.0 * std.sf(z_two)).min(1.0),
        p_less: std.cdf(z_less),
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

/// `sup_x |F_a(x) - F_b(x)|` between the empirical distribution functions.
pub fn cdf_gap(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (mut i, mut j, mut gap) = (0usize, 0usize, 0.0f64);
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        gap = gap.max((i as f64 / sa.len() as f64 - j as f64 / sb.len() as f64).abs());
    }
    gap
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: [f64; 7] = [1.2, 3.4, 2.2, 2.2, 5.0, 0.7, 3.3];
    const B: [f64; 8] = [4.1, 2.2, 6.0, 5.5, 3.9, 7.2, 4.4, 2.2];

    // Reference values from scipy.stats (asymptotic, continuity-corrected).
    #[test]
    fn mann_whitney_matches_reference() {
        let t = mann_whitney(&A, &B);
        assert_eq!(t.u, 11.0);
        assert!((t.p_two_sided - 0.05400644371208492).abs() < 1e-10, "{t:?}");
        assert!((t.p_less - 0.02700322185604246).abs() < 1e-10);
    }

    #[test]
    fn spearman_matches_reference() {
        let r = spearman(&[0.1, 0.4, 0.7, 1.0, 1.3], &[0.2, 0.25, 0.5, 0.45, 0.9]);
        assert!((r - 0.9).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cdf_gap_matches_reference() {
        assert!((cdf_gap(&A, &B) - 0.6071428571428571).abs() < 1e-12);
        assert_eq!(cdf_gap(&A, &A), 0.0);
        assert_eq!(cdf_gap(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn identical_samples_are_not_separated() {
        let t = mann_whitney(&A, &A);
        assert!(t.p_two_sided > 0.9);
    }
}
