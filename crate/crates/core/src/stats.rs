//! Two-sample rank-sum (Mann–Whitney) test.

use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSum {
    /// Mann–Whitney `U` of the first sample.
    pub u: f64,
    pub z: f64,
    /// Two-sided, normal approximation with tie and continuity corrections.
    pub p: f64,
}

/// Returns `None` when either sample is empty or all values are tied.
pub fn rank_sum_test(x: &[f64], y: &[f64]) -> Option<RankSum> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    if all.iter().any(|(v, _)| v.is_nan()) {
        return None;
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_x += avg * all[i..=j].iter().filter(|(_, from_x)| *from_x).count() as f64;
        i = j + 1;
    }
    let (a, b, nf) = (n1 as f64, n2 as f64, n as f64);
    let u = rank_x - a * (a + 1.0) / 2.0;
    let mean = a * b / 2.0;
    let var = a * b / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if !(var > 0.0) {
        return None;
    }
    let diff = u - mean;
    let corrected = if diff > 0.0 { (diff - 0.5).max(0.0) } else { (diff + 0.5).min(0.0) };
    let z = corrected / math::sqrt(var);
    Some(RankSum { u, z, p: (2.0 * math::normal_sf(math::abs(z))).min(1.0) })
}
