//! Independent brute-force oracles shared by the integration tests. They
//! avoid the library's kernels and use the most literal formula available.
#![allow(dead_code)]

/// Neumaier-compensated sum.
pub fn ksum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn anchors(m: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..m)
        .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
        .collect()
}

/// `exp(−(c−bᵢ)²) / Σⱼ exp(−(c−bⱼ)²)` evaluated as written.
pub fn encode(c: f64, m: usize, lo: f64, hi: f64) -> Vec<f64> {
    let e: Vec<f64> = anchors(m, lo, hi)
        .iter()
        .map(|b| (-(c - b) * (c - b)).exp())
        .collect();
    let z = ksum(e.iter().copied());
    e.iter().map(|v| v / z).collect()
}

pub fn nearest_anchor(c: f64, m: usize, lo: f64, hi: f64) -> usize {
    let a = anchors(m, lo, hi);
    let mut best = 0;
    for i in 1..m {
        if (c - a[i]).abs() < (c - a[best]).abs() {
            best = i;
        }
    }
    best
}

pub fn vr(y: &[f64], yhat: &[f64]) -> f64 {
    let dot = ksum(y.iter().zip(yhat).map(|(a, b)| a * b));
    let ny = ksum(y.iter().map(|a| a * a)).sqrt();
    let nh = ksum(yhat.iter().map(|a| a * a)).sqrt();
    1.0 - dot / (ny * nh)
}

/// Rank by counting: `1 + #{less} + #{equal others}/2`.
pub fn count_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64 - 1.0;
            1.0 + less + equal / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = ksum(a.iter().copied()) / n;
    let mb = ksum(b.iter().copied()) / n;
    let cov = ksum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let va = ksum(a.iter().map(|x| (x - ma) * (x - ma)));
    let vb = ksum(b.iter().map(|y| (y - mb) * (y - mb)));
    cov / (va.sqrt() * vb.sqrt())
}

/// Spearman as the Pearson correlation of counted ranks, which covers
/// the tie-free and tied cases alike.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&count_ranks(a), &count_ranks(b))
}

/// Rank correlation taken literally over raw score differences
/// `1 − 6·Σ(ŷᵢ−yᵢ)²/(n(n²−1))`. Kept to show how it departs from the
/// rank form; it is not a correlation in general.
pub fn raw_difference_spearman(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
