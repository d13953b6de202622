//! Rank and linear correlation between predicted and ground-truth scores.

use crate::error::{Error, Result};

/// 1-based ranks; tied values share the average of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn check_pairs(ground: &[f64], pred: &[f64]) -> Result<()> {
    if ground.len() != pred.len() {
        return Err(Error::dim("correlation", &[ground.len()], &[pred.len()]));
    }
    if ground.len() < 2 {
        return Err(Error::Input(format!(
            "correlation needs at least 2 pairs, got {}",
            ground.len()
        )));
    }
    if ground.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(Error::Input("correlation inputs must be finite".into()));
    }
    Ok(())
}

fn has_ties(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Spearman rank-order correlation. Without ties this is
/// `1 − 6·Σdᵢ²/(n(n²−1))` over rank differences; with ties it is the
/// Pearson correlation of the average-tie ranks.
pub fn srocc(ground: &[f64], pred: &[f64]) -> Result<f64> {
    check_pairs(ground, pred)?;
    if is_constant(ground) || is_constant(pred) {
        return Err(Error::Degenerate("srocc of a constant vector".into()));
    }
    let rg = ranks(ground);
    let rp = ranks(pred);
    if has_ties(ground) || has_ties(pred) {
        return plcc(&rg, &rp);
    }
    let n = ground.len() as f64;
    let d2: f64 = rg.iter().zip(&rp).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Pearson linear correlation.
pub fn plcc(ground: &[f64], pred: &[f64]) -> Result<f64> {
    check_pairs(ground, pred)?;
    let n = ground.len() as f64;
    let mg = ground.iter().sum::<f64>() / n;
    let mp = pred.iter().sum::<f64>() / n;
    let mut sgp = 0.0;
    let mut sgg = 0.0;
    let mut spp = 0.0;
    for (g, p) in ground.iter().zip(pred) {
        let (a, b) = (g - mg, p - mp);
        sgp += a * b;
        sgg += a * a;
        spp += b * b;
    }
    if sgg == 0.0 || spp == 0.0 {
        return Err(Error::Degenerate("plcc with zero variance".into()));
    }
    Ok((sgp / (sgg.sqrt() * spp.sqrt())).clamp(-1.0, 1.0))
}
