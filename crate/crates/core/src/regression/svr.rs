use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub step: f64,
    pub seed: u64,
}

impl SvrParams {
    /// `C = 1`, `ε = 0.02·(hi − lo)`, 200 epochs at step 0.01.
    pub fn for_range(lo: f64, hi: f64) -> Self {
        Self {
            c: 1.0,
            epsilon: 0.02 * (hi - lo),
            epochs: 200,
            step: 0.01,
            seed: 0,
        }
    }
}

/// Linear ε-insensitive support vector regressor from probability vectors
/// to scaled scores, `ĉ = clamp(w·ŷ + b, lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvrDecoder {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub params: SvrParams,
    pub lo: f64,
    pub hi: f64,
    pub fitted: bool,
}

impl SvrDecoder {
    pub fn unfitted(m: usize, lo: f64, hi: f64) -> Self {
        Self {
            weights: vec![0.0; m],
            bias: 0.0,
            params: SvrParams::for_range(lo, hi),
            lo,
            hi,
            fitted: false,
        }
    }

    /// Stochastic subgradient descent on
    /// `Σⱼ [C·max(0, |w·yⱼ + b − cⱼ| − ε) + ‖w‖²/(2n)]`, visiting samples
    /// in a seeded shuffled order each epoch. The bias is not regularized.
    pub fn fit(pairs: &[(Vec<f64>, f64)], lo: f64, hi: f64, params: SvrParams) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::Input(format!(
                "SVR needs at least 2 training pairs, got {}",
                pairs.len()
            )));
        }
        let m = pairs[0].0.len();
        if m == 0 || pairs.iter().any(|(y, _)| y.len() != m) {
            return Err(Error::Input("SVR inputs must share a non-zero length".into()));
        }
        if !(hi > lo) {
            return Err(Error::Config(format!("empty SVR range [{lo}, {hi}]")));
        }
        let n = pairs.len() as f64;
        let mut w = vec![0.0; m];
        let mut b = 0.0;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        for _ in 0..params.epochs {
            order.shuffle(&mut rng);
            for &j in &order {
                let (y, c) = &pairs[j];
                let r = kernels::dot(&w, y) + b - c;
                let active = r.abs() > params.epsilon;
                let sign = if r > 0.0 { 1.0 } else { -1.0 };
                for (wi, yi) in w.iter_mut().zip(y) {
                    let mut grad = *wi / n;
                    if active {
                        grad += params.c * sign * yi;
                    }
                    *wi -= params.step * grad;
                }
                if active {
                    b -= params.step * params.c * sign;
                }
            }
        }
        Ok(Self {
            weights: w,
            bias: b,
            params,
            lo,
            hi,
            fitted: true,
        })
    }

    /// Unclamped affine score `w·ŷ + b`.
    pub fn raw(&self, yhat: &[f64]) -> Result<f64> {
        if !self.fitted {
            return Err(Error::State("SVR decoder has not been fitted".into()));
        }
        if yhat.len() != self.weights.len() {
            return Err(Error::dim("svr_predict", &[self.weights.len()], &[yhat.len()]));
        }
        Ok(kernels::dot(&self.weights, yhat) + self.bias)
    }

    pub fn predict(&self, yhat: &[f64]) -> Result<f64> {
        Ok(self.raw(yhat)?.clamp(self.lo, self.hi))
    }
}
