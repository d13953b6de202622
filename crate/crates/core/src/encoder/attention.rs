//! Per-token forms of the block equations, written directly over slices.
//!
//! These mirror what the batched graph encoder computes for one token at a
//! time and are used to inspect or cross-check individual attention steps.
//! Matrices are row-major and applied as `x·W` to row vectors.

use crate::error::{Error, Result};
use crate::tensor::kernels;

use super::LN_EPS;

/// A probability vector over `[MOS key, key₁, …]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    values: Vec<f64>,
}

impl AttentionWeights {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coefficient of the MOS key.
    pub fn mos(&self) -> f64 {
        self.values[0]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Weights of one attention stage for a model of width `dim`.
#[derive(Clone, Copy, Debug)]
pub struct StageParams<'a> {
    pub norm_gamma: &'a [f64],
    pub norm_beta: &'a [f64],
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub proj: &'a [f64],
}

#[derive(Clone, Copy, Debug)]
pub struct MlpParams<'a> {
    pub norm_gamma: &'a [f64],
    pub norm_beta: &'a [f64],
    /// `D × 4D`
    pub fc1_weight: &'a [f64],
    pub fc1_bias: &'a [f64],
    /// `4D × D`
    pub fc2_weight: &'a [f64],
    pub fc2_bias: &'a [f64],
}

pub fn layer_norm(z: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = z.len() as f64;
    let mean = z.iter().sum::<f64>() / d;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    z.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect()
}

/// `x·W` for a row vector `x` of length `k` and `W: k × n`.
pub fn vec_mat(x: &[f64], w: &[f64]) -> Vec<f64> {
    let n = w.len() / x.len();
    let mut out = vec![0.0; n];
    kernels::matmul(x, w, 1, x.len(), n, &mut out);
    out
}

pub fn head_dim(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(dim / heads)
}

/// Query, key and value of token `z` for head `head`: the head's columns of
/// `LN(z)·W_Q`, `LN(z)·W_K`, `LN(z)·W_V`.
pub fn qkv(
    z: &[f64],
    stage: &StageParams,
    heads: usize,
    head: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = z.len();
    let hd = head_dim(d, heads)?;
    if head >= heads {
        return Err(Error::Index {
            what: "head",
            index: head,
            len: heads,
        });
    }
    if stage.wq.len() != d * d || stage.norm_gamma.len() != d {
        return Err(Error::dim("qkv", &[d, d], &[stage.wq.len()]));
    }
    let h = layer_norm(z, stage.norm_gamma, stage.norm_beta);
    let cols = head * hd..(head + 1) * hd;
    let pick = |w: &[f64]| vec_mat(&h, w)[cols.clone()].to_vec();
    Ok((pick(stage.wq), pick(stage.wk), pick(stage.wv)))
}

fn weights_over(q: &[f64], mos_key: &[f64], keys: &[&[f64]]) -> AttentionWeights {
    let mut out = Vec::with_capacity(keys.len() + 1);
    kernels::scaled_dot_weights(q, std::iter::once(mos_key).chain(keys.iter().copied()), &mut out);
    AttentionWeights::new(out)
}

/// Softmax of `q·[k_mos, k(p,1), …, k(p,N)] / √Hd` over the same patch in
/// every frame. Length `N + 1`.
pub fn time_attention_weights(q: &[f64], mos_key: &[f64], keys: &[&[f64]]) -> AttentionWeights {
    weights_over(q, mos_key, keys)
}

/// Softmax over the MOS key and every patch of the query's frame.
/// Length `P + 1`.
pub fn space_attention_weights(q: &[f64], mos_key: &[f64], keys: &[&[f64]]) -> AttentionWeights {
    weights_over(q, mos_key, keys)
}

/// `α₀·v_mos + Σⱼ αⱼ·vⱼ`.
pub fn aggregate(weights: &AttentionWeights, mos_value: &[f64], values: &[&[f64]]) -> Result<Vec<f64>> {
    if weights.len() != values.len() + 1 {
        return Err(Error::dim(
            "aggregate",
            &[weights.len()],
            &[values.len() + 1],
        ));
    }
    let mut s: Vec<f64> = mos_value.iter().map(|v| v * weights.mos()).collect();
    for (&a, v) in weights.values()[1..].iter().zip(values) {
        for (o, x) in s.iter_mut().zip(v.iter()) {
            *o += a * x;
        }
    }
    Ok(s)
}

pub fn time_aggregate(weights: &AttentionWeights, mos_value: &[f64], values: &[&[f64]]) -> Result<Vec<f64>> {
    aggregate(weights, mos_value, values)
}

pub fn space_aggregate(weights: &AttentionWeights, mos_value: &[f64], values: &[&[f64]]) -> Result<Vec<f64>> {
    aggregate(weights, mos_value, values)
}

/// `concat(s¹, …, sᴬ)·W + e`.
pub fn project_residual(heads: &[Vec<f64>], w: &[f64], e: &[f64]) -> Result<Vec<f64>> {
    let joined: Vec<f64> = heads.concat();
    if joined.len() != e.len() || w.len() != e.len() * e.len() {
        return Err(Error::dim("project_residual", &[e.len()], &[joined.len()]));
    }
    let mut out = vec_mat(&joined, w);
    for (o, x) in out.iter_mut().zip(e) {
        *o += x;
    }
    Ok(out)
}

/// `GELU(LN(x)·W₁ + b₁)·W₂ + b₂ + x`.
pub fn mlp_block(x: &[f64], p: &MlpParams) -> Result<Vec<f64>> {
    let d = x.len();
    if p.fc1_weight.len() != d * p.fc1_bias.len() || p.fc2_weight.len() != p.fc1_bias.len() * d {
        return Err(Error::dim("mlp_block", &[d], &[p.fc1_bias.len()]));
    }
    let h = layer_norm(x, p.norm_gamma, p.norm_beta);
    let mut hidden = vec_mat(&h, p.fc1_weight);
    for (v, b) in hidden.iter_mut().zip(p.fc1_bias) {
        *v = kernels::gelu(*v + b);
    }
    let mut out = vec_mat(&hidden, p.fc2_weight);
    for ((o, b), r) in out.iter_mut().zip(p.fc2_bias).zip(x) {
        *o += b + r;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_head_dim() {
        assert_eq!(head_dim(768, 12).unwrap(), 64);
        assert!(head_dim(10, 3).is_err());
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let k = [0.3, -0.2];
        let w = time_attention_weights(&[1.0, 2.0], &k, &[&k, &k, &k]);
        assert_eq!(w.len(), 4);
        for v in w.values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let w = space_attention_weights(&[1.0, 2.0], &k, &[&k]);
        assert_eq!(w.len(), 2);
    }

    #[test]
    fn one_hot_and_uniform_aggregation() {
        let mos = [1.0, 1.0];
        let a = [2.0, 0.0];
        let b = [0.0, 4.0];
        let hot = AttentionWeights::new(vec![0.0, 0.0, 1.0]);
        assert_eq!(time_aggregate(&hot, &mos, &[&a, &b]).unwrap(), vec![0.0, 4.0]);
        let uni = AttentionWeights::new(vec![1.0 / 3.0; 3]);
        let s = space_aggregate(&uni, &mos, &[&a, &b]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && (s[1] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_token_gives_zero_qkv() {
        let d = 4;
        let ones = vec![1.0; d];
        let zeros = vec![0.0; d];
        let w: Vec<f64> = (0..d * d).map(|i| i as f64 * 0.1).collect();
        let stage = StageParams {
            norm_gamma: &ones,
            norm_beta: &zeros,
            wq: &w,
            wk: &w,
            wv: &w,
            proj: &w,
        };
        let (q, k, v) = qkv(&[2.0; 4], &stage, 2, 1).unwrap();
        assert!(q.iter().chain(&k).chain(&v).all(|&x| x == 0.0));
    }

    #[test]
    fn zero_projection_is_pure_residual() {
        let e = [1.0, -2.0];
        let out = project_residual(&[vec![5.0], vec![7.0]], &[0.0; 4], &e).unwrap();
        assert_eq!(out, e.to_vec());
        let ident = [1.0, 0.0, 0.0, 1.0];
        let out = project_residual(&[vec![5.0, 7.0]], &ident, &e).unwrap();
        assert_eq!(out, vec![6.0, 5.0]);
    }

    #[test]
    fn zero_mlp_is_identity() {
        let d = 3;
        let ones = vec![1.0; d];
        let zeros = vec![0.0; d];
        let z = vec![0.0; 4 * d * d];
        let zb = vec![0.0; 4 * d];
        let p = MlpParams {
            norm_gamma: &ones,
            norm_beta: &zeros,
            fc1_weight: &z,
            fc1_bias: &zb,
            fc2_weight: &z,
            fc2_bias: &zeros,
        };
        let x = [0.5, -1.0, 2.0];
        assert_eq!(mlp_block(&x, &p).unwrap(), x.to_vec());
    }
}
