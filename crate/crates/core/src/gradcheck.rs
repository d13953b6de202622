//! Central finite-difference checks of the analytic gradients.
//!
//! The numerical side only ever evaluates forward passes, so it is
//! independent of every backward rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::encoder::Mode;
use crate::error::Result;
use crate::model::{self, ModelConfig, ModelWeights};
use crate::regression::{sample_loss, LossKind, Target};
use crate::tensor::{AttentionLayout, Graph, Tensor, Var};

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Magnitude below which gradients are compared absolutely rather than
/// relatively (both sides are FD round-off at that scale).
pub const ABS_FLOOR: f64 = 1e-7;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Checks `build` (which must return a scalar) against central differences
/// with respect to every tensor in `inputs`.
pub fn check_fn(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(with_grad);
                g.input(t)
            })
            .collect();
        let loss = build(&mut g, &vars)?;
        let value = g.data(loss)[0];
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()])
            })
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (i, input) in inputs.iter().enumerate() {
        let mut failure = None;
        let numeric = central_difference(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i].data_mut().copy_from_slice(x);
                match eval(&probe, false) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input.data(),
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic[i], &numeric));
        entries += numeric.len();
    }
    Ok(CheckResult {
        name: name.to_string(),
        entries,
        max_rel_error: worst,
    })
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Projects a non-scalar output onto fixed random weights so that every
/// output coordinate influences the checked scalar.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..g.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    g.dot_const(out, &w)
}

/// Gradient checks for every differentiable primitive of the graph.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = random_tensor(&mut rng, &[3, 4], 1.0);
    let b = random_tensor(&mut rng, &[4, 2], 1.0);
    out.push(check_fn("matmul", &[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 1)
    })?);

    let x = random_tensor(&mut rng, &[3, 5], 2.0);
    out.push(check_fn("softmax(axis=1)", &[x.clone()], |g, v| {
        let y = g.softmax(v[0], 1)?;
        project(g, y, 2)
    })?);
    out.push(check_fn("softmax(axis=0)", &[x], |g, v| {
        let y = g.softmax(v[0], 0)?;
        project(g, y, 3)
    })?);

    let x = random_tensor(&mut rng, &[1, 8], 2.0);
    let gamma = random_tensor(&mut rng, &[8], 1.5);
    let beta = random_tensor(&mut rng, &[8], 0.5);
    out.push(check_fn("layernorm", &[x, gamma, beta], |g, v| {
        let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
        project(g, y, 4)
    })?);

    let x = Tensor::vector(vec![-3.0, -1.0, 0.0, 1.0, 3.0]);
    out.push(check_fn("gelu", &[x], |g, v| {
        let y = g.gelu(v[0]);
        project(g, y, 5)
    })?);

    let x = random_tensor(&mut rng, &[2, 3], 1.0);
    let y = random_tensor(&mut rng, &[2, 3], 1.0);
    out.push(check_fn("add/sub/mul/scale", &[x, y], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let z = g.scale(m, -0.7);
        project(g, z, 6)
    })?);

    let x = random_tensor(&mut rng, &[6], 2.0);
    out.push(check_fn("neg_sq_dist", &[x], |g, v| {
        let y = g.neg_sq_dist(v[0], 0.3);
        project(g, y, 7)
    })?);

    let u = random_tensor(&mut rng, &[1, 4], 1.0);
    let m = random_tensor(&mut rng, &[3, 4], 1.0);
    out.push(check_fn("concat/slice/gather", &[u, m], |g, v| {
        let c = g.concat_rows(&[v[0], v[1]])?;
        let s = g.slice_rows(c, 1, 2)?;
        let t = g.gather_rows(c, &[3, 0, 3])?;
        let a = project(g, s, 8)?;
        let b = project(g, t, 9)?;
        g.add(a, b)
    })?);

    let x = random_tensor(&mut rng, &[3, 4], 1.0);
    let bias = random_tensor(&mut rng, &[4], 1.0);
    out.push(check_fn("add_bias/mean", &[x, bias], |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        let y = g.gelu(y);
        Ok(g.mean(y))
    })?);

    let layout = Rc::new(AttentionLayout::from_groups(&[
        vec![0, 1, 2, 3, 4],
        vec![0, 1, 3],
        vec![],
        vec![0, 3, 2],
        vec![4, 0],
    ]));
    let q = random_tensor(&mut rng, &[5, 6], 1.0);
    let k = random_tensor(&mut rng, &[5, 6], 1.0);
    let vv = random_tensor(&mut rng, &[5, 6], 1.0);
    out.push(check_fn("attention", &[q, k, vv], move |g, v| {
        let y = g.attention(v[0], v[1], v[2], 2, layout.clone())?;
        project(g, y, 10)
    })?);

    let logits = random_tensor(&mut rng, &[1, 6], 1.0);
    let target = [0.05, 0.1, 0.5, 0.2, 0.1, 0.05];
    out.push(check_fn("vr_loss", &[logits.clone()], move |g, v| {
        let p = g.softmax(v[0], 1)?;
        g.vr_loss(p, &target)
    })?);
    out.push(check_fn("cross_entropy", &[logits.clone()], |g, v| {
        g.cross_entropy(v[0], 2)
    })?);
    out.push(check_fn("squared_error/dot_const", &[logits], |g, v| {
        let p = g.softmax(v[0], 1)?;
        let e = g.dot_const(p, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])?;
        g.squared_error(e, 3.3)
    })?);

    Ok(out)
}

/// Loss of one forward pass of `weights` on `patches` against `target`.
fn model_loss(
    weights: &ModelWeights,
    patches: &Tensor,
    target: Target,
    loss: LossKind,
    with_grad: bool,
) -> Result<(f64, Option<ModelWeights>)> {
    let cfg = &weights.config;
    let mut g = Graph::new();
    let bound = weights.bind(&mut g);
    let frames = cfg.frames(weights.mode);
    let out = model::forward(&mut g, &bound, cfg, weights.mode, patches.clone(), frames)?;
    let l = sample_loss(&mut g, out.logits, loss, target, &cfg.codec()?)?;
    let value = g.data(l)[0];
    if !with_grad {
        return Ok((value, None));
    }
    g.backward(l)?;
    let mut w = weights.clone();
    w.zero_grad();
    w.accumulate_grads(&g, &bound)?;
    Ok((value, Some(w)))
}

/// Checks the gradient of the training loss with respect to every model
/// parameter. Weights are redrawn uniformly in `±0.5` (LayerNorm scales
/// around 1, zero-initialized tensors included) so that no gradient is
/// trivially zero.
pub fn check_model(config: &ModelConfig, mode: Mode, loss: LossKind, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ModelWeights::init(config, mode, &mut rng)?;
    for (name, t) in weights.iter_mut() {
        let offset = if name.ends_with("norm.gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = offset + rng.random_range(-0.5..0.5);
        }
    }
    let frames = config.frames(mode);
    let patches = random_tensor(&mut rng, &[frames * config.patches(), config.patch_dim()], 1.0);
    let target = Target {
        score: rng.random_range(config.lo..config.hi),
        label: None,
    };
    let (_, grads) = model_loss(&weights, &patches, target, loss, true)?;
    let grads = grads.expect("requested gradients");

    let mut results = Vec::new();
    let names: Vec<String> = weights.params().keys().cloned().collect();
    for name in names {
        let x = weights.get(&name).expect("listed").data().to_vec();
        let mut failure = None;
        let numeric = central_difference(
            |probe| {
                weights
                    .get_mut(&name)
                    .expect("listed")
                    .data_mut()
                    .copy_from_slice(probe);
                match model_loss(&weights, &patches, target, loss, false) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &x,
            FD_STEP,
        );
        weights.get_mut(&name).expect("listed").data_mut().copy_from_slice(&x);
        if let Some(e) = failure {
            return Err(e);
        }
        let analytic = grads
            .get(&name)
            .and_then(Tensor::grad)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);
        results.push(CheckResult {
            name,
            entries: x.len(),
            max_rel_error: max_relative_error(&analytic, &numeric),
        });
    }
    Ok(results)
}

/// The tiny configuration used for model-level gradient checks:
/// `D = 24, A = 2, I = 2, N = 2, P = 4, m = 6`.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_frames: 2,
        crop: 4,
        patch: 2,
        dim: Some(24),
        heads: 2,
        blocks: 2,
        anchors: 6,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn floor_applies_to_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, -1e-12) < 1e-4);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    }

    #[test]
    fn tiny_model_image_mode() {
        let mut cfg = tiny_config();
        cfg.blocks = 1;
        for r in check_model(&cfg, Mode::Image, LossKind::L2, 3).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn every_op_passes() {
        for r in op_suite(7).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_error);
        }
    }
}
