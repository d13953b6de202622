//! Model configuration, named parameter storage and the full forward pass
//! (tokenizer, encoder and head) on a computation graph.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, BlockVars, EncoderOutput, EncoderVars, MlpVars, Mode, StageVars};
use crate::error::{Error, Result};
use crate::regression::{AnchorCodec, HeadVars};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{self, EmbeddingWeights, TokenSequence};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_frames: usize,
    pub crop: usize,
    pub patch: usize,
    /// Token width. Defaults to the flattened patch length `patch²·3`.
    pub dim: Option<usize>,
    pub heads: usize,
    pub blocks: usize,
    pub anchors: usize,
    pub lo: f64,
    pub hi: f64,
    /// Head width for classification pretraining; `None` uses `anchors`.
    pub classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_frames: 16,
            crop: 224,
            patch: 16,
            dim: None,
            heads: 12,
            blocks: 12,
            anchors: 6,
            lo: 0.0,
            hi: 5.0,
            classes: None,
        }
    }
}

impl ModelConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn width(&self) -> usize {
        self.dim.unwrap_or_else(|| self.patch_dim())
    }

    pub fn grid(&self) -> usize {
        self.crop / self.patch
    }

    /// Patches per frame, `⌊crop/S⌋²`.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Frames fed to the encoder in `mode`.
    pub fn frames(&self, mode: Mode) -> usize {
        match mode {
            Mode::Image => 1,
            Mode::Video => self.n_frames,
        }
    }

    pub fn head_width(&self) -> usize {
        self.classes.unwrap_or(self.anchors)
    }

    pub fn codec(&self) -> Result<AnchorCodec> {
        AnchorCodec::new(self.anchors, self.lo, self.hi)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_frames == 0 {
            problems.push("n_frames must be at least 1".to_string());
        }
        if self.patch == 0 || self.patch > self.crop {
            problems.push(format!(
                "patch {} must be in 1..={} (crop)",
                self.patch, self.crop
            ));
        }
        if self.blocks == 0 {
            problems.push("blocks must be at least 1".to_string());
        }
        let d = self.width();
        if d == 0 || self.heads == 0 || d % self.heads != 0 {
            problems.push(format!("width {d} is not divisible by {} heads", self.heads));
        }
        if let Some(c) = self.classes {
            if c < 2 {
                problems.push(format!("classes must be at least 2, got {c}"));
            }
        }
        if let Err(e) = self.codec() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Every parameter with its shape, in storage order.
    pub fn param_shapes(&self, mode: Mode) -> IndexMap<String, Vec<usize>> {
        let d = self.width();
        let mut s = IndexMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            s.insert(name, shape);
        };
        put("embed.proj".into(), vec![self.patch_dim(), d]);
        put("embed.pos_spatial".into(), vec![self.patches(), d]);
        if mode == Mode::Video {
            put("embed.pos_temporal".into(), vec![self.n_frames, d]);
        }
        put("embed.pos_mos".into(), vec![1, d]);
        put("embed.mos_token".into(), vec![1, d]);
        for i in 0..self.blocks {
            let stages: &[&str] = match mode {
                Mode::Video => &["time", "space"],
                Mode::Image => &["space"],
            };
            for st in stages {
                let p = format!("blocks.{i}.{st}");
                put(format!("{p}.norm.gamma"), vec![d]);
                put(format!("{p}.norm.beta"), vec![d]);
                for w in ["wq", "wk", "wv", "proj"] {
                    put(format!("{p}.{w}"), vec![d, d]);
                }
            }
            let p = format!("blocks.{i}.mlp");
            put(format!("{p}.norm.gamma"), vec![d]);
            put(format!("{p}.norm.beta"), vec![d]);
            put(format!("{p}.fc1.weight"), vec![d, 4 * d]);
            put(format!("{p}.fc1.bias"), vec![4 * d]);
            put(format!("{p}.fc2.weight"), vec![4 * d, d]);
            put(format!("{p}.fc2.bias"), vec![d]);
        }
        put("final_norm.gamma".into(), vec![d]);
        put("final_norm.beta".into(), vec![d]);
        put("head.fc1.weight".into(), vec![d, d]);
        put("head.fc1.bias".into(), vec![d]);
        put("head.fc2.weight".into(), vec![d, self.head_width()]);
        put("head.fc2.bias".into(), vec![self.head_width()]);
        s
    }
}

pub fn is_time_param(name: &str) -> bool {
    name == "embed.pos_temporal" || name.contains(".time.")
}

/// Sample from a normal with std `std`, redrawn until within two std.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Initial value of one parameter: ones for LayerNorm scales, zeros for
/// offsets, biases, the temporal position table and the time-stage output
/// projection, truncated normal otherwise.
pub fn init_param(name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = if name.ends_with("norm.gamma") {
        vec![1.0; n]
    } else if name.ends_with("norm.beta")
        || name.ends_with(".bias")
        || name == "embed.pos_temporal"
        || (name.contains(".time.") && name.ends_with(".proj"))
    {
        vec![0.0; n]
    } else {
        (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect()
    };
    Tensor::new(shape.to_vec(), data)
        .expect("declared shapes are non-empty")
        .with_requires_grad()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub mode: Mode,
    params: IndexMap<String, Tensor>,
}

impl ModelWeights {
    pub fn init(config: &ModelConfig, mode: Mode, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes(mode)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_param(&name, &shape, rng);
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            mode,
            params,
        })
    }

    /// Adopts `params` after checking names and shapes against the config.
    pub fn from_params(
        config: &ModelConfig,
        mode: Mode,
        mut params: IndexMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes(mode);
        let mut problems = Vec::new();
        for (name, shape) in &expected {
            match params.get(name) {
                None => problems.push(format!("missing tensor {name}")),
                Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in params.keys() {
            if !expected.contains_key(name) {
                problems.push(format!("unexpected tensor {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let mut ordered = IndexMap::with_capacity(expected.len());
        for name in expected.keys() {
            let mut t = params.swap_remove(name).expect("checked above");
            t.set_requires_grad(true);
            ordered.insert(name.clone(), t);
        }
        Ok(Self {
            config: config.clone(),
            mode,
            params: ordered,
        })
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let vars: IndexMap<String, Var> = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.param(name, t)))
            .collect();
        let v = |name: &str| vars[name];
        let stage = |prefix: &str| StageVars {
            norm_gamma: v(&format!("{prefix}.norm.gamma")),
            norm_beta: v(&format!("{prefix}.norm.beta")),
            wq: v(&format!("{prefix}.wq")),
            wk: v(&format!("{prefix}.wk")),
            wv: v(&format!("{prefix}.wv")),
            proj: v(&format!("{prefix}.proj")),
        };
        let blocks = (0..self.config.blocks)
            .map(|i| BlockVars {
                time: (self.mode == Mode::Video).then(|| stage(&format!("blocks.{i}.time"))),
                space: stage(&format!("blocks.{i}.space")),
                mlp: MlpVars {
                    norm_gamma: v(&format!("blocks.{i}.mlp.norm.gamma")),
                    norm_beta: v(&format!("blocks.{i}.mlp.norm.beta")),
                    fc1_weight: v(&format!("blocks.{i}.mlp.fc1.weight")),
                    fc1_bias: v(&format!("blocks.{i}.mlp.fc1.bias")),
                    fc2_weight: v(&format!("blocks.{i}.mlp.fc2.weight")),
                    fc2_bias: v(&format!("blocks.{i}.mlp.fc2.bias")),
                },
            })
            .collect();
        let embedding = EmbeddingWeights {
            proj: v("embed.proj"),
            pos_spatial: v("embed.pos_spatial"),
            pos_temporal: vars.get("embed.pos_temporal").copied(),
            pos_mos: v("embed.pos_mos"),
            mos_token: v("embed.mos_token"),
        };
        let encoder = EncoderVars {
            blocks,
            final_gamma: v("final_norm.gamma"),
            final_beta: v("final_norm.beta"),
        };
        let head = HeadVars {
            fc1_weight: v("head.fc1.weight"),
            fc1_bias: v("head.fc1.bias"),
            fc2_weight: v("head.fc2.weight"),
            fc2_bias: v("head.fc2.bias"),
        };
        BoundModel {
            vars,
            embedding,
            encoder,
            head,
        }
    }

    /// Adds the gradients from `g` into the stored tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundModel) -> Result<()> {
        for (name, &var) in &bound.vars {
            if let Some(t) = self.params.get_mut(name) {
                g.accumulate_into(var, t)?;
            }
        }
        Ok(())
    }
}

/// Graph handles of every parameter of a bound model.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: IndexMap<String, Var>,
    pub embedding: EmbeddingWeights,
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub sequence: TokenSequence,
    pub encoder: EncoderOutput,
    pub logits: Var,
    /// `1 × m` softmax of the logits.
    pub probs: Var,
}

/// Forward pass over `frames` frames of patch rows (`frames·P × S²·3`,
/// frame-major) through embedding, encoder and head.
pub fn forward(
    g: &mut Graph,
    model: &BoundModel,
    config: &ModelConfig,
    mode: Mode,
    patches: Tensor,
    frames: usize,
) -> Result<ModelOutput> {
    let p = config.patches();
    if patches.shape() != [frames * p, config.patch_dim()] {
        return Err(Error::dim(
            "forward patches",
            patches.shape(),
            &[frames * p, config.patch_dim()],
        ));
    }
    let x = g.constant(patches);
    let positions = tokenizer::token_positions(p, frames);
    let embedded = tokenizer::embed(g, x, &model.embedding, &positions)?;
    let mos = tokenizer::embed_mos(g, &model.embedding)?;
    let sequence = tokenizer::assemble_sequence(g, embedded, mos, p, frames)?;
    let enc = encoder::encoder_forward(g, &sequence, &model.encoder, config.heads, mode)?;
    let (logits, probs) = crate::regression::probability_head(g, enc.mos, &model.head)?;
    Ok(ModelOutput {
        sequence,
        encoder: enc,
        logits,
        probs,
    })
}
