//! Anchor-point encoding of quality scores, the probability head, the
//! training losses and the decoders back to a scalar score.

mod svr;

pub use svr::{SvrDecoder, SvrParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, kernels, Graph, Var};

/// `m` uniformly spaced anchors `bᵢ = lo + (hi − lo)·i/(m − 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorCodec {
    anchors: Vec<f64>,
    lo: f64,
    hi: f64,
}

pub fn make_anchors(m: usize, lo: f64, hi: f64) -> Result<AnchorCodec> {
    AnchorCodec::new(m, lo, hi)
}

impl AnchorCodec {
    pub fn new(m: usize, lo: f64, hi: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("need at least 2 anchors, got {m}")));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Config(format!("anchor range [{lo}, {hi}] is empty")));
        }
        let step = (hi - lo) / (m - 1) as f64;
        let mut anchors: Vec<f64> = (0..m).map(|i| lo + step * i as f64).collect();
        anchors[m - 1] = hi;
        Ok(Self { anchors, lo, hi })
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn encode(&self, c: f64) -> ProbabilityVector {
        encode_mos(c, self)
    }

    /// Index of the anchor closest to `c`; ties go to the lower index.
    pub fn nearest(&self, c: f64) -> usize {
        let mut best = 0;
        for (i, b) in self.anchors.iter().enumerate() {
            if (c - b).abs() < (c - self.anchors[best]).abs() {
                best = i;
            }
        }
        best
    }
}

/// Raw score range of one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRange {
    pub mos_min: f64,
    pub mos_max: f64,
}

impl MosRange {
    pub fn new(mos_min: f64, mos_max: f64) -> Result<Self> {
        let r = Self { mos_min, mos_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mos_min.is_finite() && self.mos_max.is_finite() && self.mos_max > self.mos_min) {
            return Err(Error::Config(format!(
                "degenerate MOS range [{}, {}]",
                self.mos_min, self.mos_max
            )));
        }
        Ok(())
    }
}

/// Affine map of a raw score onto `[lo, hi]`. Out-of-range scores are
/// clamped with a warning.
pub fn scale_mos(raw: f64, range: MosRange, codec: &AnchorCodec) -> Result<f64> {
    range.validate()?;
    let t = (raw - range.mos_min) / (range.mos_max - range.mos_min);
    let c = codec.lo + t * (codec.hi - codec.lo);
    if c < codec.lo || c > codec.hi {
        log::warn!(
            "MOS {raw} outside [{}, {}]; clamped",
            range.mos_min,
            range.mos_max
        );
        return Ok(c.clamp(codec.lo, codec.hi));
    }
    Ok(c)
}

/// Inverse of [`scale_mos`].
pub fn unscale_mos(c: f64, range: MosRange, codec: &AnchorCodec) -> f64 {
    let t = (c - codec.lo) / (codec.hi - codec.lo);
    range.mos_min + t * (range.mos_max - range.mos_min)
}

/// Non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("empty probability vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("probabilities sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First index of the largest entry.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// `yᵢ = softmax(−(c − bᵢ)²)`.
pub fn encode_mos(c: f64, codec: &AnchorCodec) -> ProbabilityVector {
    let mut y: Vec<f64> = codec.anchors.iter().map(|b| -(c - b) * (c - b)).collect();
    kernels::softmax_in_place(&mut y);
    ProbabilityVector(y)
}

/// `1 − cos(y, ŷ)`.
pub fn vr_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::dim("vr_loss", &[y.len()], &[yhat.len()]));
    }
    tensor::cosine_loss(y, yhat)
}

/// `Σᵢ bᵢ·ŷᵢ`.
pub fn expectation_decode(yhat: &[f64], codec: &AnchorCodec) -> f64 {
    yhat.iter().zip(&codec.anchors).map(|(p, b)| p * b).sum()
}

/// Graph handles of the two-layer head `D → D → m`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// `GELU(x·W₁ + b₁)·W₂ + b₂` on the `1 × D` MOS row.
pub fn head_logits(g: &mut Graph, mos: Var, head: &HeadVars) -> Result<Var> {
    let h = g.matmul(mos, head.fc1_weight)?;
    let h = g.add_bias(h, head.fc1_bias)?;
    let h = g.gelu(h);
    let h = g.matmul(h, head.fc2_weight)?;
    g.add_bias(h, head.fc2_bias)
}

/// Returns `(logits, ŷ)` with `ŷ = softmax(logits)`.
pub fn probability_head(g: &mut Graph, mos: Var, head: &HeadVars) -> Result<(Var, Var)> {
    let logits = head_logits(g, mos, head)?;
    let probs = g.softmax(logits, 1)?;
    Ok((logits, probs))
}

/// Class probabilities and `−log p[target]`.
pub fn cross_entropy_head(
    g: &mut Graph,
    mos: Var,
    head: &HeadVars,
    target: usize,
) -> Result<(Var, Var)> {
    let logits = head_logits(g, mos, head)?;
    let classes = g.value(logits).len();
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let loss = g.cross_entropy(logits, target)?;
    let probs = g.softmax(logits, 1)?;
    Ok((probs, loss))
}

/// Training objective selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1 − cos(encode(c), ŷ)`.
    #[default]
    Vr,
    /// `(Σ bᵢŷᵢ − c)²`.
    L2,
    /// `−log ŷ[t]` with `t` the class label or the nearest anchor.
    CrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vr" => Ok(LossKind::Vr),
            "l2" => Ok(LossKind::L2),
            "cross_entropy" | "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// What a training item is supervised with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    /// Scaled score in `[lo, hi]`.
    pub score: f64,
    /// Class label for classification pretraining.
    pub label: Option<usize>,
}

/// Builds the scalar loss for one sample from head logits.
pub fn sample_loss(
    g: &mut Graph,
    logits: Var,
    kind: LossKind,
    target: Target,
    codec: &AnchorCodec,
) -> Result<Var> {
    match kind {
        LossKind::Vr => {
            let probs = g.softmax(logits, 1)?;
            let y = encode_mos(target.score, codec);
            g.vr_loss(probs, y.values())
        }
        LossKind::L2 => {
            let probs = g.softmax(logits, 1)?;
            let e = g.dot_const(probs, codec.anchors())?;
            g.squared_error(e, target.score)
        }
        LossKind::CrossEntropy => {
            let t = target.label.unwrap_or_else(|| codec.nearest(target.score));
            g.cross_entropy(logits, t)
        }
    }
}
