//! Divided space-time encoder over a [`TokenSequence`].
//!
//! Each block runs time attention (a patch token sees the MOS token and the
//! same patch in every frame), then space attention (a patch token sees the
//! MOS token and every patch of its own frame), then an MLP, all pre-norm
//! with residuals. The MOS token is passed through unchanged by time
//! attention and attends to the whole sequence in space attention.

pub mod attention;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Graph, Var};
use crate::tokenizer::TokenSequence;

pub use attention::AttentionWeights;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Space attention only (the time stage is removed).
    Image,
    Video,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Image => "image",
            Mode::Video => "video",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Mode::Image),
            "video" => Ok(Mode::Video),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Time,
    Space,
}

#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub proj: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub time: Option<StageVars>,
    pub space: StageVars,
    pub mlp: MlpVars,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub blocks: Vec<BlockVars>,
    pub final_gamma: Var,
    pub final_beta: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub block: usize,
    pub stage: Stage,
    pub node: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `(K+1) × D` tokens after the last block.
    pub tokens: Var,
    /// `1 × D` MOS row after the final LayerNorm.
    pub mos: Var,
    pub attention: Vec<AttentionRecord>,
}

/// Keys for time attention. Row 0 (MOS) has none; row `1+nP+p` sees
/// `[MOS, (p,0), …, (p,N−1)]`.
pub fn time_layout(patches: usize, frames: usize) -> AttentionLayout {
    let mut groups = vec![Vec::new()];
    for _n in 0..frames {
        for p in 0..patches {
            let mut keys = Vec::with_capacity(frames + 1);
            keys.push(0);
            keys.extend((0..frames).map(|m| 1 + m * patches + p));
            groups.push(keys);
        }
    }
    AttentionLayout::from_groups(&groups)
}

/// Keys for space attention. Row 0 (MOS) sees every row; row `1+nP+p` sees
/// `[MOS, (0,n), …, (P−1,n)]`.
pub fn space_layout(patches: usize, frames: usize) -> AttentionLayout {
    let rows = 1 + patches * frames;
    let mut groups = vec![(0..rows).collect::<Vec<_>>()];
    for n in 0..frames {
        for _p in 0..patches {
            let mut keys = Vec::with_capacity(patches + 1);
            keys.push(0);
            keys.extend((0..patches).map(|q| 1 + n * patches + q));
            groups.push(keys);
        }
    }
    AttentionLayout::from_groups(&groups)
}

fn attention_stage(
    g: &mut Graph,
    x: Var,
    st: &StageVars,
    heads: usize,
    layout: Rc<AttentionLayout>,
) -> Result<(Var, Var)> {
    let h = g.layernorm(x, st.norm_gamma, st.norm_beta, LN_EPS)?;
    let q = g.matmul(h, st.wq)?;
    let k = g.matmul(h, st.wk)?;
    let v = g.matmul(h, st.wv)?;
    let a = g.attention(q, k, v, heads, layout)?;
    let p = g.matmul(a, st.proj)?;
    Ok((g.add(p, x)?, a))
}

fn mlp(g: &mut Graph, x: Var, m: &MlpVars) -> Result<Var> {
    let h = g.layernorm(x, m.norm_gamma, m.norm_beta, LN_EPS)?;
    let h = g.matmul(h, m.fc1_weight)?;
    let h = g.add_bias(h, m.fc1_bias)?;
    let h = g.gelu(h);
    let h = g.matmul(h, m.fc2_weight)?;
    let h = g.add_bias(h, m.fc2_bias)?;
    g.add(h, x)
}

pub fn encoder_forward(
    g: &mut Graph,
    seq: &TokenSequence,
    vars: &EncoderVars,
    heads: usize,
    mode: Mode,
) -> Result<EncoderOutput> {
    let rows = seq.tokens() + 1;
    if g.shape(seq.rows) != [rows, seq.dim] {
        return Err(Error::Contract(format!(
            "token matrix has shape {:?}, layout implies [{rows}, {}]",
            g.shape(seq.rows),
            seq.dim
        )));
    }
    attention::head_dim(seq.dim, heads)?;
    let time = Rc::new(time_layout(seq.patches, seq.frames));
    let space = Rc::new(space_layout(seq.patches, seq.frames));
    let mut x = seq.rows;
    let mut records = Vec::new();
    for (i, block) in vars.blocks.iter().enumerate() {
        if mode == Mode::Video {
            let st = block.time.as_ref().ok_or_else(|| {
                Error::Contract(format!("block {i} has no time-attention weights"))
            })?;
            let (y, node) = attention_stage(g, x, st, heads, time.clone())?;
            records.push(AttentionRecord {
                block: i,
                stage: Stage::Time,
                node,
            });
            x = y;
        }
        let (y, node) = attention_stage(g, x, &block.space, heads, space.clone())?;
        records.push(AttentionRecord {
            block: i,
            stage: Stage::Space,
            node,
        });
        x = mlp(g, y, &block.mlp)?;
    }
    let mos = g.slice_rows(x, 0, 1)?;
    let mos = g.layernorm(mos, vars.final_gamma, vars.final_beta, LN_EPS)?;
    Ok(EncoderOutput {
        tokens: x,
        mos,
        attention: records,
    })
}

/// Every attention-weight vector of a recorded stage for patch-token rows
/// (the MOS row is excluded), one per `(row, head)`.
pub fn patch_attention_vectors(g: &Graph, node: Var) -> Vec<AttentionWeights> {
    let Some((layout, heads)) = g.attention_layout(node) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for row in 1..layout.rows() {
        for h in 0..heads {
            if let Some(w) = g.attention_weights(node, row, h) {
                out.push(AttentionWeights::new(w.to_vec()));
            }
        }
    }
    out
}
