//! Closed-form multiply-accumulate count of one forward pass.
//!
//! With `P` patches per frame, `N` frames, `K = P·N`, `R = K + 1` rows,
//! width `D`, patch length `d = S²·3` and head width `m`:
//!
//! * embedding: `K·d·D`
//! * per block, time stage: `3RD²` (QKV) `+ 2·K·(N+1)·D` (scores and
//!   weighted sums; the MOS row has no time keys) `+ RD²` (projection)
//! * per block, space stage: `3RD² + 2·K·(P+1)·D + 2·R·D + RD²` (the MOS
//!   row attends to all `R` rows)
//! * per block, MLP: `8RD²`
//! * head: `D² + D·m`
//!
//! Image mode drops the time stage and uses `N = 1`. LayerNorm, softmax,
//! GELU and additions are not counted. The count depends on the crop, not
//! on the source resolution.

use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub embedding: u64,
    pub time: u64,
    pub space: u64,
    pub mlp: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn blocks(&self) -> u64 {
        self.time + self.space + self.mlp
    }

    pub fn total(&self) -> u64 {
        self.embedding + self.blocks() + self.head
    }
}

pub fn estimate_flops(cfg: &ModelConfig, mode: Mode) -> FlopCount {
    let p = cfg.patches() as u64;
    let n = cfg.frames(mode) as u64;
    let d = cfg.width() as u64;
    let k = p * n;
    let r = k + 1;
    let i = cfg.blocks as u64;
    let time = match mode {
        Mode::Video => 3 * r * d * d + 2 * k * (n + 1) * d + r * d * d,
        Mode::Image => 0,
    };
    let space = 3 * r * d * d + 2 * k * (p + 1) * d + 2 * r * d + r * d * d;
    FlopCount {
        embedding: k * cfg.patch_dim() as u64 * d,
        time: i * time,
        space: i * space,
        mlp: i * 8 * r * d * d,
        head: d * d + d * cfg.head_width() as u64,
    }
}

/// Count for frames of `height × width` pixels. Frames are upscaled to
/// cover the crop when smaller and then cropped, so the token grid and the
/// count are those of the crop.
pub fn estimate_flops_for_source(cfg: &ModelConfig, mode: Mode, height: usize, width: usize) -> Result<FlopCount> {
    if height == 0 || width == 0 {
        return Err(Error::Input("source extents must be positive".into()));
    }
    Ok(estimate_flops(cfg, mode))
}
