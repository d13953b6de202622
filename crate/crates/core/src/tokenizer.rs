//! Video → token sequence: frame sampling, cropping, pixel normalization,
//! patchification, linear + positional embedding and MOS-token prepending.
//!
//! Layout conventions (checkpoints depend on them):
//! * pixels are stored `height × width × 3`, row-major, channel fastest;
//! * patches are numbered row-major over the `⌊H/S⌋ × ⌊W/S⌋` grid and each
//!   patch flattens as `dy`, `dx`, channel (channel fastest);
//! * the token sequence is the MOS row followed by frame 0's patches, then
//!   frame 1's, and so on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Decoded RGB video, `frames × height × width × 3` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawVideo {
    frames: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

/// A single RGB frame, `height × width × 3` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RawVideo {
    pub fn new(frames: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Input(format!(
                "video extents must be positive: {frames}x{height}x{width}"
            )));
        }
        let expected = frames * height * width * 3;
        if pixels.len() != expected {
            return Err(Error::Input(format!(
                "video payload has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            pixels,
        })
    }

    pub fn from_frames(frames: Vec<Frame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Input("video has no frames".into()));
        };
        let (h, w) = (first.height, first.width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::Input("frames differ in size".into()));
        }
        let n = frames.len();
        let pixels = frames.into_iter().flat_map(|f| f.pixels).collect();
        Self::new(n, h, w, pixels)
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame_pixels(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn frame(&self, i: usize) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            pixels: self.frame_pixels(i).to_vec(),
        }
    }
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "frame payload has {} bytes, expected {}",
                pixels.len(),
                height * width * 3
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Equal-interval frame indices `⌊j·T/n⌋`, `j = 0..n`.
pub fn sample_frame_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::Input("cannot sample from an empty video".into()));
    }
    if n == 0 {
        return Err(Error::Input("frame count must be at least 1".into()));
    }
    Ok((0..n).map(|j| j * total / n).collect())
}

/// `n` consecutive frames centred in the video; falls back to equal-interval
/// sampling when the video is shorter than `n`.
pub fn middle_window_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if total < n {
        return sample_frame_indices(total, n);
    }
    let start = (total - n) / 2;
    Ok((start..start + n).collect())
}

pub fn sample_frames(video: &RawVideo, n: usize) -> Result<Vec<Frame>> {
    Ok(sample_frame_indices(video.frame_count(), n)?
        .into_iter()
        .map(|i| video.frame(i))
        .collect())
}

/// How frames are picked from a clip at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSampling {
    /// Equal-interval sampling over the whole duration.
    #[default]
    Uniform,
    /// Contiguous window around the middle frame.
    MiddleWindow,
}

impl ClipSampling {
    pub fn indices(self, total: usize, n: usize) -> Result<Vec<usize>> {
        match self {
            ClipSampling::Uniform => sample_frame_indices(total, n),
            ClipSampling::MiddleWindow => middle_window_indices(total, n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Random,
    TopLeft,
    Center,
    BottomRight,
}

impl CropMode {
    pub const INFERENCE: [CropMode; 3] = [CropMode::TopLeft, CropMode::Center, CropMode::BottomRight];
}

/// Top-left corner `(y, x)` of an `h×w` window inside a `src_h×src_w` frame.
/// Random mode draws both coordinates uniformly from the valid range.
pub fn crop_offset<R: Rng + ?Sized>(
    src_h: usize,
    src_w: usize,
    h: usize,
    w: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if h == 0 || w == 0 {
        return Err(Error::Input("crop extents must be positive".into()));
    }
    if h > src_h || w > src_w {
        return Err(Error::Input(format!(
            "crop {h}x{w} larger than frame {src_h}x{src_w}"
        )));
    }
    let (dy, dx) = (src_h - h, src_w - w);
    Ok(match mode {
        CropMode::TopLeft => (0, 0),
        CropMode::Center => (dy / 2, dx / 2),
        CropMode::BottomRight => (dy, dx),
        CropMode::Random => (rng.random_range(0..=dy), rng.random_range(0..=dx)),
    })
}

pub fn crop_at(frame: &Frame, y: usize, x: usize, h: usize, w: usize) -> Frame {
    let mut pixels = Vec::with_capacity(h * w * 3);
    for row in y..y + h {
        let start = (row * frame.width + x) * 3;
        pixels.extend_from_slice(&frame.pixels[start..start + w * 3]);
    }
    Frame {
        height: h,
        width: w,
        pixels,
    }
}

/// Crops an `h×w` window, upscaling undersized frames first.
pub fn crop<R: Rng + ?Sized>(
    frame: &Frame,
    h: usize,
    w: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<Frame> {
    if h == 0 || w == 0 {
        return Err(Error::Input("crop extents must be positive".into()));
    }
    let scaled;
    let src = if frame.height < h || frame.width < w {
        scaled = upscale_to_cover(frame, h, w);
        &scaled
    } else {
        frame
    };
    let (y, x) = crop_offset(src.height, src.width, h, w, mode, rng)?;
    Ok(crop_at(src, y, x, h, w))
}

/// Bilinear upscale (half-pixel centres) so that the frame covers `h×w`;
/// the limiting side ends up exactly at the crop size.
pub fn upscale_to_cover(frame: &Frame, h: usize, w: usize) -> Frame {
    let scale = (h as f64 / frame.height as f64).max(w as f64 / frame.width as f64);
    if scale <= 1.0 {
        return frame.clone();
    }
    let nh = ((frame.height as f64 * scale).round() as usize).max(h);
    let nw = ((frame.width as f64 * scale).round() as usize).max(w);
    let sy = frame.height as f64 / nh as f64;
    let sx = frame.width as f64 / nw as f64;
    let mut pixels = vec![0u8; nh * nw * 3];
    let src = |y: usize, x: usize, c: usize| frame.pixels[(y * frame.width + x) * 3 + c] as f64;
    for oy in 0..nh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (frame.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(frame.height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..nw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (frame.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(frame.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let top = src(y0, x0, c) * (1.0 - tx) + src(y0, x1, c) * tx;
                let bot = src(y1, x0, c) * (1.0 - tx) + src(y1, x1, c) * tx;
                let v = top * (1.0 - ty) + bot * ty;
                pixels[(oy * nw + ox) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Frame {
        height: nh,
        width: nw,
        pixels,
    }
}

/// `x ↦ (x/255 − 0.5)/0.5`, mapping bytes onto `[−1, 1]`.
pub fn normalize_pixel(x: u8) -> f64 {
    (x as f64 / 255.0 - 0.5) / 0.5
}

pub fn normalize_pixels(frame: &Frame) -> Vec<f64> {
    frame.pixels.iter().map(|&p| normalize_pixel(p)).collect()
}

/// Non-overlapping `S×S` patches of an `H×W×3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub grid_h: usize,
    pub grid_w: usize,
    pub size: usize,
    /// `P × (S·S·3)`, row-major.
    pub data: Vec<f64>,
}

impl Patches {
    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.size * self.size * 3
    }

    pub fn token(&self, p: usize) -> &[f64] {
        let d = self.dim();
        &self.data[p * d..(p + 1) * d]
    }
}

pub fn patchify(pixels: &[f64], height: usize, width: usize, s: usize) -> Result<Patches> {
    if s == 0 {
        return Err(Error::Input("patch size must be at least 1".into()));
    }
    if s > height || s > width {
        return Err(Error::Input(format!(
            "patch size {s} exceeds frame {height}x{width}"
        )));
    }
    if pixels.len() != height * width * 3 {
        return Err(Error::dim("patchify", &[height, width, 3], &[pixels.len()]));
    }
    let (gh, gw) = (height / s, width / s);
    let mut data = Vec::with_capacity(gh * gw * s * s * 3);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..s {
                let start = ((py * s + dy) * width + px * s) * 3;
                data.extend_from_slice(&pixels[start..start + s * 3]);
            }
        }
    }
    Ok(Patches {
        grid_h: gh,
        grid_w: gw,
        size: s,
        data,
    })
}

/// Inverse of [`patchify`] on the covered `⌊H/S⌋·S × ⌊W/S⌋·S` window.
pub fn unpatchify(patches: &Patches) -> Vec<f64> {
    let s = patches.size;
    let (h, w) = (patches.grid_h * s, patches.grid_w * s);
    let mut out = vec![0.0; h * w * 3];
    for py in 0..patches.grid_h {
        for px in 0..patches.grid_w {
            let tok = patches.token(py * patches.grid_w + px);
            for dy in 0..s {
                let dst = ((py * s + dy) * w + px * s) * 3;
                out[dst..dst + s * 3].copy_from_slice(&tok[dy * s * 3..(dy + 1) * s * 3]);
            }
        }
    }
    out
}

/// Crops, normalizes and patchifies the frames at `indices`, all with the
/// same crop window. Returns `(N·P) × (S·S·3)` patch rows, frame-major.
pub fn clip_patches<R: Rng + ?Sized>(
    video: &RawVideo,
    indices: &[usize],
    crop_size: usize,
    patch: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<Tensor> {
    if crop_size == 0 {
        return Err(Error::Input("crop extents must be positive".into()));
    }
    let mut offset = None;
    let mut rows = 0;
    let mut data = Vec::new();
    let mut dim = 0;
    for &i in indices {
        if i >= video.frame_count() {
            return Err(Error::Index {
                what: "frame",
                index: i,
                len: video.frame_count(),
            });
        }
        let mut frame = video.frame(i);
        if frame.height < crop_size || frame.width < crop_size {
            frame = upscale_to_cover(&frame, crop_size, crop_size);
        }
        let (y, x) = match offset {
            Some(o) => o,
            None => {
                let o = crop_offset(frame.height, frame.width, crop_size, crop_size, mode, rng)?;
                offset = Some(o);
                o
            }
        };
        let window = crop_at(&frame, y, x, crop_size, crop_size);
        let p = patchify(&normalize_pixels(&window), crop_size, crop_size, patch)?;
        rows += p.count();
        dim = p.dim();
        data.extend(p.data);
    }
    Tensor::matrix(rows, dim, data)
}

/// Graph handles for the embedding parameters.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingWeights {
    /// `(S·S·3) × D` patch projection.
    pub proj: Var,
    /// `P × D`.
    pub pos_spatial: Var,
    /// `N × D`; absent in image mode.
    pub pos_temporal: Option<Var>,
    /// `1 × D`.
    pub pos_mos: Var,
    /// `1 × D`.
    pub mos_token: Var,
}

/// Embeds patch rows: `e(p,n) = x(p,n)·M + pos_spatial[p] + pos_temporal[n]`.
/// `positions[r] = (patch, frame)` for row `r` of `patches`.
pub fn embed(
    g: &mut Graph,
    patches: Var,
    weights: &EmbeddingWeights,
    positions: &[(usize, usize)],
) -> Result<Var> {
    let rows = g.shape(patches)[0];
    if positions.len() != rows {
        return Err(Error::Contract(format!(
            "{} positions for {rows} patch rows",
            positions.len()
        )));
    }
    let spatial_len = g.shape(weights.pos_spatial)[0];
    let temporal_len = weights.pos_temporal.map(|t| g.shape(t)[0]).unwrap_or(1);
    for &(p, n) in positions {
        if p >= spatial_len {
            return Err(Error::Index {
                what: "patch index",
                index: p,
                len: spatial_len,
            });
        }
        if n >= temporal_len {
            return Err(Error::Index {
                what: "frame index",
                index: n,
                len: temporal_len,
            });
        }
    }
    let projected = g.matmul(patches, weights.proj)?;
    let patch_idx: Vec<usize> = positions.iter().map(|&(p, _)| p).collect();
    let spatial = g.gather_rows(weights.pos_spatial, &patch_idx)?;
    let mut out = g.add(projected, spatial)?;
    if let Some(temporal) = weights.pos_temporal {
        let frame_idx: Vec<usize> = positions.iter().map(|&(_, n)| n).collect();
        let t = g.gather_rows(temporal, &frame_idx)?;
        out = g.add(out, t)?;
    }
    Ok(out)
}

/// The MOS row: learnable token plus its own position vector.
pub fn embed_mos(g: &mut Graph, weights: &EmbeddingWeights) -> Result<Var> {
    g.add(weights.mos_token, weights.pos_mos)
}

/// `(patch, frame)` pairs in sequence order for `patches × frames` tokens.
pub fn token_positions(patches: usize, frames: usize) -> Vec<(usize, usize)> {
    (0..frames)
        .flat_map(|n| (0..patches).map(move |p| (p, n)))
        .collect()
}

/// `(K+1) × D` token matrix with its layout.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub rows: Var,
    pub patches: usize,
    pub frames: usize,
    pub dim: usize,
}

impl TokenSequence {
    pub fn tokens(&self) -> usize {
        self.patches * self.frames
    }

    /// Sequence row of patch `p` in frame `n` (both zero-based).
    pub fn row_of(&self, p: usize, n: usize) -> usize {
        1 + n * self.patches + p
    }
}

pub fn assemble_sequence(
    g: &mut Graph,
    embedded: Var,
    mos: Var,
    patches: usize,
    frames: usize,
) -> Result<TokenSequence> {
    let rows = g.shape(embedded)[0];
    if rows != patches * frames {
        return Err(Error::Contract(format!(
            "{rows} embedded rows, expected {patches}x{frames}"
        )));
    }
    let dim = g.shape(embedded)[1];
    if g.shape(mos) != [1, dim] {
        return Err(Error::dim("assemble_sequence", &[1, dim], g.shape(mos)));
    }
    let seq = g.concat_rows(&[mos, embedded])?;
    Ok(TokenSequence {
        rows: seq,
        patches,
        frames,
        dim,
    })
}
