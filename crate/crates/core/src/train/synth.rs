//! Procedural fixtures whose quality is set by injected Gaussian noise.
//!
//! Each video is a smooth, slowly drifting two-wave color pattern around
//! mid grey. Item `k` of a dataset with `n` items gets degradation
//! `q = k/(n−1)`: pixel noise with standard deviation `q·max_noise` and MOS
//! `mos_max − q·(mos_max − mos_min)`.
//!
//! Content contrast is kept low and the base color fixed so that noise, not
//! content, is what tells items apart. With a random per-item base color a
//! small model separates training items by color and does not generalize.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{save_manifest, write_container, Manifest, ManifestItem};
use crate::regression::MosRange;
use crate::tokenizer::RawVideo;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Number of datasets the items are dealt into, each with its own raw
    /// score range.
    pub datasets: usize,
    /// Noise standard deviation, in 8-bit pixel units, at `q = 1`.
    pub max_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 8,
            frames: 8,
            height: 80,
            width: 80,
            datasets: 1,
            max_noise: 48.0,
            seed: 0,
        }
    }
}

/// Raw score range of synthetic dataset `j`.
pub fn synth_range(j: usize) -> MosRange {
    const RANGES: [(f64, f64); 3] = [(1.0, 5.0), (0.0, 100.0), (1.22, 4.64)];
    let (lo, hi) = RANGES[j % RANGES.len()];
    MosRange {
        mos_min: lo,
        mos_max: hi,
    }
}

/// One video with additive pixel noise of standard deviation `noise_std`.
pub fn synth_video(noise_std: f64, frames: usize, height: usize, width: usize, rng: &mut impl Rng) -> Result<RawVideo> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Input("synthetic video extents must be positive".into()));
    }
    let mut waves = [[0.0f64; 4]; 2];
    for w in &mut waves {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let freq: f64 = rng.random_range(0.02..0.06);
        *w = [
            freq * angle.cos(),
            freq * angle.sin(),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.05..0.2),
        ];
    }
    let base = 128.0;
    let tint: [f64; 3] = [
        rng.random_range(3.0..8.0),
        rng.random_range(3.0..8.0),
        rng.random_range(3.0..8.0),
    ];
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pixels = Vec::with_capacity(frames * height * width * 3);
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.0;
                for w in &waves {
                    v += (w[0] * x as f64 + w[1] * y as f64 + w[2] + w[3] * t as f64).sin();
                }
                for c in 0..3 {
                    let clean = base + tint[c] * v * if c == 1 { -1.0 } else { 1.0 };
                    let n: f64 = noise.sample(rng);
                    let px = clean + noise_std * n;
                    pixels.push(px.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    RawVideo::new(frames, height, width, pixels)
}

/// Writes `spec.count` containers plus `manifest.json` into `dir` and
/// returns the manifest.
pub fn make_synthetic_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    if spec.datasets == 0 || spec.count < spec.datasets {
        return Err(Error::Input(format!(
            "{} items cannot fill {} datasets",
            spec.count, spec.datasets
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        base_dir: dir.to_path_buf(),
        ..Manifest::default()
    };
    for j in 0..spec.datasets {
        manifest.datasets.insert(format!("synth{j}"), synth_range(j));
    }
    for j in 0..spec.datasets {
        let members: Vec<usize> = (j..spec.count).step_by(spec.datasets).collect();
        let n = members.len();
        let range = synth_range(j);
        for (k, &i) in members.iter().enumerate() {
            let q = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let video = synth_video(q * spec.max_noise, spec.frames, spec.height, spec.width, &mut rng)?;
            let name = format!("v{i:03}.svqv");
            write_container(&video, dir.join(&name))?;
            manifest.items.push(ManifestItem {
                path: name,
                mos: range.mos_max - q * (range.mos_max - range.mos_min),
                dataset: format!("synth{j}"),
                split: None,
                label: None,
            });
        }
    }
    manifest.items.sort_by(|a, b| a.path.cmp(&b.path));
    save_manifest(&manifest, dir.join("manifest.json"))?;
    Ok(manifest)
}
