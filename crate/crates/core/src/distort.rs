//! Out-of-distribution image transforms and the both-correct evaluation
//! subset they are scored on.
//!
//! Every function maps a `[3, 32, 32]` image in `[0, 1]` to another such
//! image.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::predict_shard;
use crate::data::{DatasetShard, Split, IMAGE_LEN, IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Network};

pub const SCRAMBLE_GRIDS: [usize; 4] = [1, 2, 4, 8];
pub const BW_THRESHOLD: f32 = 0.5;

/// One transform with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distortion {
    Scramble { grid: usize },
    GaussNoise { sigma: f32 },
    GaussBlur { sigma: f32 },
    Contrast { factor: f32 },
    Bw { threshold: f32 },
    Silhouette,
}

impl Distortion {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            Distortion::Scramble { grid } if !SCRAMBLE_GRIDS.contains(&grid) => {
                bad(format!("scramble grid must be one of {SCRAMBLE_GRIDS:?}, got {grid}"))
            }
            Distortion::GaussNoise { sigma } | Distortion::GaussBlur { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("sigma must be >= 0, got {sigma}"))
            }
            Distortion::Contrast { factor } if !(factor > 0.0 && factor <= 1.0) => {
                bad(format!("contrast factor must be in (0, 1], got {factor}"))
            }
            Distortion::Bw { threshold } if !(threshold > 0.0 && threshold < 1.0) => {
                bad(format!("threshold must be in (0, 1), got {threshold}"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in tables, e.g. `scramble_p4` or `gauss_noise_0.08`.
    pub fn label(&self) -> String {
        match *self {
            Distortion::Scramble { grid } => format!("scramble_p{grid}"),
            Distortion::GaussNoise { sigma } => format!("gauss_noise_{sigma}"),
            Distortion::GaussBlur { sigma } => format!("gauss_blur_{sigma}"),
            Distortion::Contrast { factor } => format!("contrast_{factor}"),
            Distortion::Bw { threshold } => format!("bw_{threshold}"),
            Distortion::Silhouette => "silhouette".into(),
        }
    }
}

/// Corruption families with three severity levels each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussNoise,
    GaussBlur,
    Contrast,
}

impl Corruption {
    pub const ALL: [Corruption; 3] = [Corruption::GaussNoise, Corruption::GaussBlur, Corruption::Contrast];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gauss_noise" => Some(Corruption::GaussNoise),
            "gauss_blur" => Some(Corruption::GaussBlur),
            "contrast" => Some(Corruption::Contrast),
            _ => None,
        }
    }

    /// The distortion at severity `level` (1..=3).
    pub fn at_level(self, level: usize) -> Result<Distortion> {
        if !(1..=3).contains(&level) {
            return Err(Error::Config(format!("corruption level must be 1, 2 or 3, got {level}")));
        }
        let i = level - 1;
        Ok(match self {
            Corruption::GaussNoise => Distortion::GaussNoise { sigma: [0.08, 0.16, 0.24][i] },
            Corruption::GaussBlur => Distortion::GaussBlur { sigma: [0.5, 1.0, 1.5][i] },
            Corruption::Contrast => Distortion::Contrast { factor: [0.6, 0.4, 0.2][i] },
        })
    }
}

fn check_image(image: &[f32]) -> Result<()> {
    if image.len() != IMAGE_LEN {
        return Err(Error::Input(format!("image must have {IMAGE_LEN} values, got {}", image.len())));
    }
    Ok(())
}

/// Cuts the image into a `p × p` grid of equal tiles and places them in a
/// uniformly random order.
pub fn scramble(image: &[f32], p: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    check_image(image)?;
    if p == 0 || IMAGE_SIZE % p != 0 {
        return Err(Error::Config(format!("grid {p} does not divide {IMAGE_SIZE}")));
    }
    let mut perm: Vec<usize> = (0..p * p).collect();
    perm.shuffle(rng);
    Ok(permute_tiles(image, p, &perm))
}

/// Tile `t` of the output is tile `perm[t]` of the input (row-major tiles).
pub fn permute_tiles(image: &[f32], p: usize, perm: &[usize]) -> Vec<f32> {
    let side = IMAGE_SIZE / p;
    let mut out = vec![0.0f32; IMAGE_LEN];
    for c in 0..3 {
        let plane = c * PIXELS;
        for (dst, &src) in perm.iter().enumerate() {
            let (dy, dx) = (dst / p * side, dst % p * side);
            let (sy, sx) = (src / p * side, src % p * side);
            for r in 0..side {
                let s = plane + (sy + r) * IMAGE_SIZE + sx;
                let d = plane + (dy + r) * IMAGE_SIZE + dx;
                out[d..d + side].copy_from_slice(&image[s..s + side]);
            }
        }
    }
    out
}

pub fn gauss_noise(image: &[f32], sigma: f32, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    check_image(image)?;
    if sigma == 0.0 {
        return Ok(image.to_vec());
    }
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    Ok(image.iter().map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect())
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
fn gauss_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma as f64 * sigma as f64)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / total) as f32).collect()
}

/// Separable Gaussian blur per channel with edge replication.
pub fn gauss_blur(image: &[f32], sigma: f32) -> Result<Vec<f32>> {
    check_image(image)?;
    if sigma == 0.0 {
        return Ok(image.to_vec());
    }
    let k = gauss_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let n = IMAGE_SIZE as isize;
    let at = |i: isize| i.clamp(0, n - 1) as usize;
    let mut out = vec![0.0f32; IMAGE_LEN];
    let mut tmp = vec![0.0f32; PIXELS];
    for c in 0..3 {
        let src = &image[c * PIXELS..(c + 1) * PIXELS];
        for y in 0..IMAGE_SIZE {
            for x in 0..n {
                tmp[y * IMAGE_SIZE + x as usize] =
                    k.iter().enumerate().map(|(j, w)| w * src[y * IMAGE_SIZE + at(x + j as isize - r)]).sum();
            }
        }
        let dst = &mut out[c * PIXELS..(c + 1) * PIXELS];
        for y in 0..n {
            for x in 0..IMAGE_SIZE {
                let v: f32 = k.iter().enumerate().map(|(j, w)| w * tmp[at(y + j as isize - r) * IMAGE_SIZE + x]).sum();
                dst[y as usize * IMAGE_SIZE + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Pulls every value toward mid-gray: `0.5 + factor·(v − 0.5)`.
pub fn contrast(image: &[f32], factor: f32) -> Result<Vec<f32>> {
    check_image(image)?;
    Ok(image.iter().map(|&v| (0.5 + factor * (v - 0.5)).clamp(0.0, 1.0)).collect())
}

/// Applies a corruption family at severity `level`.
pub fn corrupt(image: &[f32], kind: Corruption, level: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    apply(image, None, &kind.at_level(level)?, rng)
}

/// White where luminance `0.299R + 0.587G + 0.114B` reaches `threshold`,
/// black elsewhere, on all three channels.
pub fn binarize(image: &[f32], threshold: f32) -> Result<Vec<f32>> {
    check_image(image)?;
    let mut out = vec![0.0f32; IMAGE_LEN];
    for i in 0..PIXELS {
        let y = 0.299 * image[i] + 0.587 * image[PIXELS + i] + 0.114 * image[2 * PIXELS + i];
        let v = if y >= threshold { 1.0 } else { 0.0 };
        for c in 0..3 {
            out[c * PIXELS + i] = v;
        }
    }
    Ok(out)
}

/// Black object on a white canvas, from a foreground mask.
pub fn silhouette(fg_mask: &[u8]) -> Result<Vec<f32>> {
    if fg_mask.len() != PIXELS {
        return Err(Error::Input(format!("mask must have {PIXELS} values, got {}", fg_mask.len())));
    }
    let plane: Vec<f32> = fg_mask.iter().map(|&m| if m != 0 { 0.0 } else { 1.0 }).collect();
    Ok(plane.repeat(3))
}

/// Applies one distortion to one image. `mask` is needed for silhouettes.
pub fn apply(image: &[f32], mask: Option<&[u8]>, d: &Distortion, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    d.validate()?;
    match *d {
        Distortion::Scramble { grid } => scramble(image, grid, rng),
        Distortion::GaussNoise { sigma } => gauss_noise(image, sigma, rng),
        Distortion::GaussBlur { sigma } => gauss_blur(image, sigma),
        Distortion::Contrast { factor } => contrast(image, factor),
        Distortion::Bw { threshold } => binarize(image, threshold),
        Distortion::Silhouette => {
            check_image(image)?;
            silhouette(mask.ok_or_else(|| Error::Input("silhouette needs a foreground mask".into()))?)
        }
    }
}

/// Per-image generator: one independent stream per sample index.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Distorts every image of a shard. Labels and masks are carried over and
/// the split becomes `Distorted`.
pub fn apply_shard(shard: &DatasetShard, d: &Distortion, seed: u64) -> Result<DatasetShard> {
    d.validate()?;
    let mut out = shard.clone();
    out.split = Split::Distorted;
    for i in 0..shard.len() {
        let img = apply(shard.image(i), Some(shard.mask(i)), d, &mut image_rng(seed, i))?;
        out.image_mut(i).copy_from_slice(&img);
    }
    Ok(out)
}

/// Sample indices that both models classify correctly on clean data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSubset {
    pub indices: Vec<usize>,
}

impl EvalSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn build_eval_subset(a: &Network, b: &Network, shard: &DatasetShard) -> Result<EvalSubset> {
    let opts = ForwardOptions::default();
    let pa = predict_shard(a, shard, 256, &opts)?;
    let pb = predict_shard(b, shard, 256, &opts)?;
    let indices = (0..shard.len())
        .filter(|&i| pa[i] == shard.label(i) && pb[i] == shard.label(i))
        .collect();
    Ok(EvalSubset { indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_train;

    fn ramp() -> Vec<f32> {
        (0..IMAGE_LEN).map(|i| (i % 97) as f32 / 96.0).collect()
    }

    #[test]
    fn scramble_one_is_identity() {
        let img = ramp();
        assert_eq!(scramble(&img, 1, &mut image_rng(3, 0)).unwrap(), img);
    }

    #[test]
    fn scramble_rejects_bad_grid() {
        assert!(scramble(&ramp(), 3, &mut image_rng(0, 0)).is_err());
        assert!(Distortion::Scramble { grid: 16 }.validate().is_err());
    }

    #[test]
    fn contrast_is_affine() {
        let img = ramp();
        let out = contrast(&img, 0.4).unwrap();
        for (o, v) in out.iter().zip(&img) {
            assert!((o - (0.5 + 0.4 * (v - 0.5))).abs() < 1e-7);
        }
    }

    #[test]
    fn blur_fixes_constants() {
        let img = vec![0.37f32; IMAGE_LEN];
        for s in [0.5, 1.0, 1.5] {
            let out = gauss_blur(&img, s).unwrap();
            assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = ramp();
        assert_eq!(gauss_noise(&img, 0.0, &mut image_rng(1, 1)).unwrap(), img);
    }

    #[test]
    fn binarize_extremes() {
        let black = vec![0.0f32; IMAGE_LEN];
        assert_eq!(binarize(&black, 0.5).unwrap(), black);
        assert!(binarize(&ramp(), 0.0).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn silhouette_has_two_values_and_is_idempotent() {
        let shard = gen_train(4, 1).unwrap();
        let sil = silhouette(shard.mask(0)).unwrap();
        assert!(sil.iter().all(|&v| v == 0.0 || v == 1.0));
        let black = sil[..PIXELS].iter().filter(|&&v| v == 0.0).count();
        let area = shard.mask(0).iter().filter(|&&m| m == 1).count();
        assert_eq!(black, area);
        let again = apply(&sil, Some(shard.mask(0)), &Distortion::Silhouette, &mut image_rng(0, 0)).unwrap();
        assert_eq!(again, sil);
    }

    #[test]
    fn unknown_level_rejected() {
        assert!(Corruption::GaussBlur.at_level(0).is_err());
        assert!(Corruption::GaussBlur.at_level(4).is_err());
        assert_eq!(Corruption::GaussNoise.at_level(1).unwrap(), Distortion::GaussNoise { sigma: 0.08 });
    }

    #[test]
    fn subset_of_same_model_is_its_correct_set() {
        let net = crate::model::build("mini3", 0).unwrap();
        let shard = gen_train(2, 2).unwrap();
        let sub = build_eval_subset(&net, &net, &shard).unwrap();
        let preds = predict_shard(&net, &shard, 8, &ForwardOptions::default()).unwrap();
        let own: Vec<usize> = (0..shard.len()).filter(|&i| preds[i] == shard.label(i)).collect();
        assert_eq!(sub.indices, own);
    }
}
