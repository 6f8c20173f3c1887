//! Synthetic shape/texture images with exact concept masks.
//!
//! Each image shows one of eight shapes filled with one of eight textures on a
//! solid background. In the training distribution the shape and the texture
//! both name the class; the cue-conflict split pairs them inconsistently and
//! the texture-randomized split makes the texture uninformative.

mod png_export;
pub mod render;
mod shard;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use png_export::{export_png, import_png};
pub use shard::{read_shard, write_shard, SHARD_MAGIC, SHARD_VERSION};

use crate::error::{config, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const IMAGE_LEN: usize = 3 * PIXELS;
pub const NUM_CLASSES: usize = 8;

/// Channel levels of the palette. Kept off the rails of `[0, 1]` so that
/// clamping does not shield saturated pixels from perturbation.
pub const PALETTE_HIGH: f32 = 0.9;
pub const PALETTE_LOW: f32 = 0.1;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: [$name; [$($label),+].len()] = [$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $label),+ }
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(
    /// Object outline; shape `k` names class `k`.
    ShapeKind {
        Circle => "circle",
        Square => "square",
        Triangle => "triangle",
        Diamond => "diamond",
        Star => "star",
        Cross => "cross",
        Annulus => "annulus",
        Crescent => "crescent",
    }
);

named_enum!(
    /// Surface pattern; texture `k` names class `k`.
    TextureKind {
        HorizontalStripes => "horizontal_stripes",
        VerticalStripes => "vertical_stripes",
        DiagonalStripes => "diagonal_stripes",
        Checkerboard => "checkerboard",
        PolkaDots => "polka_dots",
        GridLines => "grid_lines",
        SolidFill => "solid",
        Speckle => "speckle",
    }
);

named_enum!(
    PaletteColor {
        Red => "red",
        Green => "green",
        Blue => "blue",
        Yellow => "yellow",
        Magenta => "magenta",
        Cyan => "cyan",
    }
);

impl PaletteColor {
    pub fn rgb(self) -> [f32; 3] {
        let (h, l) = (PALETTE_HIGH, PALETTE_LOW);
        match self {
            PaletteColor::Red => [h, l, l],
            PaletteColor::Green => [l, h, l],
            PaletteColor::Blue => [l, l, h],
            PaletteColor::Yellow => [h, h, l],
            PaletteColor::Magenta => [h, l, h],
            PaletteColor::Cyan => [l, h, h],
        }
    }
}

/// Concept family used to categorize dissection labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptCategory {
    Shape,
    Texture,
    Color,
}

impl ConceptCategory {
    pub fn name(self) -> &'static str {
        match self {
            ConceptCategory::Shape => "shape",
            ConceptCategory::Texture => "texture",
            ConceptCategory::Color => "color",
        }
    }
}

/// A human-nameable concept with a per-pixel mask in every sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Concept {
    Shape(ShapeKind),
    Texture(TextureKind),
    Color(PaletteColor),
}

impl Concept {
    /// All 22 concepts sorted by name, which is also the tie-break order.
    pub fn all() -> Vec<Concept> {
        let mut all: Vec<Concept> = ShapeKind::ALL
            .iter()
            .map(|&s| Concept::Shape(s))
            .chain(TextureKind::ALL.iter().map(|&t| Concept::Texture(t)))
            .chain(PaletteColor::ALL.iter().map(|&c| Concept::Color(c)))
            .collect();
        all.sort_by_key(|c| c.name());
        all
    }

    pub fn name(self) -> &'static str {
        match self {
            Concept::Shape(s) => s.name(),
            Concept::Texture(t) => t.name(),
            Concept::Color(c) => c.name(),
        }
    }

    pub fn category(self) -> ConceptCategory {
        match self {
            Concept::Shape(_) => ConceptCategory::Shape,
            Concept::Texture(_) => ConceptCategory::Texture,
            Concept::Color(_) => ConceptCategory::Color,
        }
    }
}

impl PartialOrd for Concept {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Concept {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.name().cmp(other.name())
    }
}

/// Which generator produced a shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    CueConflict,
    TextureRandomized,
    Distorted,
}

impl Split {
    pub fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::CueConflict => 1,
            Split::TextureRandomized => 2,
            Split::Distorted => 3,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        [Split::Train, Split::CueConflict, Split::TextureRandomized, Split::Distorted]
            .into_iter()
            .find(|s| s.code() == c)
    }

    fn salt(self) -> u64 {
        0x9E37_79B9_7F4A_7C15u64.wrapping_mul(self.code() as u64 + 1)
    }
}

/// One image with its labels and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, 32, 32]`, values in `[0, 1]`.
    pub image: Tensor,
    pub class_label: usize,
    pub shape: ShapeKind,
    pub texture: TextureKind,
    pub fg_color: PaletteColor,
    pub bg_color: PaletteColor,
    /// 0/1 per pixel, row-major `32×32`.
    pub fg_mask: Vec<u8>,
}

impl Sample {
    /// Concept masks present in this sample. Shape and texture masks are the
    /// foreground; the two color masks partition the canvas.
    pub fn concept_masks(&self) -> BTreeMap<Concept, Vec<u8>> {
        let bg: Vec<u8> = self.fg_mask.iter().map(|&m| 1 - m).collect();
        let mut out = BTreeMap::new();
        out.insert(Concept::Shape(self.shape), self.fg_mask.clone());
        out.insert(Concept::Texture(self.texture), self.fg_mask.clone());
        out.insert(Concept::Color(self.fg_color), self.fg_mask.clone());
        out.insert(Concept::Color(self.bg_color), bg);
        out
    }

    pub fn fg_fraction(&self) -> f64 {
        self.fg_mask.iter().map(|&m| m as f64).sum::<f64>() / PIXELS as f64
    }
}

/// Struct-of-arrays batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub split: Split,
    pub seed: u64,
    /// `N × 3 × 32 × 32`, packed.
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub shape_ids: Vec<u32>,
    pub texture_ids: Vec<u32>,
    pub fg_colors: Vec<u32>,
    pub bg_colors: Vec<u32>,
    /// `N × 32 × 32` foreground masks, one byte per pixel in memory.
    pub masks: Vec<u8>,
}

impl DatasetShard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        &self.masks[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            image: Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], self.image(i).to_vec()).expect("fixed size"),
            class_label: self.label(i),
            shape: ShapeKind::from_index(self.shape_ids[i] as usize).expect("validated id"),
            texture: TextureKind::from_index(self.texture_ids[i] as usize).expect("validated id"),
            fg_color: PaletteColor::from_index(self.fg_colors[i] as usize).expect("validated id"),
            bg_color: PaletteColor::from_index(self.bg_colors[i] as usize).expect("validated id"),
            fg_mask: self.mask(i).to_vec(),
        }
    }

    /// Images at `indices` as an `[B, 3, 32, 32]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), 3, IMAGE_SIZE, IMAGE_SIZE], data).expect("fixed size")
    }

    /// A new shard holding only the given samples.
    pub fn subset(&self, indices: &[usize]) -> DatasetShard {
        let pick = |v: &[u32]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut images = Vec::with_capacity(indices.len() * IMAGE_LEN);
        let mut masks = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            images.extend_from_slice(self.image(i));
            masks.extend_from_slice(self.mask(i));
        }
        DatasetShard {
            split: self.split,
            seed: self.seed,
            images,
            labels: pick(&self.labels),
            shape_ids: pick(&self.shape_ids),
            texture_ids: pick(&self.texture_ids),
            fg_colors: pick(&self.fg_colors),
            bg_colors: pick(&self.bg_colors),
            masks,
        }
    }

    fn from_samples(split: Split, seed: u64, samples: Vec<Sample>) -> Self {
        let n = samples.len();
        let mut shard = DatasetShard {
            split,
            seed,
            images: Vec::with_capacity(n * IMAGE_LEN),
            labels: Vec::with_capacity(n),
            shape_ids: Vec::with_capacity(n),
            texture_ids: Vec::with_capacity(n),
            fg_colors: Vec::with_capacity(n),
            bg_colors: Vec::with_capacity(n),
            masks: Vec::with_capacity(n * PIXELS),
        };
        for s in samples {
            shard.images.extend_from_slice(s.image.data());
            shard.labels.push(s.class_label as u32);
            shard.shape_ids.push(s.shape.index() as u32);
            shard.texture_ids.push(s.texture.index() as u32);
            shard.fg_colors.push(s.fg_color.index() as u32);
            shard.bg_colors.push(s.bg_color.index() as u32);
            shard.masks.extend_from_slice(&s.fg_mask);
        }
        shard
    }

    /// Checks array lengths and id ranges.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (name, len) in [
            ("shape_ids", self.shape_ids.len()),
            ("texture_ids", self.texture_ids.len()),
            ("fg_colors", self.fg_colors.len()),
            ("bg_colors", self.bg_colors.len()),
        ] {
            if len != n {
                return config(format!("{name} has {len} entries, labels has {n}"));
            }
        }
        if self.images.len() != n * IMAGE_LEN || self.masks.len() != n * PIXELS {
            return config("image or mask block does not match sample count");
        }
        let bad = |v: &[u32], lim: usize| v.iter().any(|&x| x as usize >= lim);
        if bad(&self.labels, NUM_CLASSES)
            || bad(&self.shape_ids, ShapeKind::ALL.len())
            || bad(&self.texture_ids, TextureKind::ALL.len())
            || bad(&self.fg_colors, PaletteColor::ALL.len())
            || bad(&self.bg_colors, PaletteColor::ALL.len())
        {
            return config("label or id out of range");
        }
        Ok(())
    }
}

const MIN_FG: f64 = 0.15;
const MAX_FG: f64 = 0.70;

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.salt());
    rng.set_stream(index as u64);
    rng
}

/// Renders one sample; pose is redrawn until the foreground covers
/// 15%–70% of the canvas.
fn render_sample(rng: &mut ChaCha8Rng, class: usize, shape: ShapeKind, texture: TextureKind) -> Sample {
    let fg_mask = loop {
        let pose = render::Pose::sample(rng);
        let mask = render::rasterize(shape, pose);
        let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / PIXELS as f64;
        if (MIN_FG..=MAX_FG).contains(&frac) {
            break mask;
        }
    };
    let fg = PaletteColor::ALL[rng.gen_range(0..PaletteColor::ALL.len())];
    let bg = loop {
        let c = PaletteColor::ALL[rng.gen_range(0..PaletteColor::ALL.len())];
        if c != fg {
            break c;
        }
    };
    let pattern = render::texture_pattern(texture, rng);
    let image = render::paint(&fg_mask, &pattern, fg, bg);
    Sample {
        image: Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], image).expect("fixed size"),
        class_label: class,
        shape,
        texture,
        fg_color: fg,
        bg_color: bg,
        fg_mask,
    }
}

fn generate(
    split: Split,
    seed: u64,
    n: usize,
    cues: impl Fn(usize, &mut ChaCha8Rng) -> (usize, ShapeKind, TextureKind) + Sync,
) -> DatasetShard {
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, split, i);
            let (class, shape, texture) = cues(i, &mut rng);
            render_sample(&mut rng, class, shape, texture)
        })
        .collect();
    DatasetShard::from_samples(split, seed, samples)
}

/// Training distribution: class `k` is shape `k` filled with texture `k`.
pub fn gen_train(seed: u64, n_per_class: usize) -> Result<DatasetShard> {
    if n_per_class == 0 {
        return config("n_per_class must be at least 1");
    }
    Ok(generate(Split::Train, seed, n_per_class * NUM_CLASSES, |i, _| {
        let k = i % NUM_CLASSES;
        (k, ShapeKind::ALL[k], TextureKind::ALL[k])
    }))
}

/// Cue-conflict images: shape `i` with texture `j != i`, cycling through a
/// seeded shuffle of all 56 ordered pairs. The class label is the shape.
pub fn gen_cue_conflict(seed: u64, n_pairs: usize) -> Result<DatasetShard> {
    if n_pairs == 0 {
        return config("n_pairs must be at least 1");
    }
    let mut pairs: Vec<(usize, usize)> = (0..NUM_CLASSES)
        .flat_map(|s| (0..NUM_CLASSES).filter(move |&t| t != s).map(move |t| (s, t)))
        .collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_1C7));
    Ok(generate(Split::CueConflict, seed, n_pairs, |i, _| {
        let (s, t) = pairs[i % pairs.len()];
        (s, ShapeKind::ALL[s], TextureKind::ALL[t])
    }))
}

/// Like [`gen_train`] but the texture is drawn uniformly and independently
/// of the class, so only the shape is predictive.
pub fn gen_texture_randomized(seed: u64, n_per_class: usize) -> Result<DatasetShard> {
    if n_per_class == 0 {
        return config("n_per_class must be at least 1");
    }
    Ok(generate(Split::TextureRandomized, seed, n_per_class * NUM_CLASSES, |i, rng| {
        let k = i % NUM_CLASSES;
        let t = rng.gen_range(0..TextureKind::ALL.len());
        (k, ShapeKind::ALL[k], TextureKind::ALL[t])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concepts_sorted_and_complete() {
        let all = Concept::all();
        assert_eq!(all.len(), 22);
        assert!(all.windows(2).all(|w| w[0].name() < w[1].name()));
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(gen_train(0, 0).is_err());
        assert!(gen_cue_conflict(0, 0).is_err());
        assert!(gen_texture_randomized(0, 0).is_err());
    }

    #[test]
    fn sample_masks_are_consistent() {
        let shard = gen_train(5, 3).unwrap();
        for i in 0..shard.len() {
            let s = shard.sample(i);
            let masks = s.concept_masks();
            assert_eq!(masks[&Concept::Shape(s.shape)], s.fg_mask);
            let fg = &masks[&Concept::Color(s.fg_color)];
            let bg = &masks[&Concept::Color(s.bg_color)];
            assert!(fg.iter().zip(bg).all(|(a, b)| a + b == 1));
        }
    }

    #[test]
    fn split_codes_round_trip() {
        for s in [Split::Train, Split::CueConflict, Split::TextureRandomized, Split::Distorted] {
            assert_eq!(Split::from_code(s.code()), Some(s));
        }
        assert_eq!(Split::from_code(9), None);
    }
}
