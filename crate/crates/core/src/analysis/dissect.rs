use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ChannelRef;
use crate::data::{Concept, ConceptCategory, DatasetShard, PaletteColor, ShapeKind, TextureKind, IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};
use crate::model::Network;

/// Fraction of a channel's activations (over the whole probe shard) that
/// count as "on".
pub const TOP_QUANTILE: f64 = 0.005;
/// A concept counts toward a channel's diversity at or above this IoU.
pub const DIVERSITY_IOU: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptProfile {
    pub channel: ChannelRef,
    /// IoU with every concept, keyed by concept name.
    pub iou: BTreeMap<String, f64>,
    /// Highest-IoU concept, or "none" for a dead channel.
    pub main_label: String,
    /// "shape", "texture", "color", or "none".
    pub category: String,
    pub main_iou: f64,
    pub diversity: usize,
}

/// Set-count IoU of two binary masks; 0 when both are empty.
pub fn iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Activation threshold and comparison for one channel, or `None` if every
/// value is equal.
fn threshold(values: &mut [f32]) -> Option<(f32, bool)> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if lo == hi {
        return None;
    }
    let k = ((TOP_QUANTILE * values.len() as f64).ceil() as usize).max(1);
    let pos = values.len() - k;
    let (_, t, _) = values.select_nth_unstable_by(pos, f32::total_cmp);
    let t = *t;
    // When the cut lands on the floor value (e.g. mostly-zero ReLU maps),
    // only strictly larger values are on.
    Some((t, t == lo))
}

/// Profiles channels from precomputed activations `[N, C, h, w]` aligned with
/// `shard`. `h` and `w` must divide the image size.
pub fn dissect_activations(
    acts: &[f32],
    dims: [usize; 4],
    shard: &DatasetShard,
    layer: &str,
) -> Result<Vec<ConceptProfile>> {
    let [n, c, h, w] = dims;
    if acts.len() != n * c * h * w || n != shard.len() || n == 0 {
        return Err(Error::Config(format!(
            "activations {dims:?} do not match a shard of {} samples",
            shard.len()
        )));
    }
    if IMAGE_SIZE % h != 0 || IMAGE_SIZE % w != 0 {
        return Err(Error::Config(format!("map size {h}x{w} does not divide {IMAGE_SIZE}")));
    }
    let concepts = Concept::all();
    let slot = |k: Concept| concepts.iter().position(|&x| x == k).expect("known concept");
    let present: Vec<[usize; 4]> = (0..n)
        .map(|i| {
            [
                slot(Concept::Shape(ShapeKind::ALL[shard.shape_ids[i] as usize])),
                slot(Concept::Texture(TextureKind::ALL[shard.texture_ids[i] as usize])),
                slot(Concept::Color(PaletteColor::ALL[shard.fg_colors[i] as usize])),
                slot(Concept::Color(PaletteColor::ALL[shard.bg_colors[i] as usize])),
            ]
        })
        .collect();
    let fg_area: Vec<u64> = (0..n).map(|i| shard.mask(i).iter().map(|&m| m as u64).sum()).collect();
    let plane = h * w;

    Ok((0..c)
        .into_par_iter()
        .map(|ch| {
            let channel = ChannelRef {
                layer: layer.to_string(),
                channel: ch,
            };
            let mut values: Vec<f32> = (0..n)
                .flat_map(|i| acts[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied())
                .collect();
            let Some((t, strict)) = threshold(&mut values) else {
                return ConceptProfile {
                    channel,
                    iou: concepts.iter().map(|k| (k.name().to_string(), 0.0)).collect(),
                    main_label: "none".into(),
                    category: "none".into(),
                    main_iou: 0.0,
                    diversity: 0,
                };
            };
            let on = |v: f32| if strict { v > t } else { v >= t };
            let mut inter = vec![0u64; concepts.len()];
            let mut union = vec![0u64; concepts.len()];
            for i in 0..n {
                let map = &acts[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                let mask = shard.mask(i);
                let (mut a, mut af) = (0u64, 0u64);
                for p in 0..PIXELS {
                    let (y, x) = (p / IMAGE_SIZE, p % IMAGE_SIZE);
                    if on(map[(y * h / IMAGE_SIZE) * w + x * w / IMAGE_SIZE]) {
                        a += 1;
                        af += mask[p] as u64;
                    }
                }
                let f = fg_area[i];
                let [s, tx, fc, bc] = present[i];
                for (k, u) in union.iter_mut().enumerate() {
                    if k != s && k != tx && k != fc && k != bc {
                        *u += a;
                    }
                }
                for k in [s, tx, fc] {
                    inter[k] += af;
                    union[k] += a + f - af;
                }
                let bg = PIXELS as u64 - f;
                inter[bc] += a - af;
                union[bc] += a + bg - (a - af);
            }
            let ious: Vec<f64> = inter
                .iter()
                .zip(&union)
                .map(|(&i, &u)| if u == 0 { 0.0 } else { i as f64 / u as f64 })
                .collect();
            let mut best = 0;
            for (k, &v) in ious.iter().enumerate() {
                if v > ious[best] {
                    best = k;
                }
            }
            ConceptProfile {
                channel,
                iou: concepts.iter().zip(&ious).map(|(k, &v)| (k.name().to_string(), v)).collect(),
                main_label: concepts[best].name().into(),
                category: concepts[best].category().name().into(),
                main_iou: ious[best],
                diversity: ious.iter().filter(|&&v| v >= DIVERSITY_IOU).count(),
            }
        })
        .collect())
}

/// Labels every channel of `layer` with the concept its top activations
/// overlap best, over the probe shard.
pub fn dissect(net: &Network, shard: &DatasetShard, layer: &str) -> Result<Vec<ConceptProfile>> {
    net.layer_width(layer)?;
    if shard.is_empty() {
        return Err(Error::Config("dissection needs a nonempty probe shard".into()));
    }
    let idx: Vec<usize> = (0..shard.len()).collect();
    let mut acts = Vec::new();
    let mut dims = [0usize; 4];
    for chunk in idx.chunks(128) {
        let a = net.activations(shard.batch(chunk), layer)?;
        dims = [shard.len(), a.shape()[1], a.shape()[2], a.shape()[3]];
        acts.extend_from_slice(a.data());
    }
    dissect_activations(&acts, dims, shard, layer)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub shape: usize,
    pub texture: usize,
    pub color: usize,
    pub none: usize,
}

pub fn category_counts(profiles: &[ConceptProfile]) -> CategoryCounts {
    let mut out = CategoryCounts::default();
    for p in profiles {
        match p.category.as_str() {
            c if c == ConceptCategory::Shape.name() => out.shape += 1,
            c if c == ConceptCategory::Texture.name() => out.texture += 1,
            c if c == ConceptCategory::Color.name() => out.color += 1,
            _ => out.none += 1,
        }
    }
    out
}

/// Mean diversity over all channels, dead ones included.
pub fn mean_diversity(profiles: &[ConceptProfile]) -> f64 {
    if profiles.is_empty() {
        return 0.0;
    }
    profiles.iter().map(|p| p.diversity as f64).sum::<f64>() / profiles.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_texture_randomized;

    #[test]
    fn red_indicator_channel_is_labeled_red() {
        let shard = gen_texture_randomized(3, 6).unwrap();
        let n = shard.len();
        let red = PaletteColor::Red.index() as u32;
        let mut acts = vec![0.0f32; n * 2 * PIXELS];
        for i in 0..n {
            for p in 0..PIXELS {
                let fg = shard.mask(i)[p] == 1;
                let is_red = (fg && shard.fg_colors[i] == red) || (!fg && shard.bg_colors[i] == red);
                acts[(i * 2) * PIXELS + p] = if is_red { 1.0 } else { 0.0 };
            }
        }
        let profiles = dissect_activations(&acts, [n, 2, 32, 32], &shard, "probe").unwrap();
        assert_eq!(profiles[0].main_label, "red");
        assert_eq!(profiles[0].category, "color");
        assert!(profiles[0].main_iou > 0.99);
        assert_eq!(profiles[1].main_label, "none");
        assert_eq!(profiles[1].diversity, 0);
        let counts = category_counts(&profiles);
        assert_eq!((counts.color, counts.none), (1, 1));
    }

    #[test]
    fn iou_is_symmetric_and_exact() {
        let a = [1, 1, 0, 0];
        let b = [1, 0, 1, 0];
        assert_eq!(iou(&a, &b), 1.0 / 3.0);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&[0, 0], &[0, 0]), 0.0);
    }
}
