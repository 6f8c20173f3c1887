use serde::{Deserialize, Serialize};

use crate::data::DatasetShard;
use crate::error::{Error, Result};
use crate::model::Network;

/// Anisotropic total variation of an `h × w` plane: the sum of absolute
/// differences over horizontally and vertically adjacent pairs.
pub fn tv2d(plane: &[f32], h: usize, w: usize) -> f64 {
    debug_assert_eq!(plane.len(), h * w);
    let mut tv = 0.0f64;
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            if x + 1 < w {
                tv += (row[x] as f64 - row[x + 1] as f64).abs();
            }
            if y + 1 < h {
                tv += (row[x] as f64 - plane[(y + 1) * w + x] as f64).abs();
            }
        }
    }
    tv
}

/// Per-filter TV of one conv layer, summed over input channels.
pub fn filter_tvs(net: &Network, layer: &str) -> Result<Vec<f64>> {
    net.layer_width(layer)?;
    let w = net.param(&format!("{layer}.weight"));
    let &[cout, cin, kh, kw] = w.shape() else {
        return Err(Error::Integrity(format!("{layer}.weight is not 4-D")));
    };
    Ok((0..cout)
        .map(|o| {
            (0..cin)
                .map(|i| {
                    let off = (o * cin + i) * kh * kw;
                    tv2d(&w.data()[off..off + kh * kw], kh, kw)
                })
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTv {
    pub layer: String,
    /// Mean of the per-filter TVs over output channels.
    pub mean_tv: f64,
    pub per_filter: Vec<f64>,
}

/// Mean filter TV for every conv layer, in layer order.
pub fn filter_tv(net: &Network) -> Result<Vec<LayerTv>> {
    net.conv_layers()
        .into_iter()
        .map(|layer| {
            let per_filter = filter_tvs(net, &layer)?;
            let mean_tv = per_filter.iter().sum::<f64>() / per_filter.len() as f64;
            Ok(LayerTv { layer, mean_tv, per_filter })
        })
        .collect()
}

/// 1-based ranks with ties given the mean of the ranks they span.
pub fn average_ranks(values: &[f32]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Zero when either input is constant.
pub fn spearman(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMatch {
    pub idx_a: usize,
    pub idx_b: usize,
    pub spearman_r: f64,
    /// `TV(a) − TV(b)`.
    pub tv_diff: f64,
}

/// For each filter of `a`'s layer, the most rank-correlated filter of `b`'s
/// same layer (lowest index on ties).
pub fn match_filters(a: &Network, b: &Network, layer: &str) -> Result<Vec<FilterMatch>> {
    let (wa, wb) = (a.param(&format!("{layer}.weight")), b.param(&format!("{layer}.weight")));
    if wa.shape() != wb.shape() {
        return Err(Error::Config(format!(
            "{layer} weights differ in shape: {:?} vs {:?}",
            wa.shape(),
            wb.shape()
        )));
    }
    let (tva, tvb) = (filter_tvs(a, layer)?, filter_tvs(b, layer)?);
    let len = wa.numel() / wa.shape()[0];
    let fa: Vec<&[f32]> = wa.data().chunks(len).collect();
    let fb: Vec<&[f32]> = wb.data().chunks(len).collect();
    Ok(fa
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let (mut best, mut best_r) = (0, f64::NEG_INFINITY);
            for (j, g) in fb.iter().enumerate() {
                let r = spearman(f, g);
                if r > best_r {
                    best = j;
                    best_r = r;
                }
            }
            FilterMatch {
                idx_a: i,
                idx_b: best,
                spearman_r: best_r,
                tv_diff: tva[i] - tvb[best],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTv {
    pub channel: usize,
    pub tv_clean: f64,
    pub tv_noisy: f64,
}

fn mean_channel_tv(net: &Network, shard: &DatasetShard, layer: &str) -> Result<Vec<f64>> {
    let width = net.layer_width(layer)?;
    let mut sums = vec![0.0f64; width];
    let idx: Vec<usize> = (0..shard.len()).collect();
    for chunk in idx.chunks(128) {
        let act = net.activations(shard.batch(chunk), layer)?;
        let (h, w) = (act.shape()[2], act.shape()[3]);
        for (k, plane) in act.data().chunks(h * w).enumerate() {
            sums[k % width] += tv2d(plane, h, w);
        }
    }
    Ok(sums.into_iter().map(|s| s / shard.len() as f64).collect())
}

/// Mean spatial TV of each channel's post-ReLU map on clean inputs and on
/// their noisy counterparts (same samples, same order).
pub fn activation_tv(net: &Network, clean: &DatasetShard, noisy: &DatasetShard, layer: &str) -> Result<Vec<ChannelTv>> {
    if clean.is_empty() || clean.len() != noisy.len() {
        return Err(Error::Config(format!(
            "clean and noisy shards must be nonempty and aligned ({} vs {})",
            clean.len(),
            noisy.len()
        )));
    }
    let tc = mean_channel_tv(net, clean, layer)?;
    let tn = mean_channel_tv(net, noisy, layer)?;
    Ok(tc
        .into_iter()
        .zip(tn)
        .enumerate()
        .map(|(channel, (tv_clean, tv_noisy))| ChannelTv { channel, tv_clean, tv_noisy })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_hand_cases() {
        assert_eq!(tv2d(&[0.3; 9], 3, 3), 0.0);
        assert_eq!(tv2d(&[0.0, 1.0, 0.0, 1.0], 2, 2), 2.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_self_and_negation() {
        let a = [0.1, -0.4, 2.0, 0.7, 0.0];
        let neg: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &a) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_banks_match_themselves() {
        let net = crate::model::build("mini3", 9).unwrap();
        for m in match_filters(&net, &net, "conv1").unwrap() {
            assert_eq!(m.idx_a, m.idx_b);
            assert!((m.spearman_r - 1.0).abs() < 1e-12);
            assert_eq!(m.tv_diff, 0.0);
        }
    }

    #[test]
    fn filter_tv_nonnegative() {
        let net = crate::model::build("mini4", 1).unwrap();
        let layers = filter_tv(&net).unwrap();
        assert_eq!(layers.len(), 4);
        assert!(layers.iter().all(|l| l.mean_tv > 0.0));
    }
}
