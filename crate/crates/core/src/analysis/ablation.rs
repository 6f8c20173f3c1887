use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ChannelRef;
use crate::attack::predict_shard;
use crate::data::DatasetShard;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationScore {
    pub channel: ChannelRef,
    /// Baseline shape-following decisions that change when the channel is
    /// zeroed.
    pub shape_score: usize,
    /// Same for texture-following decisions.
    pub texture_score: usize,
}

/// Zeroes each channel of `layer` in turn (after its ReLU) and counts the
/// cue-conflict decisions that flip relative to the intact network.
pub fn ablation_scores(net: &Network, shard: &DatasetShard, layer: &str) -> Result<Vec<AblationScore>> {
    let baseline = predict_shard(net, shard, 256, &ForwardOptions::default())?;
    ablation_scores_from(net, shard, layer, &baseline)
}

/// As [`ablation_scores`], reusing precomputed intact predictions.
pub fn ablation_scores_from(
    net: &Network,
    shard: &DatasetShard,
    layer: &str,
    baseline: &[usize],
) -> Result<Vec<AblationScore>> {
    let width = net.layer_width(layer)?;
    if baseline.len() != shard.len() {
        return Err(Error::Input(format!("{} baseline predictions for {} samples", baseline.len(), shard.len())));
    }
    (0..width)
        .into_par_iter()
        .map(|ch| {
            let preds = predict_shard(net, shard, 256, &ForwardOptions::ablate(layer, width, &[ch]))?;
            let (mut shape_score, mut texture_score) = (0, 0);
            for (i, (&b, &p)) in baseline.iter().zip(&preds).enumerate() {
                if b == p {
                    continue;
                }
                if b == shard.shape_ids[i] as usize {
                    shape_score += 1;
                } else if b == shard.texture_ids[i] as usize {
                    texture_score += 1;
                }
            }
            Ok(AblationScore {
                channel: ChannelRef {
                    layer: layer.to_string(),
                    channel: ch,
                },
                shape_score,
                texture_score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_cue_conflict, NUM_CLASSES};
    use crate::tensor::argmax;

    #[test]
    fn dead_outgoing_weights_score_zero() {
        let mut net = crate::model::build("mini3", 4).unwrap();
        let shard = gen_cue_conflict(1, 24).unwrap();
        let fc = net.params.get_mut("fc.weight").unwrap();
        let fin = fc.shape()[1];
        for row in fc.data_mut().chunks_mut(fin) {
            row[5] = 0.0;
        }
        let scores = ablation_scores(&net, &shard, "conv3").unwrap();
        assert_eq!((scores[5].shape_score, scores[5].texture_score), (0, 0));
    }

    #[test]
    fn ablating_whole_last_layer_collapses_to_bias_argmax() {
        let mut net = crate::model::build("mini3", 4).unwrap();
        let bias: Vec<f32> = (0..NUM_CLASSES).map(|k| (k as f32 * 0.37).sin()).collect();
        net.params.get_mut("fc.bias").unwrap().data_mut().copy_from_slice(&bias);
        let shard = gen_cue_conflict(1, 10).unwrap();
        let all: Vec<usize> = (0..64).collect();
        let preds = predict_shard(&net, &shard, 16, &ForwardOptions::ablate("conv3", 64, &all)).unwrap();
        assert!(preds.iter().all(|&p| p == argmax(&bias)));
    }
}
