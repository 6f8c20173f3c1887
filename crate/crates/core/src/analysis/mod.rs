//! Measurement battery run on trained networks: cue-conflict shape bias,
//! filter and activation smoothness, filter matching, concept dissection and
//! channel ablation.

mod ablation;
mod bias;
mod dissect;
mod tv;

pub use ablation::{ablation_scores, ablation_scores_from, AblationScore};
pub use bias::{bias_from_predictions, shape_bias, BiasReport, ShapeBreakdown};
pub use dissect::{
    category_counts, dissect, dissect_activations, iou, mean_diversity, CategoryCounts, ConceptProfile,
    DIVERSITY_IOU, TOP_QUANTILE,
};
pub use tv::{
    activation_tv, average_ranks, filter_tv, filter_tvs, match_filters, spearman, tv2d, ChannelTv, FilterMatch,
    LayerTv,
};

use serde::{Deserialize, Serialize};

use crate::attack::predict_shard;
use crate::data::DatasetShard;
use crate::error::Result;
use crate::model::{ForwardOptions, Network};

/// One channel of one conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelRef {
    pub layer: String,
    pub channel: usize,
}

/// Top-1 accuracy on a shard, or 0 for an empty shard.
pub fn accuracy(net: &Network, shard: &DatasetShard) -> Result<f64> {
    if shard.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_shard(net, shard, 256, &ForwardOptions::default())?;
    let correct = preds.iter().enumerate().filter(|(i, &p)| p == shard.label(*i)).count();
    Ok(correct as f64 / shard.len() as f64)
}
