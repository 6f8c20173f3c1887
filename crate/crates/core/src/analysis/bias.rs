use serde::{Deserialize, Serialize};

use crate::attack::predict_shard;
use crate::data::{DatasetShard, ShapeKind, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeBreakdown {
    pub shape: String,
    pub n: usize,
    pub shape_decisions: usize,
    pub texture_decisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub n_evaluated: usize,
    pub n_shape: usize,
    pub n_texture: usize,
    /// `n_shape / (n_shape + n_texture)`; 0 when neither cue was ever chosen.
    pub shape_bias: f64,
    pub per_shape: Vec<ShapeBreakdown>,
}

/// Counts shape- and texture-following decisions given top-1 predictions on
/// a cue-conflict shard. Predictions matching neither cue are ignored.
pub fn bias_from_predictions(shard: &DatasetShard, preds: &[usize]) -> Result<BiasReport> {
    if shard.is_empty() {
        return Err(Error::Config("shape bias needs a nonempty cue-conflict shard".into()));
    }
    if preds.len() != shard.len() {
        return Err(Error::Input(format!("{} predictions for {} samples", preds.len(), shard.len())));
    }
    let mut per_shape: Vec<ShapeBreakdown> = ShapeKind::ALL
        .iter()
        .map(|s| ShapeBreakdown {
            shape: s.name().into(),
            n: 0,
            shape_decisions: 0,
            texture_decisions: 0,
        })
        .collect();
    for (i, &p) in preds.iter().enumerate() {
        let (s, t) = (shard.shape_ids[i] as usize, shard.texture_ids[i] as usize);
        let row = &mut per_shape[s];
        row.n += 1;
        if p == s {
            row.shape_decisions += 1;
        } else if p == t {
            row.texture_decisions += 1;
        }
    }
    let n_shape: usize = per_shape.iter().map(|r| r.shape_decisions).sum();
    let n_texture: usize = per_shape.iter().map(|r| r.texture_decisions).sum();
    let decided = n_shape + n_texture;
    Ok(BiasReport {
        n_evaluated: shard.len(),
        n_shape,
        n_texture,
        shape_bias: if decided == 0 { 0.0 } else { n_shape as f64 / decided as f64 },
        per_shape,
    })
}

pub fn shape_bias(net: &Network, shard: &DatasetShard) -> Result<BiasReport> {
    if shard.is_empty() {
        return Err(Error::Config("shape bias needs a nonempty cue-conflict shard".into()));
    }
    let preds = predict_shard(net, shard, 256, &ForwardOptions::default())?;
    debug_assert!(preds.iter().all(|&p| p < NUM_CLASSES));
    bias_from_predictions(shard, &preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_cue_conflict;

    #[test]
    fn oracle_classifiers_give_extreme_bias() {
        let shard = gen_cue_conflict(5, 112).unwrap();
        let by_shape: Vec<usize> = shard.shape_ids.iter().map(|&s| s as usize).collect();
        let by_texture: Vec<usize> = shard.texture_ids.iter().map(|&t| t as usize).collect();
        let r = bias_from_predictions(&shard, &by_shape).unwrap();
        assert_eq!((r.shape_bias, r.n_shape, r.n_texture), (1.0, 112, 0));
        let r = bias_from_predictions(&shard, &by_texture).unwrap();
        assert_eq!((r.shape_bias, r.n_shape, r.n_texture), (0.0, 0, 112));
        assert_eq!(r.per_shape.iter().map(|b| b.n).sum::<usize>(), 112);
    }

    #[test]
    fn empty_shard_is_config_error() {
        let shard = gen_cue_conflict(5, 4).unwrap().subset(&[]);
        assert!(matches!(bias_from_predictions(&shard, &[]), Err(Error::Config(_))));
    }
}
