//! The full comparison: data generation, three training regimes, the
//! analysis battery and the directional checks, as plain functions over
//! in-memory values. File layout and manifests live in the CLI.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, ablation_scores, activation_tv, category_counts, dissect, filter_tv, match_filters, mean_diversity,
    shape_bias, AblationScore, BiasReport, CategoryCounts, ChannelTv, ConceptProfile, FilterMatch, LayerTv,
};
use crate::attack::{self, AdvEval, AttackConfig};
use crate::data::{gen_cue_conflict, gen_texture_randomized, gen_train, DatasetShard};
use crate::distort::{apply_shard, build_eval_subset, Corruption, Distortion, EvalSubset};
use crate::error::{Error, Result};
use crate::model::{build, Network, Regime};
use crate::train::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Cue-conflict images for shape bias and ablation.
    pub conflict_pairs: usize,
    /// Texture-randomized images used as the dissection probe set.
    pub probe_per_class: usize,
    /// Held-out training-distribution images for attacks and distortions.
    pub test_per_class: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            train_per_class: 250,
            val_per_class: 50,
            conflict_pairs: 560,
            probe_per_class: 50,
            test_per_class: 50,
        }
    }
}

/// Optimizer and schedule shared by all regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub lr_decay_factor: f32,
    pub lr_decay_every: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub adv_eval_every: usize,
    pub eps_warmup_epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            lr0: 0.05,
            lr_decay_factor: 0.1,
            lr_decay_every: 17,
            momentum: 0.9,
            weight_decay: 1e-4,
            adv_eval_every: 5,
            eps_warmup_epochs: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSettings {
    /// Gaussian-noise severity for the clean-vs-noisy activation TV.
    pub noise_level: usize,
    pub noise_layer: String,
    pub match_layer: String,
    /// Layer for dissection and ablation; the last conv layer if unset.
    pub dissect_layer: Option<String>,
    pub scramble_grids: Vec<usize>,
    pub bw_threshold: f32,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            noise_level: 1,
            noise_layer: "conv1".into(),
            match_layer: "conv1".into(),
            dissect_layer: None,
            scramble_grids: vec![1, 2, 4, 8],
            bw_threshold: crate::distort::BW_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub arch: String,
    pub data: DataSizes,
    pub train: TrainSettings,
    pub attack: AttackConfig,
    pub analysis: AnalysisSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1],
            arch: "mini3".into(),
            data: DataSizes::default(),
            train: TrainSettings::default(),
            attack: AttackConfig::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

/// A config-file problem located by JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{pointer}: {message}")]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl ExperimentConfig {
    /// Parses and validates a JSON config. Errors carry the JSON pointer of
    /// the offending key.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError {
            pointer: json_pointer(e.path()),
            message: e.into_inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |pointer: &str, message: String| {
            Err(ConfigError {
                pointer: pointer.into(),
                message,
            })
        };
        if self.seeds.is_empty() {
            return err("/seeds", "at least one seed is required".into());
        }
        if let Err(e) = crate::model::arch_layers(&self.arch) {
            return err("/arch", e.to_string());
        }
        let d = &self.data;
        for (key, v) in [
            ("train_per_class", d.train_per_class),
            ("val_per_class", d.val_per_class),
            ("conflict_pairs", d.conflict_pairs),
            ("probe_per_class", d.probe_per_class),
            ("test_per_class", d.test_per_class),
        ] {
            if v == 0 {
                return err(&format!("/data/{key}"), "must be at least 1".into());
            }
        }
        let t = &self.train;
        for (key, v) in [
            ("epochs", t.epochs),
            ("batch_size", t.batch_size),
            ("lr_decay_every", t.lr_decay_every),
            ("adv_eval_every", t.adv_eval_every),
        ] {
            if v == 0 {
                return err(&format!("/train/{key}"), "must be at least 1".into());
            }
        }
        for (key, ok) in [
            ("lr0", t.lr0 >= 0.0 && t.lr0.is_finite()),
            ("lr_decay_factor", t.lr_decay_factor > 0.0 && t.lr_decay_factor.is_finite()),
            ("momentum", (0.0..1.0).contains(&t.momentum)),
            ("weight_decay", t.weight_decay >= 0.0 && t.weight_decay.is_finite()),
        ] {
            if !ok {
                return err(&format!("/train/{key}"), "out of range".into());
            }
        }
        if !(self.attack.epsilon > 0.0) || !self.attack.epsilon.is_finite() {
            return err("/attack/epsilon", "adversarial training needs a finite epsilon > 0".into());
        }
        if let Err(e) = self.attack.validate() {
            return err("/attack/alpha", e.to_string());
        }
        if let Err(e) = self.train_config(Regime::Adversarial, 0).validate() {
            return err("/train", e.to_string());
        }
        let a = &self.analysis;
        if let Err(e) = Corruption::GaussNoise.at_level(a.noise_level) {
            return err("/analysis/noise_level", e.to_string());
        }
        for (i, &g) in a.scramble_grids.iter().enumerate() {
            if let Err(e) = (Distortion::Scramble { grid: g }).validate() {
                return err(&format!("/analysis/scramble_grids/{i}"), e.to_string());
            }
        }
        if let Err(e) = (Distortion::Bw { threshold: a.bw_threshold }).validate() {
            return err("/analysis/bw_threshold", e.to_string());
        }
        let net = build(&self.arch, 0).expect("arch validated above");
        for (key, layer) in [
            ("noise_layer", Some(&a.noise_layer)),
            ("match_layer", Some(&a.match_layer)),
            ("dissect_layer", a.dissect_layer.as_ref()),
        ] {
            if let Some(l) = layer {
                if let Err(e) = net.layer_width(l) {
                    return err(&format!("/analysis/{key}"), e.to_string());
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self, regime: Regime, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            regime,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            attack: Some(self.attack),
            seed,
            adv_eval_every: t.adv_eval_every,
            eps_warmup_epochs: t.eps_warmup_epochs,
        }
    }

    pub fn dissect_layer(&self) -> String {
        self.analysis
            .dissect_layer
            .clone()
            .unwrap_or_else(|| build(&self.arch, 0).expect("validated arch").last_conv())
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

/// Every shard one seed needs.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: DatasetShard,
    pub val: DatasetShard,
    pub texrand_train: DatasetShard,
    pub conflict: DatasetShard,
    pub probe: DatasetShard,
    pub test: DatasetShard,
}

/// Shard names in the order [`SeedData::shards`] returns them.
pub const SHARD_NAMES: [&str; 6] = ["train", "val", "texrand_train", "conflict", "probe", "test"];

/// Generator seed for one shard purpose under an experiment seed.
pub fn shard_seed(seed: u64, purpose: usize) -> u64 {
    seed.wrapping_mul(16).wrapping_add(purpose as u64)
}

impl SeedData {
    pub fn generate(sizes: &DataSizes, seed: u64) -> Result<Self> {
        Ok(Self {
            train: gen_train(shard_seed(seed, 0), sizes.train_per_class)?,
            val: gen_train(shard_seed(seed, 1), sizes.val_per_class)?,
            texrand_train: gen_texture_randomized(shard_seed(seed, 2), sizes.train_per_class)?,
            conflict: gen_cue_conflict(shard_seed(seed, 3), sizes.conflict_pairs)?,
            probe: gen_texture_randomized(shard_seed(seed, 4), sizes.probe_per_class)?,
            test: gen_train(shard_seed(seed, 5), sizes.test_per_class)?,
        })
    }

    pub fn shards(&self) -> [&DatasetShard; 6] {
        [
            &self.train,
            &self.val,
            &self.texrand_train,
            &self.conflict,
            &self.probe,
            &self.test,
        ]
    }

    pub fn from_shards(mut v: Vec<DatasetShard>) -> Result<Self> {
        if v.len() != SHARD_NAMES.len() {
            return Err(Error::Config(format!("expected {} shards, got {}", SHARD_NAMES.len(), v.len())));
        }
        let test = v.pop().expect("len checked");
        let probe = v.pop().expect("len checked");
        let conflict = v.pop().expect("len checked");
        let texrand_train = v.pop().expect("len checked");
        let val = v.pop().expect("len checked");
        let train = v.pop().expect("len checked");
        Ok(Self {
            train,
            val,
            texrand_train,
            conflict,
            probe,
            test,
        })
    }

    /// Training shard for a regime.
    pub fn train_shard(&self, regime: Regime) -> &DatasetShard {
        match regime {
            Regime::TextureRandomized => &self.texrand_train,
            _ => &self.train,
        }
    }
}

/// Trains one regime from a fresh `build(arch, seed)`.
pub fn train_regime(cfg: &ExperimentConfig, data: &SeedData, regime: Regime, seed: u64) -> Result<(Network, TrainLog)> {
    let net = build(&cfg.arch, seed)?;
    train(net, data.train_shard(regime), &data.val, &cfg.train_config(regime, seed))
}

/// Per-model measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub regime: Regime,
    pub attack: AdvEval,
    pub bias: BiasReport,
    pub filter_tv: Vec<LayerTv>,
    pub noise_tv: Vec<ChannelTv>,
    pub dissect: Vec<ConceptProfile>,
    pub categories: CategoryCounts,
    pub mean_diversity: f64,
    pub ablation: Vec<AblationScore>,
    /// `(distortion label, accuracy)` on the both-correct subset; empty for
    /// models outside the standard/adversarial pair.
    pub distortion: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub models: Vec<ModelReport>,
    pub eval_subset: EvalSubset,
    /// Standard vs adversarial filters of the match layer.
    pub matches: Vec<FilterMatch>,
}

impl SeedReport {
    pub fn model(&self, regime: Regime) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.regime == regime)
    }
}

/// The distortions scored on the both-correct subset, in table order.
pub fn distortion_suite(cfg: &AnalysisSettings) -> Result<Vec<Distortion>> {
    let mut out: Vec<Distortion> = cfg.scramble_grids.iter().map(|&grid| Distortion::Scramble { grid }).collect();
    for c in Corruption::ALL {
        for level in 1..=3 {
            out.push(c.at_level(level)?);
        }
    }
    out.push(Distortion::Bw {
        threshold: cfg.bw_threshold,
    });
    out.push(Distortion::Silhouette);
    Ok(out)
}

/// Distorts a shard with a seed derived from the experiment seed.
fn distorted(shard: &DatasetShard, d: &Distortion, seed: u64, k: usize) -> Result<DatasetShard> {
    apply_shard(shard, d, shard_seed(seed, 100 + k))
}

/// The both-correct subset of the test shard and its noisy copy.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub subset: EvalSubset,
    pub clean: DatasetShard,
    pub noisy: DatasetShard,
}

pub fn eval_inputs(cfg: &ExperimentConfig, test: &DatasetShard, std_net: &Network, adv_net: &Network, seed: u64) -> Result<EvalInputs> {
    let subset = build_eval_subset(std_net, adv_net, test)?;
    let clean = test.subset(&subset.indices);
    let noise = Corruption::GaussNoise.at_level(cfg.analysis.noise_level)?;
    let noisy = distorted(&clean, &noise, seed, 0)?;
    Ok(EvalInputs { subset, clean, noisy })
}

/// Every suite distortion applied to `clean`, labelled.
pub fn distorted_subsets(cfg: &ExperimentConfig, clean: &DatasetShard, seed: u64) -> Result<Vec<(String, DatasetShard)>> {
    distortion_suite(&cfg.analysis)?
        .iter()
        .enumerate()
        .map(|(k, d)| Ok((d.label(), distorted(clean, d, seed, k + 1)?)))
        .collect()
}

/// Accuracy on the clean subset (labelled "clean") and on each distorted copy.
pub fn distortion_accuracies(net: &Network, clean: &DatasetShard, distorted: &[(String, DatasetShard)]) -> Result<Vec<(String, f64)>> {
    let mut out = vec![("clean".to_string(), analysis::accuracy(net, clean)?)];
    for (label, shard) in distorted {
        out.push((label.clone(), analysis::accuracy(net, shard)?));
    }
    Ok(out)
}

/// Clean-vs-noisy activation TV of the configured layer; empty when the
/// subset is.
pub fn noise_tv(cfg: &ExperimentConfig, net: &Network, inputs: &EvalInputs) -> Result<Vec<ChannelTv>> {
    if inputs.clean.is_empty() {
        return Ok(Vec::new());
    }
    activation_tv(net, &inputs.clean, &inputs.noisy, &cfg.analysis.noise_layer)
}

/// Runs every analysis on one seed's models. `models` must contain the
/// standard and adversarial regimes; others are analysed where meaningful.
pub fn analyze_seed(cfg: &ExperimentConfig, data: &SeedData, models: &[(Regime, Network)], seed: u64) -> Result<SeedReport> {
    let get = |r: Regime| {
        models
            .iter()
            .find(|(x, _)| *x == r)
            .map(|(_, n)| n)
            .ok_or_else(|| Error::Config(format!("analysis needs a {r} model")))
    };
    let (std_net, adv_net) = (get(Regime::Standard)?, get(Regime::Adversarial)?);
    let inputs = eval_inputs(cfg, &data.test, std_net, adv_net, seed)?;
    let distorted_subs = distorted_subsets(cfg, &inputs.clean, seed)?;
    let layer = cfg.dissect_layer();

    let mut reports = Vec::new();
    for (regime, net) in models {
        let profiles = dissect(net, &data.probe, &layer)?;
        let distortion = if matches!(regime, Regime::Standard | Regime::Adversarial) {
            distortion_accuracies(net, &inputs.clean, &distorted_subs)?
        } else {
            Vec::new()
        };
        reports.push(ModelReport {
            regime: *regime,
            attack: attack::evaluate(net, &data.test, &cfg.attack, 256)?,
            bias: shape_bias(net, &data.conflict)?,
            filter_tv: filter_tv(net)?,
            noise_tv: noise_tv(cfg, net, &inputs)?,
            categories: category_counts(&profiles),
            mean_diversity: mean_diversity(&profiles),
            dissect: profiles,
            ablation: ablation_scores(net, &data.conflict, &layer)?,
            distortion,
        });
    }
    Ok(SeedReport {
        seed,
        models: reports,
        eval_subset: inputs.subset,
        matches: match_filters(std_net, adv_net, &cfg.analysis.match_layer)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_reports_pointer() {
        let err = ExperimentConfig::from_json(r#"{"data": {"train_per_clas": 3}}"#).unwrap_err();
        assert_eq!(err.pointer, "/data/train_per_clas");
        let err = ExperimentConfig::from_json(r#"{"attack": {"epsilon": "big"}}"#).unwrap_err();
        assert_eq!(err.pointer, "/attack/epsilon");
        let err = ExperimentConfig::from_json(r#"{"analysis": {"scramble_grids": [1, 3]}}"#).unwrap_err();
        assert_eq!(err.pointer, "/analysis/scramble_grids/1");
    }
}
