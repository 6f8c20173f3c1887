//! CSV tables emitted by the analyses, one directory per seed.
//!
//! Every table has a fixed header (the field names below, in order). A
//! table that was never produced is `None` and has no file.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{AblationScore, BiasReport, ChannelTv, ConceptProfile, FilterMatch, LayerTv};
use crate::attack::{AdvEval, AttackConfig};
use crate::error::Result;
use crate::experiment::{ExperimentConfig, SeedReport};
use crate::model::Regime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub model: String,
    pub regime: String,
    pub n: usize,
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub adv_acc_half_eps: f64,
    pub max_norm_excess: f64,
    pub min_pixel: f32,
    pub max_pixel: f32,
    pub zero_grad_skips: usize,
    pub degenerate_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub model: String,
    pub regime: String,
    pub n: usize,
    pub shape: usize,
    pub texture: usize,
    pub shape_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasShapeRow {
    pub model: String,
    pub regime: String,
    pub shape_class: String,
    pub n: usize,
    pub shape: usize,
    pub texture: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTvRow {
    pub model: String,
    pub regime: String,
    pub layer: String,
    pub mean_tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub model_a: String,
    pub model_b: String,
    pub layer: String,
    pub idx_a: usize,
    pub idx_b: usize,
    pub spearman_r: f64,
    pub tv_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTvRow {
    pub model: String,
    pub regime: String,
    pub layer: String,
    pub channel: usize,
    pub tv_clean: f64,
    pub tv_noisy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissectRow {
    pub model: String,
    pub regime: String,
    pub layer: String,
    pub channel: usize,
    pub main_label: String,
    pub category: String,
    pub main_iou: f64,
    pub diversity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouRow {
    pub model: String,
    pub regime: String,
    pub layer: String,
    pub channel: usize,
    pub concept: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub regime: String,
    pub layer: String,
    pub channel: usize,
    pub shape_score: usize,
    pub texture_score: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionRow {
    pub model: String,
    pub regime: String,
    pub distortion: String,
    pub n: usize,
    pub accuracy: f64,
}

/// All tables for one seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedTables {
    pub seed: u64,
    pub attack: Option<Vec<AttackRow>>,
    pub bias: Option<Vec<BiasRow>>,
    pub bias_per_shape: Option<Vec<BiasShapeRow>>,
    pub filter_tv: Option<Vec<FilterTvRow>>,
    pub matches: Option<Vec<MatchRow>>,
    pub noise_tv: Option<Vec<NoiseTvRow>>,
    pub dissect: Option<Vec<DissectRow>>,
    pub dissect_iou: Option<Vec<IouRow>>,
    pub ablation: Option<Vec<AblationRow>>,
    pub distortion: Option<Vec<DistortionRow>>,
}

/// File names, in the order tables are written.
pub const TABLE_FILES: [&str; 10] = [
    "attack.csv",
    "bias.csv",
    "bias_per_shape.csv",
    "filter_tv.csv",
    "match.csv",
    "noise_tv.csv",
    "dissect.csv",
    "dissect_iou.csv",
    "ablation.csv",
    "distortion.csv",
];

/// Display name of a trained model, e.g. `mini3-standard-s0`.
pub fn model_name(arch: &str, regime: &str, seed: u64) -> String {
    format!("{arch}-{regime}-s{seed}")
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

fn read_opt<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<Option<Vec<T>>> {
    let p = dir.join(name);
    if p.exists() {
        read_csv(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Rows that belong to one training regime.
pub trait RegimeRow {
    fn regime(&self) -> &str;
}

macro_rules! regime_rows {
    ($($t:ty),*) => {
        $(impl RegimeRow for $t {
            fn regime(&self) -> &str {
                &self.regime
            }
        })*
    };
}

regime_rows!(AttackRow, BiasRow, BiasShapeRow, FilterTvRow, NoiseTvRow, DissectRow, IouRow, AblationRow, DistortionRow);

fn regime_order(r: &str) -> u32 {
    Regime::parse(r).map(Regime::code).unwrap_or(u32::MAX)
}

/// Replaces the rows of the regimes present in `new` within the CSV at
/// `path` (if any), keeping other regimes, ordered by regime.
pub fn merge_csv<T: RegimeRow + Serialize + DeserializeOwned>(path: &Path, new: Vec<T>) -> Result<()> {
    let replaced: Vec<String> = new.iter().map(|r| r.regime().to_string()).collect();
    let mut rows: Vec<T> = if path.exists() {
        read_csv::<T>(path)?
            .into_iter()
            .filter(|r| !replaced.iter().any(|x| x == r.regime()))
            .collect()
    } else {
        Vec::new()
    };
    rows.extend(new);
    rows.sort_by_key(|r| regime_order(r.regime()));
    write_csv(path, &rows)
}

pub fn attack_row(model: &str, regime: &str, cfg: &AttackConfig, e: &AdvEval) -> AttackRow {
    AttackRow {
        model: model.into(),
        regime: regime.into(),
        n: e.n,
        epsilon: cfg.epsilon,
        alpha: cfg.alpha,
        steps: cfg.steps,
        clean_acc: e.clean_accuracy,
        adv_acc: e.adv_accuracy,
        adv_acc_half_eps: e.half_eps_accuracy,
        max_norm_excess: e.max_norm_excess,
        min_pixel: e.min_pixel,
        max_pixel: e.max_pixel,
        zero_grad_skips: e.zero_grad_skips,
        degenerate_exact: e.degenerate_exact,
    }
}

pub fn bias_rows(model: &str, regime: &str, b: &BiasReport) -> (BiasRow, Vec<BiasShapeRow>) {
    let row = BiasRow {
        model: model.into(),
        regime: regime.into(),
        n: b.n_evaluated,
        shape: b.n_shape,
        texture: b.n_texture,
        shape_bias: b.shape_bias,
    };
    let per_shape = b
        .per_shape
        .iter()
        .map(|s| BiasShapeRow {
            model: model.into(),
            regime: regime.into(),
            shape_class: s.shape.clone(),
            n: s.n,
            shape: s.shape_decisions,
            texture: s.texture_decisions,
        })
        .collect();
    (row, per_shape)
}

pub fn filter_tv_rows(model: &str, regime: &str, layers: &[LayerTv]) -> Vec<FilterTvRow> {
    layers
        .iter()
        .map(|l| FilterTvRow {
            model: model.into(),
            regime: regime.into(),
            layer: l.layer.clone(),
            mean_tv: l.mean_tv,
        })
        .collect()
}

pub fn match_rows(model_a: &str, model_b: &str, layer: &str, m: &[FilterMatch]) -> Vec<MatchRow> {
    m.iter()
        .map(|m| MatchRow {
            model_a: model_a.into(),
            model_b: model_b.into(),
            layer: layer.into(),
            idx_a: m.idx_a,
            idx_b: m.idx_b,
            spearman_r: m.spearman_r,
            tv_diff: m.tv_diff,
        })
        .collect()
}

pub fn noise_tv_rows(model: &str, regime: &str, layer: &str, rows: &[ChannelTv]) -> Vec<NoiseTvRow> {
    rows.iter()
        .map(|c| NoiseTvRow {
            model: model.into(),
            regime: regime.into(),
            layer: layer.into(),
            channel: c.channel,
            tv_clean: c.tv_clean,
            tv_noisy: c.tv_noisy,
        })
        .collect()
}

pub fn dissect_rows(model: &str, regime: &str, profiles: &[ConceptProfile]) -> (Vec<DissectRow>, Vec<IouRow>) {
    let mut dis = Vec::new();
    let mut iou = Vec::new();
    for p in profiles {
        dis.push(DissectRow {
            model: model.into(),
            regime: regime.into(),
            layer: p.channel.layer.clone(),
            channel: p.channel.channel,
            main_label: p.main_label.clone(),
            category: p.category.clone(),
            main_iou: p.main_iou,
            diversity: p.diversity,
        });
        for (concept, &v) in &p.iou {
            iou.push(IouRow {
                model: model.into(),
                regime: regime.into(),
                layer: p.channel.layer.clone(),
                channel: p.channel.channel,
                concept: concept.clone(),
                iou: v,
            });
        }
    }
    (dis, iou)
}

pub fn ablation_rows(model: &str, regime: &str, scores: &[AblationScore]) -> Vec<AblationRow> {
    scores
        .iter()
        .map(|a| AblationRow {
            model: model.into(),
            regime: regime.into(),
            layer: a.channel.layer.clone(),
            channel: a.channel.channel,
            shape_score: a.shape_score,
            texture_score: a.texture_score,
        })
        .collect()
}

pub fn distortion_rows(model: &str, regime: &str, n: usize, acc: &[(String, f64)]) -> Vec<DistortionRow> {
    acc.iter()
        .map(|(label, a)| DistortionRow {
            model: model.into(),
            regime: regime.into(),
            distortion: label.clone(),
            n,
            accuracy: *a,
        })
        .collect()
}

impl SeedTables {
    /// Rows for every analysis in a report.
    pub fn from_report(report: &SeedReport, cfg: &ExperimentConfig) -> Self {
        let name = |r: Regime| model_name(&cfg.arch, r.name(), report.seed);
        let mut t = SeedTables {
            seed: report.seed,
            attack: Some(vec![]),
            bias: Some(vec![]),
            bias_per_shape: Some(vec![]),
            filter_tv: Some(vec![]),
            noise_tv: Some(vec![]),
            dissect: Some(vec![]),
            dissect_iou: Some(vec![]),
            ablation: Some(vec![]),
            distortion: Some(vec![]),
            matches: Some(match_rows(
                &name(Regime::Standard),
                &name(Regime::Adversarial),
                &cfg.analysis.match_layer,
                &report.matches,
            )),
        };
        fn push<T>(v: &mut Option<Vec<T>>, rows: impl IntoIterator<Item = T>) {
            v.get_or_insert_with(Vec::new).extend(rows);
        }
        for m in &report.models {
            let (model, regime) = (name(m.regime), m.regime.name());
            push(&mut t.attack, [attack_row(&model, regime, &cfg.attack, &m.attack)]);
            let (b, per_shape) = bias_rows(&model, regime, &m.bias);
            push(&mut t.bias, [b]);
            push(&mut t.bias_per_shape, per_shape);
            push(&mut t.filter_tv, filter_tv_rows(&model, regime, &m.filter_tv));
            push(&mut t.noise_tv, noise_tv_rows(&model, regime, &cfg.analysis.noise_layer, &m.noise_tv));
            let (d, iou) = dissect_rows(&model, regime, &m.dissect);
            push(&mut t.dissect, d);
            push(&mut t.dissect_iou, iou);
            push(&mut t.ablation, ablation_rows(&model, regime, &m.ablation));
            push(&mut t.distortion, distortion_rows(&model, regime, report.eval_subset.len(), &m.distortion));
        }
        t
    }

    /// Writes every present table into `dir` and returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        macro_rules! put {
            ($field:ident, $file:expr) => {
                if let Some(rows) = &self.$field {
                    let p = dir.join($file);
                    write_csv(&p, rows)?;
                    out.push(p);
                }
            };
        }
        put!(attack, "attack.csv");
        put!(bias, "bias.csv");
        put!(bias_per_shape, "bias_per_shape.csv");
        put!(filter_tv, "filter_tv.csv");
        put!(matches, "match.csv");
        put!(noise_tv, "noise_tv.csv");
        put!(dissect, "dissect.csv");
        put!(dissect_iou, "dissect_iou.csv");
        put!(ablation, "ablation.csv");
        put!(distortion, "distortion.csv");
        Ok(out)
    }

    /// Loads whatever tables exist in `dir`.
    pub fn read(dir: &Path, seed: u64) -> Result<Self> {
        Ok(SeedTables {
            seed,
            attack: read_opt(dir, "attack.csv")?,
            bias: read_opt(dir, "bias.csv")?,
            bias_per_shape: read_opt(dir, "bias_per_shape.csv")?,
            filter_tv: read_opt(dir, "filter_tv.csv")?,
            matches: read_opt(dir, "match.csv")?,
            noise_tv: read_opt(dir, "noise_tv.csv")?,
            dissect: read_opt(dir, "dissect.csv")?,
            dissect_iou: read_opt(dir, "dissect_iou.csv")?,
            ablation: read_opt(dir, "ablation.csv")?,
            distortion: read_opt(dir, "distortion.csv")?,
        })
    }
}
