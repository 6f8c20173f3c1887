//! One function per pipeline step. Each reads its inputs from the run
//! directory, writes its outputs there and returns the manifest records.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use robustlab::analysis::{ablation_scores, dissect, filter_tv, match_filters, shape_bias};
use robustlab::attack;
use robustlab::checks::{self, CheckResult};
use robustlab::data::{export_png, read_shard, write_shard, DatasetShard};
use robustlab::distort::{apply_shard, Corruption, Distortion};
use robustlab::experiment::{
    distorted_subsets, distortion_accuracies, eval_inputs, noise_tv, shard_seed, ExperimentConfig, SeedData,
    SHARD_NAMES,
};
use robustlab::model::{self, Network, Regime};
use robustlab::report::render_report;
use robustlab::tables::{self, merge_csv, model_name, write_csv, SeedTables};

use crate::layout::RunDir;
use crate::manifest::{StepRecord, Step};
use crate::CliError;

pub type StepResult = Result<Vec<StepRecord>, CliError>;

/// Everything a step needs besides its own arguments.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub run: RunDir,
    pub config_hash: String,
    /// Regimes selected with `--regime`, or all of them.
    pub regimes: Vec<Regime>,
    /// Whether `--regime` was given; then missing checkpoints are errors.
    pub regime_explicit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalysisKind {
    Bias,
    Tv,
    Match,
    NoiseTv,
    Dissect,
    Ablate,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 6] = [
        AnalysisKind::Bias,
        AnalysisKind::Tv,
        AnalysisKind::Match,
        AnalysisKind::NoiseTv,
        AnalysisKind::Dissect,
        AnalysisKind::Ablate,
    ];

    fn name(self) -> &'static str {
        match self {
            AnalysisKind::Bias => "bias",
            AnalysisKind::Tv => "tv",
            AnalysisKind::Match => "match",
            AnalysisKind::NoiseTv => "noise-tv",
            AnalysisKind::Dissect => "dissect",
            AnalysisKind::Ablate => "ablate",
        }
    }
}

impl Ctx {
    fn finish(&self, step: Step) -> Result<StepRecord, CliError> {
        Ok(step.finish(&self.run, &self.config_hash)?)
    }

    fn model_name(&self, regime: Regime, seed: u64) -> String {
        model_name(&self.cfg.arch, regime.name(), seed)
    }

    fn shard(&self, seed: u64, name: &str, step: &mut Step) -> Result<DatasetShard, CliError> {
        let p = self.run.shard(seed, name);
        require(&p)?;
        step.input(&p);
        Ok(read_shard(&p)?)
    }

    fn model(&self, seed: u64, regime: Regime, step: &mut Step) -> Result<Network, CliError> {
        let p = self.run.checkpoint(seed, regime);
        require(&p)?;
        step.input(&p);
        Ok(model::load_as(&p, &self.cfg.arch)?)
    }

    /// Checkpoints of the selected regimes that exist. Missing ones are an
    /// error only when `--regime` named them, or when none exist at all.
    fn models(&self, seed: u64, step: &mut Step) -> Result<Vec<(Regime, Network)>, CliError> {
        let mut out = Vec::new();
        for &r in &self.regimes {
            let p = self.run.checkpoint(seed, r);
            if p.exists() || self.regime_explicit {
                out.push((r, self.model(seed, r, step)?));
            }
        }
        if out.is_empty() {
            return Err(CliError::Missing(format!(
                "no checkpoints under {} (run `train` first)",
                self.run.models(seed).display()
            )));
        }
        Ok(out)
    }

    fn pair(&self, seed: u64, step: &mut Step) -> Result<(Network, Network), CliError> {
        Ok((
            self.model(seed, Regime::Standard, step)?,
            self.model(seed, Regime::Adversarial, step)?,
        ))
    }
}

fn require(p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(p.display().to_string()))
    }
}

fn files_under(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.extend(files_under(&p)?);
        } else {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn gen_data(ctx: &Ctx, seed: u64, png: bool) -> StepResult {
    let mut step = Step::new(format!("gen-data seed{seed}"));
    let data = SeedData::generate(&ctx.cfg.data, seed)?;
    fs::create_dir_all(ctx.run.data(seed))?;
    for (name, shard) in SHARD_NAMES.iter().zip(data.shards()) {
        let p = ctx.run.shard(seed, name);
        write_shard(shard, &p)?;
        step.output(&p);
        if png {
            let dir = ctx.run.data(seed).join("png").join(name);
            export_png(shard, &dir)?;
            for f in files_under(&dir)? {
                step.output(&f);
            }
        }
    }
    Ok(vec![ctx.finish(step)?])
}

pub fn train(ctx: &Ctx, seed: u64, regime: Regime) -> StepResult {
    let mut step = Step::new(format!("train seed{seed} {regime}"));
    let train_name = if regime == Regime::TextureRandomized { "texrand_train" } else { "train" };
    let train_shard = ctx.shard(seed, train_name, &mut step)?;
    let val = ctx.shard(seed, "val", &mut step)?;
    let net = model::build(&ctx.cfg.arch, seed)?;
    let (net, log) = robustlab::train::train(net, &train_shard, &val, &ctx.cfg.train_config(regime, seed))?;
    fs::create_dir_all(ctx.run.models(seed))?;
    let ck = ctx.run.checkpoint(seed, regime);
    model::save(&net, &ck)?;
    step.output(&ck);
    let lp = ctx.run.train_log(seed, regime);
    log.write_csv(&lp)?;
    step.output(&lp);
    if let Some(last) = log.last() {
        eprintln!(
            "trained {} in {:.0}s: val acc {:.4}{}",
            ctx.model_name(regime, seed),
            step_seconds(&log),
            last.val_acc,
            last.adv_acc.map(|a| format!(", val adv acc {a:.4}")).unwrap_or_default()
        );
    }
    Ok(vec![ctx.finish(step)?])
}

fn step_seconds(log: &robustlab::train::TrainLog) -> f64 {
    log.rows.iter().map(|r| r.seconds).sum()
}

pub fn attack_eval(ctx: &Ctx, seed: u64) -> StepResult {
    let mut step = Step::new(format!("attack-eval seed{seed}"));
    let test = ctx.shard(seed, "test", &mut step)?;
    let models = ctx.models(seed, &mut step)?;
    let rows = models
        .iter()
        .map(|(r, net)| {
            let e = attack::evaluate(net, &test, &ctx.cfg.attack, 256)?;
            Ok(tables::attack_row(&ctx.model_name(*r, seed), r.name(), &ctx.cfg.attack, &e))
        })
        .collect::<robustlab::Result<Vec<_>>>()?;
    let p = ctx.run.analysis(seed).join("attack.csv");
    fs::create_dir_all(ctx.run.analysis(seed))?;
    merge_csv(&p, rows)?;
    step.output(&p);
    Ok(vec![ctx.finish(step)?])
}

/// Accuracy of the standard and adversarial models on every suite
/// distortion of the both-correct subset.
pub fn distortion_suite(ctx: &Ctx, seed: u64) -> StepResult {
    let mut step = Step::new(format!("distort seed{seed} suite"));
    let test = ctx.shard(seed, "test", &mut step)?;
    let (std_net, adv_net) = ctx.pair(seed, &mut step)?;
    let inputs = eval_inputs(&ctx.cfg, &test, &std_net, &adv_net, seed)?;
    let subs = distorted_subsets(&ctx.cfg, &inputs.clean, seed)?;
    let dir = ctx.run.analysis(seed);
    fs::create_dir_all(&dir)?;
    let sp = dir.join("eval_subset.json");
    fs::write(&sp, serde_json::to_string(&inputs.subset)? + "\n")?;
    step.output(&sp);
    let mut rows = Vec::new();
    for (r, net) in [(Regime::Standard, &std_net), (Regime::Adversarial, &adv_net)] {
        let acc = distortion_accuracies(net, &inputs.clean, &subs)?;
        rows.extend(tables::distortion_rows(&ctx.model_name(r, seed), r.name(), inputs.subset.len(), &acc));
    }
    let p = dir.join("distortion.csv");
    write_csv(&p, &rows)?;
    step.output(&p);
    Ok(vec![ctx.finish(step)?])
}

/// Parses `--kind` with its `--value` or `--level`.
pub fn parse_distortion(kind: &str, value: Option<f32>, level: Option<usize>) -> Result<Distortion, CliError> {
    let bad = |m: String| CliError::Config(robustlab::experiment::ConfigError { pointer: "--kind".into(), message: m });
    if let Some(c) = Corruption::parse(kind) {
        return match (value, level) {
            (_, Some(l)) => c.at_level(l).map_err(|e| bad(e.to_string())),
            (Some(v), None) => Ok(match c {
                Corruption::GaussNoise => Distortion::GaussNoise { sigma: v },
                Corruption::GaussBlur => Distortion::GaussBlur { sigma: v },
                Corruption::Contrast => Distortion::Contrast { factor: v },
            }),
            (None, None) => Err(bad(format!("{kind} needs --value or --level"))),
        };
    }
    let d = match (kind, value) {
        ("scramble", Some(v)) if v.fract() == 0.0 && v >= 0.0 => Distortion::Scramble { grid: v as usize },
        ("scramble", _) => return Err(bad("scramble needs an integer grid as --value".into())),
        ("bw", v) => Distortion::Bw {
            threshold: v.unwrap_or(robustlab::distort::BW_THRESHOLD),
        },
        ("silhouette", _) => Distortion::Silhouette,
        _ => return Err(bad(format!("unknown distortion {kind:?}"))),
    };
    Ok(d)
}

/// Writes a distorted copy of one shard under `data/seed{s}/distorted/`.
pub fn distort_shard(ctx: &Ctx, seed: u64, shard: &str, d: &Distortion, png: bool) -> StepResult {
    d.validate()?;
    let mut step = Step::new(format!("distort seed{seed} {shard} {}", d.label()));
    let src = ctx.shard(seed, shard, &mut step)?;
    let out = apply_shard(&src, d, shard_seed(seed, 200))?;
    let dir = ctx.run.data(seed).join("distorted");
    fs::create_dir_all(&dir)?;
    let stem = format!("{shard}_{}", d.label());
    let p = dir.join(format!("{stem}.rlsh"));
    write_shard(&out, &p)?;
    step.output(&p);
    if png {
        let pd = dir.join("png").join(&stem);
        export_png(&out, &pd)?;
        for f in files_under(&pd)? {
            step.output(&f);
        }
    }
    Ok(vec![ctx.finish(step)?])
}

pub fn analyze(ctx: &Ctx, seed: u64, kind: AnalysisKind) -> StepResult {
    let mut step = Step::new(format!("analyze seed{seed} {}", kind.name()));
    let dir = ctx.run.analysis(seed);
    fs::create_dir_all(&dir)?;
    let name = |r: Regime| ctx.model_name(r, seed);
    let layer = ctx.cfg.dissect_layer();
    match kind {
        AnalysisKind::Bias => {
            let conflict = ctx.shard(seed, "conflict", &mut step)?;
            let (mut rows, mut per_shape) = (Vec::new(), Vec::new());
            for (r, net) in ctx.models(seed, &mut step)? {
                let (b, s) = tables::bias_rows(&name(r), r.name(), &shape_bias(&net, &conflict)?);
                rows.push(b);
                per_shape.extend(s);
            }
            for (file, res) in [
                ("bias.csv", merge_csv(&dir.join("bias.csv"), rows)),
                ("bias_per_shape.csv", merge_csv(&dir.join("bias_per_shape.csv"), per_shape)),
            ] {
                res?;
                step.output(&dir.join(file));
            }
        }
        AnalysisKind::Tv => {
            let mut rows = Vec::new();
            for (r, net) in ctx.models(seed, &mut step)? {
                rows.extend(tables::filter_tv_rows(&name(r), r.name(), &filter_tv(&net)?));
            }
            merge_csv(&dir.join("filter_tv.csv"), rows)?;
            step.output(&dir.join("filter_tv.csv"));
        }
        AnalysisKind::Match => {
            let (a, b) = ctx.pair(seed, &mut step)?;
            let l = &ctx.cfg.analysis.match_layer;
            let rows = tables::match_rows(
                &name(Regime::Standard),
                &name(Regime::Adversarial),
                l,
                &match_filters(&a, &b, l)?,
            );
            write_csv(&dir.join("match.csv"), &rows)?;
            step.output(&dir.join("match.csv"));
        }
        AnalysisKind::NoiseTv => {
            let test = ctx.shard(seed, "test", &mut step)?;
            let (a, b) = ctx.pair(seed, &mut step)?;
            let inputs = eval_inputs(&ctx.cfg, &test, &a, &b, seed)?;
            let mut rows = Vec::new();
            for (r, net) in ctx.models(seed, &mut step)? {
                let tv = noise_tv(&ctx.cfg, &net, &inputs)?;
                rows.extend(tables::noise_tv_rows(&name(r), r.name(), &ctx.cfg.analysis.noise_layer, &tv));
            }
            merge_csv(&dir.join("noise_tv.csv"), rows)?;
            step.output(&dir.join("noise_tv.csv"));
        }
        AnalysisKind::Dissect => {
            let probe = ctx.shard(seed, "probe", &mut step)?;
            let (mut rows, mut iou) = (Vec::new(), Vec::new());
            for (r, net) in ctx.models(seed, &mut step)? {
                let (d, i) = tables::dissect_rows(&name(r), r.name(), &dissect(&net, &probe, &layer)?);
                rows.extend(d);
                iou.extend(i);
            }
            merge_csv(&dir.join("dissect.csv"), rows)?;
            merge_csv(&dir.join("dissect_iou.csv"), iou)?;
            step.output(&dir.join("dissect.csv"));
            step.output(&dir.join("dissect_iou.csv"));
        }
        AnalysisKind::Ablate => {
            let conflict = ctx.shard(seed, "conflict", &mut step)?;
            let mut rows = Vec::new();
            for (r, net) in ctx.models(seed, &mut step)? {
                rows.extend(tables::ablation_rows(&name(r), r.name(), &ablation_scores(&net, &conflict, &layer)?));
            }
            merge_csv(&dir.join("ablation.csv"), rows)?;
            step.output(&dir.join("ablation.csv"));
        }
    }
    Ok(vec![ctx.finish(step)?])
}

pub fn report(ctx: &Ctx) -> StepResult {
    let mut step = Step::new("report");
    for seed in robustlab::report::analysis_seeds(&ctx.run.root)? {
        let dir = ctx.run.analysis(seed);
        for f in tables::TABLE_FILES {
            if dir.join(f).exists() {
                step.input(&dir.join(f));
            }
        }
    }
    if ctx.run.acceptance().exists() {
        step.input(&ctx.run.acceptance());
    }
    for p in render_report(&ctx.run.root)? {
        step.output(&p);
    }
    Ok(vec![ctx.finish(step)?])
}

/// Evaluates the acceptance checks on the configured seeds' tables and
/// writes `acceptance.json`.
pub fn acceptance(ctx: &Ctx) -> Result<(Vec<CheckResult>, StepRecord), CliError> {
    let mut step = Step::new("acceptance");
    let mut seeds = Vec::new();
    for &s in &ctx.cfg.seeds {
        let dir = ctx.run.analysis(s);
        for f in tables::TABLE_FILES {
            if dir.join(f).exists() {
                step.input(&dir.join(f));
            }
        }
        seeds.push(SeedTables::read(&dir, s)?);
    }
    let results = checks::evaluate(&seeds);
    fs::write(ctx.run.acceptance(), serde_json::to_string_pretty(&results)? + "\n")?;
    step.output(&ctx.run.acceptance());
    Ok((results, ctx.finish(step)?))
}

/// Trains every (seed, regime) pair concurrently.
pub fn train_all(ctx: &Ctx) -> StepResult {
    let jobs: Vec<(u64, Regime)> = ctx
        .cfg
        .seeds
        .iter()
        .flat_map(|&s| ctx.regimes.iter().map(move |&r| (s, r)))
        .collect();
    let recs: Vec<StepResult> = jobs.par_iter().map(|&(s, r)| train(ctx, s, r)).collect();
    let mut out = Vec::new();
    for r in recs {
        out.extend(r?);
    }
    Ok(out)
}
