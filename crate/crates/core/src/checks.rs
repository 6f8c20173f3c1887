//! Acceptance checks evaluated on the emitted tables, so the same numbers
//! back the report, `acceptance.json` and the test suite.

use serde::{Deserialize, Serialize};

use crate::tables::{AblationRow, DissectRow, DistortionRow, NoiseTvRow, SeedTables};

/// Slack allowed on the perturbation norm.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// Outcome of one acceptance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: String,
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

/// Median of `tv_noisy / tv_clean` over channels with nonzero clean TV.
pub fn median_noise_ratio<'a>(rows: impl IntoIterator<Item = &'a NoiseTvRow>) -> Option<f64> {
    let mut r: Vec<f64> = rows
        .into_iter()
        .filter(|c| c.tv_clean > 0.0)
        .map(|c| c.tv_noisy / c.tv_clean)
        .collect();
    if r.is_empty() {
        return None;
    }
    r.sort_by(f64::total_cmp);
    let m = r.len();
    Some(if m % 2 == 1 { r[m / 2] } else { (r[m / 2 - 1] + r[m / 2]) / 2.0 })
}

/// Mean shape and texture ablation scores over channels whose main label is
/// a texture concept, with the channel count.
pub fn texture_channel_scores(dissect: &[&DissectRow], ablation: &[&AblationRow]) -> (usize, f64, f64) {
    let picked: Vec<&&AblationRow> = ablation
        .iter()
        .filter(|a| {
            dissect
                .iter()
                .any(|p| p.layer == a.layer && p.channel == a.channel && p.category == "texture")
        })
        .collect();
    if picked.is_empty() {
        return (0, 0.0, 0.0);
    }
    let n = picked.len() as f64;
    let shape = picked.iter().map(|a| a.shape_score as f64).sum::<f64>() / n;
    let texture = picked.iter().map(|a| a.texture_score as f64).sum::<f64>() / n;
    (picked.len(), shape, texture)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn of<'a, T>(rows: &'a Option<Vec<T>>, regime: &str, get: impl Fn(&T) -> &str) -> Vec<&'a T> {
    rows.iter().flatten().filter(|r| get(r) == regime).collect()
}

const STD: &str = "standard";
const ADV: &str = "adversarial";
const TEX: &str = "texture-randomized";

type Outcome = Result<(bool, String), String>;

fn need<T>(v: Option<T>, what: &str) -> Result<T, String> {
    v.ok_or_else(|| format!("{what} not run"))
}

fn one<'a, T>(rows: &'a Option<Vec<T>>, regime: &str, get: impl Fn(&T) -> &str, what: &str) -> Result<&'a T, String> {
    need(rows.as_ref(), what)?;
    of(rows, regime, get)
        .into_iter()
        .next()
        .ok_or_else(|| format!("no {regime} row in {what}"))
}

fn attack_contract(t: &SeedTables) -> Outcome {
    let rows = need(t.attack.as_ref(), "attack-eval")?;
    if rows.is_empty() {
        return Err("attack table is empty".into());
    }
    let worst = rows.iter().map(|r| r.max_norm_excess).fold(f64::NEG_INFINITY, f64::max);
    let lo = rows.iter().map(|r| r.min_pixel).fold(f32::INFINITY, f32::min);
    let hi = rows.iter().map(|r| r.max_pixel).fold(f32::NEG_INFINITY, f32::max);
    let degenerate = rows.iter().all(|r| r.degenerate_exact);
    Ok((
        worst <= NORM_TOLERANCE && lo >= 0.0 && hi <= 1.0 && degenerate,
        format!("max norm excess {worst:.2e}, pixels [{lo}, {hi}], zero-budget attacks exact: {degenerate}"),
    ))
}

fn dist_mean(rows: &[&DistortionRow], pred: impl Fn(&str) -> bool) -> f64 {
    mean(rows.iter().filter(|r| pred(&r.distortion)).map(|r| r.accuracy))
}

fn is_scramble_coarse(l: &str) -> bool {
    l.starts_with("scramble_p") && l != "scramble_p1"
}

fn is_textureless(l: &str) -> bool {
    l.starts_with("bw_") || l == "silhouette"
}

/// Evaluates every output-level acceptance check. A check passes only if it
/// holds for every seed.
pub fn evaluate(seeds: &[SeedTables]) -> Vec<CheckResult> {
    type Check = (&'static str, &'static str, fn(&SeedTables) -> Outcome);
    let checks: [Check; 14] = [
        ("C3", "every attacked sample within the epsilon ball and inside [0,1]; zero steps and zero epsilon are exact no-ops", attack_contract),
        ("C4a", "standard clean accuracy >= 0.97", |t| {
            let s = one(&t.attack, STD, |r| &r.regime, "attack")?;
            Ok((s.clean_acc >= 0.97, format!("{:.4}", s.clean_acc)))
        }),
        ("C4b", "standard adversarial accuracy < 0.10", |t| {
            let s = one(&t.attack, STD, |r| &r.regime, "attack")?;
            Ok((s.adv_acc < 0.10, format!("{:.4}", s.adv_acc)))
        }),
        ("C4c", "adversarial adv accuracy >= standard adv accuracy + 0.30", |t| {
            let s = one(&t.attack, STD, |r| &r.regime, "attack")?;
            let a = one(&t.attack, ADV, |r| &r.regime, "attack")?;
            Ok((a.adv_acc >= s.adv_acc + 0.30, format!("{:.4} vs {:.4}", a.adv_acc, s.adv_acc)))
        }),
        ("C4d", "adversarial clean accuracy <= standard clean accuracy", |t| {
            let s = one(&t.attack, STD, |r| &r.regime, "attack")?;
            let a = one(&t.attack, ADV, |r| &r.regime, "attack")?;
            Ok((a.clean_acc <= s.clean_acc, format!("{:.4} vs {:.4}", a.clean_acc, s.clean_acc)))
        }),
        ("C5a", "shape bias: adversarial - standard >= 0.20", |t| {
            let s = one(&t.bias, STD, |r| &r.regime, "bias")?;
            let a = one(&t.bias, ADV, |r| &r.regime, "bias")?;
            Ok((
                a.shape_bias - s.shape_bias >= 0.20,
                format!("{:.4} vs {:.4}", a.shape_bias, s.shape_bias),
            ))
        }),
        ("C5b", "shape bias: texture-randomized >= standard", |t| {
            let s = one(&t.bias, STD, |r| &r.regime, "bias")?;
            let x = one(&t.bias, TEX, |r| &r.regime, "bias")?;
            Ok((x.shape_bias >= s.shape_bias, format!("{:.4} vs {:.4}", x.shape_bias, s.shape_bias)))
        }),
        ("C6", "conv1 mean filter TV: adversarial < standard", |t| {
            need(t.filter_tv.as_ref(), "tv")?;
            let tv = |regime: &str| {
                of(&t.filter_tv, regime, |r| &r.regime)
                    .into_iter()
                    .find(|r| r.layer == "conv1")
                    .map(|r| r.mean_tv)
                    .ok_or_else(|| format!("no conv1 TV for {regime}"))
            };
            let (ta, ts) = (tv(ADV)?, tv(STD)?);
            Ok((ta < ts, format!("{ta:.4} vs {ts:.4}")))
        }),
        ("C7", "median conv1 noisy/clean activation TV closer to 1 for adversarial", |t| {
            need(t.noise_tv.as_ref(), "noise-tv")?;
            let ratio = |regime: &str| {
                median_noise_ratio(of(&t.noise_tv, regime, |r| &r.regime))
                    .ok_or_else(|| format!("no live {regime} channels"))
            };
            let (ra, rs) = (ratio(ADV)?, ratio(STD)?);
            Ok(((ra - 1.0).abs() < (rs - 1.0).abs(), format!("{ra:.4} vs {rs:.4}")))
        }),
        ("C8a", "scrambled p in {2,4,8}: standard accuracy > adversarial (mean over p)", |t| {
            need(t.distortion.as_ref(), "distortion")?;
            let ms = dist_mean(&of(&t.distortion, STD, |r| &r.regime), is_scramble_coarse);
            let ma = dist_mean(&of(&t.distortion, ADV, |r| &r.regime), is_scramble_coarse);
            Ok((ms > ma, format!("{ms:.4} vs {ma:.4}")))
        }),
        ("C8b", "B&W and silhouette: adversarial accuracy > standard", |t| {
            need(t.distortion.as_ref(), "distortion")?;
            let s = of(&t.distortion, STD, |r| &r.regime);
            let a = of(&t.distortion, ADV, |r| &r.regime);
            let mut ok = true;
            let mut parts = Vec::new();
            for rs in s.iter().filter(|r| is_textureless(&r.distortion)) {
                let ra = a
                    .iter()
                    .find(|r| r.distortion == rs.distortion)
                    .ok_or_else(|| format!("no adversarial {} row", rs.distortion))?;
                ok &= ra.accuracy > rs.accuracy;
                parts.push(format!("{} {:.4} vs {:.4}", rs.distortion, ra.accuracy, rs.accuracy));
            }
            if parts.is_empty() {
                return Err("no B&W or silhouette rows".into());
            }
            Ok((ok, parts.join(", ")))
        }),
        ("C8c", "clean accuracy on the both-correct subset is exactly 1", |t| {
            need(t.distortion.as_ref(), "distortion")?;
            let clean: Vec<_> = t.distortion.iter().flatten().filter(|r| r.distortion == "clean").collect();
            if clean.is_empty() {
                return Err("no clean rows".into());
            }
            Ok((
                clean.iter().all(|r| r.accuracy == 1.0),
                clean.iter().map(|r| format!("{} {}", r.regime, r.accuracy)).collect::<Vec<_>>().join(", "),
            ))
        }),
        ("C9", "last conv layer: adversarial has more texture+color and fewer shape channels, lower mean diversity", |t| {
            need(t.dissect.as_ref(), "dissect")?;
            let stats = |regime: &str| {
                let rows = of(&t.dissect, regime, |r| &r.regime);
                let count = |c: &str| rows.iter().filter(|r| r.category == c).count();
                (
                    count("texture") + count("color"),
                    count("shape"),
                    mean(rows.iter().map(|r| r.diversity as f64)),
                )
            };
            let (tca, sha, dva) = stats(ADV);
            let (tcs, shs, dvs) = stats(STD);
            Ok((
                tca > tcs && sha < shs && dva < dvs,
                format!("tex+col {tca} vs {tcs}, shape {sha} vs {shs}, diversity {dva:.3} vs {dvs:.3}"),
            ))
        }),
        ("C10", "texture channels: adversarial mean shape score > 0 and smaller texture/shape ratio", |t| {
            need(t.dissect.as_ref(), "dissect")?;
            need(t.ablation.as_ref(), "ablate")?;
            let scores = |regime: &str| {
                texture_channel_scores(&of(&t.dissect, regime, |r| &r.regime), &of(&t.ablation, regime, |r| &r.regime))
            };
            let (na, sa, ta) = scores(ADV);
            let (ns, ss, ts) = scores(STD);
            let ratio = |t: f64, sh: f64| if sh > 0.0 { t / sh } else { f64::INFINITY };
            let (ra, rs) = (ratio(ta, sa), ratio(ts, ss));
            Ok((
                na > 0 && sa > 0.0 && ra < rs,
                format!("n {na}/{ns}, shape {sa:.3}/{ss:.3}, ratio {ra:.3} vs {rs:.3}"),
            ))
        }),
    ];
    let mut out: Vec<CheckResult> = checks
        .iter()
        .map(|(id, description, f)| {
            let mut passed = !seeds.is_empty();
            let mut details = Vec::new();
            for t in seeds {
                match f(t) {
                    Ok((ok, d)) => {
                        passed &= ok;
                        details.push(format!("seed {}: {d}", t.seed));
                    }
                    Err(e) => {
                        passed = false;
                        details.push(format!("seed {}: {e}", t.seed));
                    }
                }
            }
            CheckResult {
                id: id.to_string(),
                description: description.to_string(),
                passed,
                detail: details.join("; "),
            }
        })
        .collect();
    out.insert(1, threat_monotone(seeds));
    out
}

/// Seed-averaged accuracy at epsilon 0 (clean), epsilon/2 and epsilon must
/// not increase, for every regime.
fn threat_monotone(seeds: &[SeedTables]) -> CheckResult {
    let mut result = CheckResult {
        id: "C3m".into(),
        description: "seed-averaged accuracy non-increasing over epsilon in {0, eps/2, eps}".into(),
        passed: false,
        detail: String::new(),
    };
    let rows: Vec<_> = seeds.iter().filter_map(|t| t.attack.as_ref()).flatten().collect();
    if seeds.is_empty() || seeds.iter().any(|t| t.attack.is_none()) {
        result.detail = "attack-eval not run".into();
        return result;
    }
    let mut ok = !rows.is_empty();
    let mut parts = Vec::new();
    for regime in [STD, ADV, TEX] {
        let r: Vec<_> = rows.iter().filter(|r| r.regime == regime).collect();
        if r.is_empty() {
            continue;
        }
        let c = mean(r.iter().map(|r| r.clean_acc));
        let h = mean(r.iter().map(|r| r.adv_acc_half_eps));
        let f = mean(r.iter().map(|r| r.adv_acc));
        ok &= c >= h && h >= f;
        parts.push(format!("{regime} {c:.4} >= {h:.4} >= {f:.4}"));
    }
    result.passed = ok;
    result.detail = parts.join(", ");
    result
}
