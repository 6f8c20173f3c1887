//! Static HTML/SVG report rendered from the CSV tables of a run directory.
//!
//! Rendering only reads files, so running it twice on the same run
//! directory produces identical output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checks::CheckResult;
use crate::error::Result;
use crate::tables::SeedTables;

const NOT_RUN: &str = "<p class=\"not-run\">not run</p>";
const BAR_COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#8172b3"];

/// Seeds with an `analysis/seed{s}` directory, ascending.
pub fn analysis_seeds(run_dir: &Path) -> Result<Vec<u64>> {
    let dir = run_dir.join("analysis");
    let mut seeds = Vec::new();
    if dir.is_dir() {
        for e in fs::read_dir(dir)? {
            let name = e?.file_name();
            if let Some(s) = name.to_str().and_then(|n| n.strip_prefix("seed")).and_then(|n| n.parse().ok()) {
                seeds.push(s);
            }
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

/// Loads the tables of every analysed seed.
pub fn load_tables(run_dir: &Path) -> Result<Vec<SeedTables>> {
    analysis_seeds(run_dir)?
        .into_iter()
        .map(|s| SeedTables::read(&run_dir.join("analysis").join(format!("seed{s}")), s))
        .collect()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(w: f64, h: f64) -> String {
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n")
}

/// Vertical bars, one per `(label, value)`; every bar carries its exact
/// value in `data-value`.
pub fn bar_chart(title: &str, bars: &[(String, f64)], y_max: Option<f64>) -> String {
    let (left, top, bar_w, gap, plot_h) = (50.0, 30.0, 36.0, 14.0, 180.0);
    let w = left + bars.len() as f64 * (bar_w + gap) + 20.0;
    let h = top + plot_h + 90.0;
    let max = y_max
        .unwrap_or_else(|| bars.iter().map(|b| b.1).fold(0.0, f64::max))
        .max(f64::MIN_POSITIVE);
    let mut s = svg_open(w, h);
    let _ = writeln!(s, "<text x=\"{left}\" y=\"16\" font-size=\"13\">{}</text>", esc(title));
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
        top + plot_h,
        w - 10.0,
        top + plot_h
    );
    let _ = writeln!(s, "<text x=\"4\" y=\"{}\">{}</text>", top + 4.0, fmt_num(max));
    let _ = writeln!(s, "<text x=\"4\" y=\"{}\">0</text>", top + plot_h);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = left + gap / 2.0 + i as f64 * (bar_w + gap);
        let bh = (v / max).clamp(0.0, 1.0) * plot_h;
        let y = top + plot_h - bh;
        let _ = writeln!(
            s,
            "<rect class=\"bar\" x=\"{x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{bh}\" fill=\"{}\" data-label=\"{}\" data-value=\"{v}\"><title>{}: {v}</title></rect>",
            BAR_COLORS[i % BAR_COLORS.len()],
            esc(label),
            esc(label)
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x + bar_w / 2.0, y - 3.0, fmt_num(*v));
        let ly = top + plot_h + 12.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{ly}\" transform=\"rotate(35 {} {ly})\">{}</text>",
            x + 4.0,
            x + 4.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of `(x, y)` points with the `y = x` reference line.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (left, top, size) = (50.0, 30.0, 240.0);
    let hi = points
        .iter()
        .flat_map(|&(x, y)| [x, y])
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE)
        * 1.05;
    let px = |v: f64| left + v / hi * size;
    let py = |v: f64| top + size - v / hi * size;
    let mut s = svg_open(left + size + 20.0, top + size + 40.0);
    let _ = writeln!(s, "<text x=\"{left}\" y=\"16\" font-size=\"13\">{}</text>", esc(title));
    let _ = writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"#333\"/>"
    );
    let _ = writeln!(
        s,
        "<line class=\"diagonal\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>",
        px(0.0),
        py(0.0),
        px(hi),
        py(hi)
    );
    for &(x, y) in points {
        let _ = writeln!(
            s,
            "<circle class=\"point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#4c72b0\" fill-opacity=\"0.7\" data-x=\"{x}\" data-y=\"{y}\"/>",
            px(x),
            py(y)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        left + size / 2.0,
        top + size + 28.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{}</text>",
        top + size / 2.0,
        top + size / 2.0,
        esc(y_label)
    );
    let _ = writeln!(s, "<text x=\"{left}\" y=\"{}\">0</text>", top + size + 12.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", left + size, top + size + 12.0, fmt_num(hi));
    s.push_str("</svg>\n");
    s
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v == v.trunc() && v.abs() < 1e9 {
        format!("{v}")
    } else {
        format!("{v:.4}")
    }
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = String::from("<table>\n<tr>");
    for h in header {
        let _ = write!(s, "<th>{}</th>", esc(h));
    }
    s.push_str("</tr>\n");
    for r in rows {
        s.push_str("<tr>");
        for c in r {
            let _ = write!(s, "<td>{}</td>", esc(c));
        }
        s.push_str("</tr>\n");
    }
    s.push_str("</table>\n");
    s
}

/// Rows keyed by the first column, one value column per model, in first-seen
/// order.
fn pivot(entries: impl IntoIterator<Item = (String, String, f64)>) -> (Vec<String>, Vec<Vec<String>>) {
    let mut models: Vec<String> = Vec::new();
    let mut keys: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    for (key, model, v) in entries {
        if !models.contains(&model) {
            models.push(model.clone());
        }
        if !keys.contains(&key) {
            keys.push(key.clone());
        }
        cells.insert((key, model), v);
    }
    let rows = keys
        .iter()
        .map(|k| {
            std::iter::once(k.clone())
                .chain(models.iter().map(|m| {
                    cells
                        .get(&(k.clone(), m.clone()))
                        .map(|&v| fmt_num(v))
                        .unwrap_or_else(|| "-".into())
                }))
                .collect()
        })
        .collect();
    (models, rows)
}

struct Page {
    html: String,
    files: Vec<(String, String)>,
}

impl Page {
    fn section(&mut self, title: &str) {
        let _ = writeln!(self.html, "<h2>{}</h2>", esc(title));
    }

    fn sub(&mut self, title: &str) {
        let _ = writeln!(self.html, "<h3>{}</h3>", esc(title));
    }

    fn figure(&mut self, name: String, svg: String) {
        let _ = writeln!(self.html, "<img src=\"{name}\" alt=\"{name}\">");
        self.files.push((name, svg));
    }
}

/// Renders `report/index.html` plus SVG figures from whatever tables exist.
/// Returns the paths written.
pub fn render_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let seeds = load_tables(run_dir)?;
    let checks: Option<Vec<CheckResult>> = match fs::read_to_string(run_dir.join("acceptance.json")) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let page = render_page(&seeds, checks.as_deref());
    let out = run_dir.join("report");
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    for (name, svg) in &page.files {
        let p = out.join(name);
        fs::write(&p, svg)?;
        written.push(p);
    }
    let p = out.join("index.html");
    fs::write(&p, &page.html)?;
    written.push(p);
    Ok(written)
}

fn render_page(seeds: &[SeedTables], checks: Option<&[CheckResult]>) -> Page {
    let mut pg = Page {
        html: String::from(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>robustlab report</title>\n<style>\
body{font-family:sans-serif;margin:2em;max-width:70em}table{border-collapse:collapse;margin:.5em 0}\
td,th{border:1px solid #bbb;padding:2px 8px;text-align:right}td:first-child{text-align:left}\
.not-run{color:#a33;font-style:italic}.pass{color:#270}.fail{color:#a33}\
</style></head><body>\n<h1>Standard vs adversarially trained models</h1>\n",
        ),
        files: Vec::new(),
    };

    pg.section("Acceptance checks");
    match checks {
        Some(c) => {
            let rows: Vec<Vec<String>> = c
                .iter()
                .map(|r| {
                    vec![
                        r.id.clone(),
                        if r.passed { "pass" } else { "FAIL" }.into(),
                        r.description.clone(),
                        r.detail.clone(),
                    ]
                })
                .collect();
            pg.html.push_str(&table(&["id", "result", "check", "detail"].map(String::from), &rows));
        }
        None => pg.html.push_str(NOT_RUN),
    }

    pg.section("Clean and adversarial accuracy");
    let rows: Vec<Vec<String>> = seeds
        .iter()
        .flat_map(|t| t.attack.iter().flatten())
        .map(|r| {
            vec![
                r.model.clone(),
                r.n.to_string(),
                fmt_num(r.epsilon as f64),
                r.steps.to_string(),
                fmt_num(r.clean_acc),
                fmt_num(r.adv_acc_half_eps),
                fmt_num(r.adv_acc),
            ]
        })
        .collect();
    if rows.is_empty() {
        pg.html.push_str(NOT_RUN);
    } else {
        let h = ["model", "n", "epsilon", "steps", "clean acc", "adv acc (eps/2)", "adv acc"].map(String::from);
        pg.html.push_str(&table(&h, &rows));
    }

    pg.section("Shape bias on cue-conflict images");
    let bias: Vec<_> = seeds.iter().flat_map(|t| t.bias.iter().flatten()).collect();
    if bias.is_empty() {
        pg.html.push_str(NOT_RUN);
    } else {
        let rows: Vec<Vec<String>> = bias
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    r.n.to_string(),
                    r.shape.to_string(),
                    r.texture.to_string(),
                    fmt_num(r.shape_bias),
                ]
            })
            .collect();
        pg.html
            .push_str(&table(&["model", "n", "shape", "texture", "shape bias"].map(String::from), &rows));
        let bars: Vec<(String, f64)> = bias.iter().map(|r| (r.model.clone(), r.shape_bias)).collect();
        pg.figure("shape_bias.svg".into(), bar_chart("Shape bias", &bars, Some(1.0)));
    }

    pg.section("Accuracy under distortions (both-correct subset)");
    let dist: Vec<_> = seeds.iter().flat_map(|t| t.distortion.iter().flatten()).collect();
    if dist.is_empty() {
        pg.html.push_str(NOT_RUN);
    } else {
        let (models, rows) = pivot(dist.iter().map(|r| (r.distortion.clone(), r.model.clone(), r.accuracy)));
        let n: Vec<String> = seeds
            .iter()
            .filter_map(|t| t.distortion.as_ref()?.first().map(|r| format!("seed {}: n = {}", t.seed, r.n)))
            .collect();
        let _ = writeln!(pg.html, "<p>{}</p>", esc(&n.join(", ")));
        let header: Vec<String> = std::iter::once("distortion".to_string()).chain(models).collect();
        pg.html.push_str(&table(&header, &rows));
    }

    pg.section("Mean filter total variation");
    let ftv: Vec<_> = seeds.iter().flat_map(|t| t.filter_tv.iter().flatten()).collect();
    if ftv.is_empty() {
        pg.html.push_str(NOT_RUN);
    } else {
        let mut entries: Vec<(String, String, f64)> =
            ftv.iter().map(|r| (r.layer.clone(), r.model.clone(), r.mean_tv)).collect();
        let mut by_model: Vec<(String, Vec<f64>)> = Vec::new();
        for r in &ftv {
            match by_model.iter_mut().find(|(m, _)| *m == r.model) {
                Some((_, v)) => v.push(r.mean_tv),
                None => by_model.push((r.model.clone(), vec![r.mean_tv])),
            }
        }
        for (m, v) in by_model {
            entries.push(("network mean".into(), m, v.iter().sum::<f64>() / v.len() as f64));
        }
        let (models, rows) = pivot(entries);
        let header: Vec<String> = std::iter::once("layer".to_string()).chain(models).collect();
        pg.html.push_str(&table(&header, &rows));
    }

    pg.section("Activation TV, clean vs noisy inputs");
    let mut any = false;
    for t in seeds {
        let Some(rows) = &t.noise_tv else { continue };
        let mut models: Vec<(&str, &str, &str)> = Vec::new();
        for r in rows {
            if !models.iter().any(|m| m.0 == r.model) {
                models.push((&r.model, &r.regime, &r.layer));
            }
        }
        for (model, regime, layer) in models {
            any = true;
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.model == model)
                .map(|r| (r.tv_clean, r.tv_noisy))
                .collect();
            let svg = scatter(&format!("{model} {layer}"), "TV clean", "TV noisy", &pts);
            pg.figure(format!("noise_tv_s{}_{regime}.svg", t.seed), svg);
        }
    }
    if !any {
        pg.html.push_str(NOT_RUN);
    }

    pg.section("Concept categories of the last conv layer");
    let mut any = false;
    for t in seeds {
        let Some(rows) = &t.dissect else { continue };
        any = true;
        let mut counts: Vec<(String, [usize; 4], f64, usize)> = Vec::new();
        for r in rows {
            let slot = match r.category.as_str() {
                "shape" => 0,
                "texture" => 1,
                "color" => 2,
                _ => 3,
            };
            match counts.iter_mut().find(|c| c.0 == r.model) {
                Some(c) => {
                    c.1[slot] += 1;
                    c.2 += r.diversity as f64;
                    c.3 += 1;
                }
                None => {
                    let mut k = [0; 4];
                    k[slot] = 1;
                    counts.push((r.model.clone(), k, r.diversity as f64, 1));
                }
            }
        }
        pg.sub(&format!("seed {}", t.seed));
        let mut bars = Vec::new();
        let mut div = Vec::new();
        let mut tbl = Vec::new();
        for (m, k, dsum, n) in &counts {
            for (name, v) in ["shape", "texture", "color", "none"].iter().zip(k) {
                bars.push((format!("{m} {name}"), *v as f64));
            }
            let mean = dsum / *n as f64;
            div.push((m.clone(), mean));
            tbl.push(vec![
                m.clone(),
                k[0].to_string(),
                k[1].to_string(),
                k[2].to_string(),
                k[3].to_string(),
                fmt_num(mean),
            ]);
        }
        let h = ["model", "shape", "texture", "color", "none", "mean diversity"].map(String::from);
        pg.html.push_str(&table(&h, &tbl));
        pg.figure(
            format!("categories_s{}.svg", t.seed),
            bar_chart("Channels per main-label category", &bars, None),
        );
        pg.figure(format!("diversity_s{}.svg", t.seed), bar_chart("Mean diversity", &div, None));
    }
    if !any {
        pg.html.push_str(NOT_RUN);
    }

    pg.section("Single-channel ablation");
    let mut rows = Vec::new();
    for t in seeds {
        let (Some(abl), Some(dis)) = (&t.ablation, &t.dissect) else { continue };
        let mut models: Vec<&str> = Vec::new();
        for r in abl {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        for m in models {
            let d: Vec<_> = dis.iter().filter(|r| r.model == m).collect();
            let a: Vec<_> = abl.iter().filter(|r| r.model == m).collect();
            let (n, shape, texture) = crate::checks::texture_channel_scores(&d, &a);
            let total_s: usize = a.iter().map(|r| r.shape_score).sum();
            let total_t: usize = a.iter().map(|r| r.texture_score).sum();
            rows.push(vec![
                m.to_string(),
                n.to_string(),
                fmt_num(shape),
                fmt_num(texture),
                total_s.to_string(),
                total_t.to_string(),
            ]);
        }
    }
    if rows.is_empty() {
        pg.html.push_str(NOT_RUN);
    } else {
        let h = [
            "model",
            "texture channels",
            "mean shape score",
            "mean texture score",
            "total shape score",
            "total texture score",
        ]
        .map(String::from);
        pg.html.push_str(&table(&h, &rows));
    }

    pg.section("Filter matching (standard vs adversarial)");
    let mut rows = Vec::new();
    for t in seeds {
        let Some(m) = &t.matches else { continue };
        if let Some(first) = m.first() {
            let n = m.len() as f64;
            rows.push(vec![
                format!("{} / {}", first.model_a, first.model_b),
                first.layer.clone(),
                m.len().to_string(),
                fmt_num(m.iter().map(|r| r.spearman_r).sum::<f64>() / n),
                fmt_num(m.iter().map(|r| r.tv_diff).sum::<f64>() / n),
            ]);
        }
    }
    if rows.is_empty() {
        pg.html.push_str(NOT_RUN);
    } else {
        let h = ["models", "layer", "filters", "mean spearman", "mean TV difference"].map(String::from);
        pg.html.push_str(&table(&h, &rows));
    }

    pg.html.push_str("</body></html>\n");
    pg
}
