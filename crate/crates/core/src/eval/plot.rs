//! Deterministic SVG figures. Each file embeds its data table as CSV in a
//! `<desc>` element.

use std::fmt::Write as _;

use super::report::{snr_label, CellResult, EvalReport};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::trajgen::DiffusionModel;

const PANEL_W: f64 = 440.0;
const PANEL_H: f64 = 330.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 110.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 48.0;
const COLORS: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

struct LinePanel {
    title: String,
    xlabel: String,
    ylabel: String,
    xticks: Vec<String>,
    /// (name, points as (x index, y)).
    series: Vec<(String, Vec<(usize, f64)>)>,
}

struct HeatPanel {
    title: String,
    xlabel: String,
    ylabel: String,
    xticks: Vec<String>,
    yticks: Vec<String>,
    /// Row-major, `values[row][col]`, in [0, 1].
    values: Vec<Vec<f64>>,
}

enum Panel {
    Line(LinePanel),
    Heat(HeatPanel),
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render(title: &str, panels: &[Panel]) -> String {
    let w = PANEL_W * panels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" viewBox="0 0 {w} {}" font-family="sans-serif" font-size="11">"#,
        PANEL_H + 20.0,
        PANEL_H + 20.0
    );
    let _ = writeln!(s, "<title>{}</title>", esc(title));
    let _ = writeln!(s, "<desc>\n{}</desc>", esc(&data_table(panels)));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        let _ = writeln!(s, r#"<g transform="translate({},10)">"#, PANEL_W * i as f64);
        match p {
            Panel::Line(p) => line_panel(&mut s, p),
            Panel::Heat(p) => heat_panel(&mut s, p),
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn data_table(panels: &[Panel]) -> String {
    let mut s = String::from("panel,series,x,y\n");
    for p in panels {
        match p {
            Panel::Line(p) => {
                for (name, pts) in &p.series {
                    for (x, y) in pts {
                        let _ = writeln!(s, "{},{},{},{}", p.title, name, p.xticks[*x], y);
                    }
                }
            }
            Panel::Heat(p) => {
                for (r, row) in p.values.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        let _ = writeln!(s, "{},{},{},{}", p.title, p.yticks[r], p.xticks[c], v);
                    }
                }
            }
        }
    }
    s
}

fn axes(s: &mut String, title: &str, xlabel: &str, ylabel: &str) -> (f64, f64, f64, f64) {
    let (x0, y0) = (MARGIN_L, MARGIN_T);
    let (pw, ph) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="16" text-anchor="middle" font-size="13">{}</text>"#,
        x0 + pw / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{x0:.1}" y="{y0:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        x0 + pw / 2.0,
        y0 + ph + 36.0,
        esc(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        y0 + ph / 2.0,
        esc(ylabel)
    );
    (x0, y0, pw, ph)
}

fn line_panel(s: &mut String, p: &LinePanel) {
    let (x0, y0, pw, ph) = axes(s, &p.title, &p.xlabel, &p.ylabel);
    let ys: Vec<f64> = p.series.iter().flat_map(|(_, v)| v.iter().map(|q| q.1)).collect();
    let mut lo = ys.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    let n = p.xticks.len().max(1);
    let xpos = |i: usize| x0 + pw * (i as f64 + 0.5) / n as f64;
    let ypos = |v: f64| y0 + ph * (1.0 - (v - lo) / (hi - lo));
    let step = (n + 9) / 10;
    for (i, t) in p.xticks.iter().enumerate() {
        if i % step == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                xpos(i),
                y0 + ph + 14.0,
                esc(t)
            );
        }
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            x0 - 4.0,
            ypos(v) + 4.0
        );
    }
    for (k, (name, pts)) in p.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(i, v)| format!("{:.2},{:.2}", xpos(i), ypos(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        for &(i, v) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, xpos(i), ypos(v));
        }
        let ly = y0 + 10.0 + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x0 + pw + 8.0,
            ly - 9.0,
            x0 + pw + 22.0,
            ly,
            esc(name)
        );
    }
}

fn heat_panel(s: &mut String, p: &HeatPanel) {
    let (x0, y0, pw, ph) = axes(s, &p.title, &p.xlabel, &p.ylabel);
    let (nr, nc) = (p.yticks.len().max(1), p.xticks.len().max(1));
    let (cw, chh) = (pw / nc as f64, ph / nr as f64);
    for (r, row) in p.values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},255)"/>"#,
                x0 + cw * c as f64,
                y0 + ph - chh * (r + 1) as f64,
                cw,
                chh
            );
        }
    }
    let xstep = (nc + 9) / 10;
    for (c, t) in p.xticks.iter().enumerate().filter(|(c, _)| c % xstep == 0) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + cw * (c as f64 + 0.5),
            y0 + ph + 14.0,
            esc(t)
        );
    }
    let ystep = (nr + 9) / 10;
    for (r, t) in p.yticks.iter().enumerate().filter(|(r, _)| r % ystep == 0) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            y0 + ph - chh * (r as f64 + 0.5) + 4.0,
            esc(t)
        );
    }
}

fn snrs(report: &EvalReport) -> Vec<Option<f64>> {
    let mut v: Vec<Option<f64>> = report.cells.iter().map(|c| c.cell.snr).collect();
    v.sort_by(|a, b| a.unwrap_or(f64::INFINITY).total_cmp(&b.unwrap_or(f64::INFINITY)));
    v.dedup();
    v
}

fn sorted_keys(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Weighted-mean series of cells filtered by `keep`, grouped by `series`,
/// over the x keys `xs`.
fn series_of<'a>(
    cells: impl Iterator<Item = &'a CellResult> + Clone,
    xs: &[f64],
    x_of: impl Fn(&CellResult) -> f64,
    series: &[(String, Box<dyn Fn(&CellResult) -> bool + '_>)],
) -> Vec<(String, Vec<(usize, f64)>)> {
    series
        .iter()
        .map(|(name, member)| {
            let pts = xs
                .iter()
                .enumerate()
                .filter_map(|(i, &x)| {
                    let (sum, n) = cells
                        .clone()
                        .filter(|c| member(c) && x_of(c) == x)
                        .fold((0.0, 0usize), |(s, n), c| (s + c.metric * c.n as f64, n + c.n));
                    (n > 0).then(|| (i, sum / n as f64))
                })
                .collect();
            (name.clone(), pts)
        })
        .filter(|(_, p): &(String, Vec<(usize, f64)>)| !p.is_empty())
        .collect()
}

fn by_model() -> Vec<(String, Box<dyn Fn(&CellResult) -> bool>)> {
    DiffusionModel::ALL
        .iter()
        .map(|&m| {
            let f: Box<dyn Fn(&CellResult) -> bool> = Box::new(move |c: &CellResult| c.cell.model == m);
            (m.name().to_string(), f)
        })
        .collect()
}

/// One SVG per figure: metric vs length by SNR and by model, metric vs α by
/// length and by model, and the α heat map (regression) or confusion grid
/// (classification).
pub fn emit_plots(report: &EvalReport) -> Result<Vec<(String, String)>> {
    if report.cells.is_empty() {
        return Err(Error::Data("cannot plot an empty report".into()));
    }
    let metric = report.metric_name().to_uppercase();
    let cells = &report.cells;
    let lengths = sorted_keys(cells.iter().map(|c| c.cell.length as f64));
    let alphas = sorted_keys(cells.iter().map(|c| c.cell.alpha));
    let length_ticks: Vec<String> = lengths.iter().map(|l| format!("{l}")).collect();
    let alpha_ticks: Vec<String> = alphas.iter().map(|a| format!("{a:.2}")).collect();
    let snr_list = snrs(report);
    let mut out = Vec::new();

    let snr_series: Vec<(String, Box<dyn Fn(&CellResult) -> bool>)> = snr_list
        .iter()
        .map(|&s| {
            let f: Box<dyn Fn(&CellResult) -> bool> = Box::new(move |c: &CellResult| c.cell.snr == s);
            (format!("SNR {}", snr_label(s)), f)
        })
        .collect();
    let p = LinePanel {
        title: format!("{metric} by SNR"),
        xlabel: "trajectory length".into(),
        ylabel: metric.clone(),
        xticks: length_ticks.clone(),
        series: series_of(cells.iter(), &lengths, |c| c.cell.length as f64, &snr_series),
    };
    out.push(("fig_metric_vs_length_by_snr.svg".to_string(), render(&p.title.clone(), &[Panel::Line(p)])));

    let per_snr = |x_ticks: &[String], xs: &[f64], x_of: &dyn Fn(&CellResult) -> f64, label: &str, what: &str, series: &dyn Fn() -> Vec<(String, Box<dyn Fn(&CellResult) -> bool>)>| {
        let panels: Vec<Panel> = snr_list
            .iter()
            .map(|&s| {
                Panel::Line(LinePanel {
                    title: format!("{metric} by {what}, SNR {}", snr_label(s)),
                    xlabel: label.into(),
                    ylabel: metric.clone(),
                    xticks: x_ticks.to_vec(),
                    series: series_of(cells.iter().filter(move |c| c.cell.snr == s), xs, x_of, &series()),
                })
            })
            .collect();
        render(&format!("{metric} vs {label} by {what}"), &panels)
    };
    out.push((
        "fig_metric_vs_length_by_model.svg".into(),
        per_snr(&length_ticks, &lengths, &|c| c.cell.length as f64, "trajectory length", "model", &by_model),
    ));
    let length_series = || -> Vec<(String, Box<dyn Fn(&CellResult) -> bool>)> {
        lengths
            .iter()
            .map(|&l| {
                let f: Box<dyn Fn(&CellResult) -> bool> = Box::new(move |c: &CellResult| c.cell.length as f64 == l);
                (format!("L={l}"), f)
            })
            .collect()
    };
    out.push((
        "fig_metric_vs_alpha_by_length.svg".into(),
        per_snr(&alpha_ticks, &alphas, &|c| c.cell.alpha, "alpha", "length", &length_series),
    ));
    out.push((
        "fig_metric_vs_alpha_by_model.svg".into(),
        per_snr(&alpha_ticks, &alphas, &|c| c.cell.alpha, "alpha", "model", &by_model),
    ));

    match report.task {
        Task::Alpha => out.push(("fig_alpha_heatmap.svg".into(), alpha_heatmaps(report, &snr_list))),
        Task::Model => out.push(("fig_confusion.svg".into(), confusion_grid(report))),
    }
    Ok(out)
}

/// True α (columns) against predicted α (rows), 0.1-wide bins on [0, 2];
/// predictions outside are clamped to the edge bins. Columns are
/// normalized to sum to one.
fn alpha_heatmaps(report: &EvalReport, snr_list: &[Option<f64>]) -> String {
    const BINS: usize = 20;
    let bin = |a: f64| ((a / 0.1).floor().max(0.0) as usize).min(BINS - 1);
    let ticks: Vec<String> = (0..BINS).map(|i| format!("{:.1}", i as f64 * 0.1)).collect();
    let panels: Vec<Panel> = snr_list
        .iter()
        .map(|&s| {
            let mut counts = vec![vec![0.0; BINS]; BINS];
            for p in report.predictions.iter().filter(|p| report.cells[p.cell].cell.snr == s) {
                counts[bin(p.predicted)][bin(p.truth)] += 1.0;
            }
            for c in 0..BINS {
                let total: f64 = (0..BINS).map(|r| counts[r][c]).sum();
                if total > 0.0 {
                    (0..BINS).for_each(|r| counts[r][c] /= total);
                }
            }
            Panel::Heat(HeatPanel {
                title: format!("predicted vs true alpha, SNR {}", snr_label(s)),
                xlabel: "true alpha".into(),
                ylabel: "predicted alpha".into(),
                xticks: ticks.clone(),
                yticks: ticks.clone(),
                values: counts,
            })
        })
        .collect();
    render("alpha heat map", &panels)
}

/// Row-normalized confusion matrices, one panel per SNR.
fn confusion_grid(report: &EvalReport) -> String {
    let names: Vec<String> = DiffusionModel::ALL.iter().map(|m| m.name().to_string()).collect();
    let panels: Vec<Panel> = report
        .confusion_by_snr
        .iter()
        .map(|(snr, m)| {
            // rows drawn bottom-up, so reverse to put the first class on top
            let values = (0..5)
                .rev()
                .map(|i| {
                    let total: u64 = m[i].iter().sum();
                    m[i].iter()
                        .map(|&v| if total > 0 { v as f64 / total as f64 } else { 0.0 })
                        .collect()
                })
                .collect();
            Panel::Heat(HeatPanel {
                title: format!("confusion, SNR {}", snr_label(*snr)),
                xlabel: "predicted".into(),
                ylabel: "true".into(),
                xticks: names.clone(),
                yticks: names.iter().rev().cloned().collect(),
                values,
            })
        })
        .collect();
    render("confusion matrices", &panels)
}
