//! CSV summaries and SVG figures. Output bytes depend only on the inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::stages::TaskEvaluation;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const COMPARISONS_CSV: &str = "comparisons.csv";
pub const DISCRIMINATION_SVG: &str = "discrimination.svg";
pub const KM_SVG: &str = "km.svg";
pub const CALIBRATION_SVG: &str = "calibration.svg";

const PALETTE: [&str; 6] = ["#3b6ea8", "#c8553d", "#6a994e", "#8d6a9f", "#e0a458", "#5c5c5c"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 50.0;

pub fn stars(p: f64) -> &'static str {
    if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    }
}

pub fn summary_csv(evals: &[TaskEvaluation]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "task",
        "model",
        "metric",
        "point",
        "ci_low",
        "ci_high",
        "n_bootstraps",
        "n_undefined",
        "n_instances",
        "n_events_by_tau",
    ])?;
    for ev in evals {
        for m in &ev.models {
            for r in &m.metrics {
                w.write_record([
                    ev.task.clone(),
                    m.model.clone(),
                    r.metric.clone(),
                    format!("{:.6}", r.point),
                    format!("{:.6}", r.ci_low),
                    format!("{:.6}", r.ci_high),
                    r.n_bootstraps.to_string(),
                    r.n_undefined.to_string(),
                    r.n_instances.to_string(),
                    r.n_events_by_tau.to_string(),
                ])?;
            }
            if let Some(ba) = &m.balanced_accuracy {
                w.write_record([
                    ev.task.clone(),
                    m.model.clone(),
                    "balanced_accuracy".into(),
                    format!("{:.6}", ba.test),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

pub fn comparisons_csv(evals: &[TaskEvaluation]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "metric", "model_a", "model_b", "observed_diff", "p_value", "n_resamples", "stars"])?;
    for ev in evals {
        for c in &ev.comparisons {
            w.write_record([
                ev.task.clone(),
                c.metric.clone(),
                c.model_a.clone(),
                c.model_b.clone(),
                format!("{:.6}", c.result.observed_diff),
                format!("{:.6}", c.result.p_value),
                c.result.n_resamples.to_string(),
                stars(c.result.p_value).to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
    axes(&mut s);
    s
}

fn axes(s: &mut String) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = ypos(v);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, MARGIN - 4.0, y + 4.0);
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical position of a value in `[0, 1]`.
fn ypos(v: f64) -> f64 {
    HEIGHT - MARGIN - v.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN)
}

fn xpos(v: f64) -> f64 {
    MARGIN + v.clamp(0.0, 1.0) * (WIDTH - 2.0 * MARGIN)
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - MARGIN - 110.0,
            y,
            PALETTE[i % PALETTE.len()],
            WIDTH - MARGIN - 95.0,
            y + 9.0,
            escape(n)
        );
    }
}

fn model_names(evals: &[TaskEvaluation]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for ev in evals {
        for m in &ev.models {
            if !names.contains(&m.model) {
                names.push(m.model.clone());
            }
        }
    }
    names
}

/// Grouped AUC bars per task with percentile intervals; stars mark the first
/// model's significance against each other model.
pub fn discrimination_svg(evals: &[TaskEvaluation]) -> String {
    let mut s = svg_open("Cumulative/dynamic AUC at tau (test split)");
    let names = model_names(evals);
    legend(&mut s, &names);
    let n_tasks = evals.len().max(1) as f64;
    let group_w = (WIDTH - 2.0 * MARGIN) / n_tasks;
    let bar_w = group_w * 0.8 / names.len().max(1) as f64;
    for (ti, ev) in evals.iter().enumerate() {
        let gx = MARGIN + group_w * ti as f64 + group_w * 0.1;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            HEIGHT - MARGIN + 16.0,
            escape(&ev.task)
        );
        for (mi, name) in names.iter().enumerate() {
            let Some(m) = ev.models.iter().find(|m| &m.model == name) else {
                continue;
            };
            let Some(r) = m.metrics.iter().find(|r| r.metric == "auc") else {
                continue;
            };
            let x = gx + bar_w * mi as f64;
            let y = ypos(r.point);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                bar_w * 0.9,
                ypos(0.0) - y,
                PALETTE[mi % PALETTE.len()]
            );
            let cx = x + bar_w * 0.45;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                ypos(r.ci_low),
                ypos(r.ci_high)
            );
            let star = ev
                .comparisons
                .iter()
                .find(|c| &c.model_b == name && c.metric == "auc")
                .map_or("", |c| stars(c.result.p_value));
            if !star.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{star}</text>"#,
                    ypos(r.ci_high.max(r.point)) - 4.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Kaplan-Meier endpoint-free curves per task on the test split.
pub fn km_svg(evals: &[TaskEvaluation]) -> String {
    let mut s = svg_open("Kaplan-Meier event-free survival (test split)");
    let names: Vec<String> = evals.iter().map(|e| e.task.clone()).collect();
    legend(&mut s, &names);
    let t_max = evals
        .iter()
        .flat_map(|e| e.test_km.times.last().copied())
        .fold(0.0_f64, f64::max)
        .max(1.0);
    for (i, ev) in evals.iter().enumerate() {
        let mut d = format!("M{:.1},{:.1}", xpos(0.0), ypos(1.0));
        let mut prev = 1.0;
        for (t, sv) in ev.test_km.times.iter().zip(&ev.test_km.surv) {
            let x = xpos(t / t_max);
            let _ = write!(d, " L{x:.1},{:.1} L{x:.1},{:.1}", ypos(prev), ypos(*sv));
            prev = *sv;
        }
        let _ = write!(d, " L{:.1},{:.1}", xpos(1.0), ypos(prev));
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{}"/>"#, PALETTE[i % PALETTE.len()]);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">days since snapshot (max {t_max:.0})</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    s.push_str("</svg>\n");
    s
}

/// Observed against predicted event probability per decile bin.
pub fn calibration_svg(evals: &[TaskEvaluation]) -> String {
    let mut s = svg_open("Calibration at tau (test split)");
    let mut series = Vec::new();
    for ev in evals {
        for m in &ev.models {
            if let Some(c) = &m.calibration {
                series.push((format!("{}/{}", ev.task, m.model), c));
            }
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    legend(&mut s, &names);
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 3"/>"#,
        xpos(0.0),
        ypos(0.0),
        xpos(1.0),
        ypos(1.0)
    );
    for (i, (_, c)) in series.iter().enumerate() {
        for b in &c.bins {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#,
                xpos(b.mean_predicted),
                ypos(b.observed),
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">predicted probability</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    s.push_str("</svg>\n");
    s
}

pub fn emit_report(evals: &[TaskEvaluation], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SUMMARY_CSV), summary_csv(evals)?)?;
    fs::write(dir.join(COMPARISONS_CSV), comparisons_csv(evals)?)?;
    fs::write(dir.join(DISCRIMINATION_SVG), discrimination_svg(evals))?;
    fs::write(dir.join(KM_SVG), km_svg(evals))?;
    fs::write(dir.join(CALIBRATION_SVG), calibration_svg(evals))?;
    Ok(())
}
