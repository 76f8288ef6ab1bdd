//! Static plots: the task × episode q grid, stage traces and loss curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use corrflow::stage::StageEvent;
use corrflow::world::EvalReport;
use corrflow::{Error, Result};

const CELL: f64 = 18.0;
const LABEL_W: f64 = 150.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White (q = 0) to dark green (q = 1).
fn shade(q: f64) -> String {
    let q = q.clamp(0.0, 1.0);
    let mix = |a: f64, b: f64| (a + (b - a) * q).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(255.0, 20.0), mix(255.0, 120.0), mix(255.0, 60.0))
}

pub fn q_grid_svg(report: &EvalReport) -> String {
    let cols = report.tasks.iter().map(|t| t.episodes.len()).max().unwrap_or(0);
    let w = LABEL_W + CELL * cols as f64 + 70.0;
    let h = CELL * (report.tasks.len() as f64 + 2.0) + 10.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="4" y="13">q_score {:.3}  success {:.3}</text>"#, report.q_score, report.success_rate);
    for (r, t) in report.tasks.iter().enumerate() {
        let y = CELL * (r as f64 + 1.0);
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">{} {}</text>"#, y + 13.0, t.task, escape(&t.name));
        for (c, e) in t.episodes.iter().enumerate() {
            let x = LABEL_W + CELL * c as f64;
            let _ = writeln!(
                s,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}" stroke="#999"><title>episode {} q {:.2}</title></rect>"##,
                CELL - 1.0,
                CELL - 1.0,
                shade(e.report.q),
                e.episode,
                e.report.q
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{:.2}</text>"#, LABEL_W + CELL * cols as f64 + 6.0, y + 13.0, t.q);
    }
    s.push_str("</svg>\n");
    s
}

pub fn q_grid_csv(report: &EvalReport) -> String {
    let mut s = String::from("task,name,episode,q,success,steps,distance,failure\n");
    for t in &report.tasks {
        for e in &t.episodes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                t.task,
                t.name,
                e.episode,
                e.report.q,
                e.report.success(),
                e.steps,
                e.distance,
                e.failure.as_deref().unwrap_or("")
            );
        }
    }
    s
}

fn polyline(points: &[(f64, f64)], color: &str, dash: bool) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let dash = if dash { r#" stroke-dasharray="4 3""# } else { "" };
    format!(r##"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"##, pts.join(" "))
}

/// Raw and tracked stage over time, as step functions.
pub fn stage_svg(events: &[StageEvent]) -> String {
    let (w, h, pad) = (640.0, 240.0, 30.0);
    let t_max = events.iter().map(|e| e.timestep).max().unwrap_or(0).max(1) as f64;
    let s_max = events.iter().map(|e| e.raw.max(e.stage)).max().unwrap_or(0).max(1) as f64;
    let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / t_max;
    let y = |s: usize| h - pad - (h - 2.0 * pad) * s as f64 / s_max;
    let steps = |f: &dyn Fn(&StageEvent) -> usize| {
        let mut pts = Vec::new();
        for (i, e) in events.iter().enumerate() {
            if i > 0 {
                pts.push((x(e.timestep), y(f(&events[i - 1]))));
            }
            pts.push((x(e.timestep), y(f(e))));
        }
        pts
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="11">"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    s.push_str(&polyline(&steps(&|e| e.raw), "#d62728", true));
    s.push('\n');
    s.push_str(&polyline(&steps(&|e| e.stage), "#1f77b4", false));
    s.push('\n');
    let _ = writeln!(s, r#"<text x="{pad}" y="16">stage (solid: tracked, dashed: raw) vs timestep</text>"#);
    s.push_str("</svg>\n");
    s
}

pub fn loss_svg(losses: &[f64]) -> String {
    let (w, h, pad) = (640.0, 240.0, 30.0);
    let logs: Vec<f64> = losses.iter().map(|l| l.max(1e-12).log10()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let n = logs.len().max(2) - 1;
    let pts: Vec<(f64, f64)> = logs
        .iter()
        .enumerate()
        .map(|(i, &v)| (pad + (w - 2.0 * pad) * i as f64 / n as f64, h - pad - (h - 2.0 * pad) * (v - lo) / span))
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="11">"#);
    s.push_str(&polyline(&pts, "#333", false));
    s.push('\n');
    let _ = writeln!(s, r#"<text x="{pad}" y="16">log10 training loss: {lo:.2} .. {hi:.2}</text>"#);
    s.push_str("</svg>\n");
    s
}

fn read_events(path: &Path) -> Result<Vec<StageEvent>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.rsplit(',')
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad row {l:?}", path.display())))
        })
        .collect()
}

/// Writes every plot the inputs allow into `dir`; returns the paths.
pub fn render(results: &Path, events: Option<&Path>, loss: Option<&Path>, dir: &Path) -> Result<Vec<PathBuf>> {
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(results)?)
        .map_err(|e| Error::Format(format!("{}: {e}", results.display())))?;
    let mut out = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        out.push(p);
        Ok(())
    };
    put("q_grid.svg", q_grid_svg(&report))?;
    put("q_grid.csv", q_grid_csv(&report))?;
    if let Some(p) = events {
        let ev = read_events(p)?;
        let mut csv = String::from("episode,timestep,raw,stage,transition\n");
        for e in &ev {
            let _ = writeln!(csv, "{},{},{},{},{}", e.episode, e.timestep, e.raw, e.stage, e.transition);
        }
        put("stages.svg", stage_svg(&ev))?;
        put("stages.csv", csv)?;
    }
    if let Some(p) = loss {
        put("loss.svg", loss_svg(&read_losses(p)?))?;
    }
    Ok(out)
}
