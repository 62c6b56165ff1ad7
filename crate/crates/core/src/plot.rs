//! Static SVG figures: leakage over training progress and test accuracy
//! per λ. Plain string output, no rendering dependency.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::Summary;
use crate::trainer::EpochRecord;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str, xlabel: &str, ylabel: &str) -> Self {
        let mut body = String::new();
        let _ = write!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
            (LEFT + W - RIGHT) / 2.0,
            escape(title),
            (LEFT + W - RIGHT) / 2.0,
            H - 12.0,
            escape(xlabel),
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            escape(ylabel),
        );
        let mut c = Canvas { body };
        c.axes();
        c
    }

    fn px(x: f64) -> f64 {
        LEFT + x * (W - LEFT - RIGHT)
    }

    /// Accuracy axis spans [0, 1].
    fn py(y: f64) -> f64 {
        H - BOTTOM - y.clamp(0.0, 1.0) * (H - TOP - BOTTOM)
    }

    fn axes(&mut self) {
        let (x0, x1, y0, y1) = (Self::px(0.0), Self::px(1.0), Self::py(0.0), Self::py(1.0));
        let _ = writeln!(
            self.body,
            r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#
        );
        for i in 0..=5 {
            let v = i as f64 / 5.0;
            let y = Self::py(v);
            let _ = writeln!(
                self.body,
                r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
                x0 - 4.0,
                y + 4.0
            );
        }
    }

    fn hline(&mut self, y: f64, label: &str) {
        let (x0, x1, py) = (Self::px(0.0), Self::px(1.0), Self::py(y));
        let _ = writeln!(
            self.body,
            r#"<line x1="{x0}" y1="{py}" x2="{x1}" y2="{py}" stroke="black" stroke-width="1.5"/><text x="{}" y="{}">{}</text>"#,
            x1 + 4.0,
            py + 4.0,
            escape(label)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let d: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", Self::px(x), Self::py(y)))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.2"{dash}/>"#,
            d.join(" ")
        );
    }

    fn legend(&mut self, row: usize, color: &str, dashed: bool, label: &str) {
        let x = W - RIGHT + 40.0;
        let y = TOP + 16.0 * row as f64 + 10.0;
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
            x + 20.0,
            x + 24.0,
            y + 4.0,
            escape(label)
        );
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.body.push_str("</svg>\n");
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.body).map_err(|e| Error::io(path, e))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Validation adversary accuracy (solid) and probe accuracy (dashed) against
/// epoch / stop epoch, one colour per λ.
pub fn write_leakage(path: &Path, runs: &[(f64, Vec<EpochRecord>)], source_chance: Option<f64>) -> Result<()> {
    let mut c = Canvas::new(
        "Source leakage during training",
        "normalized training progress",
        "validation accuracy",
    );
    let lambdas = distinct(runs.iter().map(|r| r.0));
    for (lambda, records) in runs {
        let k = lambdas.iter().position(|l| l == lambda).unwrap_or(0);
        let n = records.len().max(1) as f64;
        let adv: Vec<(f64, f64)> = records
            .iter()
            .map(|r| (r.epoch as f64 / n, r.val_adversary_acc))
            .collect();
        let probe: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| r.val_probe_acc.map(|p| (r.epoch as f64 / n, p)))
            .collect();
        c.polyline(&adv, color(k), false);
        c.polyline(&probe, color(k), true);
    }
    for (k, l) in lambdas.iter().enumerate() {
        c.legend(k, color(k), false, &format!("λ = {l}"));
    }
    c.legend(lambdas.len(), "#555", false, "adversary");
    c.legend(lambdas.len() + 1, "#555", true, "NB probe");
    if let Some(ch) = source_chance {
        c.hline(ch, "chance");
    }
    c.finish(path)
}

/// Mean test emotion and adversary accuracy per λ with ±1 std error bars.
pub fn write_accuracy_bars(path: &Path, summary: &Summary, chance: (Option<f64>, Option<f64>)) -> Result<()> {
    let mut c = Canvas::new("Test accuracy per λ", "λ", "test accuracy");
    let n = summary.lambdas.len().max(1) as f64;
    let slot = 1.0 / n;
    let bar = slot * 0.35;
    for (i, s) in summary.lambdas.iter().enumerate() {
        let x0 = i as f64 * slot + slot * 0.12;
        for (j, stat) in [&s.test_emotion_acc, &s.test_adversary_acc].into_iter().enumerate() {
            let x = x0 + j as f64 * bar;
            let (px, pw) = (Canvas::px(x), Canvas::px(x + bar) - Canvas::px(x));
            let (top, base) = (Canvas::py(stat.mean), Canvas::py(0.0));
            let cx = px + pw / 2.0;
            let _ = writeln!(
                c.body,
                r#"<rect x="{px:.2}" y="{top:.2}" width="{pw:.2}" height="{:.2}" fill="{}"/><line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                base - top,
                color(j),
                Canvas::py(stat.mean - stat.std),
                Canvas::py(stat.mean + stat.std),
            );
        }
        let _ = writeln!(
            c.body,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            Canvas::px(x0 + bar),
            H - BOTTOM + 16.0,
            s.lambda
        );
    }
    c.legend(0, color(0), false, "emotion");
    c.legend(1, color(1), false, "adversary");
    if let Some(ch) = chance.0 {
        c.hline(ch, "emotion chance");
    }
    if let Some(ch) = chance.1 {
        c.hline(ch, "source chance");
    }
    c.finish(path)
}

fn distinct(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for x in xs {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}
