//! Static SVG bar charts of accuracy or MRR.

use std::fmt::Write as _;
use std::path::Path;

use arpa_core::{Error, Result};
use clap::ValueEnum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ChartMetric {
    Accuracy,
    Mrr,
}

impl ChartMetric {
    fn title(self) -> &'static str {
        match self {
            ChartMetric::Accuracy => "Accuracy",
            ChartMetric::Mrr => "MRR",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    /// Fraction in `[0, 1]`.
    pub value: f64,
}

/// Reads bars from a `metrics.csv` (one bar per row), an ablation CSV (one
/// bar per arm mean) or a `history.csv` (one bar per epoch).
pub fn load_bars(path: &Path, metric: ChartMetric) -> Result<Vec<Bar>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let bad = |line: usize, msg: String| Error::Line {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (label_col, value_name, filter) = match (col("run_id"), col("arm"), col("epoch")) {
        (Some(run), _, _) => (run, metric_column(metric, ""), None),
        (_, Some(arm), _) => (
            arm,
            metric_column(metric, ""),
            col("seed").map(|s| (s, "mean")),
        ),
        (_, _, Some(epoch)) => (epoch, metric_column(metric, "test_"), None),
        _ => {
            return Err(bad(
                1,
                "expected a metrics, ablation or history CSV header".into(),
            ))
        }
    };
    let value_col =
        col(&value_name).ok_or_else(|| bad(1, format!("missing column {value_name}")))?;
    let mut bars = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| bad(line, e.to_string()))?;
        if let Some((c, want)) = filter {
            if record.get(c) != Some(want) {
                continue;
            }
        }
        let raw = record.get(value_col).unwrap_or_default();
        let value: f64 = raw
            .parse()
            .map_err(|_| bad(line, format!("{value_name} {raw:?} is not a number")))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(bad(line, format!("{value_name} {value} outside [0, 1]")));
        }
        let label = record.get(label_col).unwrap_or_default();
        let label = if headers.get(label_col) == Some("epoch") {
            format!("epoch {label}")
        } else {
            label.to_string()
        };
        bars.push(Bar { label, value });
    }
    if bars.is_empty() {
        return Err(Error::Input(format!(
            "{}: no rows to chart",
            path.display()
        )));
    }
    Ok(bars)
}

fn metric_column(metric: ChartMetric, prefix: &str) -> String {
    match metric {
        ChartMetric::Accuracy => format!("{prefix}accuracy"),
        ChartMetric::Mrr => format!("{prefix}mrr"),
    }
}

pub const PLOT_HEIGHT: f64 = 240.0;
const BAR_WIDTH: f64 = 40.0;
const BAR_GAP: f64 = 24.0;
const LEFT: f64 = 56.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 72.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained SVG with a 0 to 100% axis and one labelled bar per entry.
pub fn render_svg(bars: &[Bar], metric: ChartMetric) -> String {
    let width = LEFT + BAR_GAP + bars.len() as f64 * (BAR_WIDTH + BAR_GAP);
    let height = TOP + PLOT_HEIGHT + BOTTOM;
    let base = TOP + PLOT_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-size="13" text-anchor="middle">{}</text>"#,
        width / 2.0,
        metric.title()
    );
    for tick in 0..=5 {
        let y = base - PLOT_HEIGHT * tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y}" x2="{width}" y2="{y}" stroke="#dddddd"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}%</text>"#,
            LEFT - 6.0,
            y + 4.0,
            tick * 20
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/>"#
    );
    for (i, bar) in bars.iter().enumerate() {
        let x = LEFT + BAR_GAP + i as f64 * (BAR_WIDTH + BAR_GAP);
        let h = PLOT_HEIGHT * bar.value;
        let cx = x + BAR_WIDTH / 2.0;
        let _ = writeln!(
            s,
            r##"<rect class="bar" x="{x}" y="{}" width="{BAR_WIDTH}" height="{h}" fill="#4c72b0"/>"##,
            base - h
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{:.1}%</text>"#,
            base - h - 4.0,
            bar.value * 100.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="end" transform="rotate(-35 {cx} {})">{}</text>"#,
            base + 14.0,
            base + 14.0,
            escape(&bar.label)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{base}" x2="{width}" y2="{base}" stroke="black"/>"#
    );
    s.push_str("</svg>\n");
    s
}
