//! Static SVG figures with a companion CSV of the plotted points.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use owdf::eval::EvalReport;
use owdf::experiment::SweepRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Fanchart,
    Calibration,
    NllVsHorizon,
    NllVsDatasize,
    TrainTime,
    TokenSize,
}

impl PlotKind {
    fn name(self) -> String {
        use clap::ValueEnum;
        self.to_possible_value().map_or_else(String::new, |v| v.get_name().to_string())
    }
}

/// Parsed plot input: a single evaluation report or sweep rows.
pub enum PlotInput {
    Report(Box<EvalReport>),
    Sweep(Vec<SweepRow>),
}

#[derive(Debug)]
pub struct PlotError(pub String);

impl PlotInput {
    pub fn parse(text: &str) -> Result<Self, PlotError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PlotError(format!("report is not JSON: {e}")))?;
        match &value {
            serde_json::Value::Array(rows) if rows.is_empty() => Err(PlotError("sweep results are empty".into())),
            serde_json::Value::Array(_) => serde_json::from_value(value)
                .map(PlotInput::Sweep)
                .map_err(|e| PlotError(format!("sweep results: {e}"))),
            serde_json::Value::Object(map) if map.is_empty() => Err(PlotError("report is empty".into())),
            serde_json::Value::Object(_) => serde_json::from_value(value)
                .map(|r| PlotInput::Report(Box::new(r)))
                .map_err(|e| PlotError(format!("report: {e}"))),
            _ => Err(PlotError("report must be a JSON object or array".into())),
        }
    }
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
    markers: bool,
}

struct Band {
    name: String,
    lower: Vec<(f64, f64)>,
    upper: Vec<(f64, f64)>,
    opacity: f64,
}

struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<Series>,
    bands: Vec<Band>,
    log_x: bool,
}

pub struct Figure {
    pub svg: String,
    pub csv: String,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 150.0, 40.0, 55.0);

pub fn render(kind: PlotKind, input: &PlotInput) -> Result<Figure, PlotError> {
    let chart = match (kind, input) {
        (PlotKind::Fanchart, PlotInput::Report(r)) => fan_chart(r)?,
        (PlotKind::Calibration, PlotInput::Report(r)) => calibration(r),
        (PlotKind::NllVsHorizon, PlotInput::Sweep(rows)) => {
            sweep_chart(rows, "NLL vs horizon", "horizon L", "test NLL", |r| (r.horizon_len as f64, r.nll_mean), false)
        }
        (PlotKind::NllVsDatasize, PlotInput::Sweep(rows)) => sweep_chart(
            rows,
            "NLL vs training windows",
            "training windows",
            "test NLL",
            |r| (r.train_samples as f64, r.nll_mean),
            true,
        ),
        (PlotKind::TrainTime, PlotInput::Sweep(rows)) => sweep_chart(
            rows,
            "Per-sample training time",
            "horizon L",
            "seconds per sample",
            |r| (r.horizon_len as f64, r.per_sample_train_seconds),
            false,
        ),
        (PlotKind::TokenSize, PlotInput::Sweep(rows)) => sweep_chart(
            rows,
            "NLL vs parameter count",
            "trainable parameters",
            "test NLL",
            |r| (r.param_count as f64, r.nll_mean),
            true,
        ),
        (k, PlotInput::Report(_)) => return Err(PlotError(format!("{} needs sweep results, got a report", k.name()))),
        (k, PlotInput::Sweep(_)) => {
            return Err(PlotError(format!("{} needs an evaluation report, got sweep results", k.name())))
        }
    };
    let csv = chart_csv(&chart);
    Ok(Figure {
        svg: chart_svg(&chart, &csv),
        csv,
    })
}

fn fan_chart(r: &EvalReport) -> Result<Chart, PlotError> {
    let fan = r
        .fan_chart
        .as_ref()
        .ok_or_else(|| PlotError("report has no fan chart".into()))?;
    let h = fan.history_ms.len() as f64;
    let history = fan.history_ms.iter().enumerate().map(|(i, &d)| (i as f64 - h, d)).collect();
    let mut bands = Vec::new();
    let levels = fan.steps.first().map_or(0, |s| s.bands.len());
    for b in (0..levels).rev() {
        let level = fan.steps[0].bands[b].0;
        bands.push(Band {
            name: format!("{:.0}% interval", level * 100.0),
            lower: fan.steps.iter().map(|s| (s.step as f64, s.bands[b].1)).collect(),
            upper: fan.steps.iter().map(|s| (s.step as f64, s.bands[b].2)).collect(),
            opacity: 0.15 + 0.15 * (levels - 1 - b) as f64,
        });
    }
    Ok(Chart {
        title: format!("{} forecast", r.model),
        x_label: "packet offset".into(),
        y_label: "delay (ms)".into(),
        series: vec![
            Series {
                name: "history".into(),
                points: history,
                markers: false,
            },
            Series {
                name: "mixture mean".into(),
                points: fan.steps.iter().map(|s| (s.step as f64, s.mean_ms)).collect(),
                markers: false,
            },
            Series {
                name: "observed".into(),
                points: fan.steps.iter().map(|s| (s.step as f64, s.truth_ms)).collect(),
                markers: true,
            },
        ],
        bands,
        log_x: false,
    })
}

fn calibration(r: &EvalReport) -> Chart {
    let c = &r.calibration;
    Chart {
        title: format!("{} calibration", r.model),
        x_label: "nominal coverage".into(),
        y_label: "empirical coverage".into(),
        series: vec![
            Series {
                name: "ideal".into(),
                points: vec![(0.0, 0.0), (1.0, 1.0)],
                markers: false,
            },
            Series {
                name: r.model.clone(),
                points: c.levels.iter().copied().zip(c.coverage.iter().copied()).collect(),
                markers: true,
            },
        ],
        bands: Vec::new(),
        log_x: false,
    }
}

fn sweep_chart(
    rows: &[SweepRow],
    title: &str,
    x_label: &str,
    y_label: &str,
    point: impl Fn(&SweepRow) -> (f64, f64),
    log_x: bool,
) -> Chart {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let name = if r.model.is_single_step() {
            r.model.to_string()
        } else {
            format!("{} ({})", r.model, r.decode_mode)
        };
        groups.entry(name).or_default().push(point(r));
    }
    Chart {
        title: title.into(),
        x_label: x_label.into(),
        y_label: y_label.into(),
        series: groups
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name,
                    points,
                    markers: true,
                }
            })
            .collect(),
        bands: Vec::new(),
        log_x,
    }
}

fn chart_csv(c: &Chart) -> String {
    let mut out = String::from("series,x,y\n");
    for b in &c.bands {
        for (tag, pts) in [("lower", &b.lower), ("upper", &b.upper)] {
            for (x, y) in pts {
                let _ = writeln!(out, "{} {},{},{}", b.name, tag, x, y);
            }
        }
    }
    for s in &c.series {
        for (x, y) in &s.points {
            let _ = writeln!(out, "{},{},{}", s.name, x, y);
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn chart_svg(c: &Chart, csv: &str) -> String {
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite() && (!c.log_x || p.0 > 0.0);
    let all: Vec<(f64, f64)> = c
        .series
        .iter()
        .flat_map(|s| s.points.iter())
        .chain(c.bands.iter().flat_map(|b| b.lower.iter().chain(&b.upper)))
        .filter(finite)
        .copied()
        .collect();
    let fx = |x: f64| if c.log_x { x.log10() } else { x };
    let (mut x0, mut x1, mut y0, mut y1) = all.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, d, e), &(x, y)| (a.min(fx(x)), b.max(fx(x)), d.min(y), e.max(y)),
    );
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    y0 -= pad;
    y1 += pad;
    let (ml, mr, mt, mb) = MARGIN;
    let px = |x: f64| ml + (fx(x) - x0) / (x1 - x0) * (W - ml - mr);
    let py = |y: f64| H - mb - (y - y0) / (y1 - y0) * (H - mt - mb);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<!-- data\n{}-->", csv.replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (ml + W - mr) / 2.0,
        escape(&c.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - ml - mr,
        H - mt - mb
    );
    for t in ticks(x0, x1) {
        let xv = if c.log_x { 10f64.powf(t) } else { t };
        let x = px(xv);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="#ccc"/><text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"##,
            H - mb,
            mt,
            H - mb + 15.0,
            fmt_tick(xv)
        );
    }
    for t in ticks(y0, y1) {
        let y = py(t);
        let _ = writeln!(
            s,
            r##"<line x1="{ml}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ccc"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
            W - mr,
            ml - 5.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (ml + W - mr) / 2.0,
        H - 15.0,
        escape(&c.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (mt + H - mb) / 2.0,
        (mt + H - mb) / 2.0,
        escape(&c.y_label)
    );

    let mut legend = Vec::new();
    for b in &c.bands {
        let pts: Vec<String> = b
            .lower
            .iter()
            .chain(b.upper.iter().rev())
            .filter(finite)
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{}" fill-opacity="{:.2}" stroke="none"/>"#,
            pts.join(" "),
            PALETTE[0],
            b.opacity
        );
        legend.push((b.name.clone(), PALETTE[0], b.opacity));
    }
    for (i, series) in c.series.iter().enumerate() {
        let colour = PALETTE[(i + 1) % PALETTE.len()];
        let pts: Vec<(f64, f64)> = series.points.iter().filter(finite).map(|&(x, y)| (px(x), py(y))).collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        if series.markers {
            for (x, y) in &pts {
                let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="2.5" fill="{colour}"/>"#);
            }
        }
        legend.push((series.name.clone(), colour, 1.0));
    }
    for (i, (name, colour, opacity)) in legend.iter().enumerate() {
        let y = mt + 10.0 + 18.0 * i as f64;
        let x = W - mr + 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="8" fill="{colour}" fill-opacity="{opacity:.2}"/><text x="{}" y="{}">{}</text>"#,
            y - 7.0,
            x + 16.0,
            y + 1.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range() {
        let t = ticks(0.0, 1.0);
        assert_eq!(t.first(), Some(&0.0));
        assert!((t.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(ticks(-3.2, 7.9).len() >= 3);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(PlotInput::parse("{}").is_err());
        assert!(PlotInput::parse("[]").is_err());
        assert!(PlotInput::parse("").is_err());
    }
}
