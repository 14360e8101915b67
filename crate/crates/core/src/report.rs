//! Static SVG plots of metrics series, run manifests and sweep grids.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::SubsetName;
use crate::error::{invalid, Error, Result};
use crate::model::{validate_config, BlockForm, ModelConfig};
use crate::trainer::{MetricsRow, TrainConfig};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// One metrics history with its legend label (e.g. `8x64d`).
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub rows: Vec<MetricsRow>,
}

impl Series {
    pub fn best_test_error(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.test_err).reduce(f64::min)
    }
}

/// Epochs at which the logged learning rate falls below the previous row's.
pub fn drop_epochs(rows: &[MetricsRow]) -> Vec<usize> {
    rows.windows(2)
        .filter(|w| w[1].lr < w[0].lr)
        .map(|w| w[1].epoch)
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
        Frame {
            x: widen(x),
            y: widen(y),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }

    fn open(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text class="title" x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            (LEFT + WIDTH - RIGHT) / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = writeln!(out, r#"<g class="axes" stroke="black">"#);
        let _ = writeln!(out, r#"<line class="x-axis" x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/>"#);
        let _ = writeln!(out, r#"<line class="y-axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
        let _ = writeln!(out, "</g>");
        for t in ticks(self.x.0, self.x.1) {
            let x = self.px(t);
            let _ = writeln!(
                out,
                r#"<line class="tick" x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                y1 + 5.0,
                y1 + 18.0,
                fmt_tick(t)
            );
        }
        for t in ticks(self.y.0, self.y.1) {
            let y = self.py(t);
            let _ = writeln!(
                out,
                r##"<line class="grid" x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                x0 - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            out,
            r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 18.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text class="y-label" x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }

    fn legend(&self, out: &mut String, i: usize, label: &str) {
        let x = WIDTH - RIGHT + 15.0;
        let y = TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<g class="legend"><line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            x + 20.0,
            PALETTE[i % PALETTE.len()],
            x + 26.0,
            y + 4.0,
            escape(label)
        );
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Test error against epoch, one polyline per series, with a dashed
/// vertical marker at every learning-rate drop.
pub fn render_error_vs_epoch(series: &[Series], drops: &[usize]) -> Result<String> {
    if series.is_empty() {
        return Err(invalid("no series to plot"));
    }
    if let Some(s) = series.iter().find(|s| s.rows.is_empty()) {
        return Err(invalid(format!("series `{}` has no rows", s.label)));
    }
    let rows = || series.iter().flat_map(|s| s.rows.iter());
    let (x_lo, x_hi) = range(rows().map(|r| r.epoch as f64));
    let (_, y_hi) = range(rows().map(|r| r.test_err));
    let frame = Frame::new((x_lo.min(0.0), x_hi), (0.0, y_hi.max(1.0)));
    let mut out = String::new();
    frame.open(&mut out, "Test error vs. epoch", "epoch", "test error (%)");
    for &d in drops {
        let x = frame.px(d as f64);
        let _ = writeln!(
            out,
            r#"<line class="lr-drop" data-epoch="{d}" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
            HEIGHT - BOTTOM
        );
    }
    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = s
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", frame.px(r.epoch as f64), frame.py(r.test_err)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.label),
            PALETTE[i % PALETTE.len()],
            points.join(" ")
        );
        frame.legend(&mut out, i, &s.label);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// One model in an error-vs-size plot.
#[derive(Clone, Debug, PartialEq)]
pub struct SizePoint {
    pub label: String,
    pub params: usize,
    pub test_err: f64,
}

impl SizePoint {
    /// Uses the lowest test error the series reached.
    pub fn from_series(series: &Series, params: usize) -> Result<Self> {
        Ok(SizePoint {
            label: series.label.clone(),
            params,
            test_err: series
                .best_test_error()
                .ok_or_else(|| invalid(format!("series `{}` has no rows", series.label)))?,
        })
    }
}

/// Test error against parameter count (millions), points joined in
/// ascending size order.
pub fn render_error_vs_size(points: &[SizePoint]) -> Result<String> {
    if points.is_empty() {
        return Err(invalid("no points to plot"));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.params.cmp(&b.params).then_with(|| a.label.cmp(&b.label)));
    let millions = |p: usize| p as f64 / 1e6;
    let (x_lo, x_hi) = range(sorted.iter().map(|p| millions(p.params)));
    let (_, y_hi) = range(sorted.iter().map(|p| p.test_err));
    let pad = ((x_hi - x_lo) * 0.05).max(1e-3);
    let frame = Frame::new(((x_lo - pad).max(0.0), x_hi + pad), (0.0, y_hi.max(1.0)));
    let mut out = String::new();
    frame.open(
        &mut out,
        "Test error vs. model size",
        "parameters (millions)",
        "test error (%)",
    );
    let coords: Vec<(f64, f64)> = sorted
        .iter()
        .map(|p| (frame.px(millions(p.params)), frame.py(p.test_err)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline class="series" data-label="size" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
        PALETTE[0],
        coords
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    for (p, (x, y)) in sorted.iter().zip(&coords) {
        let _ = writeln!(
            out,
            r#"<circle class="point" data-label="{}" data-params="{}" cx="{x:.2}" cy="{y:.2}" r="4" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            escape(&p.label),
            p.params,
            PALETTE[0],
            x + 6.0,
            y - 6.0,
            escape(&p.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to re-launch a training run, plus the files it wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub subset: SubsetName,
    /// Training examples kept from the front of the subset, if limited.
    pub train_limit: Option<usize>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub plots: Vec<PathBuf>,
    pub artifact_version: String,
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunManifest {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("run_id", self.run_id.clone());
        kv("artifact_version", self.artifact_version.clone());
        kv("subset", self.subset.to_string());
        kv("train_limit", self.train_limit.map_or("none".into(), |n| n.to_string()));
        kv("depth", m.depth.to_string());
        kv("cardinality", m.cardinality.to_string());
        kv("base_width", m.base_width.to_string());
        kv("classes", m.num_classes.to_string());
        kv("block_form", m.block_form.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("lr_drop_epochs", join(&t.lr_drop_epochs));
        kv("lr_drop_factor", t.lr_drop_factor.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("seed", t.seed.to_string());
        kv("augment", t.augment.to_string());
        kv("metrics", self.metrics.display().to_string());
        kv("checkpoint", self.checkpoint.display().to_string());
        kv(
            "plots",
            join(&self.plots.iter().map(|p| p.display()).collect::<Vec<_>>()),
        );
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("manifest line {} is not `key = value`", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| invalid(format!("manifest lacks `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse()
                .map_err(|_| invalid(format!("manifest `{k}` = `{v}` is malformed")))
        }
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            v.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| num(k, s.trim().to_string()))
                .collect()
        };
        let model = ModelConfig::new(
            num("depth", get("depth")?)?,
            num("cardinality", get("cardinality")?)?,
            num("base_width", get("base_width")?)?,
            num("classes", get("classes")?)?,
        )
        .with_form(get("block_form")?.parse::<BlockForm>()?);
        let train = TrainConfig {
            epochs: num("epochs", get("epochs")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            base_lr: num("base_lr", get("base_lr")?)?,
            lr_drop_epochs: list("lr_drop_epochs")?,
            lr_drop_factor: num("lr_drop_factor", get("lr_drop_factor")?)?,
            momentum: num("momentum", get("momentum")?)?,
            weight_decay: num("weight_decay", get("weight_decay")?)?,
            seed: num("seed", get("seed")?)?,
            augment: num("augment", get("augment")?)?,
        };
        let limit = get("train_limit")?;
        let plots = get("plots")?;
        Ok(RunManifest {
            run_id: get("run_id")?,
            model,
            train,
            subset: get("subset")?.parse()?,
            train_limit: if limit == "none" {
                None
            } else {
                Some(num("train_limit", limit)?)
            },
            metrics: get("metrics")?.into(),
            checkpoint: get("checkpoint")?.into(),
            plots: plots.split(',').filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            artifact_version: get("artifact_version")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Depth,
    Cardinality,
    BaseWidth,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Depth => "depth",
            SweepAxis::Cardinality => "cardinality",
            SweepAxis::BaseWidth => "base-width",
        }
    }
}

/// Expands per-axis value lists into a one-axis grid. At most one list may
/// hold more than one value; a grid with nothing varying is a single run
/// and reported as a cardinality sweep of length one.
pub fn sweep_grid(
    depths: &[usize],
    cardinalities: &[usize],
    base_widths: &[usize],
    num_classes: usize,
) -> Result<(SweepAxis, Vec<ModelConfig>)> {
    let axes = [
        (SweepAxis::Depth, depths),
        (SweepAxis::Cardinality, cardinalities),
        (SweepAxis::BaseWidth, base_widths),
    ];
    if let Some((axis, _)) = axes.iter().find(|(_, v)| v.is_empty()) {
        return Err(invalid(format!("no values given for {}", axis.as_str())));
    }
    let varying: Vec<SweepAxis> = axes.iter().filter(|(_, v)| v.len() > 1).map(|(a, _)| *a).collect();
    if varying.len() > 1 {
        return Err(invalid(format!(
            "a sweep varies one axis with the others held fixed, but {} all vary",
            varying.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(" and ")
        )));
    }
    let axis = varying.first().copied().unwrap_or(SweepAxis::Cardinality);
    let mut configs = Vec::new();
    for &depth in depths {
        for &c in cardinalities {
            for &d in base_widths {
                let cfg = ModelConfig::new(depth, c, d, num_classes);
                validate_config(&cfg)?;
                configs.push(cfg);
            }
        }
    }
    let mut seen = configs.clone();
    seen.dedup();
    if seen.len() != configs.len() {
        return Err(Error::InvalidArgument("sweep grid repeats a value".into()));
    }
    Ok((axis, configs))
}
