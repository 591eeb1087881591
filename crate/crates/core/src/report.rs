//! Rate-distortion reports: curve CSVs, plots and Bjøntegaard tables.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::eval::{bd_quality_with, bd_rate_with, RdPoint};

/// A named rate-distortion curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub name: String,
    pub points: Vec<RdPoint>,
}

impl Curve {
    pub fn new(name: impl Into<String>, mut points: Vec<RdPoint>) -> Self {
        points.sort_by(|a, b| a.bpp_avg().total_cmp(&b.bpp_avg()));
        Curve { name: name.into(), points }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    curve: String,
    lambda: f64,
    bpp_left: f64,
    bpp_right: f64,
    bpp_avg: f64,
    psnr_left: f64,
    psnr_right: f64,
    psnr_avg: f64,
    msssim_left: f64,
    msssim_right: f64,
    msssim_avg: f64,
}

#[derive(Debug, Deserialize)]
struct BareRow {
    lambda: f64,
    bpp_left: f64,
    bpp_right: f64,
    psnr_left: f64,
    psnr_right: f64,
    msssim_left: f64,
    msssim_right: f64,
}

pub fn curves_to_csv(curves: &[Curve]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in curves {
        for p in &c.points {
            w.serialize(Row {
                curve: c.name.clone(),
                lambda: p.lambda,
                bpp_left: p.bpp[0],
                bpp_right: p.bpp[1],
                bpp_avg: p.bpp_avg(),
                psnr_left: p.psnr[0],
                psnr_right: p.psnr[1],
                psnr_avg: p.psnr_avg(),
                msssim_left: p.msssim[0],
                msssim_right: p.msssim[1],
                msssim_avg: p.msssim_avg(),
            })
            .map_err(|e| Error::Other(format!("csv: {e}")))?;
        }
    }
    w.into_inner().map_err(|e| Error::Other(format!("csv: {e}")))
}

/// Parses a curve CSV. Files without a `curve` column hold a single curve
/// named `default_name`.
pub fn curves_from_csv(bytes: &[u8], default_name: &str) -> Result<Vec<Curve>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(|e| Error::Format(format!("csv header: {e}")))?.clone();
    let named = headers.iter().any(|h| h == "curve");
    let mut curves: Vec<Curve> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("csv: {e}")))?;
        let (name, p): (String, BareRow) = if named {
            let row: Row = rec.deserialize(Some(&headers)).map_err(|e| Error::Format(format!("csv row: {e}")))?;
            let bare = BareRow {
                lambda: row.lambda,
                bpp_left: row.bpp_left,
                bpp_right: row.bpp_right,
                psnr_left: row.psnr_left,
                psnr_right: row.psnr_right,
                msssim_left: row.msssim_left,
                msssim_right: row.msssim_right,
            };
            (row.curve, bare)
        } else {
            let row: BareRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Format(format!("csv row: {e}")))?;
            (default_name.to_string(), row)
        };
        let point = RdPoint {
            lambda: p.lambda,
            bpp: [p.bpp_left, p.bpp_right],
            psnr: [p.psnr_left, p.psnr_right],
            msssim: [p.msssim_left, p.msssim_right],
        };
        match curves.iter_mut().find(|c| c.name == name) {
            Some(c) => c.points.push(point),
            None => curves.push(Curve { name, points: vec![point] }),
        }
    }
    if curves.is_empty() {
        return Err(Error::Format("csv holds no points".into()));
    }
    Ok(curves)
}

pub fn read_curves(path: &Path) -> Result<Vec<Curve>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
    curves_from_csv(&bytes, stem)
}

/// One row of a Bjøntegaard table, test curve against the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct BdRow {
    pub test: String,
    pub bd_rate_psnr: std::result::Result<f64, String>,
    pub bd_psnr: std::result::Result<f64, String>,
    pub bd_rate_msssim: std::result::Result<f64, String>,
}

pub fn bd_rows(reference: &Curve, tests: &[Curve]) -> Vec<BdRow> {
    let r = &reference.points;
    tests
        .iter()
        .map(|t| BdRow {
            test: t.name.clone(),
            bd_rate_psnr: bd_rate_with(r, &t.points, RdPoint::psnr_avg).map_err(|e| e.to_string()),
            bd_psnr: bd_quality_with(r, &t.points, RdPoint::psnr_avg).map_err(|e| e.to_string()),
            bd_rate_msssim: bd_rate_with(r, &t.points, RdPoint::msssim_avg).map_err(|e| e.to_string()),
        })
        .collect()
}

/// Markdown table; negative BD-rate and positive BD-PSNR favour the test curve.
pub fn bd_table(reference: &Curve, tests: &[Curve]) -> String {
    let cell = |v: &std::result::Result<f64, String>, unit: &str| match v {
        Ok(x) => format!("{x:+.2}{unit}"),
        Err(e) => format!("n/a ({e})"),
    };
    let mut s = format!("Reference: {}\n\n", reference.name);
    s.push_str("| test | BD-rate (PSNR) | BD-PSNR | BD-rate (MS-SSIM) |\n|---|---|---|---|\n");
    for row in bd_rows(reference, tests) {
        s.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            row.test,
            cell(&row.bd_rate_psnr, "%"),
            cell(&row.bd_psnr, " dB"),
            cell(&row.bd_rate_msssim, "%")
        ));
    }
    s.push_str("\nBPP counts the whole container: each view is charged its own streams plus half of the header, length fields and checksums.\n");
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    MsSsim,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR (dB)",
            Metric::MsSsim => "MS-SSIM",
        }
    }

    fn value(self, p: &RdPoint) -> f64 {
        match self {
            Metric::Psnr => p.psnr_avg(),
            Metric::MsSsim => p.msssim_avg(),
        }
    }
}

const FONT_FAMILY: &str = "sans-serif";
const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
];

/// Registers a TrueType font for plot labels once per process. Returns false
/// when none is available, in which case plots are drawn without text.
fn fonts_available() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let custom = std::env::var_os("BISIC_FONT").map(PathBuf::from);
        let candidates = custom.into_iter().chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(FONT_FAMILY, FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no TrueType font found; plots will have no labels (set BISIC_FONT)");
        false
    })
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(200, 30, 30),
    RGBColor(30, 90, 200),
    RGBColor(20, 150, 60),
    RGBColor(200, 120, 0),
    RGBColor(120, 40, 160),
    RGBColor(60, 60, 60),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Other(format!("plot: {e}"))
}

/// Renders quality against average BPP for every curve into a PNG.
pub fn plot_curves(path: &Path, curves: &[Curve], metric: Metric) -> Result<()> {
    let pts: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.points.iter().map(|p| (p.bpp_avg(), metric.value(p)))).collect();
    if pts.is_empty() {
        return Err(Error::Param("nothing to plot".into()));
    }
    let span = |v: Vec<f64>| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.08).max(1e-3);
        (lo - pad)..(hi + pad)
    };
    let xr = span(pts.iter().map(|p| p.0).collect());
    let yr = span(pts.iter().map(|p| p.1).collect());
    let labels = fonts_available();
    let tmp = crate::data::tmp_path(path);
    let tmp_png = tmp.with_extension("tmp.png");
    {
        let root = BitMapBackend::new(&tmp_png, (800, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if labels {
            builder.caption(format!("{} vs rate", metric.label()), (FONT_FAMILY, 24)).x_label_area_size(45).y_label_area_size(60);
        }
        let mut chart = builder.build_cartesian_2d(xr, yr).map_err(plot_err)?;
        if labels {
            chart.configure_mesh().x_desc("bpp (average of both views)").y_desc(metric.label()).draw().map_err(plot_err)?;
        }
        for (i, c) in curves.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let line: Vec<(f64, f64)> = c.points.iter().map(|p| (p.bpp_avg(), metric.value(p))).collect();
            let series = chart.draw_series(LineSeries::new(line.clone(), color.stroke_width(2))).map_err(plot_err)?;
            if labels {
                series.label(c.name.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
            }
            chart.draw_series(line.into_iter().map(|p| Circle::new(p, 4, color.filled()))).map_err(plot_err)?;
        }
        if labels {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .position(SeriesLabelPosition::LowerRight)
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    std::fs::rename(&tmp_png, path).map_err(|e| Error::io(path, e))
}

/// Files written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub psnr_plot: PathBuf,
    pub msssim_plot: PathBuf,
    pub csv: PathBuf,
    pub bd_table: PathBuf,
}

/// Writes both RD plots, the combined CSV and a BD table comparing every
/// other curve against `reference`.
pub fn emit_report(curves: &[Curve], reference: &str, out_dir: &Path) -> Result<ReportFiles> {
    let r = curves
        .iter()
        .find(|c| c.name == reference)
        .ok_or_else(|| Error::Param(format!("reference curve {reference:?} not among the inputs")))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        psnr_plot: out_dir.join("rd_psnr.png"),
        msssim_plot: out_dir.join("rd_msssim.png"),
        csv: out_dir.join("rd_points.csv"),
        bd_table: out_dir.join("bd_table.md"),
    };
    plot_curves(&files.psnr_plot, curves, Metric::Psnr)?;
    plot_curves(&files.msssim_plot, curves, Metric::MsSsim)?;
    write_atomic(&files.csv, &curves_to_csv(curves)?)?;
    let others: Vec<Curve> = curves.iter().filter(|c| c.name != reference).cloned().collect();
    write_atomic(&files.bd_table, bd_table(r, &others).as_bytes())?;
    Ok(files)
}
