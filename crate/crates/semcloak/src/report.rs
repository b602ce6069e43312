//! Tables and plots rendered from an [`ExperimentRecord`].

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use semcloak_core::metrics::MetricReport;
use semcloak_core::signal::ChannelFamily;

use crate::error::{io_err, HarnessError, Result};
use crate::record::{family_name, AttackKind, ExperimentRecord};

/// A scalar read off a metric report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    MsSsim,
    Perceptual,
    Fpesr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Psnr, Metric::MsSsim, Metric::Perceptual, Metric::Fpesr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::MsSsim => "ms_ssim",
            Metric::Perceptual => "perceptual",
            Metric::Fpesr => "fpesr",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR (dB)",
            Metric::MsSsim => "MS-SSIM",
            Metric::Perceptual => "perceptual distance",
            Metric::Fpesr => "FPESR",
        }
    }

    pub fn of(self, r: &MetricReport) -> f64 {
        match self {
            Metric::Psnr => r.psnr_summary().mean,
            Metric::MsSsim => r.ms_ssim_summary().mean,
            Metric::Perceptual => r.perceptual_summary().mean,
            Metric::Fpesr => r.fpesr,
        }
    }
}

/// `(snr, value)` points per attack for one family, sorted by SNR.
pub fn curves(record: &ExperimentRecord, family: ChannelFamily, metric: Metric) -> BTreeMap<AttackKind, Vec<(f64, f64)>> {
    let mut out: BTreeMap<AttackKind, Vec<(f64, f64)>> = BTreeMap::new();
    for c in record.cells.iter().filter(|c| c.channel.family == family) {
        out.entry(c.attack).or_default().push((c.channel.snr_db, metric.of(&c.report)));
    }
    for pts in out.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// Column groups of the defense table.
pub const DEFENSE_HEADER: [&str; 6] = [
    "attack",
    "host_psnr",
    "host_ms_ssim",
    "private_psnr",
    "private_ms_ssim",
    "fpesr",
];

/// The defense table as markdown with the host / private / FPESR column groups.
pub fn defense_markdown(record: &ExperimentRecord) -> String {
    let mut s = String::new();
    s.push_str("| Attack | Similarity with Host Images |  | Similarity with Private Images |  | FPESR |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    s.push_str("|  | PSNR (dB) | MS-SSIM | PSNR (dB) | MS-SSIM |  |\n");
    for d in &record.defense {
        s.push_str(&format!(
            "| {} | {:.2} | {:.3} | {:.2} | {:.3} | {:.3} |\n",
            d.attack,
            d.vs_host.psnr_summary().mean,
            d.vs_host.ms_ssim_summary().mean,
            d.vs_private.psnr_summary().mean,
            d.vs_private.ms_ssim_summary().mean,
            d.vs_private.fpesr,
        ));
    }
    s
}

/// Writes CSV tables, the markdown defense table and SVG plots into `dir`. Returns every
/// file written.
pub fn emit_report(record: &ExperimentRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();

    let path = dir.join("attacks.csv");
    let rows = record
        .cells
        .iter()
        .map(|c| {
            let r = &c.report;
            vec![
                c.attack.to_string(),
                family_name(c.channel.family).to_string(),
                c.channel.snr_db.to_string(),
                r.n_samples.to_string(),
                num(r.psnr_summary().mean),
                num(r.psnr_summary().std),
                num(r.ms_ssim_summary().mean),
                num(r.ms_ssim_summary().std),
                num(r.perceptual_summary().mean),
                num(r.perceptual_summary().std),
                num(r.fpesr),
            ]
        })
        .collect();
    let header = [
        "attack", "family", "snr_db", "n", "psnr_mean", "psnr_std", "ms_ssim_mean", "ms_ssim_std", "perceptual_mean",
        "perceptual_std", "fpesr",
    ];
    write_csv(&path, &header, rows)?;
    files.push(path);

    if !record.defense.is_empty() {
        let path = dir.join("defense.csv");
        let rows = record
            .defense
            .iter()
            .map(|d| {
                vec![
                    d.attack.to_string(),
                    num(d.vs_host.psnr_summary().mean),
                    num(d.vs_host.ms_ssim_summary().mean),
                    num(d.vs_private.psnr_summary().mean),
                    num(d.vs_private.ms_ssim_summary().mean),
                    num(d.vs_private.fpesr),
                ]
            })
            .collect();
        write_csv(&path, &DEFENSE_HEADER, rows)?;
        files.push(path);
        let path = dir.join("defense.md");
        std::fs::write(&path, defense_markdown(record)).map_err(io_err(&path))?;
        files.push(path);
    }

    if !record.utility.is_empty() {
        let path = dir.join("utility.csv");
        let rows = record
            .utility
            .iter()
            .map(|u| {
                vec![
                    u.channel.snr_db.to_string(),
                    num(u.undefended.psnr_summary().mean),
                    num(u.defended.psnr_summary().mean),
                    num(u.undefended.ms_ssim_summary().mean),
                    num(u.defended.ms_ssim_summary().mean),
                ]
            })
            .collect();
        let header = ["snr_db", "undefended_psnr", "defended_psnr", "undefended_ms_ssim", "defended_ms_ssim"];
        write_csv(&path, &header, rows)?;
        files.push(path);
        let mut series = BTreeMap::new();
        for (name, pick) in [("undefended", false), ("defended", true)] {
            let pts = record
                .utility
                .iter()
                .map(|u| (u.channel.snr_db, Metric::Psnr.of(if pick { &u.defended } else { &u.undefended })))
                .collect::<Vec<_>>();
            series.insert(name.to_string(), pts);
        }
        let path = dir.join("utility_psnr.svg");
        line_plot(&path, "Bob private-image PSNR", Metric::Psnr.label(), &series)?;
        files.push(path);
    }

    let mut families: Vec<ChannelFamily> = Vec::new();
    for c in &record.cells {
        if !families.contains(&c.channel.family) {
            families.push(c.channel.family);
        }
    }
    for family in families {
        for metric in Metric::ALL {
            let series: BTreeMap<String, Vec<(f64, f64)>> = curves(record, family, metric)
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            let path = dir.join(format!("{}_{}.svg", metric.name(), family_name(family)));
            let title = format!("{} vs SNR ({})", metric.label(), family_name(family));
            line_plot(&path, &title, metric.label(), &series)?;
            files.push(path);
        }
        let path = dir.join(format!("fpesr_bars_{}.svg", family_name(family)));
        bar_plot(&path, record, family)?;
        files.push(path);
    }
    Ok(files)
}

fn plot_err(path: &Path) -> impl Fn(String) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Axis range covering `values`, padded so that a single point still gets a span.
fn span(values: impl Iterator<Item = f64>) -> Range<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return 0.0..1.0;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5f64.max(0.05 * hi.abs()) };
    (lo - pad)..(hi + pad)
}

/// One line-and-marker series per key, x = SNR.
pub fn line_plot(path: &Path, title: &str, y_label: &str, series: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let xs = span(series.values().flatten().map(|p| p.0));
    let ys = span(series.values().flatten().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xs, ys)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("SNR (dB)")
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(|e| err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// FPESR bars grouped by SNR, one bar per attack.
fn bar_plot(path: &Path, record: &ExperimentRecord, family: ChannelFamily) -> Result<()> {
    let err = plot_err(path);
    let data = curves(record, family, Metric::Fpesr);
    let mut snrs: Vec<f64> = data.values().flatten().map(|p| p.0).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    let groups = snrs.len().max(1);
    let width = 1.0 / (data.len() + 1) as f64;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("FPESR ({})", family_name(family)), ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..groups as f64, 0.0..1.05)
        .map_err(|e| err(e.to_string()))?;
    let labels = snrs.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).map(|s| format!("{s} dB")).unwrap_or_default()
        })
        .y_desc("FPESR")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (j, (kind, pts)) in data.iter().enumerate() {
        let color = Palette99::pick(j).to_rgba();
        let bars = pts.iter().filter_map(|&(snr, v)| {
            let g = snrs.iter().position(|&s| s == snr)? as f64;
            let x0 = g + width * (j as f64 + 0.5);
            Some(Rectangle::new([(x0, 0.0), (x0 + width, v)], color.filled()))
        });
        chart
            .draw_series(bars)
            .map_err(|e| err(e.to_string()))?
            .label(kind.name())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}
