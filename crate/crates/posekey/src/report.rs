//! Turns evaluated runs into the comparison artifacts: four CSV tables,
//! a metadata document describing the measurement protocol, and
//! per-class bar charts rendered straight to PNG.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::train::ModelKind;

/// Row order of the four-configuration comparison table.
pub const TABLE1_ORDER: [ModelKind; 4] =
    [ModelKind::Cgan, ModelKind::CganPose, ModelKind::Cdiff, ModelKind::CdiffPose];

/// Hand-entered row for the free-form comparison table, for methods
/// whose numbers come from elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub fid: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub note: String,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub table1: PathBuf,
    pub table2: PathBuf,
    pub table3: PathBuf,
    pub per_class: PathBuf,
    pub meta: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Measurement-protocol text embedded in the metadata document, since
/// the pairing and sampling rules are choices of this toolkit rather
/// than universal conventions.
pub const PROTOCOL_NOTES: &str = "Frechet distances use features from the bundled \
small-CNN extractor unless the metadata names another source; per-class rows reuse the \
same machinery restricted to one class. MS-SSIM pairs each generated image with its \
nearest real exemplar of the same class by pixel distance. Mean keypoint error compares \
extracted poses against the canonical class pose, in pixels per joint; samples whose \
extraction fails are counted as missing. Runs flagged small_sample drew fewer than 100 \
images per class, which makes covariance estimates noisy.";

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) }
    })?;
    let io_err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    w.write_record(header).map_err(io_err)?;
    for row in rows {
        w.write_record(row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Position in the canonical four-model order; unknown names sort after.
fn canonical_rank(model: &str) -> usize {
    TABLE1_ORDER
        .iter()
        .position(|k| k.as_str() == model)
        .unwrap_or(TABLE1_ORDER.len())
}

/// Which pose losses a run trained with, from its effective weights.
fn ablation_variant(report: &MetricReport) -> Option<&'static str> {
    match (report.meta.lambda_kp > 0.0, report.meta.lambda_pose > 0.0) {
        (true, false) => Some("kp"),
        (false, true) => Some("pose"),
        (true, true) => Some("both"),
        (false, false) => None,
    }
}

/// Base family of a configuration: the adversarial or the diffusion
/// branch, regardless of pose supervision.
fn base_family(model: &str) -> (&str, usize) {
    match model.parse::<ModelKind>() {
        Ok(k) if k.is_diffusion() => ("cdiff", 1),
        Ok(_) => ("cgan", 0),
        Err(_) => (model, 2),
    }
}

#[derive(Serialize)]
struct MetaEntry<'a> {
    model: &'a str,
    fid: f64,
    ms_ssim: f64,
    mean_kp_err_px: Option<f64>,
    kp_missing: usize,
    meta: &'a crate::eval::ReportMeta,
}

#[derive(Serialize)]
struct MetaDoc<'a> {
    protocol: &'static str,
    models: Vec<MetaEntry<'a>>,
}

/// Writes the comparison tables, per-class breakdown, protocol
/// metadata, and per-class bar charts into `out_dir`. Reports may
/// arrive in any order; rows come out in the canonical model order.
pub fn emit_report(
    reports: &[MetricReport],
    extra_rows: &[ComparisonRow],
    out_dir: &Path,
) -> Result<ReportFiles> {
    if reports.is_empty() {
        return Err(Error::Argument("emit_report needs at least one evaluated run".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut ordered: Vec<&MetricReport> = reports.iter().collect();
    let original: Vec<usize> = (0..reports.len()).collect();
    let mut keyed: Vec<(usize, usize, &MetricReport)> = ordered
        .drain(..)
        .zip(original)
        .map(|(r, i)| (canonical_rank(&r.model), i, r))
        .collect();
    keyed.sort_by_key(|&(rank, idx, _)| (rank, idx));
    let ordered: Vec<&MetricReport> = keyed.into_iter().map(|(_, _, r)| r).collect();

    let table1 = out_dir.join("table1.csv");
    let rows: Vec<Vec<String>> = ordered
        .iter()
        .map(|r| vec![r.model.clone(), fmt_f(r.fid), fmt_f(r.ms_ssim)])
        .collect();
    write_csv(&table1, &["model", "fid", "ms_ssim"], &rows)?;

    let table2 = out_dir.join("table2.csv");
    let mut ablation: Vec<(usize, usize, usize, Vec<String>)> = Vec::new();
    for r in &ordered {
        let Some(variant) = ablation_variant(r) else { continue };
        let (family, family_rank) = base_family(&r.model);
        let variant_rank = match variant {
            "kp" => 0,
            "pose" => 1,
            _ => 2,
        };
        // full-supervision rows close the table, mirroring the usual
        // ablation layout: single-loss rows first, combined row last
        let tier = usize::from(variant == "both");
        ablation.push((
            tier,
            family_rank,
            variant_rank,
            vec![family.to_string(), variant.to_string(), fmt_f(r.fid), fmt_f(r.ms_ssim)],
        ));
    }
    ablation.sort_by_key(|row| (row.0, row.1, row.2));
    let rows: Vec<Vec<String>> = ablation.into_iter().map(|(_, _, _, row)| row).collect();
    write_csv(&table2, &["model", "variant", "fid", "ms_ssim"], &rows)?;

    let table3 = out_dir.join("table3.csv");
    let mut rows: Vec<Vec<String>> = ordered
        .iter()
        .map(|r| vec![r.model.clone(), fmt_f(r.fid), fmt_f(r.ms_ssim), String::new()])
        .collect();
    for extra in extra_rows {
        rows.push(vec![
            extra.method.clone(),
            fmt_opt(extra.fid),
            fmt_opt(extra.ms_ssim),
            extra.note.clone(),
        ]);
    }
    write_csv(&table3, &["method", "fid", "ms_ssim", "note"], &rows)?;

    let per_class = out_dir.join("per_class_metrics.csv");
    let mut rows = Vec::new();
    for r in &ordered {
        for pc in &r.per_class {
            rows.push(vec![
                r.model.clone(),
                pc.class_id.to_string(),
                fmt_f(pc.fid),
                fmt_f(pc.ms_ssim),
                fmt_opt(pc.mean_kp_err_px),
            ]);
        }
    }
    write_csv(&per_class, &["model", "class_id", "fid", "ms_ssim", "mean_kp_err"], &rows)?;

    let meta = out_dir.join("report_meta.json");
    let doc = MetaDoc {
        protocol: PROTOCOL_NOTES,
        models: ordered
            .iter()
            .map(|r| MetaEntry {
                model: &r.model,
                fid: r.fid,
                ms_ssim: r.ms_ssim,
                mean_kp_err_px: r.mean_kp_err_px,
                kp_missing: r.kp_missing,
                meta: &r.meta,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Config(format!("report metadata: {e}")))?;
    fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;

    let mut plots = Vec::new();
    let classes = ordered.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
    if classes > 0 {
        let series: Vec<(String, Rgb<u8>)> = ordered
            .iter()
            .enumerate()
            .map(|(i, r)| (r.model.clone(), series_color(&r.model, i)))
            .collect();
        let collect_metric = |pick: &dyn Fn(&crate::eval::PerClassMetrics) -> Option<f64>| {
            (0..classes)
                .map(|c| {
                    let values = ordered
                        .iter()
                        .map(|r| r.per_class.iter().find(|pc| pc.class_id == c).and_then(pick))
                        .collect();
                    (c.to_string(), values)
                })
                .collect::<Vec<_>>()
        };
        let fid_plot = out_dir.join("per_class_fid.png");
        render_bar_chart(
            "FID PER KEY POSTURE (LOWER IS BETTER)",
            &series,
            &collect_metric(&|pc| Some(pc.fid)),
            &fid_plot,
        )?;
        plots.push(fid_plot);
        let ssim_plot = out_dir.join("per_class_ms_ssim.png");
        render_bar_chart(
            "MS-SSIM PER KEY POSTURE (HIGHER IS BETTER)",
            &series,
            &collect_metric(&|pc| Some(pc.ms_ssim)),
            &ssim_plot,
        )?;
        plots.push(ssim_plot);
        let kp_groups = collect_metric(&|pc| pc.mean_kp_err_px);
        if kp_groups.iter().any(|(_, vs): &(_, Vec<Option<f64>>)| vs.iter().any(|v| v.is_some())) {
            let kp_plot = out_dir.join("per_class_kp_err.png");
            render_bar_chart(
                "MEAN KEYPOINT ERROR PX (LOWER IS BETTER)",
                &series,
                &kp_groups,
                &kp_plot,
            )?;
            plots.push(kp_plot);
        }
    }

    Ok(ReportFiles { table1, table2, table3, per_class, meta, plots })
}

/// Stable bar color per configuration; other names cycle a fallback
/// palette by position.
fn series_color(model: &str, index: usize) -> Rgb<u8> {
    match model {
        "cgan" => Rgb([204, 72, 63]),
        "cgan_pose" => Rgb([232, 144, 58]),
        "cdiff" => Rgb([62, 120, 188]),
        "cdiff_pose" => Rgb([58, 160, 94]),
        _ => {
            const FALLBACK: [[u8; 3]; 4] =
                [[120, 120, 120], [160, 90, 160], [90, 160, 160], [170, 160, 60]];
            Rgb(FALLBACK[index % FALLBACK.len()])
        }
    }
}

const BAR_W: u32 = 12;
const BAR_GAP: u32 = 2;
const GROUP_GAP: u32 = 14;
const PLOT_H: u32 = 220;
const MARGIN_L: u32 = 56;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 48;
const MARGIN_B: u32 = 26;

/// Grouped bar chart: one group per class, one bar per model. Missing
/// values leave a gap in the group.
fn render_bar_chart(
    title: &str,
    series: &[(String, Rgb<u8>)],
    groups: &[(String, Vec<Option<f64>>)],
    path: &Path,
) -> Result<()> {
    if series.is_empty() || groups.is_empty() {
        return Err(Error::Argument("bar chart needs at least one series and group".into()));
    }
    let s = series.len() as u32;
    let group_w = s * BAR_W + (s - 1) * BAR_GAP + GROUP_GAP;
    let width = MARGIN_L + groups.len() as u32 * group_w + MARGIN_R;
    let height = MARGIN_T + PLOT_H + MARGIN_B;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    let max_val = groups
        .iter()
        .flat_map(|(_, vs)| vs.iter().flatten())
        .fold(0.0f64, |acc, &v| acc.max(v));
    let y_max = nice_ceil(max_val);
    let baseline = MARGIN_T + PLOT_H;

    let ink = Rgb([40, 40, 40]);
    let grid = Rgb([225, 225, 225]);
    draw_text(&mut img, 8, 8, title, 2, ink);

    // legend under the title
    let mut lx = MARGIN_L;
    for (name, color) in series {
        fill_rect(&mut img, lx, 30, 8, 8, *color);
        draw_text(&mut img, lx + 11, 31, name, 1, ink);
        lx += 11 + text_width(name, 1) + 14;
    }

    // horizontal gridlines and tick labels at quarters of the axis
    for tick in 0..=4u32 {
        let v = y_max * tick as f64 / 4.0;
        let y = baseline - (tick * PLOT_H / 4);
        if tick > 0 {
            for x in MARGIN_L..width - MARGIN_R {
                img.put_pixel(x, y, grid);
            }
        }
        let label = fmt_tick(v, y_max);
        let tw = text_width(&label, 1);
        let lx = MARGIN_L.saturating_sub(tw + 6);
        draw_text(&mut img, lx, y.saturating_sub(3), &label, 1, ink);
    }

    for (gi, (label, values)) in groups.iter().enumerate() {
        let gx = MARGIN_L + gi as u32 * group_w + GROUP_GAP / 2;
        for (si, value) in values.iter().enumerate() {
            if let Some(v) = value {
                let h = ((v / y_max) * PLOT_H as f64).round().clamp(0.0, PLOT_H as f64) as u32;
                let x = gx + si as u32 * (BAR_W + BAR_GAP);
                fill_rect(&mut img, x, baseline - h, BAR_W, h, series[si].1);
            }
        }
        let bars_w = s * BAR_W + (s - 1) * BAR_GAP;
        let tw = text_width(label, 1);
        let lx = gx + bars_w.saturating_sub(tw) / 2;
        draw_text(&mut img, lx, baseline + 6, label, 1, ink);
    }

    // axes drawn last so bars cannot overpaint them
    for y in MARGIN_T..=baseline {
        img.put_pixel(MARGIN_L - 1, y, ink);
    }
    for x in MARGIN_L - 1..width - MARGIN_R {
        img.put_pixel(x, baseline, ink);
    }

    img.save(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

/// Smallest "round" value (1, 2, 2.5, 5 times a power of ten) at or
/// above `v`; charts with an empty range fall back to 1.
fn nice_ceil(v: f64) -> f64 {
    if !v.is_finite() || v <= 0.0 {
        return 1.0;
    }
    let base = 10f64.powf(v.log10().floor());
    let m = v / base;
    let nice = if m <= 1.0 {
        1.0
    } else if m <= 2.0 {
        2.0
    } else if m <= 2.5 {
        2.5
    } else if m <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * base
}

fn fmt_tick(v: f64, y_max: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if y_max >= 100.0 {
        format!("{v:.0}")
    } else if y_max >= 10.0 {
        format!("{v:.1}")
    } else if y_max >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for dy in 0..h {
        for dx in 0..w {
            let (px, py) = (x + dx, y + dy);
            if px < img.width() && py < img.height() {
                img.put_pixel(px, py, color);
            }
        }
    }
}

/// 5x7 bitmap glyphs; each row is 5 bits, leftmost pixel in the high
/// bit. Lowercase input is drawn with the uppercase shapes.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b11110, 0b10001, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110],
        'E' => [0b11111, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b11011, 0b10001],
        'X' => [0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b01010, 0b10001],
        'Y' => [0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00110, 0b01000, 0b10000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b00100, 0b01000],
        '-' => [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        _ => [0; 7],
    }
}

fn text_width(text: &str, scale: u32) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 { 0 } else { n * 6 * scale - scale }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..5u32 {
                if bits & (0b10000 >> rx) != 0 {
                    fill_rect(
                        img,
                        cx + rx * scale,
                        y + ry as u32 * scale,
                        scale,
                        scale,
                        color,
                    );
                }
            }
        }
        cx += 6 * scale;
    }
}
