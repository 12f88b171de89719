//! Hand-emitted figures: an SVG with loss and accuracy panels and binary PPM
//! overlays.

use std::fmt::Write as _;

use skullstrip_core::training::EpochRecord;

/// One curve set, as read from a history file.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub records: Vec<EpochRecord>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];
const PANEL_W: f64 = 440.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 56.0;

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// Range padded by 5% so flat curves stay visible.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) * 0.1 };
    (lo - 0.05 * span, hi + 0.05 * span)
}

struct Panel<'a> {
    title: &'a str,
    x0: f64,
    /// Line extractors: (legend suffix, value, dashed).
    lines: &'a [(&'a str, fn(&EpochRecord) -> f64, bool)],
}

fn draw_panel(svg: &mut String, p: &Panel, series: &[Series], max_epoch: usize) {
    let vals = series.iter().flat_map(|s| s.records.iter().flat_map(|r| p.lines.iter().map(move |l| (l.1)(r))));
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = padded(lo, hi);
    let (left, top) = (p.x0 + MARGIN, 40.0);
    let (w, h) = (PANEL_W - MARGIN - 12.0, PANEL_H - 40.0 - 40.0);
    let xmax = max_epoch.max(2) as f64;
    let px = |e: f64| left + (e - 1.0) / (xmax - 1.0) * w;
    let py = |v: f64| top + (hi - v) / (hi - lo) * h;

    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        left + w / 2.0,
        p.title
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{left:.1}" y2="{y:.1}" stroke="#444"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"##,
            left - 4.0,
            left - 6.0,
            y + 3.0,
            fmt_tick(v)
        );
    }
    let step = (max_epoch / 5).max(1);
    for e in (1..=max_epoch).filter(|e| e % step == 0 || *e == 1) {
        let x = px(e as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10">{e}</text>"##,
            top + h,
            top + h + 4.0,
            top + h + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">epoch</text>"#,
        left + w / 2.0,
        top + h + 32.0
    );

    let mut legend_y = top + 12.0;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for (suffix, f, dashed) in p.lines {
            let mut d = String::new();
            for (i, r) in s.records.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, px(r.epoch as f64), py(f(r)));
            }
            let dash = if *dashed { r#" stroke-dasharray="5,3""# } else { "" };
            let _ = writeln!(svg, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#);
            let lx = left + w - 120.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{:.1}" y="{:.1}" font-size="10">{} {suffix}</text>"#,
                lx + 18.0,
                lx + 22.0,
                legend_y + 3.0,
                escape(&s.name)
            );
            legend_y += 13.0;
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Loss (train solid, validation dashed) and validation accuracy panels.
/// The output depends only on the inputs.
pub fn curves_svg(series: &[Series]) -> String {
    let max_epoch = series.iter().flat_map(|s| s.records.iter().map(|r| r.epoch)).max().unwrap_or(1);
    let mut svg = String::new();
    let width = 2.0 * PANEL_W;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let loss: [(&str, fn(&EpochRecord) -> f64, bool); 2] =
        [("train", |r| r.train_loss, false), ("val", |r| r.val_loss, true)];
    let acc: [(&str, fn(&EpochRecord) -> f64, bool); 1] = [("val", |r| r.val_accuracy, false)];
    draw_panel(&mut svg, &Panel { title: "Loss", x0: 0.0, lines: &loss }, series, max_epoch);
    draw_panel(&mut svg, &Panel { title: "Accuracy", x0: PANEL_W, lines: &acc }, series, max_epoch);
    svg.push_str("</svg>\n");
    svg
}

pub type Rgb = [u8; 3];

pub const TP_COLOR: Rgb = [255, 255, 255];
pub const FP_COLOR: Rgb = [255, 0, 0];
pub const FN_COLOR: Rgb = [0, 0, 255];

/// An RGB raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel2d {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Rgb>,
}

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_panel(image: &[f32], height: usize, width: usize) -> Panel2d {
    Panel2d { height, width, pixels: image.iter().map(|&v| [gray(v); 3]).collect() }
}

/// Brain white on black.
pub fn mask_panel(mask: &[u8], height: usize, width: usize) -> Panel2d {
    Panel2d { height, width, pixels: mask.iter().map(|&m| if m != 0 { TP_COLOR } else { [0; 3] }).collect() }
}

/// True positives white, false positives red, false negatives blue; true
/// negatives show the image at half brightness.
pub fn prediction_panel(image: &[f32], pred: &[u8], gt: &[u8], height: usize, width: usize) -> Panel2d {
    let pixels = (0..height * width)
        .map(|i| match (pred[i] != 0, gt[i] != 0) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
            (false, false) => [gray(image[i]) / 2; 3],
        })
        .collect();
    Panel2d { height, width, pixels }
}

/// Panels left to right, each enlarged by `scale` and separated by a
/// `gap`-pixel dark gray bar. Binary PPM (P6).
pub fn compose_ppm(panels: &[Panel2d], scale: usize, gap: usize) -> Vec<u8> {
    let h = panels.iter().map(|p| p.height).max().unwrap_or(0) * scale;
    let w = panels.iter().map(|p| p.width * scale).sum::<usize>() + gap * panels.len().saturating_sub(1);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + 3 * w * h, 0);
    let mut x0 = 0;
    for (k, p) in panels.iter().enumerate() {
        for y in 0..h {
            let row = &mut out[header + 3 * (y * w + x0)..];
            for x in 0..p.width * scale {
                let px = if y / scale < p.height { p.pixels[(y / scale) * p.width + x / scale] } else { [0; 3] };
                row[3 * x..3 * x + 3].copy_from_slice(&px);
            }
            if k + 1 < panels.len() {
                for x in p.width * scale..p.width * scale + gap {
                    row[3 * x..3 * x + 3].copy_from_slice(&[64; 3]);
                }
            }
        }
        x0 += p.width * scale + gap;
    }
    out
}
