//! Size- and distance-stratified confidence tables and the
//! confidence-versus-distance figure.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::evalsim::{EvalRecord, CLEAN};
use crate::raster::{Image, RasterError};

pub const CLEAN_DECIMALS: usize = 4;
pub const DELTA_DECIMALS: usize = 3;
/// `size` value of the mean-over-sizes rows in summary.csv.
pub const MEAN_SIZE: &str = "mean";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no clean baseline at distance {distance} m")]
    MissingCleanBaseline { distance: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("summary line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub size: String,
    pub distance_m: f64,
    pub clean_c: f64,
    /// One entry per [`Summary::patch_types`]; `None` where no patched cell
    /// exists.
    pub deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub patch_types: Vec<String>,
    /// Size blocks in order of first appearance, distances ascending.
    pub rows: Vec<SummaryRow>,
    /// Per distance, the arithmetic mean of the size blocks.
    pub mean_over_sizes: Vec<SummaryRow>,
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Clean C per distance and ΔC averaged over placements per size, distance
/// and patch type. Failed records are ignored.
pub fn summarize(records: &[EvalRecord]) -> Result<Summary, ReportError> {
    let ok: Vec<&EvalRecord> = records.iter().filter(|r| r.error.is_none() && !r.frames.is_empty()).collect();
    let mut distances: Vec<f64> = ok.iter().map(|r| r.cell.distance_m).collect();
    distances.sort_by(f64::total_cmp);
    distances.dedup();
    let mut clean: BTreeMap<u64, f64> = BTreeMap::new();
    for r in ok.iter().filter(|r| r.cell.is_clean()) {
        clean.entry(r.cell.distance_m.to_bits()).or_insert_with(|| window_mean(&r.frames));
    }
    if let Some(&d) = distances.iter().find(|d| !clean.contains_key(&d.to_bits())) {
        return Err(ReportError::MissingCleanBaseline { distance: d });
    }
    let mut sizes = Vec::new();
    let mut types = Vec::new();
    for r in ok.iter().filter(|r| !r.cell.is_clean()) {
        push_unique(&mut sizes, r.cell.size.as_deref().unwrap_or(""));
        push_unique(&mut types, &r.cell.patch_type);
    }
    let mut rows = Vec::new();
    for size in &sizes {
        for &d in &distances {
            let c = clean[&d.to_bits()];
            let deltas = types
                .iter()
                .map(|t| {
                    mean(
                        ok.iter()
                            .filter(|r| {
                                r.cell.distance_m.to_bits() == d.to_bits()
                                    && &r.cell.patch_type == t
                                    && r.cell.size.as_deref() == Some(size.as_str())
                            })
                            .map(|r| window_mean(&r.frames) - c),
                    )
                })
                .collect();
            rows.push(SummaryRow {
                size: size.clone(),
                distance_m: d,
                clean_c: c,
                deltas,
            });
        }
    }
    let mean_over_sizes = if sizes.is_empty() {
        Vec::new()
    } else {
        distances
            .iter()
            .map(|&d| {
                let block: Vec<&SummaryRow> = rows.iter().filter(|r| r.distance_m.to_bits() == d.to_bits()).collect();
                SummaryRow {
                    size: MEAN_SIZE.into(),
                    distance_m: d,
                    clean_c: clean[&d.to_bits()],
                    deltas: (0..types.len()).map(|k| mean(block.iter().filter_map(|r| r.deltas[k]))).collect(),
                }
            })
            .collect()
    };
    Ok(Summary {
        patch_types: types,
        rows,
        mean_over_sizes,
    })
}

fn window_mean(frames: &[f64]) -> f64 {
    frames.iter().sum::<f64>() / frames.len() as f64
}

/// ΔC with an explicit sign; a value that rounds to zero prints as `+0.000`.
pub fn format_delta(v: Option<f64>) -> String {
    match v {
        None => "NA".into(),
        Some(v) => {
            let s = format!("{:+.*}", DELTA_DECIMALS, v);
            if s.trim_start_matches(['+', '-']).chars().all(|c| c == '0' || c == '.') {
                format!("+{}", &s[1..])
            } else {
                s
            }
        }
    }
}

pub fn format_clean(v: f64) -> String {
    format!("{:.*}", CLEAN_DECIMALS, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

fn display_type(t: &str) -> String {
    let cap = |s: &str| {
        let mut c = s.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
    };
    match t.strip_prefix("nap_") {
        Some(name) => format!("NAP-{}", cap(name)),
        None => cap(t),
    }
}

fn display_size(s: &str) -> String {
    display_type(s)
}

pub fn render_table(summary: &Summary, format: TableFormat) -> Result<String, ReportError> {
    if summary.rows.is_empty() {
        return Err(ReportError::InsufficientData("summary has no patched rows".into()));
    }
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("size,distance_m,clean_C");
            for t in &summary.patch_types {
                let _ = write!(out, ",dC_{t}");
            }
            out.push('\n');
            for r in summary.rows.iter().chain(&summary.mean_over_sizes) {
                let _ = write!(out, "{},{},{}", r.size, r.distance_m, format_clean(r.clean_c));
                for d in &r.deltas {
                    let _ = write!(out, ",{}", format_delta(*d));
                }
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let header = |out: &mut String| {
                out.push_str("| Size | Distance d (m) | Clean C |");
                for t in &summary.patch_types {
                    let _ = write!(out, " {} ΔC |", display_type(t));
                }
                out.push_str("\n|---|---|---|");
                for _ in &summary.patch_types {
                    out.push_str("---|");
                }
                out.push('\n');
            };
            let body = |out: &mut String, rows: &[SummaryRow]| {
                let mut last = "";
                for r in rows {
                    let size = if r.size == last { String::new() } else { display_size(&r.size) };
                    last = &r.size;
                    let _ = write!(out, "| {} | {:.2} | {} |", size, r.distance_m, format_clean(r.clean_c));
                    for d in &r.deltas {
                        let _ = write!(out, " {} |", format_delta(*d));
                    }
                    out.push('\n');
                }
            };
            header(&mut out);
            body(&mut out, &summary.rows);
            if !summary.mean_over_sizes.is_empty() {
                out.push_str("\nMean over sizes\n\n");
                header(&mut out);
                body(&mut out, &summary.mean_over_sizes);
            }
        }
    }
    Ok(out)
}

/// Reads summary.csv back. Values carry the emitted precision.
pub fn parse_summary(text: &str) -> Result<Summary, ReportError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let err = |line: u64, message: String| ReportError::Parse { line, message };
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "size" || &header[1] != "distance_m" || &header[2] != "clean_C" {
        return Err(err(1, "expected header starting size,distance_m,clean_C".into()));
    }
    let mut patch_types = Vec::new();
    for h in header.iter().skip(3) {
        let t = h.strip_prefix("dC_").ok_or_else(|| err(1, format!("column {h:?} lacks the dC_ prefix")))?;
        if t.is_empty() {
            return Err(err(1, "empty patch type column".into()));
        }
        patch_types.push(t.to_string());
    }
    let mut summary = Summary {
        patch_types,
        rows: Vec::new(),
        mean_over_sizes: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |s: &str, what: &str| -> Result<f64, ReportError> {
            let v: f64 = s.parse().map_err(|_| err(line, format!("{what} {s:?} is not a number")))?;
            if !v.is_finite() {
                return Err(err(line, format!("{what} {s:?} is not finite")));
            }
            Ok(v)
        };
        let distance_m = num(&rec[1], "distance")?;
        if distance_m <= 0.0 {
            return Err(err(line, format!("distance {distance_m} must be positive")));
        }
        let clean_c = num(&rec[2], "clean_C")?;
        let deltas = rec
            .iter()
            .skip(3)
            .map(|s| if s == "NA" { Ok(None) } else { num(s, "delta").map(Some) })
            .collect::<Result<Vec<_>, _>>()?;
        let row = SummaryRow {
            size: rec[0].to_string(),
            distance_m,
            clean_c,
            deltas,
        };
        if row.size == MEAN_SIZE {
            summary.mean_over_sizes.push(row);
        } else {
            summary.rows.push(row);
        }
    }
    Ok(summary)
}

/// Metadata written next to the tables.
pub fn report_meta(summary: &Summary) -> serde_json::Value {
    serde_json::json!({
        "clean_decimals": CLEAN_DECIMALS,
        "delta_decimals": DELTA_DECIMALS,
        "delta_definition": "mean over placements of (C_patch - C_clean) at the same distance",
        "mean_over_sizes_emitted": !summary.mean_over_sizes.is_empty(),
        "notes": [
            "The reference table caption announces a final mean-over-sizes block that its printed body omits; it is emitted here as rows with size = \"mean\".",
        ],
        "patch_types": summary.patch_types,
    })
}

/// One line of the confidence-versus-distance figure.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub label: String,
    pub patch_type: String,
    pub clean: bool,
    pub points: Vec<(f64, f64)>,
}

/// The clean trace followed by one trace per (type, size, placement), each a
/// window mean per distance in ascending order.
pub fn confidence_traces(records: &[EvalRecord]) -> Result<Vec<Trace>, ReportError> {
    let ok: Vec<&EvalRecord> = records.iter().filter(|r| r.error.is_none() && !r.frames.is_empty()).collect();
    let mut distances: Vec<f64> = ok.iter().map(|r| r.cell.distance_m).collect();
    distances.sort_by(f64::total_cmp);
    distances.dedup();
    if distances.len() < 2 {
        return Err(ReportError::InsufficientData(format!(
            "need at least two distances, have {}",
            distances.len()
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut traces: BTreeMap<String, Trace> = BTreeMap::new();
    for r in &ok {
        let label = if r.cell.is_clean() {
            CLEAN.to_string()
        } else {
            format!(
                "{}/{}/{}",
                r.cell.patch_type,
                r.cell.size.as_deref().unwrap_or(""),
                r.cell.placement.map_or("", |p| p.name())
            )
        };
        let t = traces.entry(label.clone()).or_insert_with(|| {
            order.push(label.clone());
            Trace {
                label,
                patch_type: r.cell.patch_type.clone(),
                clean: r.cell.is_clean(),
                points: Vec::new(),
            }
        });
        t.points.push((r.cell.distance_m, window_mean(&r.frames)));
    }
    let mut out: Vec<Trace> = Vec::with_capacity(order.len());
    // Clean first, then first-appearance order.
    order.sort_by_key(|l| l != CLEAN);
    for label in order {
        let mut t = traces.remove(&label).expect("trace registered");
        t.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.push(t);
    }
    Ok(out)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PALETTE_RGB: [[f64; 3]; 8] = [
    [0.12, 0.47, 0.71],
    [1.0, 0.50, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.40, 0.74],
    [0.55, 0.34, 0.29],
    [0.89, 0.47, 0.76],
    [0.09, 0.75, 0.81],
];

struct Frame {
    w: f64,
    h: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x_min: f64,
    x_max: f64,
}

impl Frame {
    fn new(w: f64, h: f64, traces: &[Trace]) -> Self {
        let xs = traces.iter().flat_map(|t| t.points.iter().map(|p| p.0));
        let x_min = xs.clone().fold(f64::INFINITY, f64::min);
        let x_max = xs.fold(f64::NEG_INFINITY, f64::max);
        Self {
            w,
            h,
            left: 0.1 * w,
            right: 0.78 * w,
            top: 0.08 * h,
            bottom: 0.88 * h,
            x_min,
            x_max,
        }
    }

    fn x(&self, d: f64) -> f64 {
        self.left + (d - self.x_min) / (self.x_max - self.x_min) * (self.right - self.left)
    }

    fn y(&self, c: f64) -> f64 {
        self.bottom - c.clamp(0.0, 1.0) * (self.bottom - self.top)
    }
}

fn type_colour_index(types: &[String], t: &str) -> usize {
    types.iter().position(|x| x == t).unwrap_or(0) % PALETTE.len()
}

fn patched_types(traces: &[Trace]) -> Vec<String> {
    let mut types = Vec::new();
    for t in traces.iter().filter(|t| !t.clean) {
        push_unique(&mut types, &t.patch_type);
    }
    types
}

/// SVG rendering of [`confidence_traces`]. Output depends only on the traces.
pub fn plot_svg(traces: &[Trace]) -> String {
    let f = Frame::new(900.0, 540.0, traces);
    let types = patched_types(traces);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        f.w, f.h, f.w, f.h
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
        f.left,
        f.top,
        f.right - f.left,
        f.bottom - f.top
    );
    for k in 0..=5 {
        let c = k as f64 / 5.0;
        let y = f.y(c);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{c:.1}</text>"##,
            f.left,
            f.right,
            f.left - 6.0,
            y + 4.0
        );
    }
    if let Some(t) = traces.first() {
        for &(d, _) in &t.points {
            let x = f.x(d);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{d:.2}</text>"#,
                f.bottom + 16.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">distance d (m)</text>"#,
        (f.left + f.right) / 2.0,
        f.h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">mean STOP confidence</text>"#,
        (f.top + f.bottom) / 2.0,
        (f.top + f.bottom) / 2.0
    );
    // Patched traces first so the clean trace is drawn on top.
    for t in traces.iter().filter(|t| !t.clean).chain(traces.iter().filter(|t| t.clean)) {
        let pts: Vec<String> = t.points.iter().map(|&(d, c)| format!("{:.2},{:.2}", f.x(d), f.y(c))).collect();
        let (colour, width, opacity) = if t.clean {
            ("#000000", 3.0, 1.0)
        } else {
            (PALETTE[type_colour_index(&types, &t.patch_type)], 1.2, 0.55)
        };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="{width}" stroke-opacity="{opacity}"><title>{}</title></polyline>"#,
            pts.join(" "),
            t.label
        );
    }
    let lx = f.right + 16.0;
    let mut ly = f.top + 10.0;
    let mut legend = vec![(CLEAN.to_string(), "#000000")];
    legend.extend(types.iter().map(|t| (display_type(t), PALETTE[type_colour_index(&types, t)])));
    for (name, colour) in legend {
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="3"/><text x="{:.2}" y="{:.2}">{name}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0
        );
        ly += 20.0;
    }
    s.push_str("</svg>\n");
    s
}

/// Raster rendering of the same figure (no text).
pub fn plot_image(traces: &[Trace], width: usize, height: usize) -> Image {
    let f = Frame::new(width as f64, height as f64, traces);
    let types = patched_types(traces);
    let mut img = Image::filled(width, height, 3, 1.0);
    let grey = [0.27, 0.27, 0.27];
    for (a, b) in [
        ((f.left, f.top), (f.right, f.top)),
        ((f.right, f.top), (f.right, f.bottom)),
        ((f.right, f.bottom), (f.left, f.bottom)),
        ((f.left, f.bottom), (f.left, f.top)),
    ] {
        draw_line(&mut img, a, b, grey, 1.0, 1.0);
    }
    for t in traces.iter().filter(|t| !t.clean).chain(traces.iter().filter(|t| t.clean)) {
        let (colour, radius, alpha) = if t.clean {
            ([0.0, 0.0, 0.0], 1.5, 1.0)
        } else {
            (PALETTE_RGB[type_colour_index(&types, &t.patch_type)], 0.6, 0.55)
        };
        for w in t.points.windows(2) {
            draw_line(&mut img, (f.x(w[0].0), f.y(w[0].1)), (f.x(w[1].0), f.y(w[1].1)), colour, radius, alpha);
        }
    }
    img
}

fn draw_line(img: &mut Image, a: (f64, f64), b: (f64, f64), rgb: [f64; 3], radius: f64, alpha: f64) {
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    let r = radius.ceil() as i64;
    let mut last: Option<(i64, i64)> = None;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let centre = (x.round() as i64, y.round() as i64);
        if last == Some(centre) {
            continue;
        }
        last = Some(centre);
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy) as f64).sqrt() > radius + 0.5 {
                    continue;
                }
                let (px, py) = (centre.0 + dx, centre.1 + dy);
                if px < 0 || py < 0 || px as usize >= img.width() || py as usize >= img.height() {
                    continue;
                }
                for (c, &v) in rgb.iter().enumerate() {
                    let old = img.get(px as usize, py as usize, c);
                    img.set(px as usize, py as usize, c, old * (1.0 - alpha) + v * alpha);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsim::{nap_type, Cell};
    use crate::optimizer::Slot;

    fn rec(d: f64, t: &str, size: Option<&str>, slot: Option<Slot>, frames: Vec<f64>) -> EvalRecord {
        EvalRecord::from_frames(
            Cell {
                distance_m: d,
                patch_type: t.into(),
                size: size.map(String::from),
                placement: slot,
            },
            frames,
        )
    }

    #[test]
    fn missing_baseline_names_distance() {
        let r = vec![
            rec(0.3, CLEAN, None, None, vec![0.7]),
            rec(0.45, "white", Some("small"), Some(Slot::Center), vec![0.5]),
        ];
        match summarize(&r) {
            Err(ReportError::MissingCleanBaseline { distance }) => assert_eq!(distance, 0.45),
            other => panic!("expected missing baseline, got {other:?}"),
        }
    }

    #[test]
    fn identical_patched_frames_give_zero_delta() {
        let f = vec![0.61, 0.62, 0.6];
        let r = vec![
            rec(0.3, CLEAN, None, None, f.clone()),
            rec(0.3, "white", Some("small"), Some(Slot::Center), f),
        ];
        let s = summarize(&r).unwrap();
        assert_eq!(s.rows[0].deltas, vec![Some(0.0)]);
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(Some(0.022)), "+0.022");
        assert_eq!(format_delta(Some(-0.359)), "-0.359");
        assert_eq!(format_delta(Some(-0.0001)), "+0.000");
        assert_eq!(format_delta(Some(0.0)), "+0.000");
        assert_eq!(format_delta(None), "NA");
        assert_eq!(format_clean(0.77884), "0.7788");
    }

    #[test]
    fn one_row_table() {
        let r = vec![
            rec(0.3, CLEAN, None, None, vec![0.7788]),
            rec(0.3, "white", Some("small"), Some(Slot::Center), vec![0.8008]),
        ];
        let s = summarize(&r).unwrap();
        let csv = render_table(&s, TableFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "size,distance_m,clean_C,dC_white");
        assert_eq!(lines[1], "small,0.3,0.7788,+0.022");
        // plus one mean-over-sizes row
        assert_eq!(lines.len(), 3);
        let md = render_table(&s, TableFormat::Markdown).unwrap();
        assert!(md.contains("| Small | 0.30 | 0.7788 | +0.022 |"));
        let back = parse_summary(&csv).unwrap();
        assert_eq!(back.rows.len(), 1);
        assert_eq!(back.mean_over_sizes.len(), 1);
        assert_eq!(render_table(&back, TableFormat::Csv).unwrap(), csv);
    }

    #[test]
    fn empty_summary_not_rendered() {
        let s = summarize(&[rec(0.3, CLEAN, None, None, vec![0.7])]).unwrap();
        assert!(render_table(&s, TableFormat::Csv).is_err());
    }

    #[test]
    fn malformed_summary_rejected() {
        assert!(parse_summary("a,b,c\n").is_err());
        assert!(parse_summary("size,distance_m,clean_C,white\n").is_err());
        assert!(parse_summary("size,distance_m,clean_C,dC_white\nsmall,x,0.7,+0.1\n").is_err());
        assert!(parse_summary("size,distance_m,clean_C,dC_white\nsmall,0.3,0.7\n").is_err());
        assert!(parse_summary("size,distance_m,clean_C,dC_white\nsmall,0.3,0.7,inf\n").is_err());
        let ok = parse_summary("size,distance_m,clean_C,dC_white\nsmall,0.3,0.7,NA\n").unwrap();
        assert_eq!(ok.rows[0].deltas, vec![None]);
    }

    #[test]
    fn two_distance_clean_only_trace() {
        let r = vec![rec(0.9, CLEAN, None, None, vec![0.8]), rec(0.3, CLEAN, None, None, vec![0.7])];
        let t = confidence_traces(&r).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].points, vec![(0.3, 0.7), (0.9, 0.8)]);
        assert!(confidence_traces(&r[..1]).is_err());
    }

    #[test]
    fn plot_is_deterministic() {
        let mut r = Vec::new();
        for d in [0.3, 0.6] {
            r.push(rec(d, CLEAN, None, None, vec![0.8]));
            for slot in Slot::ALL {
                r.push(rec(d, &nap_type("dog"), Some("large"), Some(slot), vec![0.5 + d / 4.0]));
            }
        }
        let t = confidence_traces(&r).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t[0].clean);
        let a = plot_svg(&t);
        assert_eq!(a, plot_svg(&confidence_traces(&r).unwrap()));
        assert!(a.starts_with("<svg"));
        assert_eq!(a.matches("<polyline").count(), 4);
        let img = plot_image(&t, 320, 200);
        assert_eq!(img, plot_image(&t, 320, 200));
    }
}
