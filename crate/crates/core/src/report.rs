//! Pareto flags and report files (`report.csv`, `pareto.svg`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("point {label:?} has a non-finite coordinate")]
    NonFinite { label: String },
    #[error("point {label:?} has success rate {value} outside [0, 100]")]
    SuccessRange { label: String, value: f64 },
    #[error("report has no rows")]
    Empty,
    #[error("malformed report: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub label: String,
    pub exec_time_min: f64,
    pub success_rate_pct: f64,
}

/// Flags the points no other point dominates in the (time ↓, success ↑)
/// plane. Identical points never dominate each other.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<bool>, ReportError> {
    for p in points {
        if !(p.exec_time_min.is_finite() && p.success_rate_pct.is_finite()) {
            return Err(ReportError::NonFinite { label: p.label.clone() });
        }
        if !(0.0..=100.0).contains(&p.success_rate_pct) {
            return Err(ReportError::SuccessRange {
                label: p.label.clone(),
                value: p.success_rate_pct,
            });
        }
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].exec_time_min.total_cmp(&points[b].exec_time_min));

    let mut flags = vec![false; points.len()];
    // best success among strictly faster points
    let mut best_faster = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let t = points[order[i]].exec_time_min;
        let mut j = i;
        let mut group_best = f64::NEG_INFINITY;
        while j < order.len() && points[order[j]].exec_time_min == t {
            group_best = group_best.max(points[order[j]].success_rate_pct);
            j += 1;
        }
        for &k in &order[i..j] {
            let s = points[k].success_rate_pct;
            flags[k] = s == group_best && s > best_faster;
        }
        best_faster = best_faster.max(group_best);
        i = j;
    }
    Ok(flags)
}

/// One configuration's line in `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub state_dim: usize,
    pub train_wall_s: f64,
    pub trials: usize,
    pub exec_time_min: f64,
    pub success_rate_pct: f64,
    pub pareto: bool,
}

impl ReportRow {
    pub fn point(&self) -> ParetoPoint {
        ParetoPoint {
            label: self.policy.clone(),
            exec_time_min: self.exec_time_min,
            success_rate_pct: self.success_rate_pct,
        }
    }
}

/// Recomputes every row's `pareto` flag.
pub fn flag_rows(rows: &mut [ReportRow]) -> Result<(), ReportError> {
    let pts: Vec<ParetoPoint> = rows.iter().map(ReportRow::point).collect();
    for (r, f) in rows.iter_mut().zip(pareto_frontier(&pts)?) {
        r.pareto = f;
    }
    Ok(())
}

pub const REPORT_HEADER: [&str; 7] = [
    "policy",
    "state_dim",
    "train_wall_s",
    "trials",
    "exec_time_min",
    "success_rate_pct",
    "pareto",
];

pub fn report_csv(rows: &[ReportRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.state_dim.to_string(),
            format!("{:.3}", r.train_wall_s),
            r.trials.to_string(),
            format!("{:.3}", r.exec_time_min),
            format!("{:.3}", r.success_rate_pct),
            r.pareto.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(ReportError::Csv(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {header:?}"),
        ))));
    }
    r.deserialize().map(|row| row.map_err(ReportError::from)).collect()
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_report_csv(&text)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Scatter of execution time (x) against success rate (y); frontier
/// points are filled, the rest hollow. One `<circle>` per row.
pub fn pareto_svg(rows: &[ReportRow]) -> String {
    let (mut lo, mut hi) = rows
        .iter()
        .map(|r| r.exec_time_min)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    if !(lo.is_finite() && hi.is_finite()) {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5 * lo.abs().max(1e-3);
        hi += 0.5 * hi.abs().max(1e-3);
    }
    let pw = SVG_W - 2.0 * MARGIN;
    let ph = SVG_H - 2.0 * MARGIN;
    let x = |t: f64| MARGIN + (t - lo) / (hi - lo) * pw;
    let y = |s: f64| SVG_H - MARGIN - s / 100.0 * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, "<!-- execution time: steps until release (or truncation) / fps / 60 -->");
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0, x1, y1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let t = lo + f * (hi - lo);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{t:.3}</text>"#,
            x(t),
            y0 + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.0}</text>"#,
            x0 - 6.0,
            y(f * 100.0) + 4.0,
            f * 100.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">execution time (min)</text>"#,
        SVG_W / 2.0,
        SVG_H - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">success rate (%)</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    for r in rows {
        let (cx, cy) = (x(r.exec_time_min), y(r.success_rate_pct));
        let (class, fill) = if r.pareto { ("frontier", "crimson") } else { ("dominated", "none") };
        let label = xml_escape(&r.policy);
        let _ = writeln!(
            s,
            r#"<circle class="{class}" cx="{cx:.2}" cy="{cy:.2}" r="5" fill="{fill}" stroke="crimson"><title>{label}</title></circle>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10">{label}</text>"#,
            cx + 7.0,
            cy - 7.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, text: &str) -> Result<(), ReportError> {
    write_atomic(&path, text.as_bytes()).map_err(|source| ReportError::Io { path, source })
}

/// Writes `report.csv` and `pareto.svg` into `out_dir`.
pub fn emit_report(rows: &[ReportRow], out_dir: &Path) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let csv = report_csv(rows)?;
    let svg = pareto_svg(rows);
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    write(out_dir.join("report.csv"), &csv)?;
    write(out_dir.join("pareto.svg"), &svg)
}

/// Writes only `pareto.svg`.
pub fn emit_svg(rows: &[ReportRow], path: &Path) -> Result<(), ReportError> {
    write(path.to_path_buf(), &pareto_svg(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(t: f64, s: f64) -> ParetoPoint {
        ParetoPoint {
            label: String::new(),
            exec_time_min: t,
            success_rate_pct: s,
        }
    }

    #[test]
    fn small_frontiers() {
        assert_eq!(pareto_frontier(&[]).unwrap(), Vec::<bool>::new());
        assert_eq!(pareto_frontier(&[pt(1.0, 50.0)]).unwrap(), [true]);
        assert_eq!(pareto_frontier(&[pt(1.0, 50.0), pt(1.0, 50.0)]).unwrap(), [true, true]);
        // same time, lower success is dominated; same success, slower is dominated
        assert_eq!(
            pareto_frontier(&[pt(1.0, 50.0), pt(1.0, 40.0), pt(2.0, 50.0), pt(2.0, 90.0)]).unwrap(),
            [true, false, false, true]
        );
    }

    #[test]
    fn rejects_bad_points() {
        assert!(pareto_frontier(&[pt(f64::NAN, 1.0)]).is_err());
        assert!(pareto_frontier(&[pt(1.0, 101.0)]).is_err());
    }

    #[test]
    fn escapes_labels() {
        assert_eq!(xml_escape("a<&>\"'"), "a&lt;&amp;&gt;&quot;&apos;");
    }
}
