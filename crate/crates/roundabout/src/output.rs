//! Run artifacts: trajectory CSV, summary JSON, and simple SVG profiles.
//!
//! All writers format with fixed precision so repeated runs with the same
//! seed produce byte-identical files.

use crate::error::Error;
use crate::metrics::{MetricsSummary, TripRecord};
use crate::sim::{LogRow, RunResult};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// The JSON document written next to the trajectory table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub summary: MetricsSummary,
    pub trips: Vec<TripRecord>,
}

pub const TRAJECTORY_HEADER: &str = "t,cav,cz,class,x,v,u,seq_id,unsafe,fallback";

/// Renders the per-step log as CSV text.
pub fn trajectory_csv(log: &[LogRow]) -> String {
    let mut s = String::with_capacity(64 * (log.len() + 1));
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(
            s,
            "{:.2},{},{},{},{:.6},{:.6},{:.6},{},{},{}",
            r.t,
            r.cav,
            r.cz,
            r.class,
            r.x,
            r.v,
            r.u,
            r.seq_id,
            r.unsafe_flag as u8,
            r.fallback as u8
        );
    }
    s
}

/// Parses CSV text produced by [`trajectory_csv`].
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<LogRow>, Error> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 {
            if line != TRAJECTORY_HEADER {
                return Err(Error::Config(format!("unexpected trajectory header: {line}")));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Config(format!("bad trajectory row {n}: {line}")));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(e.to_string()));
        let parse_u = |s: &str| s.parse::<u64>().map_err(|e| Error::Config(e.to_string()));
        rows.push(LogRow {
            t: parse_f(f[0])?,
            cav: parse_u(f[1])?,
            cz: parse_u(f[2])? as usize,
            class: parse_u(f[3])? as u8,
            x: parse_f(f[4])?,
            v: parse_f(f[5])?,
            u: parse_f(f[6])?,
            seq_id: parse_u(f[7])?,
            unsafe_flag: f[8] == "1",
            fallback: f[9] == "1",
        });
    }
    Ok(rows)
}

/// Recomputes the per-CAV control energy from trajectory rows.
pub fn energy_from_log(log: &[LogRow], td: f64) -> BTreeMap<u64, f64> {
    let mut out = BTreeMap::new();
    for r in log {
        *out.entry(r.cav).or_insert(0.0) += 0.5 * r.u * r.u * td;
    }
    out
}

/// Writes trajectory CSV, summary JSON, and (optionally) SVG profiles into
/// `dir` with a common file-name prefix. Returns the written paths.
pub fn write_artifacts(
    dir: &Path,
    prefix: &str,
    result: &RunResult,
    emit_plots: bool,
) -> Result<Vec<std::path::PathBuf>, Error> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let traj = dir.join(format!("{prefix}_trajectory.csv"));
    std::fs::write(&traj, trajectory_csv(&result.log))?;
    written.push(traj);

    let doc = SummaryDocument { summary: result.summary.clone(), trips: result.trips.clone() };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    let sum = dir.join(format!("{prefix}_summary.json"));
    std::fs::write(&sum, json + "\n")?;
    written.push(sum);

    if emit_plots {
        let vp = dir.join(format!("{prefix}_speed.svg"));
        std::fs::write(&vp, profile_svg(&result.log, Field::Speed))?;
        written.push(vp);
        let up = dir.join(format!("{prefix}_control.svg"));
        std::fs::write(&up, profile_svg(&result.log, Field::Control))?;
        written.push(up);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Speed,
    Control,
}

/// One polyline per CAV over time, with axes and range labels.
pub fn profile_svg(log: &[LogRow], field: Field) -> String {
    const W: f64 = 900.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0;
    const MR: f64 = 20.0;
    const MT: f64 = 30.0;
    const MB: f64 = 40.0;
    let (label, pick): (&str, fn(&LogRow) -> f64) = match field {
        Field::Speed => ("speed (m/s)", |r| r.v),
        Field::Control => ("control (m/s^2)", |r| r.u),
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");

    if log.is_empty() {
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">no data</text>", W / 2.0 - 30.0, H / 2.0);
        svg.push_str("</svg>\n");
        return svg;
    }

    let (mut t0, mut t1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in log {
        t0 = t0.min(r.t);
        t1 = t1.max(r.t);
        y0 = y0.min(pick(r));
        y1 = y1.max(pick(r));
    }
    if t1 - t0 < 1e-9 {
        t1 = t0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let sx = |t: f64| ML + (t - t0) / (t1 - t0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - MB,
        W - MR,
        H - MB
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>",
        H - MB
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"13\">time (s)</text>",
        (W - ML) / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"12\" y=\"{}\" font-size=\"13\" transform=\"rotate(-90 12 {})\">{label}</text>",
        (H + MB) / 2.0,
        (H + MB) / 2.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"11\">{:.1}</text>",
        ML - 45.0,
        H - MB,
        y0
    );
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{MT}\" font-size=\"11\">{:.1}</text>", ML - 45.0, y1);
    let _ = writeln!(
        svg,
        "<text x=\"{ML}\" y=\"{}\" font-size=\"11\">{:.0}</text>",
        H - MB + 15.0,
        t0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"11\">{:.0}</text>",
        W - MR - 25.0,
        H - MB + 15.0,
        t1
    );

    let mut by_cav: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in log {
        by_cav.entry(r.cav).or_default().push((r.t, pick(r)));
    }
    for (cav, pts) in by_cav {
        let hue = (cav * 47) % 360;
        let mut path = String::new();
        for (t, y) in pts {
            let _ = write!(path, "{:.1},{:.1} ", sx(t), sy(y));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"hsl({hue},70%,45%)\" stroke-width=\"1\"/>",
            path.trim_end()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, cav: u64, v: f64, u: f64) -> LogRow {
        LogRow {
            t,
            cav,
            cz: 1,
            class: 1,
            x: t * v,
            v,
            u,
            seq_id: 0,
            unsafe_flag: false,
            fallback: cav == 2,
        }
    }

    #[test]
    fn csv_roundtrip_preserves_rows() {
        let log = vec![row(0.0, 1, 10.0, 0.5), row(0.1, 1, 10.05, -0.25), row(0.1, 2, 9.0, 4.0)];
        let text = trajectory_csv(&log);
        let back = parse_trajectory_csv(&text).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in log.iter().zip(&back) {
            assert!((a.x - b.x).abs() < 1e-6);
            assert!((a.u - b.u).abs() < 1e-6);
            assert_eq!(a.cav, b.cav);
            assert_eq!(a.fallback, b.fallback);
        }
        assert!(parse_trajectory_csv("bogus\n").is_err());
    }

    #[test]
    fn energy_recomputation_matches_increments() {
        let td = 0.1;
        let log = vec![row(0.0, 1, 10.0, 2.0), row(0.1, 1, 10.2, 2.0), row(0.0, 2, 8.0, -4.0)];
        let e = energy_from_log(&log, td);
        assert!((e[&1] - 2.0 * 0.5 * 4.0 * td).abs() < 1e-12);
        assert!((e[&2] - 0.5 * 16.0 * td).abs() < 1e-12);
    }

    #[test]
    fn svg_profiles_have_polylines() {
        let log: Vec<LogRow> =
            (0..50).map(|k| row(k as f64 * 0.1, 1 + k % 2, 10.0 + k as f64 * 0.1, 0.3)).collect();
        for field in [Field::Speed, Field::Control] {
            let svg = profile_svg(&log, field);
            assert!(svg.starts_with("<svg"));
            assert!(svg.contains("<polyline"));
            assert!(svg.trim_end().ends_with("</svg>"));
        }
        assert!(profile_svg(&[], Field::Speed).contains("no data"));
    }
}
