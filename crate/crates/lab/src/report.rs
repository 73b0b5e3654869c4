//! CSV tables and static SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use rflow_core::Trajectory;
use serde::Serialize;

use crate::error::{LabError, LabResult};
use crate::format::write_file;

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> LabResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| LabError::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| LabError::Config(format!("csv: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> LabResult<()> {
    write_file(path, &csv_bytes(rows)?)
}

/// Columns kept per state in the trajectory CSV.
pub const TRAJ_DIMS: usize = 8;

/// Columns `sample, index, t, x0..` with the flattened state cut to its
/// first [`TRAJ_DIMS`] entries.
pub fn trajectory_csv(trajs: &[Trajectory]) -> LabResult<Vec<u8>> {
    let dims = trajs
        .iter()
        .flat_map(|t| t.states.first())
        .map(|x| x.numel().min(TRAJ_DIMS))
        .max()
        .unwrap_or(0);
    let err = |e: csv::Error| LabError::Config(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample".to_string(), "index".into(), "t".into()];
    header.extend((0..dims).map(|d| format!("x{d}")));
    w.write_record(&header).map_err(err)?;
    for (s, tr) in trajs.iter().enumerate() {
        for (k, (t, x)) in tr.times.iter().zip(&tr.states).enumerate() {
            let mut rec = vec![s.to_string(), k.to_string(), t.to_string()];
            rec.extend(x.data().iter().take(dims).map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| LabError::Config(format!("csv: {e}")))
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> LabResult<()> {
    write_file(path, &trajectory_csv(trajs)?)
}

/// A named point set for [`scatter_svg`].
pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: &'a [[f64; 2]],
}

/// Square scatter plot with a shared data range and a legend.
pub fn scatter_svg(title: &str, series: &[Series<'_>], paths: &[Vec<[f64; 2]>]) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 30.0;
    let all = series
        .iter()
        .flat_map(|s| s.points.iter())
        .chain(paths.iter().flatten());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in all {
        for &v in p {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let span = hi - lo;
    let map = |p: &[f64; 2]| {
        (
            PAD + (p[0] - lo) / span * (SIZE - 2.0 * PAD),
            SIZE - PAD - (p[1] - lo) / span * (SIZE - 2.0 * PAD),
        )
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="18" font-size="13" font-family="sans-serif">{}</text>"#, escape(title));
    for path in paths {
        let pts: Vec<String> = path
            .iter()
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#999" stroke-width="0.6"/>"##,
            pts.join(" ")
        );
    }
    for (i, ser) in series.iter().enumerate() {
        for p in ser.points {
            let (x, y) = map(p);
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="1.6" fill="{}" fill-opacity="0.6"/>"#, ser.color);
        }
        let ly = 36.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{}" r="4" fill="{}"/><text x="{}" y="{}" font-size="12" font-family="sans-serif">{}</text>"#,
            SIZE - 120.0,
            ly - 4.0,
            ser.color,
            SIZE - 110.0,
            ly,
            escape(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
