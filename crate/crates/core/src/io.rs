//! CSV tables with a versioned header comment, content hashes and minimal
//! SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::engine::{Trajectory, TrajectoryStats};
use crate::error::{Error, Result};
use crate::fluid_balance::PhaseSchedule;
use crate::fluid_myopic::MyopicFluid;
use crate::transport::QPlan;

pub const SCHEMA_VERSION: u32 = 1;

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        self.rows.push(row.into_iter().map(|s| s.to_string()).collect());
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_string_with_hash(&self, hash: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .expect("csv output is utf-8");
        Ok(format!("# schema_version={SCHEMA_VERSION} config_hash={hash}\n{body}"))
    }

    pub fn write(&self, path: impl AsRef<Path>, hash: &str) -> Result<()> {
        std::fs::write(path, self.to_string_with_hash(hash)?)?;
        Ok(())
    }

    /// Parses a table, skipping `#` comment lines.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(CsvTable { header, rows })
    }
}

pub fn trajectory_table(tr: &Trajectory) -> CsvTable {
    let mut t = CsvTable::new(&["t", "class", "matched_count", "seed", "policy"]);
    for (i, &time) in tr.times.iter().enumerate() {
        for (c, &m) in tr.counts[i].iter().enumerate() {
            t.push([time.to_string(), c.to_string(), m.to_string(), tr.seed.to_string(), tr.policy.clone()]);
        }
    }
    t
}

pub fn stats_table(stats: &TrajectoryStats, policy: &str) -> CsvTable {
    let mut t = CsvTable::new(&["t", "class", "mean", "std", "runs", "policy"]);
    for (i, &time) in stats.times.iter().enumerate() {
        for c in 0..stats.mean[i].len() {
            t.push([
                time.to_string(),
                c.to_string(),
                stats.mean[i][c].to_string(),
                stats.std[i][c].to_string(),
                stats.runs.to_string(),
                policy.to_string(),
            ]);
        }
    }
    t
}

pub fn myopic_fluid_table(f: &MyopicFluid) -> CsvTable {
    let mut t = CsvTable::new(&["t", "class", "y", "y_tilde", "err_env"]);
    for (i, &time) in f.grid.iter().enumerate() {
        for c in 0..f.y.len() {
            t.push([time, c as f64, f.y[c][i], f.y_tilde[c][i], f.err_env[c][i]]);
        }
    }
    t
}

/// `m[c][i]` at `grid[i]`.
pub fn m_star_table(grid: &[f64], m: &[Vec<f64>]) -> CsvTable {
    let mut t = CsvTable::new(&["t", "class", "m_star"]);
    for (i, &time) in grid.iter().enumerate() {
        for (c, row) in m.iter().enumerate() {
            t.push([time.to_string(), c.to_string(), row[i].to_string()]);
        }
    }
    t
}

pub fn schedule_table(s: &PhaseSchedule) -> CsvTable {
    let mut header = vec!["k".to_string(), "t_k".into(), "level_k".into(), "class".into()];
    header.extend((0..s.order.len()).map(|c| format!("beta_{c}")));
    let mut t = CsvTable {
        header,
        rows: Vec::new(),
    };
    for k in 0..s.order.len() {
        let mut row = vec![
            (k + 1).to_string(),
            s.t[k].to_string(),
            s.levels[k].to_string(),
            s.order[k].to_string(),
        ];
        row.extend(s.beta_original(k).iter().map(f64::to_string));
        t.rows.push(row);
    }
    t
}

pub fn qplan_table(q: &QPlan) -> CsvTable {
    let dn = q.plan.first().map_or(0, Vec::len);
    let mut header = vec!["class".to_string()];
    header.extend((0..dn).map(|d| format!("d{d}")));
    let mut t = CsvTable {
        header,
        rows: Vec::new(),
    };
    for (c, row) in q.plan.iter().enumerate() {
        let mut r = vec![c.to_string()];
        r.extend(row.iter().map(f64::to_string));
        t.rows.push(r);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// A line chart with axes, tick labels, a legend and one polyline per
/// series.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (800.0, 500.0);
    let (left, right, top, bottom) = (70.0, 180.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" stroke="black" fill="none"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(fx),
            top + ph + 18.0,
            tick(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 * i as f64 + 10.0;
        let lx = left + pw + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Series from a table: x column, y column, split by the `group` column
/// when present.
pub fn table_series(table: &CsvTable, x: &str, y: &str, group: Option<&str>) -> Result<Vec<Series>> {
    let col = |name: &str| {
        table
            .column(name)
            .ok_or_else(|| Error::Usage(format!("column `{name}` not found")))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let gi = match group {
        Some(g) => Some(col(g)?),
        None => None,
    };
    let mut out: Vec<Series> = Vec::new();
    for row in &table.rows {
        let key = gi.map_or_else(|| y.to_string(), |g| format!("{y}[{}]", row[g]));
        let px: f64 = row[xi]
            .parse()
            .map_err(|_| Error::Usage(format!("non-numeric `{x}` value {}", row[xi])))?;
        let py: f64 = row[yi]
            .parse()
            .map_err(|_| Error::Usage(format!("non-numeric `{y}` value {}", row[yi])))?;
        match out.iter_mut().find(|s| s.name == key) {
            Some(s) => s.points.push((px, py)),
            None => out.push(Series {
                name: key,
                points: vec![(px, py)],
                dashed: false,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_skips_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let mut t = CsvTable::new(&["t", "v"]);
        t.push([0.0, 1.5]);
        t.push([1.0, 2.5]);
        t.write(&path, "abc").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# schema_version=1 config_hash=abc\n"));
        assert_eq!(CsvTable::read(&path).unwrap(), t);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(&[1, 2]).unwrap(), config_hash(&[1, 2]).unwrap());
        assert_ne!(config_hash(&[1, 2]).unwrap(), config_hash(&[2, 1]).unwrap());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = vec![
            Series {
                name: "a".into(),
                points: vec![(0.0, 0.0), (1.0, 1.0)],
                dashed: false,
            },
            Series {
                name: "b<".into(),
                points: vec![(0.0, 1.0), (1.0, 0.5)],
                dashed: true,
            },
        ];
        let svg = render_svg("t", "x", "y", &s);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;"));
    }
}
