use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dsg_core::Policy;

use crate::Failure;

/// Shortest decimal that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn policy_header(prefix: &str, p: &Policy) -> Vec<String> {
    let (du, dx) = (p.d_u(), p.d_x());
    let mut names = Vec::with_capacity(2 * du * dx);
    for block in ["theta", "theta_bar"] {
        for i in 1..=du {
            for j in 1..=dx {
                names.push(format!("{prefix}{block}_{i}_{j}"));
            }
        }
    }
    names
}

pub fn policy_cells(p: &Policy) -> Vec<String> {
    p.flatten().into_iter().map(num).collect()
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Numeric view of column `name`; unparsable cells become NaN.
    fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx].parse().unwrap_or(f64::NAN)).collect())
    }

    /// Line plot of every other column against the first.
    pub fn write_svg(&self, path: &Path, title: &str) -> Result<(), Failure> {
        let x = self.column(&self.header[0]).unwrap_or_default();
        let series: Vec<(String, Vec<f64>)> = self.header[1..]
            .iter()
            .filter_map(|h| self.column(h).map(|c| (h.clone(), c)))
            .collect();
        fs::write(path, svg(title, &x, &series))?;
        Ok(())
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

fn svg(title: &str, x: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let finite = |v: &&f64| v.is_finite();
    let bounds = |vals: &mut dyn Iterator<Item = &f64>| {
        vals.filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    };
    let (x0, x1) = bounds(&mut x.iter());
    let (y0, y1) = bounds(&mut series.iter().flat_map(|(_, s)| s.iter()));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let px = |v: f64| pad + (v - x0) / span(x0, x1) * (w - 2.0 * pad);
    let py = |v: f64| h - pad - (v - y0) / span(y0, y1) * (h - 2.0 * pad);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<text x="{pad}" y="20">{title}</text>"#);
    let _ = writeln!(
        out,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(out, r#"<text x="{pad}" y="{}">{}</text>"#, h - pad + 15.0, num(x0));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, w - pad, h - pad + 15.0, num(x1));
    let _ = writeln!(out, r#"<text x="5" y="{}">{}</text>"#, h - pad, num(y0));
    let _ = writeln!(out, r#"<text x="5" y="{}">{}</text>"#, pad + 10.0, num(y1));
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = x
            .iter()
            .zip(ys)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, points.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            w - pad + 5.0 - 120.0,
            pad + 15.0 * (k + 1) as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes tables into one directory, plus SVGs for plot tables when asked.
pub struct Sink {
    pub dir: PathBuf,
    pub svg: bool,
}

impl Sink {
    pub fn new(dir: &Path, svg: bool) -> Result<Self, Failure> {
        fs::create_dir_all(dir)?;
        Ok(Sink { dir: dir.to_path_buf(), svg })
    }

    pub fn table(&self, name: &str, t: &Table) -> Result<(), Failure> {
        t.write(&self.dir.join(format!("{name}.csv")))
    }

    pub fn plot(&self, name: &str, title: &str, t: &Table) -> Result<(), Failure> {
        self.table(name, t)?;
        if self.svg {
            t.write_svg(&self.dir.join(format!("{name}.svg")), title)?;
        }
        Ok(())
    }

    pub fn json(&self, name: &str, v: &serde_json::Value) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Config(e.to_string()))?;
        fs::write(self.dir.join(format!("{name}.json")), text + "\n")?;
        Ok(())
    }
}
