//! `plot`: static SVG figures from an evaluation report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::artifacts::write_file;
use crate::evaluate::{ReportEntry, ReportIndex};
use crate::error::{CliError, Result};

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A single set of axes with data-space helpers.
struct Figure {
    width: f64,
    height: f64,
    margin: f64,
    x: (f64, f64),
    y: (f64, f64),
    body: String,
    legend: Vec<(String, String)>,
    title: String,
    labels: (String, String),
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

fn range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

impl Figure {
    fn new(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        Self {
            width: 640.0,
            height: 420.0,
            margin: 60.0,
            x,
            y,
            body: String::new(),
            legend: Vec::new(),
            title: title.into(),
            labels: (xlabel.into(), ylabel.into()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.margin + (x - self.x.0) / (self.x.1 - self.x.0) * (self.width - 2.0 * self.margin)
    }

    fn py(&self, y: f64) -> f64 {
        self.height - self.margin - (y - self.y.0) / (self.y.1 - self.y.0) * (self.height - 2.0 * self.margin)
    }

    fn points(&self, pts: &[(f64, f64)]) -> String {
        pts.iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn line(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let dash = if dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let p = self.points(pts);
        let _ = writeln!(
            self.body,
            r#"<polyline points="{p}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>"#
        );
    }

    /// Filled region between `lower` and `upper`, both ordered by x.
    fn band(&mut self, lower: &[(f64, f64)], upper: &[(f64, f64)], color: &str, opacity: f64) {
        let mut pts = lower.to_vec();
        pts.extend(upper.iter().rev());
        let p = self.points(&pts);
        let _ = writeln!(
            self.body,
            r#"<polygon points="{p}" fill="{color}" fill-opacity="{opacity}" stroke="none"/>"#
        );
    }

    fn dots(&mut self, pts: &[(f64, f64)], color: &str) {
        for &(x, y) in pts {
            let _ = writeln!(
                self.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{color}"/>"#,
                self.px(x),
                self.py(y)
            );
        }
    }

    fn note(&mut self, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="16" text-anchor="middle" fill="dimgray">{}</text>"#,
            self.width / 2.0,
            self.height / 2.0,
            escape(text)
        );
    }

    fn axis_ticks(&self, out: &mut String) {
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.x.0 + t * (self.x.1 - self.x.0);
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let (xp, yp) = (self.px(xv), self.py(yv));
            let base = self.height - self.margin;
            let _ = writeln!(
                out,
                r#"<line x1="{xp:.1}" y1="{base:.1}" x2="{xp:.1}" y2="{:.1}" stroke="black"/><text x="{xp:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
                base + 4.0,
                base + 17.0,
                tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{yp:.1}" x2="{:.1}" y2="{yp:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
                self.margin - 4.0,
                self.margin,
                self.margin - 7.0,
                yp + 4.0,
                tick(yv)
            );
        }
    }

    fn render(&self) -> String {
        let (w, h, m) = (self.width, self.height, self.margin);
        let mut s = format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">
<rect width="{w}" height="{h}" fill="white"/>
"#
        );
        s.push_str(&self.body);
        let _ = writeln!(
            s,
            r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            w - 2.0 * m,
            h - 2.0 * m
        );
        self.axis_ticks(&mut s);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#,
            w / 2.0,
            m / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
            w / 2.0,
            h - 15.0,
            escape(&self.labels.0)
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
            h / 2.0,
            h / 2.0,
            escape(&self.labels.1)
        );
        for (i, (label, color)) in self.legend.iter().enumerate() {
            let y = m + 14.0 + 16.0 * i as f64;
            let x = w - m - 150.0;
            let _ = writeln!(
                s,
                r#"<line x1="{x}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}" font-size="11">{}</text>"#,
                y - 4.0,
                x + 18.0,
                y - 4.0,
                x + 24.0,
                y,
                escape(label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-2 && v.abs() < 1e4) {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

fn num(s: &str, path: &Path) -> Result<f64> {
    s.parse()
        .map_err(|e| CliError::Format(format!("{}: bad number {s:?}: {e}", path.display())))
}

fn column(rows: &[Vec<String>], j: usize, path: &Path) -> Result<Vec<f64>> {
    rows.iter().map(|r| num(&r[j], path)).collect()
}

fn bands_figure(report: &Path, entry: &ReportEntry, file: &str) -> Result<String> {
    let path = report.join(file);
    let (_, rows) = read_rows(&path)?;
    let x = column(&rows, 0, &path)?;
    let y = column(&rows, 1, &path)?;
    let mean = column(&rows, 2, &path)?;
    let se = column(&rows, 3, &path)?;
    let st = column(&rows, 4, &path)?;
    let train = split_hmc::datasets::read_csv(
        Path::new(&entry.run_dir).join(crate::run::TRAIN_FILE),
        split_hmc::datasets::TargetKind::Real(1),
    )
    .ok();
    let lower = |k: &[f64]| -> Vec<(f64, f64)> { x.iter().zip(&mean).zip(k).map(|((x, m), s)| (*x, m - 2.0 * s)).collect() };
    let upper = |k: &[f64]| -> Vec<(f64, f64)> { x.iter().zip(&mean).zip(k).map(|((x, m), s)| (*x, m + 2.0 * s)).collect() };
    let (lo_t, up_t) = (lower(&st), upper(&st));
    let (lo_e, up_e) = (lower(&se), upper(&se));
    let yr = range(lo_t.iter().chain(&up_t).map(|p| p.1).chain(y.iter().copied()));
    let mut fig = Figure::new(
        &format!("{}: predictive bands", entry.id),
        "x",
        "y",
        padded(range(x.iter().copied()).0, range(x.iter().copied()).1),
        padded(yr.0, yr.1),
    );
    fig.band(&lo_t, &up_t, PALETTE[0], 0.18);
    fig.band(&lo_e, &up_e, PALETTE[0], 0.35);
    if let Some(t) = train {
        let pts: Vec<(f64, f64)> = match &t.targets {
            split_hmc::datasets::Targets::Real(ty) => (0..t.len()).map(|i| (t.x[[i, 0]], ty[[i, 0]])).collect(),
            _ => Vec::new(),
        };
        fig.dots(&pts, "#444");
    }
    fig.line(&x.iter().copied().zip(y.iter().copied()).collect::<Vec<_>>(), "#444", true);
    fig.line(&x.iter().copied().zip(mean.iter().copied()).collect::<Vec<_>>(), PALETTE[1], false);
    fig.legend = vec![
        ("mean".into(), PALETTE[1].into()),
        ("2σ epistemic".into(), "#6fa1cf".into()),
        ("2σ total".into(), "#c5d9ec".into()),
        ("truth".into(), "#444".into()),
    ];
    Ok(fig.render())
}

fn entropy_cdf_figure(report: &Path, entries: &[&ReportEntry]) -> Result<String> {
    let mut curves = Vec::new();
    for e in entries {
        let Some(f) = &e.entropy_cdf else { continue };
        let path = report.join(f);
        let (_, rows) = read_rows(&path)?;
        let h = column(&rows, 0, &path)?;
        let p = column(&rows, 1, &path)?;
        curves.push((e.id.clone(), h, p));
    }
    let hmax = curves
        .iter()
        .flat_map(|c| c.1.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let mut fig = Figure::new(
        "Entropy of misclassified test points",
        "predictive entropy (nats)",
        "empirical CDF",
        (0.0, hmax * 1.05),
        (0.0, 1.0),
    );
    let mut empty = Vec::new();
    for (i, (id, h, p)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if h.is_empty() {
            empty.push(id.clone());
            fig.legend.push((format!("{id} (no errors)"), color.into()));
            continue;
        }
        // right-continuous steps from zero
        let mut pts = vec![(0.0, 0.0), (h[0], 0.0)];
        for k in 0..h.len() {
            pts.push((h[k], p[k]));
            let next = h.get(k + 1).copied().unwrap_or(hmax * 1.05);
            pts.push((next, p[k]));
        }
        fig.line(&pts, color, false);
        fig.legend.push((id.clone(), color.into()));
    }
    if !empty.is_empty() {
        fig.note(&format!("no errors: {}", empty.join(", ")));
    }
    Ok(fig.render())
}

fn mi_matrix_figure(report: &Path, entry: &ReportEntry, file: &str) -> Result<String> {
    let path = report.join(file);
    let (_, rows) = read_rows(&path)?;
    let cells: Vec<(usize, usize, usize, Option<f64>)> = rows
        .iter()
        .map(|r| {
            let idx = |j: usize| {
                r[j].parse::<usize>()
                    .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
            };
            let v = if r[3].is_empty() { None } else { Some(num(&r[3], &path)?) };
            Ok((idx(0)?, idx(1)?, idx(2)?, v))
        })
        .collect::<Result<_>>()?;
    let k = cells.iter().map(|c| c.0.max(c.1) + 1).max().unwrap_or(1);
    let vmax = cells.iter().filter_map(|c| c.3).fold(0.0f64, f64::max).max(1e-12);
    let size = 420.0 / k as f64;
    let (w, h) = (560.0, 520.0);
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">
<rect width="{w}" height="{h}" fill="white"/>
<text x="{}" y="24" font-size="14" text-anchor="middle">{}: mean mutual information</text>
"#,
        w / 2.0,
        escape(&entry.id)
    );
    let (x0, y0) = (70.0, 50.0);
    for (t, p, count, v) in &cells {
        let (x, y) = (x0 + *p as f64 * size, y0 + *t as f64 * size);
        match v {
            // blank cells carry no data and stay unfilled
            Some(v) if *count > 0 => {
                let a = v / vmax;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{size:.1}" height="{size:.1}" fill="rgb({},{},{})" stroke="darkgray"/><text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">{v:.3}</text>"#,
                    (255.0 * (1.0 - 0.8 * a)) as u8,
                    (255.0 * (1.0 - 0.6 * a)) as u8,
                    255,
                    x + size / 2.0,
                    y + size / 2.0 + 3.0
                );
            }
            _ => {
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{size:.1}" height="{size:.1}" fill="none" stroke="darkgray"/>"#
                );
            }
        }
    }
    for c in 0..k {
        let mid = c as f64 * size + size / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{c}</text><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{c}</text>"#,
            x0 + mid,
            y0 + k as f64 * size + 16.0,
            x0 - 6.0,
            y0 + mid + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">predicted class</text><text x="18" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 18 {})">true class</text>"#,
        x0 + 210.0,
        y0 + k as f64 * size + 36.0,
        y0 + 210.0,
        y0 + 210.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Mean curve with a one-standard-deviation band per entry.
fn curve_figure(report: &Path, entries: &[(&ReportEntry, &String)], title: &str, ylabel: &str) -> Result<String> {
    let mut curves = Vec::new();
    for (e, f) in entries {
        let path = report.join(f);
        let (_, rows) = read_rows(&path)?;
        let idx = column(&rows, 0, &path)?;
        let mean = column(&rows, 1, &path)?;
        let std = column(&rows, 2, &path)?;
        curves.push((e.id.clone(), idx, mean, std));
    }
    let xr = range(curves.iter().flat_map(|c| c.1.iter().copied()));
    let yr = range(
        curves
            .iter()
            .flat_map(|c| c.2.iter().zip(&c.3).flat_map(|(m, s)| [m - s, m + s])),
    );
    let mut fig = Figure::new(title, "samples in ensemble", ylabel, padded(xr.0, xr.1), padded(yr.0, yr.1));
    for (i, (id, x, m, s)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let lo: Vec<(f64, f64)> = x.iter().zip(m).zip(s).map(|((x, m), s)| (*x, m - s)).collect();
        let hi: Vec<(f64, f64)> = x.iter().zip(m).zip(s).map(|((x, m), s)| (*x, m + s)).collect();
        fig.band(&lo, &hi, color, 0.2);
        fig.line(&x.iter().copied().zip(m.iter().copied()).collect::<Vec<_>>(), color, false);
        fig.legend.push((id.clone(), color.into()));
    }
    Ok(fig.render())
}

fn trace_figure(report: &Path, entry: &ReportEntry, file: &str) -> Result<String> {
    let path = report.join(file);
    let (header, rows) = read_rows(&path)?;
    let mut fig_lines = Vec::new();
    for j in 1..header.len() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| !r[j].is_empty())
            .map(|r| Ok((num(&r[0], &path)?, num(&r[j], &path)?)))
            .collect::<Result<_>>()?;
        fig_lines.push((header[j].clone(), pts));
    }
    let xr = range(fig_lines.iter().flat_map(|l| l.1.iter().map(|p| p.0)));
    let yr = range(fig_lines.iter().flat_map(|l| l.1.iter().map(|p| p.1)));
    let mut fig = Figure::new(
        &format!("{}: training log posterior", entry.id),
        "sample",
        "log posterior",
        padded(xr.0, xr.1),
        padded(yr.0, yr.1),
    );
    for (i, (name, pts)) in fig_lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        fig.line(pts, color, false);
        if i < 6 {
            fig.legend.push((name.clone(), color.into()));
        }
    }
    Ok(fig.render())
}

/// Renders every figure the report supports into `out`.
pub fn cmd_plot(report: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let index = ReportIndex::read(report)?;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut written = Vec::new();
    let mut emit = |name: String, svg: String| -> Result<()> {
        let p = out.join(name);
        write_file(&p, svg.as_bytes())?;
        written.push(p);
        Ok(())
    };
    for e in &index.entries {
        if let Some(f) = &e.bands {
            emit(format!("{}_bands.svg", e.id), bands_figure(report, e, f)?)?;
        }
        if let Some(f) = &e.mi_matrix {
            emit(format!("{}_mi_matrix.svg", e.id), mi_matrix_figure(report, e, f)?)?;
        }
        if let Some(f) = &e.log_posterior {
            emit(format!("{}_log_posterior.svg", e.id), trace_figure(report, e, f)?)?;
        }
    }
    let with_cdf: Vec<&ReportEntry> = index.entries.iter().filter(|e| e.entropy_cdf.is_some()).collect();
    if !with_cdf.is_empty() {
        emit("entropy_cdf.svg".into(), entropy_cdf_figure(report, &with_cdf)?)?;
    }
    let with_acc: Vec<(&ReportEntry, &String)> = index
        .entries
        .iter()
        .filter_map(|e| e.cumulative_accuracy.as_ref().map(|f| (e, f)))
        .collect();
    if !with_acc.is_empty() {
        emit(
            "cumulative_accuracy.svg".into(),
            curve_figure(report, &with_acc, "Cumulative accuracy of the ensemble", "accuracy")?,
        )?;
    }
    Ok(written)
}
