//! Plot-ready CSV export and a minimal SVG renderer.
//!
//! The SVG has two panels: the data with one fitted line per atom (stroke
//! width proportional to weight), and the coefficient plane with the grid
//! density as shaded cells, particles as dots and atoms as circles.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context as _, Result};
use mixreg::sims::{read_grid_csv, read_measure_csv, read_points_csv, write_table_csv};
use mixreg::{DiscreteMeasure, GridDensity};

use crate::commands::Context;
use crate::config::usage;
use crate::PlotArgs;

const PANEL: f64 = 360.0;
const MARGIN: f64 = 30.0;

struct Inputs {
    scatter: Option<Vec<(f64, f64)>>,
    atoms: Option<DiscreteMeasure>,
    particles: Option<Vec<Vec<f64>>>,
    grid: Option<GridDensity>,
}

fn read_scatter(path: &PathBuf, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let head = rdr.headers()?.clone();
    let find =
        |name: &str| head.iter().position(|h| h.trim() == name).with_context(|| format!("{} has no column {name:?}", path.display()));
    let (xi, yi) = (find(x)?, find(y)?);
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i).unwrap_or("").trim().parse().with_context(|| format!("{} row {}: not a number", path.display(), row + 1))
        };
        out.push((get(xi)?, get(yi)?));
    }
    Ok(out)
}

fn two_dim(what: &str, dim: usize) -> Result<()> {
    if dim != 2 {
        return usage(format!("{what} must be two-dimensional (intercept, slope); got {dim} columns"));
    }
    Ok(())
}

pub fn plotdata(ctx: &Context, a: PlotArgs) -> Result<()> {
    let data: Option<PathBuf> = ctx.file.pick_opt(a.data, "data")?;
    let atoms: Option<PathBuf> = ctx.file.pick_opt(a.atoms, "atoms")?;
    let particles: Option<PathBuf> = ctx.file.pick_opt(a.particles, "particles")?;
    let grid: Option<PathBuf> = ctx.file.pick_opt(a.grid, "grid")?;
    if data.is_none() && atoms.is_none() && particles.is_none() && grid.is_none() {
        return usage("nothing to plot: pass at least one of --data, --atoms, --particles, --grid");
    }
    let x: String = ctx.file.pick(a.x_column, "x-column", "x1".into())?;
    let y: String = ctx.file.pick(a.y_column, "y-column", "y".into())?;

    let inputs = Inputs {
        scatter: data.as_ref().map(|p| read_scatter(p, &x, &y)).transpose()?,
        atoms: atoms.as_ref().map(|p| read_measure_csv(p).with_context(|| format!("loading {}", p.display()))).transpose()?,
        particles: particles
            .as_ref()
            .map(|p| read_points_csv(p).map(|(pts, _)| pts).with_context(|| format!("loading {}", p.display())))
            .transpose()?,
        grid: grid.as_ref().map(|p| read_grid_csv(p).with_context(|| format!("loading {}", p.display()))).transpose()?,
    };
    if let Some(g) = &inputs.atoms {
        two_dim("atoms", g.dim())?;
    }
    if let Some(p) = inputs.particles.as_ref().and_then(|p| p.first()) {
        two_dim("particles", p.len())?;
    }
    if let Some(g) = &inputs.grid {
        two_dim("grid", g.grid().dim())?;
    }

    let mut files = Vec::new();
    if let Some(s) = &inputs.scatter {
        let p = ctx.path("scatter.csv");
        let rows = s.iter().map(|(x, y)| vec![x.to_string(), y.to_string()]);
        write_table_csv(&p, std::iter::once(vec!["x".into(), "y".into()]).chain(rows))?;
        files.push(p);
    }
    if let Some(g) = &inputs.atoms {
        let p = ctx.path("lines.csv");
        let rows = g.iter().map(|(b, w)| vec![b[0].to_string(), b[1].to_string(), w.to_string()]);
        write_table_csv(&p, std::iter::once(vec!["intercept".into(), "slope".into(), "weight".into()]).chain(rows))?;
        files.push(p);
    }
    if let Some(pts) = &inputs.particles {
        let p = ctx.path("beta_points.csv");
        let rows = pts.iter().map(|b| vec![b[0].to_string(), b[1].to_string()]);
        write_table_csv(&p, std::iter::once(vec!["beta0".into(), "beta1".into()]).chain(rows))?;
        files.push(p);
    }
    if let Some(g) = &inputs.grid {
        let p = ctx.path("heatmap.csv");
        let rows = (0..g.grid().len()).map(|k| {
            let b = g.grid().node(k);
            vec![b[0].to_string(), b[1].to_string(), g.values()[k].to_string()]
        });
        write_table_csv(&p, std::iter::once(vec!["beta0".into(), "beta1".into(), "density".into()]).chain(rows))?;
        files.push(p);
    }
    if ctx.file.switch(a.svg, "svg")? {
        let p = ctx.path("plot.svg");
        std::fs::write(&p, render_svg(&inputs)).with_context(|| format!("writing {}", p.display()))?;
        files.push(p);
    }
    println!("wrote {}", files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
    Ok(())
}

#[derive(Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>, left: f64) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY, left };
        for (x, y) in points {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            (f.x0, f.x1, f.y0, f.y1) = (-1.0, 1.0, -1.0, 1.0);
        }
        if f.x1 - f.x0 < 1e-9 {
            (f.x0, f.x1) = (f.x0 - 1.0, f.x1 + 1.0);
        }
        if f.y1 - f.y0 < 1e-9 {
            (f.y0, f.y1) = (f.y0 - 1.0, f.y1 + 1.0);
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        self.left + MARGIN + (x - self.x0) / (self.x1 - self.x0) * (PANEL - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        PANEL - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (PANEL - 2.0 * MARGIN)
    }

    fn border(&self, svg: &mut String, title: &str) {
        let _ = writeln!(
            svg,
            r##"<rect x="{}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#444"/><text x="{}" y="18" font-size="12">{title}</text>"##,
            self.left + MARGIN,
            PANEL - 2.0 * MARGIN,
            PANEL - 2.0 * MARGIN,
            self.left + MARGIN
        );
    }
}

fn render_svg(inputs: &Inputs) -> String {
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL}">"#, 2.0 * PANEL);
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let scatter = inputs.scatter.as_deref().unwrap_or(&[]);
    let f = Frame::fit(scatter.iter().copied(), 0.0);
    f.border(&mut svg, "data and fitted lines");
    for &(x, y) in scatter {
        let _ = writeln!(svg, r##"<circle cx="{:.1}" cy="{:.1}" r="1.5" fill="#888" fill-opacity="0.5"/>"##, f.px(x), f.py(y));
    }
    if let Some(g) = &inputs.atoms {
        let _ = writeln!(
            svg,
            r#"<svg x="{MARGIN}" y="{MARGIN}" width="{0}" height="{0}" viewBox="{MARGIN} {MARGIN} {0} {0}">"#,
            PANEL - 2.0 * MARGIN
        );
        for (b, w) in g.iter() {
            let (ya, yb) = (b[0] + b[1] * f.x0, b[0] + b[1] * f.x1);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#c33" stroke-width="{:.2}"/>"##,
                f.px(f.x0),
                f.py(ya),
                f.px(f.x1),
                f.py(yb),
                0.5 + 6.0 * w
            );
        }
        svg.push_str("</svg>\n");
    }

    let mut coef: Vec<(f64, f64)> = Vec::new();
    if let Some(g) = &inputs.grid {
        coef.extend([(g.grid().lower()[0], g.grid().lower()[1]), (g.grid().upper()[0], g.grid().upper()[1])]);
    }
    if let Some(p) = &inputs.particles {
        coef.extend(p.iter().map(|b| (b[0], b[1])));
    }
    if let Some(g) = &inputs.atoms {
        coef.extend(g.iter().map(|(b, _)| (b[0], b[1])));
    }
    let c = Frame::fit(coef.into_iter(), PANEL);
    c.border(&mut svg, "coefficient plane");
    if let Some(g) = &inputs.grid {
        let top = g.values().iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let (dx, dy) = (g.grid().spacing(0), g.grid().spacing(1));
        for k in 0..g.grid().len() {
            let v = g.values()[k] / top;
            if v < 1e-3 {
                continue;
            }
            let b = g.grid().node(k);
            let (xa, xb) = (c.px(b[0] - dx / 2.0), c.px(b[0] + dx / 2.0));
            let (ya, yb) = (c.py(b[1] + dy / 2.0), c.py(b[1] - dy / 2.0));
            let _ = writeln!(
                svg,
                r##"<rect x="{xa:.1}" y="{ya:.1}" width="{:.2}" height="{:.2}" fill="#2a5" fill-opacity="{v:.3}"/>"##,
                xb - xa,
                yb - ya
            );
        }
    }
    if let Some(p) = &inputs.particles {
        for b in p {
            let _ = writeln!(svg, r##"<circle cx="{:.1}" cy="{:.1}" r="1.2" fill="#236"/>"##, c.px(b[0]), c.py(b[1]));
        }
    }
    if let Some(g) = &inputs.atoms {
        for (b, w) in g.iter() {
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.1}" cy="{:.1}" r="{:.1}" fill="none" stroke="#c33" stroke-width="1.5"/>"##,
                c.px(b[0]),
                c.py(b[1]),
                3.0 + 12.0 * w.sqrt()
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
