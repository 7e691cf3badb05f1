//! Synthetic data generators and CSV input/output.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::model::{Dataset, DiscreteMeasure, GridDensity};
use crate::quadrature::QuadratureGrid;
use crate::rng::stream;

/// Coefficients `(intercept, slope)` of the three simulated lines.
pub const THREE_LINES: [[f64; 2]; 3] = [[3.0, -1.0], [1.0, 1.5], [-1.0, 0.5]];
pub const THREE_LINE_WEIGHTS: [f64; 3] = [0.3, 0.3, 0.4];

/// Design range of the scalar covariate.
const X_RANGE: std::ops::Range<f64> = -1.0..3.0;

#[derive(Clone, Debug)]
pub struct LabeledSample {
    /// Rows are `(1, x)`. Carries `sigma` when it is positive.
    pub data: Dataset,
    pub labels: Vec<usize>,
    pub truth: DiscreteMeasure,
}

fn noisy_dataset(rows: Vec<Vec<f64>>, ys: Vec<f64>, sigma: f64) -> Result<Dataset> {
    Dataset::new(rows, ys, (sigma > 0.0).then_some(sigma))
}

/// Three-line mixture: component `j` with probability `weights[j]`,
/// `x ~ U[−1, 3]` and `y = a_j + b_j x + σ z`.
pub fn gen_simulation1(n: usize, sigma: f64, weights: [f64; 3], seed: u64) -> Result<LabeledSample> {
    if n == 0 {
        return invalid("n must be positive");
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid("sigma must be nonnegative");
    }
    let truth = DiscreteMeasure::new(THREE_LINES.iter().map(|b| b.to_vec()).collect(), weights.to_vec())?;
    let mut rng = stream(seed, "dataset");
    let mut rows = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let j = if u < weights[0] {
            0
        } else if u < weights[0] + weights[1] {
            1
        } else {
            2
        };
        let x = rng.random_range(X_RANGE);
        let z: f64 = rng.sample(StandardNormal);
        let [a, b] = THREE_LINES[j];
        rows.push(vec![1.0, x]);
        ys.push(a + b * x + sigma * z);
        labels.push(j);
    }
    Ok(LabeledSample { data: noisy_dataset(rows, ys, sigma)?, labels, truth })
}

#[derive(Clone, Debug)]
pub struct ContinuousSample {
    pub data: Dataset,
    pub betas: Vec<Vec<f64>>,
}

/// Coefficients drawn uniformly from one of the circles of radius 1 and 2
/// (each with probability 1/2); rows are `(1, x)` with `x ~ U[−1, 3]`.
pub fn gen_simulation2(n: usize, sigma: f64, seed: u64) -> Result<ContinuousSample> {
    if n == 0 {
        return invalid("n must be positive");
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid("sigma must be nonnegative");
    }
    let mut rng = stream(seed, "dataset");
    let mut rows = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for _ in 0..n {
        let r = if rng.random_bool(0.5) { 1.0 } else { 2.0 };
        let angle = rng.random_range(0.0..2.0 * PI);
        let beta = vec![r * angle.cos(), r * angle.sin()];
        let x = rng.random_range(X_RANGE);
        let z: f64 = rng.sample(StandardNormal);
        ys.push(beta[0] + beta[1] * x + sigma * z);
        rows.push(vec![1.0, x]);
        betas.push(beta);
    }
    Ok(ContinuousSample { data: noisy_dataset(rows, ys, sigma)?, betas })
}

/// Equal-weight discretization of the two-circle prior with `per_circle`
/// equally spaced points on each circle.
pub fn two_circle_truth(per_circle: usize) -> Result<DiscreteMeasure> {
    if per_circle == 0 {
        return invalid("per_circle must be positive");
    }
    let mut atoms = Vec::with_capacity(2 * per_circle);
    for r in [1.0, 2.0] {
        for k in 0..per_circle {
            let a = 2.0 * PI * k as f64 / per_circle as f64;
            atoms.push(vec![r * a.cos(), r * a.sin()]);
        }
    }
    let w = vec![1.0 / atoms.len() as f64; atoms.len()];
    DiscreteMeasure::from_unnormalized(atoms, w)
}

fn csv_error(path: &Path, row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Csv { path: path.display().to_string(), row, column: column.to_string(), message: message.into() }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => csv_error(path, 0, "", format!("{other:?}")),
    }
}

/// Reads a headed, comma-separated file and selects columns by name. Rows
/// (1-based, header excluded) are reported in errors.
pub fn load_csv(path: impl AsRef<Path>, x_columns: &[&str], y_column: &str, add_intercept: bool) -> Result<Dataset> {
    let path = path.as_ref();
    if x_columns.is_empty() && !add_intercept {
        return invalid("select at least one covariate column or add an intercept");
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| csv_error(path, 0, name, "column not found"));
    let x_idx: Vec<usize> = x_columns.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let y_idx = find(y_column)?;
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_io(path, e))?;
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let cell = record.get(idx).ok_or_else(|| csv_error(path, r + 1, name, "missing cell"))?;
            if cell.is_empty() {
                return Err(csv_error(path, r + 1, name, "empty cell"));
            }
            let v: f64 = cell.parse().map_err(|_| csv_error(path, r + 1, name, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(csv_error(path, r + 1, name, "non-finite value"));
            }
            Ok(v)
        };
        let mut row = Vec::with_capacity(x_idx.len() + usize::from(add_intercept));
        if add_intercept {
            row.push(1.0);
        }
        for (&idx, name) in x_idx.iter().zip(x_columns) {
            row.push(parse(idx, name)?);
        }
        ys.push(parse(y_idx, y_column)?);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(csv_error(path, 0, "", "file has no data rows"));
    }
    Dataset::new(rows, ys, None)
}

/// Writes pre-formatted rows; the first row is the header.
pub fn write_table_csv(path: impl AsRef<Path>, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

fn write_rows(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_io(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes covariates as `x0, x1, …`, then `y`, then `label` when given.
pub fn write_dataset_csv(path: impl AsRef<Path>, data: &Dataset, labels: Option<&[usize]>) -> Result<()> {
    let path = path.as_ref();
    if labels.is_some_and(|l| l.len() != data.len()) {
        return invalid("label count differs from the number of observations");
    }
    let mut head: Vec<String> = (0..data.dim()).map(|a| format!("x{a}")).collect();
    head.push("y".into());
    if labels.is_some() {
        head.push("label".into());
    }
    let body = data.rows().enumerate().map(|(i, (x, y))| {
        let mut r: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        r.push(y.to_string());
        if let Some(l) = labels {
            r.push(l[i].to_string());
        }
        r
    });
    write_rows(path, std::iter::once(head).chain(body))
}

/// Writes a point cloud as `beta0, beta1, …`, with an optional weight column.
pub fn write_points_csv(path: impl AsRef<Path>, points: &[Vec<f64>], weights: Option<&[f64]>) -> Result<()> {
    let dim = points.first().map_or(0, Vec::len);
    let mut head: Vec<String> = (0..dim).map(|a| format!("beta{a}")).collect();
    if weights.is_some() {
        head.push("weight".into());
    }
    let body = points.iter().enumerate().map(|(i, p)| {
        let mut r: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        if let Some(w) = weights {
            r.push(w[i].to_string());
        }
        r
    });
    write_rows(path.as_ref(), std::iter::once(head).chain(body))
}

pub fn write_measure_csv(path: impl AsRef<Path>, g: &DiscreteMeasure) -> Result<()> {
    write_points_csv(path, g.atoms(), Some(g.weights()))
}

/// Reads a file written by [`write_measure_csv`].
pub fn read_measure_csv(path: impl AsRef<Path>) -> Result<DiscreteMeasure> {
    let path = path.as_ref();
    let (atoms, weights) = read_points_csv(path)?;
    let weights = weights.ok_or_else(|| csv_error(path, 0, "weight", "column not found"))?;
    DiscreteMeasure::from_unnormalized(atoms, weights)
}

/// Point rows and their weights, if the file has a `weight` column.
pub type PointTable = (Vec<Vec<f64>>, Option<Vec<f64>>);

/// Reads the `beta*` columns of a point file and its `weight` column if present.
pub fn read_points_csv(path: impl AsRef<Path>) -> Result<PointTable> {
    let path = path.as_ref();
    let (headers, table) = read_numeric_table(path)?;
    let beta: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("beta")).collect();
    if beta.is_empty() {
        return Err(csv_error(path, 0, "beta0", "column not found"));
    }
    let w_idx = headers.iter().position(|h| h == "weight");
    let points = table.iter().map(|r| beta.iter().map(|&i| r[i]).collect()).collect();
    let weights = w_idx.map(|w| table.iter().map(|r| r[w]).collect());
    Ok((points, weights))
}

fn read_numeric_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_io(path, e))?;
    let headers: Vec<String> = reader.headers().map_err(|e| csv_io(path, e))?.iter().map(String::from).collect();
    let mut table = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_io(path, e))?;
        let row = (0..headers.len())
            .map(|i| {
                record
                    .get(i)
                    .and_then(|c| c.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| csv_error(path, r + 1, &headers[i], "not a finite number"))
            })
            .collect::<Result<Vec<f64>>>()?;
        table.push(row);
    }
    Ok((headers, table))
}

/// Writes every grid node as `beta0, beta1, …, density`.
pub fn write_grid_csv(path: impl AsRef<Path>, g: &GridDensity) -> Result<()> {
    let grid = g.grid();
    let mut head: Vec<String> = (0..grid.dim()).map(|a| format!("beta{a}")).collect();
    head.push("density".into());
    let body = (0..grid.len()).map(|k| {
        let mut r: Vec<String> = grid.node(k).iter().map(|v| v.to_string()).collect();
        r.push(g.values()[k].to_string());
        r
    });
    write_rows(path.as_ref(), std::iter::once(head).chain(body))
}

/// Reads a file written by [`write_grid_csv`], recovering the grid box from
/// the node coordinates.
pub fn read_grid_csv(path: impl AsRef<Path>) -> Result<GridDensity> {
    let path = path.as_ref();
    let (headers, table) = read_numeric_table(path)?;
    let dim = headers.iter().filter(|h| h.starts_with("beta")).count();
    let d_idx = headers.iter().position(|h| h == "density").ok_or_else(|| csv_error(path, 0, "density", "column not found"))?;
    if dim == 0 || table.is_empty() {
        return Err(csv_error(path, 0, "", "no grid nodes"));
    }
    let (mut lower, mut upper, mut nodes) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..dim {
        let mut coords: Vec<f64> = table.iter().map(|r| r[a]).collect();
        coords.sort_by(f64::total_cmp);
        coords.dedup_by(|x, y| (*x - *y).abs() <= 1e-9 * (1.0 + y.abs()));
        if coords.len() < 2 {
            return Err(csv_error(path, 0, &headers[a], "needs at least two distinct coordinates"));
        }
        let step = (coords[coords.len() - 1] - coords[0]) / (coords.len() - 1) as f64;
        lower.push(coords[0] - 0.5 * step);
        upper.push(coords[coords.len() - 1] + 0.5 * step);
        nodes.push(coords.len());
    }
    let grid = QuadratureGrid::new(lower, upper, nodes)?;
    if grid.len() != table.len() {
        return Err(csv_error(path, 0, "", format!("{} rows for a grid of {} nodes", table.len(), grid.len())));
    }
    for (k, row) in table.iter().enumerate() {
        let node = grid.node(k);
        if (0..dim).any(|a| (row[a] - node[a]).abs() > 1e-6 * (1.0 + node[a].abs())) {
            return Err(csv_error(path, k + 1, &headers[0], "rows are not in grid order"));
        }
    }
    GridDensity::from_unnormalized(grid, table.iter().map(|r| r[d_idx]).collect())
}
