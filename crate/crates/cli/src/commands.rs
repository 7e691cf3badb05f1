use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use mixreg::cv::CvOutcome;
use mixreg::experiment::{
    fit_npmle, fit_pipeline, run_simulation, sample_bandwidth, select_sigma, Init, Method, PipelineConfig, SigmaMode, SimulationPlan,
};
use mixreg::metrics::{experiment_summary, RunRecord};
use mixreg::postprocess::{mean_shift, scms};
use mixreg::quadrature::sample_from_grid_density;
use mixreg::rng::derive_seed;
use mixreg::sims::{
    gen_simulation1, gen_simulation2, load_csv, read_grid_csv, two_circle_truth, write_dataset_csv, write_grid_csv, write_measure_csv,
    write_points_csv, write_table_csv, THREE_LINE_WEIGHTS,
};
use mixreg::{posterior_cluster_assign, Dataset, FitReport, GridDensity, IntegrationPolicy, KernelProfile, QuadratureGrid};
use serde::Serialize;

use crate::config::{parse_list, usage, ConfigFile, Usage};
use crate::{CvArgs, CvOptions, DataArgs, ExperimentArgs, FitArgs, GlobalArgs, GridArgs, PostprocessArgs, SimulateArgs};

/// Grid probability in the outermost cells above which a fit is flagged.
const BOUNDARY_WARNING: f64 = 1e-3;

pub struct Context {
    pub seed: u64,
    pub out: PathBuf,
    pub file: ConfigFile,
}

impl Context {
    pub fn new(global: &GlobalArgs, file: ConfigFile) -> Result<Self> {
        let seed = file.pick(global.seed, "seed", 1)?;
        if let Some(t) = file.pick_opt(global.threads, "threads")? {
            if t == 0 {
                return usage("--threads must be at least 1");
            }
            rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("configuring the worker pool")?;
        }
        let out: PathBuf = file.pick(global.out.clone(), "out", PathBuf::from("out"))?;
        std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self { seed, out, file })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let p = self.path(name);
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn shown(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

pub fn simulate(ctx: &Context, a: SimulateArgs) -> Result<()> {
    let model: String = ctx.file.pick(a.model, "model", "sim1".into())?;
    let n: usize = ctx.file.pick(a.n, "n", 1000)?;
    if n == 0 {
        return usage("--n must be positive");
    }
    let data_path = ctx.path("data.csv");
    let truth_path = ctx.path("truth.csv");
    let mut written = vec![data_path.clone(), truth_path.clone()];
    match model.as_str() {
        "sim1" => {
            let sigma = ctx.file.pick(a.sigma, "sigma", 0.5)?;
            let s = gen_simulation1(n, sigma, THREE_LINE_WEIGHTS, ctx.seed)?;
            write_dataset_csv(&data_path, &s.data, Some(&s.labels))?;
            write_measure_csv(&truth_path, &s.truth)?;
        }
        "sim2" => {
            let sigma = ctx.file.pick(a.sigma, "sigma", 0.2)?;
            let s = gen_simulation2(n, sigma, ctx.seed)?;
            write_dataset_csv(&data_path, &s.data, None)?;
            write_measure_csv(&truth_path, &two_circle_truth(200)?)?;
            let betas = ctx.path("betas.csv");
            write_points_csv(&betas, &s.betas, None)?;
            written.push(betas);
        }
        other => return usage(format!("unknown model {other:?}; expected sim1 or sim2")),
    }
    println!("wrote {}", shown(&written));
    Ok(())
}

pub fn load_data(ctx: &Context, d: &DataArgs) -> Result<Dataset> {
    let path: PathBuf = ctx.file.pick_opt(d.data.clone(), "data")?.ok_or_else(|| Usage("--data is required".into()))?;
    let xs: String = ctx.file.pick(d.x_columns.clone(), "x-columns", "x0,x1".into())?;
    let cols: Vec<String> = parse_list(&xs, "x-columns")?;
    let y: String = ctx.file.pick(d.y_column.clone(), "y-column", "y".into())?;
    let intercept = ctx.file.switch(d.intercept, "intercept")?;
    let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    load_csv(&path, &refs, &y, intercept).with_context(|| format!("loading {}", path.display()))
}

pub fn pipeline_config(ctx: &Context, g: &GridArgs, dim: usize) -> Result<PipelineConfig> {
    let nodes = ctx.file.pick(g.nodes, "nodes", if dim <= 2 { 81 } else { 31 })?;
    let half_width = ctx.file.pick(g.half_width, "half-width", 4.0)?;
    let mut cfg = PipelineConfig::with_grid(dim, nodes).map_err(|e| Usage(e.to_string()))?;
    cfg.npmle_grid = QuadratureGrid::cube(dim, half_width, nodes).map_err(|e| Usage(e.to_string()))?;
    cfg.policy = if dim <= 2 {
        IntegrationPolicy::Grid(cfg.npmle_grid.clone())
    } else {
        IntegrationPolicy::monte_carlo(4000, derive_seed(ctx.seed, "mc"))?
    };
    if let Some(m) = ctx.file.pick_opt(g.npmle_max_iter, "npmle-max-iter")? {
        cfg.npmle.max_iter = m;
    }
    Ok(cfg)
}

struct CvChoice {
    folds: usize,
    grid: Option<Vec<f64>>,
    grid_size: usize,
}

fn cv_choice(ctx: &Context, c: &CvOptions) -> Result<CvChoice> {
    let folds = ctx.file.pick(c.folds, "folds", 5)?;
    let grid = match ctx.file.pick_opt(c.sigma_grid.clone(), "sigma-grid")? {
        Some(raw) => Some(parse_list::<f64>(&raw, "sigma-grid")?),
        None => None,
    };
    let grid_size = ctx.file.pick(c.grid_size, "grid-size", 12)?;
    Ok(CvChoice { folds, grid, grid_size })
}

fn write_cv_curve(path: &Path, cv: &CvOutcome) -> Result<()> {
    let head = ["sigma", "score", "failed_folds"].map(String::from).to_vec();
    let rows = cv.curve.iter().map(|p| {
        let failed: Vec<String> = p.failed_folds.iter().map(|f| f.to_string()).collect();
        vec![p.sigma.to_string(), p.score.map_or(String::new(), |s| s.to_string()), failed.join(";")]
    });
    write_table_csv(path, std::iter::once(head).chain(rows))?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let head = vec!["iteration".to_string(), "loglik".to_string()];
    let rows = trace.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]);
    write_table_csv(path, std::iter::once(head).chain(rows))?;
    Ok(())
}

fn warn_on_boundary(fit: &FitReport<GridDensity>) -> f64 {
    let mass = fit.estimator.boundary_mass();
    if mass > BOUNDARY_WARNING {
        eprintln!("warning: {mass:.2e} of the gridded estimate sits in the outermost cells; consider a larger --half-width");
    }
    mass
}

#[derive(Serialize)]
struct FitSummary {
    method: String,
    observations: usize,
    dim: usize,
    sigma: f64,
    sigma_cross_validated: bool,
    iterations: usize,
    converged: bool,
    final_loglik: f64,
    wall_time_secs: f64,
    bandwidth: Option<f64>,
    atoms: Option<usize>,
    grid_boundary_mass: Option<f64>,
    files: Vec<PathBuf>,
}

pub fn fit(ctx: &Context, a: FitArgs) -> Result<()> {
    let data = load_data(ctx, &a.data)?;
    let name: String = ctx.file.pick(a.method, "method", "npkmle".into())?;
    let method = match name.as_str() {
        "npmle" => Method::Npmle,
        "npkmle" => Method::Npkmle,
        "gem" => Method::Gem,
        other => return usage(format!("unknown method {other:?}; expected npmle, npkmle or gem")),
    };
    let mut cfg = pipeline_config(ctx, &a.grid, data.dim())?;
    if let Some(m) = ctx.file.pick_opt(a.max_iter, "max-iter")? {
        match method {
            Method::Npmle => cfg.npmle.max_iter = m,
            _ => cfg.outer_max_iter = m,
        }
    }
    cfg.sample_size = ctx.file.pick_opt(a.particles, "particles")?;
    cfg.bandwidth = ctx.file.pick_opt(a.bandwidth, "bandwidth")?;
    cfg.bandwidth_multiplier = ctx.file.pick_opt(a.bandwidth_multiplier, "bandwidth-multiplier")?;
    let init: String = ctx.file.pick(a.init, "init", "npmle".into())?;
    cfg.init = match init.as_str() {
        "npmle" => Init::NpmleSample,
        "uniform" => Init::Uniform { half_width: ctx.file.pick(a.grid.half_width, "half-width", 4.0)? },
        other => return usage(format!("unknown init {other:?}; expected npmle or uniform")),
    };

    let mut files = Vec::new();
    let cross_validate = ctx.file.switch(a.cv_sigma, "cv-sigma")?;
    let sigma = match (ctx.file.pick_opt(a.sigma, "sigma")?, cross_validate) {
        (_, true) => {
            let c = cv_choice(ctx, &a.cv)?;
            let cv = select_sigma(&data, c.folds, c.grid.as_deref(), c.grid_size, &cfg, derive_seed(ctx.seed, "cv"))?;
            let p = ctx.path("cv.csv");
            write_cv_curve(&p, &cv)?;
            files.push(p);
            cv.sigma_hat
        }
        (Some(s), false) => s,
        (None, false) => return usage("the noise scale is unknown: pass --sigma or --cv-sigma"),
    };
    let data = data.with_sigma(sigma).map_err(|e| Usage(e.to_string()))?;

    let summary = if method == Method::Npmle {
        let fit = fit_npmle(&data, &cfg)?;
        let boundary = warn_on_boundary(&fit);
        for (name, write) in [("grid.csv", 0), ("trace.csv", 1)] {
            let p = ctx.path(name);
            match write {
                0 => write_grid_csv(&p, &fit.estimator)?,
                _ => write_trace(&p, &fit.loglik_trace)?,
            }
            files.push(p);
        }
        FitSummary {
            method: name,
            observations: data.len(),
            dim: data.dim(),
            sigma,
            sigma_cross_validated: cross_validate,
            iterations: fit.iterations,
            converged: fit.converged,
            final_loglik: fit.final_loglik(),
            wall_time_secs: fit.wall_time_secs,
            bandwidth: None,
            atoms: None,
            grid_boundary_mass: Some(boundary),
            files,
        }
    } else {
        let out = fit_pipeline(&data, method, &cfg, ctx.seed)?;
        let boundary = out.npmle.as_ref().map(warn_on_boundary);
        let report = out.npkmle.as_ref().expect("particle fit");
        let particles = ctx.path("particles.csv");
        write_points_csv(&particles, report.estimator.kde.points(), None)?;
        let atoms = ctx.path("atoms.csv");
        write_measure_csv(&atoms, &out.estimate)?;
        let trace = ctx.path("trace.csv");
        write_trace(&trace, &report.loglik_trace)?;
        let labels = ctx.path("labels.csv");
        let assigned = posterior_cluster_assign(&out.estimate, &data)?;
        let head = vec!["observation".to_string(), "label".to_string()];
        write_table_csv(
            &labels,
            std::iter::once(head).chain(assigned.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()])),
        )?;
        files.extend([particles, atoms, trace, labels]);
        FitSummary {
            method: name,
            observations: data.len(),
            dim: data.dim(),
            sigma,
            sigma_cross_validated: cross_validate,
            iterations: report.iterations,
            converged: report.converged,
            final_loglik: report.final_loglik(),
            wall_time_secs: out.wall_time_secs,
            bandwidth: out.bandwidth,
            atoms: Some(out.estimate.len()),
            grid_boundary_mass: boundary,
            files,
        }
    };
    let report = ctx.write_json("report.json", &summary)?;
    println!(
        "{}: sigma {:.4}, {} iterations, converged {}, log-likelihood {:.4}{}",
        summary.method,
        summary.sigma,
        summary.iterations,
        summary.converged,
        summary.final_loglik,
        summary.atoms.map_or(String::new(), |k| format!(", {k} atoms"))
    );
    println!("wrote {}, {}", shown(&summary.files), report.display());
    Ok(())
}

#[derive(Serialize)]
struct PostprocessSummary {
    mode: &'static str,
    sample_size: usize,
    bandwidth: f64,
    points: usize,
    unconverged: usize,
}

pub fn postprocess(ctx: &Context, a: PostprocessArgs) -> Result<()> {
    let path: PathBuf = ctx.file.pick_opt(a.grid, "grid")?.ok_or_else(|| Usage("--grid is required".into()))?;
    let g = read_grid_csv(&path).with_context(|| format!("loading {}", path.display()))?;
    let meanshift = ctx.file.switch(a.meanshift, "meanshift")?;
    let ridge = ctx.file.switch(a.scms, "scms")?;
    if meanshift == ridge {
        return usage("choose exactly one of --meanshift and --scms");
    }
    let m = ctx.file.pick(a.sample_size, "sample-size", 2000)?;
    let sample = sample_from_grid_density(&g, m, derive_seed(ctx.seed, "init"));
    let dim = g.grid().dim();
    let profile = KernelProfile::gaussian(dim)?;
    let h = match ctx.file.pick_opt(a.bandwidth, "bandwidth")? {
        Some(h) => h,
        None => sample_bandwidth(&sample, &profile, ctx.file.pick(a.bandwidth_multiplier, "bandwidth-multiplier", 1.0)?)?,
    };
    let shift = mixreg::postprocess::ShiftConfig { cutoff: ctx.file.pick_opt(a.cutoff, "cutoff")?, ..Default::default() };
    let (summary, file) = if meanshift {
        let modes = mean_shift(&sample, h, &profile, None, &shift)?;
        let p = ctx.path("modes.csv");
        write_measure_csv(&p, &modes.to_measure()?)?;
        let unconverged = modes.labels.iter().filter(|&&l| l < 0).count();
        (PostprocessSummary { mode: "meanshift", sample_size: m, bandwidth: h, points: modes.modes.len(), unconverged }, p)
    } else {
        let r = scms(&sample, h, &profile, dim.saturating_sub(1), None, &shift)?;
        let p = ctx.path("ridge.csv");
        write_points_csv(&p, &r.points, None)?;
        let unconverged = r.converged.iter().filter(|c| !**c).count();
        (PostprocessSummary { mode: "scms", sample_size: m, bandwidth: h, points: r.points.len(), unconverged }, p)
    };
    let report = ctx.write_json("postprocess.json", &summary)?;
    println!("{}: bandwidth {:.4}, {} points ({} unconverged)", summary.mode, h, summary.points, summary.unconverged);
    println!("wrote {}, {}", file.display(), report.display());
    Ok(())
}

pub fn cv_sigma(ctx: &Context, a: CvArgs) -> Result<()> {
    let data = load_data(ctx, &a.data)?;
    let cfg = pipeline_config(ctx, &a.grid, data.dim())?;
    let c = cv_choice(ctx, &a.cv)?;
    let cv = select_sigma(&data, c.folds, c.grid.as_deref(), c.grid_size, &cfg, derive_seed(ctx.seed, "cv"))?;
    let p = ctx.path("cv.csv");
    write_cv_curve(&p, &cv)?;
    let report = ctx.write_json("cv.json", &cv)?;
    println!("selected sigma {}", cv.sigma_hat);
    println!("wrote {}, {}", p.display(), report.display());
    Ok(())
}

#[derive(Serialize)]
struct ReplicationRow {
    index: usize,
    seed: u64,
    sigma: f64,
    atoms: Option<usize>,
    ari: Option<f64>,
    ari_true_prior: Option<f64>,
    w2: Option<f64>,
    wall_time_secs: Option<f64>,
    error: Option<String>,
}

pub fn experiment(ctx: &Context, a: ExperimentArgs) -> Result<()> {
    let model: String = ctx.file.pick(a.model, "model", "sim1".into())?;
    if model != "sim1" {
        return usage(format!("unknown experiment model {model:?}; only sim1 carries labels for scoring"));
    }
    let name: String = ctx.file.pick(a.method, "method", "npkmle".into())?;
    let method = Method::parse(&name).ok_or_else(|| Usage(format!("unknown method {name:?}")))?;
    let reps = ctx.file.pick(a.reps, "reps", 20)?;
    if reps == 0 {
        return usage("--reps must be at least 1");
    }
    let weights = match ctx.file.pick_opt(a.weights, "weights")? {
        Some(raw) => {
            let w: Vec<f64> = parse_list(&raw, "weights")?;
            <[f64; 3]>::try_from(w).map_err(|_| Usage("--weights needs three values".into()))?
        }
        None => THREE_LINE_WEIGHTS,
    };
    let sigma_mode = if ctx.file.switch(a.cv_sigma, "cv-sigma")? {
        let c = cv_choice(ctx, &a.cv)?;
        SigmaMode::CrossValidated { folds: c.folds, grid: c.grid, grid_size: c.grid_size }
    } else {
        SigmaMode::Known
    };
    let plan = SimulationPlan {
        n: ctx.file.pick(a.n, "n", 1000)?,
        sigma: ctx.file.pick(a.sigma, "sigma", 0.5)?,
        weights,
        replications: reps,
        master_seed: ctx.seed,
        method,
        sigma_mode,
    };
    let cfg = pipeline_config(ctx, &a.grid, 2)?;
    let reps = run_simulation(&plan, &cfg)?;
    let records: Vec<RunRecord> = reps.iter().filter_map(|r| r.record.clone()).collect();
    let failures = reps.len() - records.len();
    for r in reps.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: replication {} failed: {}", r.index, r.error.as_deref().unwrap_or(""));
    }
    let truth = gen_simulation1(3, plan.sigma.max(0.0), plan.weights, 0)?.truth;
    let summary = experiment_summary(&records, failures, &truth)?;
    let label = method.name();
    let text = summary.to_text(label);
    let files = [ctx.path("summary.txt"), ctx.path("summary.csv"), ctx.path("bias.csv")];
    std::fs::write(&files[0], &text)?;
    write_table_csv(&files[1], summary.csv_rows(label))?;
    write_table_csv(&files[2], summary.bias_csv_rows())?;
    let rows: Vec<ReplicationRow> = reps
        .iter()
        .map(|r| ReplicationRow {
            index: r.index,
            seed: r.seed,
            sigma: r.sigma,
            atoms: r.record.as_ref().map(|x| x.estimate.len()),
            ari: r.record.as_ref().map(|x| x.ari),
            ari_true_prior: r.record.as_ref().map(|x| x.ari_oracle),
            w2: r.record.as_ref().map(|x| x.w2),
            wall_time_secs: r.record.as_ref().map(|x| x.wall_time_secs),
            error: r.error.clone(),
        })
        .collect();
    let json = ctx.write_json("replications.json", &rows)?;
    print!("{text}");
    println!("wrote {}, {}", shown(&files), json.display());
    Ok(())
}
