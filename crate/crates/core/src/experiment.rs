//! End-to-end estimation pipelines and seeded replication runs.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cv::{cv_sigma, default_sigma_grid, CvOutcome, FittedPrior};
use crate::error::{invalid, Result};
use crate::kernels::{oversmooth_bandwidth, scale_estimate_u, KernelProfile};
use crate::metrics::{adjusted_rand_index, wasserstein2, RunRecord};
use crate::model::{posterior_cluster_assign, Dataset, DiscreteMeasure, FitReport, GridDensity};
use crate::npkmle::{run_em_npkmle, InnerMode, NpkmleConfig, NpkmleEstimate};
use crate::npmle::{run_em_npmle, NpmleConfig};
use crate::postprocess::{mean_shift, scms, ModeSet, RidgeSet, ShiftConfig};
use crate::quadrature::{sample_from_grid_density, IntegrationPolicy, QuadratureGrid};
use crate::rng::{derive_indexed, derive_seed, seeded};
use crate::sims::{gen_simulation1, LabeledSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    /// Gridded EM only; the estimate is the empirical measure of a sample from it.
    Npmle,
    NpmleMeanShift,
    NpmleScms,
    Npkmle,
    Gem,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "npmle" => Self::Npmle,
            "npmle-meanshift" | "meanshift" => Self::NpmleMeanShift,
            "npmle-scms" | "scms" => Self::NpmleScms,
            "npkmle" => Self::Npkmle,
            "gem" => Self::Gem,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Npmle => "npmle",
            Self::NpmleMeanShift => "npmle-meanshift",
            Self::NpmleScms => "npmle-scms",
            Self::Npkmle => "npkmle",
            Self::Gem => "gem",
        }
    }

    fn particle_mode(self) -> Option<InnerMode> {
        match self {
            Self::Npkmle => Some(InnerMode::FullEm),
            Self::Gem => Some(InnerMode::Gem),
            _ => None,
        }
    }
}

/// Starting particles for the particle methods.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Init {
    /// A sample from the gridded EM estimate.
    NpmleSample,
    /// Uniform draws over `[−half_width, half_width]^d`.
    Uniform { half_width: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineConfig {
    /// Grid for the gridded EM; its uniform density is the initialization.
    pub npmle_grid: QuadratureGrid,
    pub npmle: NpmleConfig,
    /// β-integrals of the particle EM.
    pub policy: IntegrationPolicy,
    pub init: Init,
    /// Sample size drawn from the gridded estimate, and the particle count.
    /// `None` uses the number of observations.
    pub sample_size: Option<usize>,
    /// Bandwidth multiplier; `None` picks 1 for full EM from a gridded sample,
    /// 1.2 for the one-step variant and 1.15 for uniform starts.
    pub bandwidth_multiplier: Option<f64>,
    /// Fixed bandwidth overriding the oversmoothing rule.
    pub bandwidth: Option<f64>,
    pub shift: ShiftConfig,
    /// Only the first `scms_starts` sample points are moved by SCMS
    /// (`None` moves all of them).
    pub scms_starts: Option<usize>,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub outer_tol: f64,
    pub displacement_tol: f64,
    pub outer_max_iter: usize,
    pub merge_factor: f64,
}

impl PipelineConfig {
    /// Grid `[−4, 4]^d` with `nodes` nodes per axis for both EM schemes.
    pub fn with_grid(dim: usize, nodes: usize) -> Result<Self> {
        let grid = QuadratureGrid::cube(dim, 4.0, nodes)?;
        let base = NpkmleConfig::new(InnerMode::FullEm, IntegrationPolicy::Grid(grid.clone()));
        Ok(Self {
            npmle_grid: grid.clone(),
            npmle: NpmleConfig::default(),
            policy: IntegrationPolicy::Grid(grid),
            init: Init::NpmleSample,
            sample_size: None,
            bandwidth_multiplier: None,
            bandwidth: None,
            shift: ShiftConfig::default(),
            scms_starts: None,
            inner_tol: base.inner_tol,
            inner_max_iter: base.inner_max_iter,
            outer_tol: base.outer_tol,
            displacement_tol: base.displacement_tol,
            outer_max_iter: base.outer_max_iter,
            merge_factor: base.merge_factor,
        })
    }

    fn npkmle(&self, mode: InnerMode) -> NpkmleConfig {
        NpkmleConfig {
            mode,
            inner_tol: self.inner_tol,
            inner_max_iter: self.inner_max_iter,
            outer_tol: self.outer_tol,
            displacement_tol: self.displacement_tol,
            outer_max_iter: self.outer_max_iter,
            policy: self.policy.clone(),
            merge_factor: self.merge_factor,
            track_q: false,
        }
    }

    fn multiplier(&self, method: Method) -> f64 {
        self.bandwidth_multiplier.unwrap_or(match (&self.init, method) {
            (Init::Uniform { .. }, _) => 1.15,
            (_, Method::Gem) => 1.2,
            _ => 1.0,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineOutput {
    pub method: Method,
    /// Discrete estimate of the prior used for clustering and distances.
    pub estimate: DiscreteMeasure,
    pub bandwidth: Option<f64>,
    pub npmle: Option<FitReport<GridDensity>>,
    /// Draws from the gridded estimate (post-processing input or particle start).
    pub sample: Option<Vec<Vec<f64>>>,
    pub modes: Option<ModeSet>,
    pub ridge: Option<RidgeSet>,
    pub npkmle: Option<FitReport<NpkmleEstimate>>,
    pub wall_time_secs: f64,
}

/// Oversmoothing bandwidth for `points`, scaled by `multiplier`.
pub fn sample_bandwidth(points: &[Vec<f64>], profile: &KernelProfile, multiplier: f64) -> Result<f64> {
    Ok(multiplier * oversmooth_bandwidth(points.len(), scale_estimate_u(points)?, profile)?)
}

fn uniform_points(m: usize, dim: usize, half_width: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..m).map(|_| (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect()).collect()
}

/// Fits `data` (which must carry σ) with `method`. Randomness derives from `seed`.
pub fn fit_pipeline(data: &Dataset, method: Method, cfg: &PipelineConfig, seed: u64) -> Result<PipelineOutput> {
    fit_pipeline_reusing(data, method, cfg, seed, None)
}

/// Gridded EM fit of `data` from the uniform density on the configured grid.
pub fn fit_npmle(data: &Dataset, cfg: &PipelineConfig) -> Result<FitReport<GridDensity>> {
    run_em_npmle(data, GridDensity::uniform(cfg.npmle_grid.clone()), &cfg.npmle)
}

/// As [`fit_pipeline`], but takes the gridded EM fit from `prefit` when given
/// instead of recomputing it. Its time is then excluded from the wall time.
pub fn fit_pipeline_reusing(
    data: &Dataset,
    method: Method,
    cfg: &PipelineConfig,
    seed: u64,
    prefit: Option<&FitReport<GridDensity>>,
) -> Result<PipelineOutput> {
    let start = Instant::now();
    let dim = data.dim();
    let profile = KernelProfile::gaussian(dim)?;
    let m = cfg.sample_size.unwrap_or(data.len());
    if m < 4 {
        return invalid("sample size must be at least 4");
    }
    let mut out = PipelineOutput {
        method,
        estimate: DiscreteMeasure::dirac(vec![0.0; dim])?,
        bandwidth: None,
        npmle: None,
        sample: None,
        modes: None,
        ridge: None,
        npkmle: None,
        wall_time_secs: 0.0,
    };
    let needs_grid = !matches!((method, &cfg.init), (Method::Npkmle | Method::Gem, Init::Uniform { .. }));
    if needs_grid {
        let fit = match prefit {
            Some(f) => f.clone(),
            None => fit_npmle(data, cfg)?,
        };
        out.sample = Some(sample_from_grid_density(&fit.estimator, m, derive_seed(seed, "init")));
        out.npmle = Some(fit);
    }
    let bandwidth_for = |pts: &[Vec<f64>]| match cfg.bandwidth {
        Some(h) => Ok(h),
        None => sample_bandwidth(pts, &profile, cfg.multiplier(method)),
    };
    match method {
        Method::Npmle => {
            let s = out.sample.as_ref().expect("sample drawn");
            out.estimate = DiscreteMeasure::from_unnormalized(s.clone(), vec![1.0; s.len()])?;
        }
        Method::NpmleMeanShift => {
            let s = out.sample.as_ref().expect("sample drawn");
            let h = bandwidth_for(s)?;
            let modes = mean_shift(s, h, &profile, None, &cfg.shift)?;
            out.estimate = modes.to_measure()?;
            out.bandwidth = Some(h);
            out.modes = Some(modes);
        }
        Method::NpmleScms => {
            let s = out.sample.as_ref().expect("sample drawn");
            let h = bandwidth_for(s)?;
            let starts = &s[..cfg.scms_starts.unwrap_or(s.len()).min(s.len())];
            let ridge = scms(s, h, &profile, dim.saturating_sub(1), Some(starts), &cfg.shift)?;
            out.estimate = DiscreteMeasure::from_unnormalized(ridge.points.clone(), vec![1.0; ridge.points.len()])?;
            out.bandwidth = Some(h);
            out.ridge = Some(ridge);
        }
        Method::Npkmle | Method::Gem => {
            let beta_0 = match (&cfg.init, &out.sample) {
                (Init::Uniform { half_width }, _) => uniform_points(m, dim, *half_width, derive_seed(seed, "init")),
                (Init::NpmleSample, Some(s)) => s.clone(),
                (Init::NpmleSample, None) => unreachable!("gridded sample drawn for this initialization"),
            };
            let h = bandwidth_for(&beta_0)?;
            let mut pcfg = cfg.npkmle(method.particle_mode().expect("particle method"));
            if let IntegrationPolicy::MonteCarlo { samples, .. } = pcfg.policy {
                pcfg.policy = IntegrationPolicy::MonteCarlo { samples, seed: derive_seed(seed, "mc") };
            }
            let fit = run_em_npkmle(data, &beta_0, h, &profile, &pcfg)?;
            out.estimate = fit.estimator.atoms.clone();
            out.bandwidth = Some(h);
            out.npkmle = Some(fit);
        }
    }
    out.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Cluster agreement and distance of an estimate on a labeled sample.
pub fn evaluate(estimate: &DiscreteMeasure, sample: &LabeledSample, wall_time_secs: f64) -> Result<RunRecord> {
    let data = &sample.data;
    let labels = posterior_cluster_assign(estimate, data)?;
    let oracle = posterior_cluster_assign(&sample.truth, data)?;
    Ok(RunRecord {
        ari: adjusted_rand_index(&labels, &sample.labels)?,
        ari_oracle: adjusted_rand_index(&oracle, &sample.labels)?,
        w2: wasserstein2(&sample.truth, estimate)?,
        estimate: estimate.clone(),
        wall_time_secs,
    })
}

/// How σ is obtained in a replication.
#[derive(Clone, Debug, Serialize)]
pub enum SigmaMode {
    Known,
    /// Cross-validated with the one-step particle EM from a gridded sample.
    CrossValidated {
        folds: usize,
        grid: Option<Vec<f64>>,
        grid_size: usize,
    },
}

/// The fold fitter used for noise-scale selection: one-step particle EM
/// started from a gridded sample, with the plain oversmoothing bandwidth.
pub fn cv_fitter(cfg: &PipelineConfig, seed: u64) -> impl Fn(&Dataset, f64) -> Result<FittedPrior> + Sync + '_ {
    move |train: &Dataset, _sigma: f64| -> Result<FittedPrior> {
        let mut c = cfg.clone();
        c.bandwidth_multiplier = Some(cfg.bandwidth_multiplier.unwrap_or(1.0));
        c.init = Init::NpmleSample;
        let out = fit_pipeline(train, Method::Gem, &c, derive_seed(seed, "cv-fit"))?;
        Ok(Box::new(out.estimate))
    }
}

/// Selects σ for `data` by cross-validation.
pub fn select_sigma(
    data: &Dataset,
    folds: usize,
    grid: Option<&[f64]>,
    grid_size: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<CvOutcome> {
    let candidates = match grid {
        Some(g) => g.to_vec(),
        None => default_sigma_grid(data, grid_size)?,
    };
    cv_sigma(data, folds, &candidates, cv_fitter(cfg, seed), seed)
}

#[derive(Clone, Debug, Serialize)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub sigma: f64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationPlan {
    pub n: usize,
    pub sigma: f64,
    pub weights: [f64; 3],
    pub replications: usize,
    pub master_seed: u64,
    pub method: Method,
    pub sigma_mode: SigmaMode,
}

/// Runs one replication of the three-line simulation.
pub fn run_replication(plan: &SimulationPlan, cfg: &PipelineConfig, index: usize) -> Replication {
    let seed = derive_indexed(plan.master_seed, "replication", index as u64);
    let mut rep = Replication { index, seed, sigma: plan.sigma, record: None, error: None };
    let run = |rep: &mut Replication| -> Result<RunRecord> {
        let sample = gen_simulation1(plan.n, plan.sigma, plan.weights, seed)?;
        let data = match &plan.sigma_mode {
            SigmaMode::Known => sample.data.clone(),
            SigmaMode::CrossValidated { folds, grid, grid_size } => {
                let cv = select_sigma(&sample.data, *folds, grid.as_deref(), *grid_size, cfg, derive_seed(seed, "cv"))?;
                rep.sigma = cv.sigma_hat;
                sample.data.with_sigma(cv.sigma_hat)?
            }
        };
        let out = fit_pipeline(&data, plan.method, cfg, seed)?;
        // Clustering uses the working σ, as the fit does.
        let scored = LabeledSample { data, labels: sample.labels, truth: sample.truth };
        evaluate(&out.estimate, &scored, out.wall_time_secs)
    };
    match run(&mut rep) {
        Ok(r) => rep.record = Some(r),
        Err(e) => rep.error = Some(e.to_string()),
    }
    rep
}

/// All replications of `plan`, in index order.
pub fn run_simulation(plan: &SimulationPlan, cfg: &PipelineConfig) -> Result<Vec<Replication>> {
    if plan.replications == 0 {
        return invalid("need at least one replication");
    }
    Ok((0..plan.replications).into_par_iter().map(|r| run_replication(plan, cfg, r)).collect())
}
