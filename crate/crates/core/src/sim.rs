//! Simulation-study generator and harness: nonstationary truth over
//! horizontal parameter bands, a reference field with base parameters, a
//! corner-based missing-data design, and the NS-vs-S model comparison.
//!
//! The domain splits two ways. Four equal horizontal bands carry the
//! per-band (rho, sigma^2) values (the reference field uses the base
//! parameters, the true field uses their log-linear shift). Independently,
//! four corner quadrants define the observation design: training sites are
//! sampled only from the upper-left and lower-right quadrants
//! (partial-missing); the other two quadrants contribute no training data
//! (all-missing). Every non-training cell is a test case labeled with its
//! quadrant's stratum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bhm::{predict, run_chain, FitContext, ModelSpec, PosteriorSamples};
use crate::covariance::{build_cov_matrix, chol_with_jitter, KernelConfig, LocalParams};
use crate::error::{Error, Result};
use crate::field_store::{Location, MonitorRecord, MonitorSet, SpaceTimeField};
use crate::scoring::{score_table, PredictionCase, ScoreTable, StratumScores};
use crate::transfer::TransferCoefficients;
use crate::window_mle::{fit_all_windows, partition, WindowEstimates};

const REFERENCE_STREAM: u64 = 1;
const TRUTH_STREAM: u64 = 2;
const DESIGN_STREAM: u64 = 3;

/// Full configuration of the simulation study.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Cells per axis (grid is side x side).
    pub grid_side: usize,
    pub domain_min: f64,
    pub domain_max: f64,
    pub days: usize,
    /// Base spatial ranges of the four horizontal bands, bottom to top.
    pub rho0: [f64; 4],
    /// Base marginal variances of the four bands.
    pub sigma2_0: [f64; 4],
    pub nu: f64,
    /// Intercept of the true log-linear shift: log(theta) = a + b log(theta0).
    pub transfer_a: f64,
    /// Slope of the true log-linear shift.
    pub transfer_b: f64,
    pub noise_var: f64,
    /// Mean-surface coefficients on (lon, lat).
    pub mean_coef: (f64, f64),
    /// Fraction of cells sampled as training sites in each partial quadrant.
    pub sampling_fraction: f64,
    pub window_size: f64,
    pub replicates: usize,
    pub iters: usize,
    pub burnin_frac: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    /// Desk-scale defaults: the published design at 5 replicates and
    /// 2,000 iterations.
    fn default() -> Self {
        SimConfig {
            grid_side: 40,
            domain_min: 1.0,
            domain_max: 100.0,
            days: 4,
            rho0: [15.0, 10.0, 5.0, 2.5],
            sigma2_0: [2.0, 3.0, 7.0, 10.0],
            nu: 1.5,
            transfer_a: 0.5,
            transfer_b: 1.0,
            noise_var: 1.0,
            mean_coef: (0.05, 0.1),
            sampling_fraction: 0.25,
            window_size: 25.0,
            replicates: 5,
            iters: 2000,
            burnin_frac: 0.15,
            seed: 1,
        }
    }
}

impl SimConfig {
    /// The study at its published sizes (50 replicates, 10,000 iterations).
    pub fn full_scale(mut self) -> Self {
        self.replicates = 50;
        self.iters = 10_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 {
            return Err(Error::Domain("grid side must be at least 2".into()));
        }
        if !(self.domain_max > self.domain_min) {
            return Err(Error::Domain("domain bounds out of order".into()));
        }
        if self.days == 0 || self.replicates == 0 {
            return Err(Error::Domain("days and replicates must be positive".into()));
        }
        for v in self.rho0.iter().chain(self.sigma2_0.iter()) {
            if !(*v > 0.0) {
                return Err(Error::Domain("band parameters must be positive".into()));
            }
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::Domain("noise variance must be nonnegative".into()));
        }
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction < 1.0) {
            return Err(Error::Domain("sampling fraction must be in (0, 1)".into()));
        }
        KernelConfig::new(self.nu, 0.0)?;
        Ok(())
    }

    /// Grid locations in (lat, lon) lexicographic order.
    pub fn grid_locations(&self) -> Vec<Location> {
        let side = self.grid_side;
        let step = (self.domain_max - self.domain_min) / (side - 1) as f64;
        let mut locs = Vec::with_capacity(side * side);
        for iy in 0..side {
            for ix in 0..side {
                locs.push(
                    Location::new(
                        self.domain_min + ix as f64 * step,
                        self.domain_min + iy as f64 * step,
                    )
                    .expect("finite grid coordinates"),
                );
            }
        }
        locs
    }

    /// Index of the horizontal band containing `lat` (0 = bottom).
    pub fn band_index(&self, lat: f64) -> usize {
        let span = (self.domain_max - self.domain_min) / 4.0;
        let b = ((lat - self.domain_min) / span).floor() as i64;
        b.clamp(0, 3) as usize
    }

    /// Deterministic mean surface.
    pub fn mean_value(&self, s: &Location) -> f64 {
        self.mean_coef.0 * s.lon + self.mean_coef.1 * s.lat
    }

    /// Per-location band parameters at the base values.
    fn base_params(&self, locs: &[Location]) -> Result<LocalParams> {
        let rho = locs.iter().map(|s| self.rho0[self.band_index(s.lat)]).collect();
        let s2 = locs
            .iter()
            .map(|s| self.sigma2_0[self.band_index(s.lat)])
            .collect();
        LocalParams::new(rho, s2)
    }

    /// Per-location band parameters after the true log-linear shift.
    fn true_params(&self, locs: &[Location]) -> Result<LocalParams> {
        let shift = |v: f64| (self.transfer_a + self.transfer_b * v.ln()).exp();
        let rho = locs
            .iter()
            .map(|s| shift(self.rho0[self.band_index(s.lat)]))
            .collect();
        let s2 = locs
            .iter()
            .map(|s| shift(self.sigma2_0[self.band_index(s.lat)]))
            .collect();
        LocalParams::new(rho, s2)
    }
}

fn gp_factor(cfg: &SimConfig, locs: &[Location], params: &LocalParams) -> Result<crate::covariance::CholeskyFactor> {
    let config = KernelConfig::new(cfg.nu, 0.0)?;
    let cov = build_cov_matrix(locs, params, &config)?;
    chol_with_jitter(&cov)
}

/// Zero-mean reference field: independent day draws from the
/// nonstationary process at the base band parameters.
pub fn simulate_reference(cfg: &SimConfig, seed: u64) -> Result<SpaceTimeField> {
    cfg.validate()?;
    let locs = cfg.grid_locations();
    let chol = gp_factor(cfg, &locs, &cfg.base_params(&locs)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(REFERENCE_STREAM);
    let n = locs.len();
    let mut values = DMatrix::zeros(n, cfg.days);
    for t in 0..cfg.days {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        values.set_column(t, &chol.mul_l(&z));
    }
    SpaceTimeField::new(locs, (1..=cfg.days as i64).collect(), values)
}

/// The simulated dataset plus its latent pieces (kept for diagnostics).
#[derive(Clone, Debug)]
pub struct SimTruth {
    /// Observable values: mean + shared w + per-day noise.
    pub field: SpaceTimeField,
    /// The single shared spatial-process draw.
    pub latent_w: DVector<f64>,
    /// The deterministic mean surface per location.
    pub mean: DVector<f64>,
}

/// The true field: deterministic mean plus one shared nonstationary
/// process draw at the shifted parameters plus independent per-(day, cell)
/// noise.
pub fn simulate_truth(cfg: &SimConfig, seed: u64) -> Result<SimTruth> {
    cfg.validate()?;
    let locs = cfg.grid_locations();
    let chol = gp_factor(cfg, &locs, &cfg.true_params(&locs)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRUTH_STREAM);
    let n = locs.len();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = chol.mul_l(&z);
    let mean = DVector::from_fn(n, |i, _| cfg.mean_value(&locs[i]));
    let noise_sd = cfg.noise_var.sqrt();
    let mut values = DMatrix::zeros(n, cfg.days);
    for t in 0..cfg.days {
        for i in 0..n {
            values[(i, t)] =
                mean[i] + w[i] + noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(SimTruth {
        field: SpaceTimeField::new(locs, (1..=cfg.days as i64).collect(), values)?,
        latent_w: w,
        mean,
    })
}

/// Test-region label by corner quadrant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratum {
    PartialMissing,
    AllMissing,
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stratum::PartialMissing => write!(f, "partial-missing"),
            Stratum::AllMissing => write!(f, "all-missing"),
        }
    }
}

/// Corner-based observation design: uniform without-replacement sampling
/// inside the upper-left and lower-right quadrants, everything else held
/// out. Returns the training set, the test set (all non-training cells on
/// all days), and per-test-record stratum labels.
pub fn sample_design(
    cfg: &SimConfig,
    truth: &SpaceTimeField,
    seed: u64,
) -> Result<(MonitorSet, MonitorSet, Vec<Stratum>)> {
    cfg.validate()?;
    let locs = truth.locations();
    let mid = 0.5 * (cfg.domain_min + cfg.domain_max);
    let quadrant = |s: &Location| -> (bool, Stratum) {
        let west = s.lon < mid;
        let north = s.lat >= mid;
        // partial quadrants: upper-left and lower-right
        if west == north {
            (west, Stratum::PartialMissing)
        } else {
            (west, Stratum::AllMissing)
        }
    };

    let mut upper_left = Vec::new();
    let mut lower_right = Vec::new();
    for (i, s) in locs.iter().enumerate() {
        let west = s.lon < mid;
        let north = s.lat >= mid;
        if west && north {
            upper_left.push(i);
        } else if !west && !north {
            lower_right.push(i);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DESIGN_STREAM);
    let mut training = vec![false; locs.len()];
    for quad in [&upper_left, &lower_right] {
        let k = (cfg.sampling_fraction * quad.len() as f64).floor() as usize;
        let mut picks = rand::seq::index::sample(&mut rng, quad.len(), k).into_vec();
        picks.sort_unstable();
        for p in picks {
            training[quad[p]] = true;
        }
    }

    let mut train_records = Vec::new();
    let mut test_records = Vec::new();
    let mut strata = Vec::new();
    for (t, day) in truth.times().iter().enumerate() {
        for (i, s) in locs.iter().enumerate() {
            let rec = MonitorRecord {
                day: *day,
                loc: *s,
                value: truth.values()[(i, t)],
            };
            if training[i] {
                train_records.push(rec);
            } else {
                let (_, stratum) = quadrant(s);
                test_records.push(rec);
                strata.push(stratum);
            }
        }
    }
    Ok((
        MonitorSet::new(train_records)?,
        MonitorSet::new(test_records)?,
        strata,
    ))
}

/// Everything produced for one replicate.
#[derive(Clone, Debug)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub reference: SpaceTimeField,
    pub truth: SpaceTimeField,
    pub train: MonitorSet,
    pub test: MonitorSet,
    pub strata: Vec<Stratum>,
    pub window_estimates: WindowEstimates,
    pub ns_scores: ScoreTable,
    pub s_scores: ScoreTable,
    pub ns_coef_mean: TransferCoefficients,
    pub ns_acceptance: crate::bhm::AcceptanceRates,
}

/// Study output: per-replicate outcomes plus replicate-averaged score
/// tables for both models and the transfer-coefficient recovery report.
#[derive(Clone, Debug)]
pub struct StudyReport {
    pub ns: ScoreTable,
    pub s: ScoreTable,
    pub replicates: Vec<ReplicateOutcome>,
    pub failed_replicates: usize,
    /// Mean over replicates of the per-replicate NS posterior coefficient
    /// means.
    pub coef_recovery: TransferCoefficients,
}

/// Fit both models on one replicate's training data and score the held-out
/// cells by stratum.
fn run_replicate(cfg: &SimConfig, index: usize) -> Result<ReplicateOutcome> {
    let rep_seed = cfg.seed.wrapping_add(index as u64);
    let reference = simulate_reference(cfg, rep_seed)?;
    let truth = simulate_truth(cfg, rep_seed)?;
    let (train, test, strata) = sample_design(cfg, &truth.field, rep_seed)?;

    let grid = partition(&reference, cfg.window_size)?;
    let estimates = fit_all_windows(&reference, &grid, cfg.nu)?;

    let mut ns_spec = ModelSpec::coordinates(cfg.nu);
    ns_spec.burnin_frac = cfg.burnin_frac;
    let s_spec = ns_spec.as_stationary();

    let points: Vec<(i64, Location)> =
        test.records().iter().map(|r| (r.day, r.loc)).collect();
    let truths: Vec<f64> = test.records().iter().map(|r| r.value).collect();
    let labels: Vec<String> = strata.iter().map(|s| s.to_string()).collect();

    let score_model = |spec: &ModelSpec, samples: &PosteriorSamples, ctx: &FitContext| -> Result<ScoreTable> {
        let pred = predict(samples, ctx, spec, &points)?;
        let cases: Vec<PredictionCase> = pred
            .rows
            .iter()
            .map(|r| PredictionCase {
                mean: r.mean,
                sd: r.sd,
                lo95: r.lo95,
                hi95: r.hi95,
            })
            .collect();
        score_table(&cases, &truths, &labels)
    };

    let ns_ctx = FitContext::new(&train, &reference, None, &estimates, &grid, &ns_spec)?;
    let ns_samples = run_chain(&ns_ctx, &ns_spec, cfg.iters, rep_seed)?;
    let ns_scores = score_model(&ns_spec, &ns_samples, &ns_ctx)?;
    let ns_coef_mean = ns_samples.coef_means();
    let ns_acceptance = ns_samples.acceptance;
    drop(ns_samples);

    let s_ctx = FitContext::new(&train, &reference, None, &estimates, &grid, &s_spec)?;
    let s_samples = run_chain(&s_ctx, &s_spec, cfg.iters, rep_seed)?;
    let s_scores = score_model(&s_spec, &s_samples, &s_ctx)?;
    drop(s_samples);

    Ok(ReplicateOutcome {
        index,
        reference,
        truth: truth.field,
        train,
        test,
        strata,
        window_estimates: estimates,
        ns_scores,
        s_scores,
        ns_coef_mean,
        ns_acceptance,
    })
}

/// Mean of each metric per stratum across replicate tables.
fn aggregate_tables(tables: &[&ScoreTable]) -> Result<ScoreTable> {
    let first = tables.first().ok_or(Error::EmptyInput("no tables".into()))?;
    let mut rows = Vec::new();
    for (ri, row) in first.rows().iter().enumerate() {
        let n = tables.len() as f64;
        let mut agg = StratumScores {
            stratum: row.stratum.clone(),
            n_cases: 0,
            log_loss: 0.0,
            crps: 0.0,
            rmse: 0.0,
            coverage95: 0.0,
        };
        for t in tables {
            let r = &t.rows()[ri];
            if r.stratum != row.stratum {
                return Err(Error::StratumMismatch(format!(
                    "replicate tables disagree on stratum order: {} vs {}",
                    r.stratum, row.stratum
                )));
            }
            agg.n_cases += r.n_cases;
            agg.log_loss += r.log_loss / n;
            agg.crps += r.crps / n;
            agg.rmse += r.rmse / n;
            agg.coverage95 += r.coverage95 / n;
        }
        rows.push(agg);
    }
    ScoreTable::from_rows(rows)
}

/// Run the full study: simulate, fit windows, run both chains, predict and
/// score per replicate (replicates in parallel, per-replicate seeds
/// derived as seed + index), then aggregate. Failed replicates are logged
/// and excluded.
pub fn run_study(cfg: &SimConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let results: Vec<Result<ReplicateOutcome>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect();

    let mut replicates = Vec::new();
    let mut failed = 0;
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(out) => replicates.push(out),
            Err(e) => {
                failed += 1;
                log::warn!("replicate {i} failed and is excluded: {e}");
            }
        }
    }
    if replicates.is_empty() {
        return Err(Error::ChainDiverged {
            iteration: 0,
            msg: format!("all {} replicates failed", cfg.replicates),
        });
    }

    let ns = aggregate_tables(&replicates.iter().map(|r| &r.ns_scores).collect::<Vec<_>>())?;
    let s = aggregate_tables(&replicates.iter().map(|r| &r.s_scores).collect::<Vec<_>>())?;
    let n = replicates.len() as f64;
    let coef_recovery = TransferCoefficients {
        a1: replicates.iter().map(|r| r.ns_coef_mean.a1).sum::<f64>() / n,
        b1: replicates.iter().map(|r| r.ns_coef_mean.b1).sum::<f64>() / n,
        a2: replicates.iter().map(|r| r.ns_coef_mean.a2).sum::<f64>() / n,
        b2: replicates.iter().map(|r| r.ns_coef_mean.b2).sum::<f64>() / n,
    };
    Ok(StudyReport {
        ns,
        s,
        replicates,
        failed_replicates: failed,
        coef_recovery,
    })
}
