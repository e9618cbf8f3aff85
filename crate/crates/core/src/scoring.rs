//! Proper scoring rules and accuracy metrics for predictive comparison.
//!
//! CRPS and log-loss use the Gaussian closed forms on predictive
//! summaries, reported as sums over cases; RMSE is a root-mean; coverage
//! is the fraction of truths inside the 95% intervals. Metrics can be
//! stratified (e.g. partial-missing vs all-missing test regions) with an
//! overall row covering every case.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn check_sd(sd: f64) -> Result<()> {
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::Domain(format!("predictive sd must be positive, got {sd}")));
    }
    Ok(())
}

/// Continuous ranked probability score of a Gaussian predictive
/// distribution against outcome `y`:
///
/// ```text
/// crps = sd * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ],  z = (y - mean)/sd.
/// ```
pub fn crps_gaussian(mean: f64, sd: f64, y: f64) -> Result<f64> {
    check_sd(sd)?;
    let z = (y - mean) / sd;
    Ok(sd * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z)
        - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Negative Gaussian log density at the outcome.
pub fn log_loss_gaussian(mean: f64, sd: f64, y: f64) -> Result<f64> {
    check_sd(sd)?;
    let z = (y - mean) / sd;
    Ok(0.5 * (2.0 * std::f64::consts::PI * sd * sd).ln() + 0.5 * z * z)
}

/// Root mean squared error over (prediction, truth) pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("rmse over no cases".into()));
    }
    let ss: f64 = pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pairs.len() as f64).sqrt())
}

/// Fraction of truths inside their `[lo95, hi95]` interval.
pub fn coverage95(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::EmptyInput("coverage over no cases".into()));
    }
    if intervals.len() != truths.len() {
        return Err(Error::StratumMismatch(format!(
            "{} intervals for {} truths",
            intervals.len(),
            truths.len()
        )));
    }
    let hits = intervals
        .iter()
        .zip(truths)
        .filter(|((lo, hi), t)| *lo <= **t && **t <= *hi)
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// One Gaussian predictive summary.
#[derive(Clone, Copy, Debug)]
pub struct PredictionCase {
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Metrics for one stratum.
#[derive(Clone, Debug)]
pub struct StratumScores {
    pub stratum: String,
    pub n_cases: usize,
    /// Sum of per-case negative log densities.
    pub log_loss: f64,
    /// Sum of per-case CRPS values.
    pub crps: f64,
    pub rmse: f64,
    pub coverage95: f64,
}

/// Stratified score table; the final row aggregates every case as
/// "overall".
#[derive(Clone, Debug)]
pub struct ScoreTable {
    rows: Vec<StratumScores>,
}

impl ScoreTable {
    /// Assemble a table from precomputed rows; the last row must be the
    /// "overall" aggregate.
    pub fn from_rows(rows: Vec<StratumScores>) -> Result<Self> {
        match rows.last() {
            Some(last) if last.stratum == "overall" => Ok(ScoreTable { rows }),
            Some(_) => Err(Error::StratumMismatch(
                "last row must be the overall aggregate".into(),
            )),
            None => Err(Error::EmptyInput("score table with no rows".into())),
        }
    }

    pub fn rows(&self) -> &[StratumScores] {
        &self.rows
    }

    pub fn stratum(&self, name: &str) -> Option<&StratumScores> {
        self.rows.iter().find(|r| r.stratum == name)
    }

    pub fn overall(&self) -> &StratumScores {
        self.rows.last().expect("table always has an overall row")
    }
}

/// Score predictions against truths, per stratum and overall. Inputs are
/// aligned case-by-case; stratum labels group cases and appear in order of
/// first occurrence.
pub fn score_table(
    predictions: &[PredictionCase],
    truths: &[f64],
    strata: &[String],
) -> Result<ScoreTable> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("score table over no cases".into()));
    }
    if predictions.len() != truths.len() || predictions.len() != strata.len() {
        return Err(Error::StratumMismatch(format!(
            "{} predictions, {} truths, {} stratum labels",
            predictions.len(),
            truths.len(),
            strata.len()
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    for s in strata {
        if !order.contains(&s.as_str()) {
            order.push(s);
        }
    }
    let mut rows = Vec::with_capacity(order.len() + 1);
    for name in &order {
        let idx: Vec<usize> = strata
            .iter()
            .enumerate()
            .filter(|(_, s)| s.as_str() == *name)
            .map(|(i, _)| i)
            .collect();
        rows.push(score_subset(name, &idx, predictions, truths)?);
    }
    let all: Vec<usize> = (0..predictions.len()).collect();
    rows.push(score_subset("overall", &all, predictions, truths)?);
    Ok(ScoreTable { rows })
}

fn score_subset(
    name: &str,
    idx: &[usize],
    predictions: &[PredictionCase],
    truths: &[f64],
) -> Result<StratumScores> {
    let mut log_loss = 0.0;
    let mut crps = 0.0;
    let mut pairs = Vec::with_capacity(idx.len());
    let mut intervals = Vec::with_capacity(idx.len());
    let mut subset_truths = Vec::with_capacity(idx.len());
    for &i in idx {
        let p = &predictions[i];
        log_loss += log_loss_gaussian(p.mean, p.sd, truths[i])?;
        crps += crps_gaussian(p.mean, p.sd, truths[i])?;
        pairs.push((p.mean, truths[i]));
        intervals.push((p.lo95, p.hi95));
        subset_truths.push(truths[i]);
    }
    Ok(StratumScores {
        stratum: name.to_string(),
        n_cases: idx.len(),
        log_loss,
        crps,
        rmse: rmse(&pairs)?,
        coverage95: coverage95(&intervals, &subset_truths)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn crps_standard_normal_at_zero() {
        // 2 phi(0) - 1/sqrt(pi), frozen from 40-digit arithmetic and checked
        // against numerical integration in the oracle tests
        let got = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert_relative_eq!(got, 0.233_694_977_255_109_07, max_relative = 1e-13);
    }

    #[test]
    fn crps_point_mass_at_truth() {
        let got = crps_gaussian(2.0, 1e-12, 2.0).unwrap();
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn crps_dominated_by_expected_absolute_error() {
        // CRPS(F, y) <= E_F |Y - y| for every case
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let mean = rng.gen_range(-5.0..5.0);
            let sd = rng.gen_range(0.05..4.0);
            let y = rng.gen_range(-8.0..8.0);
            let crps = crps_gaussian(mean, sd, y).unwrap();
            assert!(crps >= 0.0);
            let z: f64 = (y - mean) / sd;
            let expected_abs_err = sd * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z));
            assert!(crps <= expected_abs_err + 1e-12);
        }
    }

    #[test]
    fn log_loss_reference_values() {
        let got = log_loss_gaussian(1.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(got, 0.918_938_533_204_672_7, max_relative = 1e-14);
        let halved = log_loss_gaussian(0.0, 0.5, 0.0).unwrap();
        assert_relative_eq!(
            halved,
            0.5 * (2.0 * std::f64::consts::PI * 0.25).ln(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn log_loss_matches_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mean = rng.gen_range(-3.0..3.0);
            let sd = rng.gen_range(0.1..3.0);
            let y = rng.gen_range(-6.0..6.0);
            let ll = log_loss_gaussian(mean, sd, y).unwrap();
            let density =
                (-0.5 * ((y - mean) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            assert_relative_eq!(ll, -density.ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn rmse_and_coverage_basics() {
        assert_eq!(rmse(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), 0.0);
        let got = rmse(&[(3.0, 0.0), (4.0, 0.0)]).unwrap();
        assert_relative_eq!(got, 12.5f64.sqrt(), max_relative = 1e-14);
        assert_eq!(rmse(&[]).unwrap_err().code(), "EmptyInput");

        let cov = coverage95(&[(0.0, 1.0), (0.0, 1.0)], &[0.5, 2.0]).unwrap();
        assert_eq!(cov, 0.5);
    }

    #[test]
    fn exact_gaussian_predictive_covers_95_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut intervals = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for _ in 0..n {
            let mean = rng.gen_range(-2.0..2.0);
            let sd = rng.gen_range(0.2..2.0);
            let y = mean + sd * rng.sample::<f64, _>(StandardNormal);
            intervals.push((mean - 1.96 * sd, mean + 1.96 * sd));
            truths.push(y);
        }
        let cov = coverage95(&intervals, &truths).unwrap();
        assert!((cov - 0.95).abs() < 0.01, "coverage {cov}");
    }

    #[test]
    fn scores_are_proper_at_desk_scale() {
        // the true predictive beats a perturbed one on average
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let (mu, sd) = (0.7, 1.3);
        let mut crps_true = 0.0;
        let mut crps_pert = 0.0;
        let mut ll_true = 0.0;
        let mut ll_pert = 0.0;
        for _ in 0..n {
            let y = mu + sd * rng.sample::<f64, _>(StandardNormal);
            crps_true += crps_gaussian(mu, sd, y).unwrap();
            crps_pert += crps_gaussian(mu + 0.4, sd, y).unwrap();
            ll_true += log_loss_gaussian(mu, sd, y).unwrap();
            ll_pert += log_loss_gaussian(mu + 0.4, sd, y).unwrap();
        }
        assert!(crps_true < crps_pert);
        assert!(ll_true < ll_pert);
    }

    #[test]
    fn score_table_strata_and_additivity() {
        let make = |mean: f64| PredictionCase {
            mean,
            sd: 1.0,
            lo95: mean - 1.96,
            hi95: mean + 1.96,
        };
        let preds = vec![make(0.0), make(1.0), make(0.0), make(1.0)];
        let truths = vec![0.5, 1.5, 0.5, 1.5];
        let strata: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let table = score_table(&preds, &truths, &strata).unwrap();
        assert_eq!(table.rows().len(), 3);
        let a = table.stratum("a").unwrap();
        let b = table.stratum("b").unwrap();
        let overall = table.overall();
        // identical strata: overall sums are the strata sums added together
        assert_relative_eq!(overall.log_loss, a.log_loss + b.log_loss, max_relative = 1e-14);
        assert_relative_eq!(overall.crps, a.crps + b.crps, max_relative = 1e-14);
        // single stratum equals overall
        let solo = score_table(&preds[..2], &truths[..2], &strata[..2]).unwrap();
        assert_relative_eq!(
            solo.stratum("a").unwrap().log_loss,
            solo.overall().log_loss,
            max_relative = 1e-14
        );
        // metrics invariant to case order
        let rev_preds: Vec<_> = preds.iter().rev().cloned().collect();
        let rev_truths: Vec<_> = truths.iter().rev().cloned().collect();
        let rev_strata: Vec<_> = strata.iter().rev().cloned().collect();
        let rev = score_table(&rev_preds, &rev_truths, &rev_strata).unwrap();
        assert_relative_eq!(
            rev.overall().log_loss,
            overall.log_loss,
            max_relative = 1e-12
        );
        assert_relative_eq!(rev.overall().rmse, overall.rmse, max_relative = 1e-12);
    }

    #[test]
    fn score_table_rejects_misaligned_inputs() {
        let p = PredictionCase {
            mean: 0.0,
            sd: 1.0,
            lo95: -1.96,
            hi95: 1.96,
        };
        let err = score_table(&[p], &[0.0, 1.0], &["a".into()]).unwrap_err();
        assert_eq!(err.code(), "StratumMismatch");
    }
}
