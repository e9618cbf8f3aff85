//! Stationary and nonstationary Matern covariances, covariance matrix
//! assembly, and stabilized Cholesky factorization.
//!
//! The kernels use the scaled argument x = 2 sqrt(nu Q) with Q the
//! (averaged-kernel) quadratic form, so the stationary correlation at
//! distance d is
//!
//! ```text
//! M(d) = 2^{1-nu}/Gamma(nu) * x^nu K_nu(x),   x = 2 sqrt(nu) d / rho.
//! ```
//!
//! The nonstationary form attaches an isotropic Gaussian kernel matrix
//! rho_i^2 I_2 to each location; averaging kernels between two locations
//! gives the closed-form prefactor
//!
//! ```text
//! C(s_i, s_j) = sigma_i sigma_j * (rho_i rho_j) / r2  *  M_ns,
//! r2 = (rho_i^2 + rho_j^2) / 2,   Q_ij = |s_i - s_j|^2 / r2,
//! ```
//!
//! which reduces exactly to the stationary kernel when the parameter
//! fields are constant.

pub mod bessel;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::field_store::Location;
use bessel::bessel_k;

/// Spatially varying local parameters, aligned with a location list.
#[derive(Clone, Debug)]
pub struct LocalParams {
    rho: Vec<f64>,
    sigma2: Vec<f64>,
}

impl LocalParams {
    /// All entries must be positive and finite, lists equal length.
    pub fn new(rho: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if rho.len() != sigma2.len() {
            return Err(Error::GeometryMismatch(format!(
                "rho has {} entries, sigma2 has {}",
                rho.len(),
                sigma2.len()
            )));
        }
        for v in rho.iter().chain(sigma2.iter()) {
            if !v.is_finite() || *v <= 0.0 {
                return Err(Error::Domain(format!("local parameter {v} not positive finite")));
            }
        }
        Ok(LocalParams { rho, sigma2 })
    }

    /// Constant parameters replicated over `n` locations.
    pub fn constant(rho: f64, sigma2: f64, n: usize) -> Result<Self> {
        Self::new(vec![rho; n], vec![sigma2; n])
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// Smoothness and nugget for covariance matrix assembly. The nugget is
/// tau^2 when building observation covariances and 0 for the latent
/// process.
#[derive(Clone, Copy, Debug)]
pub struct KernelConfig {
    pub nu: f64,
    pub nugget: f64,
}

impl KernelConfig {
    /// Smoothness must lie in (0, 3]; nugget must be nonnegative.
    pub fn new(nu: f64, nugget: f64) -> Result<Self> {
        if !(nu > 0.0 && nu <= 3.0) {
            return Err(Error::Domain(format!("smoothness nu={nu} outside (0, 3]")));
        }
        if !(nugget >= 0.0 && nugget.is_finite()) {
            return Err(Error::Domain(format!("nugget {nugget} must be nonnegative")));
        }
        Ok(KernelConfig { nu, nugget })
    }
}

/// Matern radial profile with precomputed normalization; `at(x)` is the
/// correlation at scaled argument x and equals 1 at x = 0.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MaternRadial {
    nu: f64,
    norm: f64,
}

impl MaternRadial {
    pub(crate) fn new(nu: f64) -> Self {
        MaternRadial {
            nu,
            norm: 2f64.powf(1.0 - nu) / gamma(nu),
        }
    }

    pub(crate) fn at(&self, x: f64) -> f64 {
        if x < 1e-14 {
            // limit of x^nu K_nu(x) scaled by norm; relative error O(x^2)
            1.0
        } else if x > 700.0 {
            0.0
        } else {
            // arguments in (0, 700] cannot fail
            self.norm * x.powf(self.nu) * bessel_k(self.nu, x).expect("bessel_k in domain")
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Domain(format!("{name} must be positive finite, got {v}")));
    }
    Ok(())
}

/// Stationary Matern covariance at distance `d`.
pub fn matern_stationary(d: f64, nu: f64, rho: f64, sigma2: f64) -> Result<f64> {
    check_positive("nu", nu)?;
    check_positive("rho", rho)?;
    check_positive("sigma2", sigma2)?;
    if !(d >= 0.0) {
        return Err(Error::Domain(format!("distance {d} must be nonnegative")));
    }
    let x = 2.0 * nu.sqrt() * d / rho;
    Ok(sigma2 * MaternRadial::new(nu).at(x))
}

/// Nonstationary Matern covariance between two locations with local
/// `(rho, sigma2)` parameters. Reduces to [`matern_stationary`] when the
/// parameters coincide; at zero distance with equal ranges it returns
/// sigma_i^2 exactly.
pub fn ns_cov(
    si: &Location,
    sj: &Location,
    params_i: (f64, f64),
    params_j: (f64, f64),
    nu: f64,
) -> Result<f64> {
    check_positive("nu", nu)?;
    check_positive("rho_i", params_i.0)?;
    check_positive("sigma2_i", params_i.1)?;
    check_positive("rho_j", params_j.0)?;
    check_positive("sigma2_j", params_j.1)?;
    Ok(ns_cov_radial(
        si,
        sj,
        params_i,
        params_j,
        &MaternRadial::new(nu),
    ))
}

/// Unchecked kernel core shared by the scalar API and matrix assembly.
/// Exactly symmetric under (i, j) exchange by construction.
pub(crate) fn ns_cov_radial(
    si: &Location,
    sj: &Location,
    (rho_i, s2_i): (f64, f64),
    (rho_j, s2_j): (f64, f64),
    radial: &MaternRadial,
) -> f64 {
    let r2 = (rho_i * rho_i + rho_j * rho_j) / 2.0;
    let prefactor = (s2_i * s2_j).sqrt() * (rho_i * rho_j) / r2;
    let q = si.distance2(sj) / r2;
    prefactor * radial.at(2.0 * (radial.nu * q).sqrt())
}

/// Assemble the n-by-n nonstationary covariance matrix over `locs` with
/// the given local parameters. Diagonal entries are sigma2_i + nugget.
pub fn build_cov_matrix(
    locs: &[Location],
    params: &LocalParams,
    config: &KernelConfig,
) -> Result<DMatrix<f64>> {
    let n = locs.len();
    if n == 0 {
        return Err(Error::EmptyInput("no locations for covariance matrix".into()));
    }
    if params.len() != n {
        return Err(Error::GeometryMismatch(format!(
            "{} locations but {} parameter entries",
            n,
            params.len()
        )));
    }
    {
        let mut keys: Vec<(u64, u64, usize)> = locs
            .iter()
            .enumerate()
            .map(|(i, l)| (l.key().0, l.key().1, i))
            .collect();
        keys.sort_unstable();
        for w in keys.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::DuplicateLocations(
                    w[0].2.min(w[1].2),
                    w[0].2.max(w[1].2),
                ));
            }
        }
    }
    let radial = MaternRadial::new(config.nu);
    let rho = params.rho();
    let s2 = params.sigma2();
    let entry = |i: usize, j: usize| -> f64 {
        if i == j {
            s2[i] + config.nugget
        } else {
            ns_cov_radial(&locs[i], &locs[j], (rho[i], s2[i]), (rho[j], s2[j]), &radial)
        }
    };

    if n <= 512 {
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = entry(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    } else {
        // column-parallel fill; entries are independent, so the result is
        // deterministic and exactly symmetric
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(j, col)| {
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = entry(i, j);
            }
        });
        Ok(DMatrix::from_vec(n, n, data))
    }
}

/// Lower-triangular Cholesky factor with convenience solves.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Jitter added to the diagonal before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// log det(L L^T) = 2 sum log L_ii.
    pub fn ln_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solve (L L^T) x = b.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.forward_vec(b);
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("nonsingular factor")
    }

    /// L^{-1} b.
    pub fn forward_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l.solve_lower_triangular(b).expect("nonsingular factor")
    }

    /// L^{-1} B, column-wise.
    pub fn forward_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l.solve_lower_triangular(b).expect("nonsingular factor")
    }

    /// L^{-T} b (used to sample from a precision factor).
    pub fn backward_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l
            .tr_solve_lower_triangular(b)
            .expect("nonsingular factor")
    }

    /// L z.
    pub fn mul_l(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.l * z
    }

    /// (L L^T)^{-1}.
    pub fn inverse(&self) -> DMatrix<f64> {
        let eye = DMatrix::identity(self.dim(), self.dim());
        let y = self.forward_mat(&eye);
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("nonsingular factor")
    }

    /// Gaussian log density of z under N(0, L L^T).
    pub fn gaussian_ln_density(&self, z: &DVector<f64>) -> f64 {
        let half = self.forward_vec(z);
        -0.5 * (self.dim() as f64 * (2.0 * std::f64::consts::PI).ln()
            + self.ln_det()
            + half.norm_squared())
    }
}

/// Factor a symmetric matrix, escalating a diagonal jitter 0,
/// 1e-10 mean(diag), x10 per retry, up to 1e-4 mean(diag). Returns the
/// factor and the jitter that was applied.
pub fn chol_with_jitter(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Domain(format!(
            "cholesky needs a square nonempty matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for j in 0..n {
        for i in (j + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-8 * scale.max(1.0) {
                return Err(Error::Domain(format!(
                    "matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
    let base = mean_diag.abs().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    loop {
        let mut work = a.clone();
        if jitter > 0.0 {
            for i in 0..n {
                work[(i, i)] += jitter;
            }
        }
        if let Some(chol) = nalgebra::Cholesky::new(work) {
            return Ok(CholeskyFactor {
                l: chol.unpack(),
                jitter,
            });
        }
        jitter = if jitter == 0.0 { base * 1e-10 } else { jitter * 10.0 };
        if jitter > base * 1e-4 * (1.0 + 1e-12) {
            return Err(Error::NotPositiveDefinite {
                max_jitter: base * 1e-4,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loc(x: f64, y: f64) -> Location {
        Location::new(x, y).unwrap()
    }

    #[test]
    fn matern_zero_distance_is_sigma2_exactly() {
        assert_eq!(matern_stationary(0.0, 1.5, 2.0, 3.0).unwrap(), 3.0);
    }

    #[test]
    fn matern_half_smoothness_is_exponential() {
        // nu = 1/2 collapses to sigma2 exp(-sqrt(2) d / rho)
        let got = matern_stationary(1.0, 0.5, 1.0, 1.0).unwrap();
        assert_relative_eq!(got, 0.243_116_734_434_214_2, max_relative = 1e-12);
        for d in [0.3, 1.7, 4.0] {
            let got = matern_stationary(d, 0.5, 2.0, 1.3).unwrap();
            let expect = 1.3 * (-(2.0f64.sqrt()) * d / 2.0).exp();
            assert_relative_eq!(got, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn matern_nu_three_halves_reference() {
        // frozen from 40-digit evaluation of sigma2 2^{1-nu}/Gamma(nu) x^nu K_nu(x)
        let got = matern_stationary(1.0, 1.5, 2.0, 3.0).unwrap();
        assert_relative_eq!(got, 1.961_108_082_636_337_3, max_relative = 1e-12);
    }

    #[test]
    fn matern_continuous_at_origin() {
        let near = matern_stationary(1e-12, 1.2, 3.0, 2.5).unwrap();
        assert!((near - 2.5).abs() < 1e-8 * 2.5);
    }

    #[test]
    fn matern_rejects_bad_params() {
        assert!(matern_stationary(1.0, 1.5, 0.0, 1.0).is_err());
        assert!(matern_stationary(1.0, 1.5, 1.0, -2.0).is_err());
    }

    #[test]
    fn ns_cov_reduces_to_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let si = loc(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let sj = loc(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let rho = rng.gen_range(0.3..4.0);
            let s2 = rng.gen_range(0.2..3.0);
            let nu = rng.gen_range(0.2..3.0);
            let a = ns_cov(&si, &sj, (rho, s2), (rho, s2), nu).unwrap();
            let b = matern_stationary(si.distance(&sj), nu, rho, s2).unwrap();
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn ns_cov_colocated_unequal_ranges() {
        // Q = 0 but the kernel-average prefactor stays below sigma_i sigma_j
        let s = loc(1.0, 2.0);
        let got = ns_cov(&s, &s, (1.0, 4.0), (3.0, 9.0), 1.5).unwrap();
        let expect = 6.0 * (1.0 * 3.0) / ((1.0 + 9.0) / 2.0);
        assert_relative_eq!(got, expect, max_relative = 1e-14);
        assert!(got < 6.0);
    }

    #[test]
    fn ns_cov_two_region_reference() {
        // rho_i = e^0.5*15, rho_j = e^0.5*10, sigma2 = e^0.5*{2,3}, d=5,
        // nu=1.5; frozen from an independent 40-digit transcription of the
        // closed form.
        let e = 0.5f64.exp();
        let got = ns_cov(
            &loc(0.0, 0.0),
            &loc(5.0, 0.0),
            (e * 15.0, e * 2.0),
            (e * 10.0, e * 3.0),
            1.5,
        )
        .unwrap();
        assert_relative_eq!(got, 3.294_505_538_320_603_7, max_relative = 1e-12);
    }

    #[test]
    fn ns_cov_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let si = loc(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0));
            let sj = loc(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0));
            let pi = (rng.gen_range(0.2..5.0), rng.gen_range(0.1..4.0));
            let pj = (rng.gen_range(0.2..5.0), rng.gen_range(0.1..4.0));
            let nu = rng.gen_range(0.2..3.0);
            let a = ns_cov(&si, &sj, pi, pj, nu).unwrap();
            let b = ns_cov(&sj, &si, pj, pi, nu).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ns_cov_cauchy_schwarz_and_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let pi: (f64, f64) = (rng.gen_range(0.2..5.0), rng.gen_range(0.1..4.0));
            let pj: (f64, f64) = (rng.gen_range(0.2..5.0), rng.gen_range(0.1..4.0));
            let nu = rng.gen_range(0.2..3.0);
            let bound = (pi.1 * pj.1).sqrt();
            let mut prev = f64::INFINITY;
            for d in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
                let c = ns_cov(&loc(0.0, 0.0), &loc(d, 0.0), pi, pj, nu).unwrap();
                assert!(c.abs() <= bound * (1.0 + 1e-12));
                assert!(c <= prev + 1e-15, "no monotone decay at d={d}");
                prev = c;
            }
        }
    }

    #[test]
    fn build_single_point() {
        let params = LocalParams::constant(2.0, 1.7, 1).unwrap();
        let cfg = KernelConfig::new(1.5, 0.25).unwrap();
        let m = build_cov_matrix(&[loc(0.0, 0.0)], &params, &cfg).unwrap();
        assert_eq!(m.nrows(), 1);
        assert_eq!(m[(0, 0)], 1.7 + 0.25);
    }

    #[test]
    fn build_constant_params_matches_stationary() {
        let locs: Vec<Location> = (0..12)
            .map(|i| loc((i % 4) as f64, (i / 4) as f64 * 1.5))
            .collect();
        let params = LocalParams::constant(2.5, 1.2, locs.len()).unwrap();
        let cfg = KernelConfig::new(0.8, 0.1).unwrap();
        let m = build_cov_matrix(&locs, &params, &cfg).unwrap();
        for i in 0..locs.len() {
            for j in 0..locs.len() {
                let expect = if i == j {
                    1.2 + 0.1
                } else {
                    matern_stationary(locs[i].distance(&locs[j]), 0.8, 2.5, 1.2).unwrap()
                };
                assert!((m[(i, j)] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn build_rejects_duplicates() {
        let locs = vec![loc(0.0, 0.0), loc(1.0, 0.0), loc(0.0, 0.0)];
        let params = LocalParams::constant(1.0, 1.0, 3).unwrap();
        let cfg = KernelConfig::new(1.5, 0.0).unwrap();
        let err = build_cov_matrix(&locs, &params, &cfg).unwrap_err();
        assert_eq!(err.code(), "DuplicateLocations");
    }

    #[test]
    fn build_random_params_min_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let locs: Vec<Location> = (0..50)
                .map(|_| loc(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)))
                .collect();
            let rho: Vec<f64> = (0..50).map(|_| rng.gen_range(0.5..8.0)).collect();
            let s2: Vec<f64> = (0..50).map(|_| rng.gen_range(0.2..5.0)).collect();
            let params = LocalParams::new(rho, s2).unwrap();
            let cfg = KernelConfig::new(rng.gen_range(0.3..3.0), 0.0).unwrap();
            let m = build_cov_matrix(&locs, &params, &cfg).unwrap();
            let trace: f64 = m.diagonal().iter().sum();
            let eig = m.symmetric_eigenvalues();
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-8 * trace, "min eig {min} vs trace {trace}");
        }
    }

    #[test]
    fn chol_identity_no_jitter() {
        let eye = DMatrix::<f64>::identity(5, 5);
        let f = chol_with_jitter(&eye).unwrap();
        assert_eq!(f.jitter(), 0.0);
        assert_relative_eq!(f.ln_det(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn chol_rank_deficient_psd_succeeds_with_jitter() {
        // A A^T from a thin 6x2 matrix has rank 2 in 6 dimensions
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = DMatrix::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0));
        let m = &a * a.transpose();
        let f = chol_with_jitter(&m).unwrap();
        assert!(f.jitter() > 0.0);
        let rebuilt = f.l() * f.l().transpose();
        for i in 0..6 {
            for j in 0..6 {
                let target = m[(i, j)] + if i == j { f.jitter() } else { 0.0 };
                assert!((rebuilt[(i, j)] - target).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chol_indefinite_fails() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(2, 2)] = -1.0;
        let err = chol_with_jitter(&m).unwrap_err();
        assert_eq!(err.code(), "NotPositiveDefinite");
    }

    #[test]
    fn chol_solves_and_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(4, 4) * 2.0;
        let f = chol_with_jitter(&m).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let x = f.solve_vec(&b);
        assert_relative_eq!((&m * &x - &b).norm(), 0.0, epsilon = 1e-10);
        let inv = f.inverse();
        assert_relative_eq!((&m * &inv - DMatrix::identity(4, 4)).norm(), 0.0, epsilon = 1e-9);
        // density against the direct formula
        let quad = (b.transpose() * inv * &b)[(0, 0)];
        let direct = -0.5
            * (4.0 * (2.0 * std::f64::consts::PI).ln()
                + m.determinant().ln()
                + quad);
        assert_relative_eq!(f.gaussian_ln_density(&b), direct, max_relative = 1e-10);
    }
}
