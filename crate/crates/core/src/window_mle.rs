//! Moving-window partition of the domain and per-window stationary Matern
//! maximum likelihood from time-replicated residuals.
//!
//! The domain's bounding box is tiled with adjacent, non-overlapping
//! squares (two degrees by default; configurable because simulation
//! domains are not in degrees). Within each window the time columns are
//! treated as independent replicates of a zero-mean stationary Matern
//! field, and (rho, sigma^2) are fitted by a multi-start simplex search in
//! log-parameters with the smoothness held fixed.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::covariance::{chol_with_jitter, matern_stationary, MaternRadial};
use crate::error::{Error, Result};
use crate::field_store::{Location, SpaceTimeField};
use crate::optim::nelder_mead;

/// Minimum cells for a window to be fitted on its own data.
pub const MIN_CELLS: usize = 4;

/// Axis-aligned window rectangle.
#[derive(Clone, Copy, Debug)]
pub struct WindowRect {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl WindowRect {
    pub fn center(&self) -> Location {
        Location::new(
            0.5 * (self.lon_min + self.lon_max),
            0.5 * (self.lat_min + self.lat_max),
        )
        .expect("finite window bounds")
    }
}

/// Tiling of the field's bounding box plus the cell-to-window assignment.
#[derive(Clone, Debug)]
pub struct WindowGrid {
    windows: Vec<WindowRect>,
    nx: usize,
    ny: usize,
    size: f64,
    origin: (f64, f64),
    assignment: Vec<usize>,
}

impl WindowGrid {
    pub fn windows(&self) -> &[WindowRect] {
        &self.windows
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn size(&self) -> f64 {
        self.size
    }

    /// Window index per field grid cell (aligned with the field used in
    /// [`partition`]).
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Window containing `s`; points on a shared boundary go to the
    /// lower-index window, points outside the tiling clamp to the nearest
    /// window.
    pub fn window_index_of(&self, s: &Location) -> usize {
        let ix = axis_index((s.lon - self.origin.0) / self.size, self.nx);
        let iy = axis_index((s.lat - self.origin.1) / self.size, self.ny);
        iy * self.nx + ix
    }
}

impl WindowGrid {
    /// Rebuild a grid from serialized window rectangles (row-major tiling).
    /// The cell assignment is not recovered; lookups by location still
    /// work.
    pub fn from_windows(windows: Vec<WindowRect>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::EmptyInput("no windows".into()));
        }
        let size = windows[0].lon_max - windows[0].lon_min;
        if !(size > 0.0) {
            return Err(Error::Domain("window width must be positive".into()));
        }
        let lon0 = windows.iter().map(|w| w.lon_min).fold(f64::INFINITY, f64::min);
        let lat0 = windows.iter().map(|w| w.lat_min).fold(f64::INFINITY, f64::min);
        let lon1 = windows.iter().map(|w| w.lon_max).fold(f64::NEG_INFINITY, f64::max);
        let lat1 = windows.iter().map(|w| w.lat_max).fold(f64::NEG_INFINITY, f64::max);
        let nx = ((lon1 - lon0) / size).round() as usize;
        let ny = ((lat1 - lat0) / size).round() as usize;
        if nx * ny != windows.len() {
            return Err(Error::GeometryMismatch(format!(
                "{} windows do not tile a {}x{} grid",
                windows.len(),
                nx,
                ny
            )));
        }
        let tol = 1e-9 * size.max(1.0);
        for (i, w) in windows.iter().enumerate() {
            let ix = i % nx;
            let iy = i / nx;
            let expect_lon = lon0 + ix as f64 * size;
            let expect_lat = lat0 + iy as f64 * size;
            if (w.lon_min - expect_lon).abs() > tol || (w.lat_min - expect_lat).abs() > tol {
                return Err(Error::GeometryMismatch(format!(
                    "window {i} is not at its row-major tile position"
                )));
            }
        }
        Ok(WindowGrid {
            windows,
            nx,
            ny,
            size,
            origin: (lon0, lat0),
            assignment: Vec::new(),
        })
    }
}

/// Continuous coordinate in window units -> axis cell, closed on the upper
/// edge so boundary points land in the lower-index window.
fn axis_index(t: f64, n: usize) -> usize {
    if t <= 0.0 {
        return 0;
    }
    let idx = t.ceil() - 1.0;
    (idx as usize).min(n - 1)
}

/// Tile the field's bounding box with squares of side `size`, starting at
/// the lower-left corner, and assign every grid cell to a window.
pub fn partition(field: &SpaceTimeField, size: f64) -> Result<WindowGrid> {
    if !(size > 0.0 && size.is_finite()) {
        return Err(Error::Domain(format!("window size {size} must be positive")));
    }
    let locs = field.locations();
    let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in locs {
        lon_min = lon_min.min(l.lon);
        lon_max = lon_max.max(l.lon);
        lat_min = lat_min.min(l.lat);
        lat_max = lat_max.max(l.lat);
    }
    let count = |extent: f64| -> usize {
        if extent <= 0.0 {
            1
        } else {
            (extent / size).ceil().max(1.0) as usize
        }
    };
    let nx = count(lon_max - lon_min);
    let ny = count(lat_max - lat_min);
    let mut windows = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            windows.push(WindowRect {
                lon_min: lon_min + ix as f64 * size,
                lon_max: lon_min + (ix + 1) as f64 * size,
                lat_min: lat_min + iy as f64 * size,
                lat_max: lat_min + (iy + 1) as f64 * size,
            });
        }
    }
    let mut grid = WindowGrid {
        windows,
        nx,
        ny,
        size,
        origin: (lon_min, lat_min),
        assignment: Vec::new(),
    };
    grid.assignment = locs.iter().map(|l| grid.window_index_of(l)).collect();
    Ok(grid)
}

/// Per-window fitted parameters.
#[derive(Clone, Debug)]
pub struct WindowFit {
    pub window_id: usize,
    pub rho_hat: f64,
    pub sigma2_hat: f64,
    pub n_cells: usize,
    pub loglik: f64,
    pub converged: bool,
    /// Id of the window whose estimates were copied in, when this window
    /// was too small or failed to converge.
    pub fallback: Option<usize>,
}

/// Fitted parameter surface over a [`WindowGrid`].
#[derive(Clone, Debug)]
pub struct WindowEstimates {
    fits: Vec<WindowFit>,
}

impl WindowEstimates {
    pub fn new(fits: Vec<WindowFit>) -> Result<Self> {
        if fits.is_empty() {
            return Err(Error::EmptyInput("no window estimates".into()));
        }
        for f in &fits {
            if !(f.rho_hat > 0.0 && f.rho_hat.is_finite())
                || !(f.sigma2_hat > 0.0 && f.sigma2_hat.is_finite())
            {
                return Err(Error::Domain(format!(
                    "window {} has non-positive estimates",
                    f.window_id
                )));
            }
        }
        Ok(WindowEstimates { fits })
    }

    pub fn fits(&self) -> &[WindowFit] {
        &self.fits
    }

    pub fn len(&self) -> usize {
        self.fits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fits.is_empty()
    }
}

/// `(rho_hat, sigma2_hat)` of the window containing `s` (nearest window
/// when `s` is outside the tiling). Piecewise constant in `s`.
pub fn estimate_at(
    estimates: &WindowEstimates,
    grid: &WindowGrid,
    s: &Location,
) -> Result<(f64, f64)> {
    if estimates.len() != grid.num_windows() {
        return Err(Error::GeometryMismatch(format!(
            "{} estimates for {} windows",
            estimates.len(),
            grid.num_windows()
        )));
    }
    let w = grid.window_index_of(s);
    let fit = &estimates.fits()[w];
    Ok((fit.rho_hat, fit.sigma2_hat))
}

/// How the stabilizing nugget is chosen during window fits.
#[derive(Clone, Copy, Debug)]
pub enum NuggetMode {
    /// Fraction of the window's sample variance (default 1e-6); keeps the
    /// fit invariant under rescaling of the residuals.
    Relative(f64),
    /// Fixed additive value.
    Absolute(f64),
}

impl Default for NuggetMode {
    fn default() -> Self {
        NuggetMode::Relative(1e-6)
    }
}

/// Precomputed per-window likelihood context: pairwise distances are fixed
/// across optimizer iterations.
struct WindowProblem {
    dists: DMatrix<f64>,
    residuals: DMatrix<f64>,
    nu: f64,
    nugget: f64,
}

impl WindowProblem {
    fn new(residuals: &DMatrix<f64>, locs: &[Location], nu: f64, nugget: f64) -> Self {
        let k = locs.len();
        let dists = DMatrix::from_fn(k, k, |i, j| locs[i].distance(&locs[j]));
        WindowProblem {
            dists,
            residuals: residuals.clone(),
            nu,
            nugget,
        }
    }

    /// Sum over time columns of the zero-mean Gaussian log density with a
    /// shared Cholesky factor.
    fn loglik(&self, rho: f64, sigma2: f64) -> Result<f64> {
        let k = self.dists.nrows();
        let radial = MaternRadial::new(self.nu);
        let scale = 2.0 * self.nu.sqrt() / rho;
        let mut cov = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                sigma2 + self.nugget
            } else {
                sigma2 * radial.at(scale * self.dists[(i, j)])
            }
        });
        // numerical symmetry is exact here; factor in place
        let chol = chol_with_jitter(&cov)?;
        cov.fill(0.0);
        let half = chol.forward_mat(&self.residuals);
        let m = self.residuals.ncols() as f64;
        Ok(-0.5
            * (m * k as f64 * (2.0 * std::f64::consts::PI).ln()
                + m * chol.ln_det()
                + half.norm_squared()))
    }
}

/// Log likelihood of time-replicated residuals under a stationary Matern
/// model with the given parameters.
pub fn window_loglik(
    residuals: &DMatrix<f64>,
    locs: &[Location],
    rho: f64,
    sigma2: f64,
    nu: f64,
    nugget: f64,
) -> Result<f64> {
    if locs.len() < 2 {
        return Err(Error::TooFewCells {
            got: locs.len(),
            min: 2,
        });
    }
    if residuals.nrows() != locs.len() {
        return Err(Error::GeometryMismatch(format!(
            "{} residual rows for {} locations",
            residuals.nrows(),
            locs.len()
        )));
    }
    // parameter validation mirrors the stationary kernel
    matern_stationary(1.0, nu, rho, sigma2)?;
    WindowProblem::new(residuals, locs, nu, nugget).loglik(rho, sigma2)
}

/// Result of a single window fit.
#[derive(Clone, Copy, Debug)]
pub struct FitOutcome {
    pub rho_hat: f64,
    pub sigma2_hat: f64,
    pub loglik: f64,
    pub converged: bool,
}

const SIMPLEX_TOL: f64 = 1e-6;
const SIMPLEX_MAX_ITER: usize = 400;
// penalized box in log-parameters, relative to window geometry / variance
const BOUND_PENALTY: f64 = 1e12;

/// Maximize the window likelihood over (log rho, log sigma^2) with a
/// three-point multi-start simplex. `converged` is false when the best run
/// failed the simplex tolerance or ended pinned to the parameter box.
pub fn fit_window(
    residuals: &DMatrix<f64>,
    locs: &[Location],
    nu: f64,
    nugget_mode: NuggetMode,
) -> Result<FitOutcome> {
    let k = locs.len();
    if k < MIN_CELLS {
        return Err(Error::TooFewCells {
            got: k,
            min: MIN_CELLS,
        });
    }
    let n_vals = (residuals.nrows() * residuals.ncols()) as f64;
    let mean = residuals.iter().sum::<f64>() / n_vals;
    let sample_var = residuals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_vals;
    if !(sample_var > 0.0) {
        return Err(Error::DegenerateField(
            "window residuals have zero variance".into(),
        ));
    }
    let nugget = match nugget_mode {
        NuggetMode::Relative(frac) => frac * sample_var,
        NuggetMode::Absolute(v) => v,
    };

    let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut d_min = f64::INFINITY;
    for (i, a) in locs.iter().enumerate() {
        lon_min = lon_min.min(a.lon);
        lon_max = lon_max.max(a.lon);
        lat_min = lat_min.min(a.lat);
        lat_max = lat_max.max(a.lat);
        for b in locs.iter().skip(i + 1) {
            let d = a.distance(b);
            if d > 0.0 {
                d_min = d_min.min(d);
            }
        }
    }
    if !d_min.is_finite() {
        return Err(Error::DuplicateLocations(0, 1));
    }
    let diag = ((lon_max - lon_min).powi(2) + (lat_max - lat_min).powi(2))
        .sqrt()
        .max(d_min);

    let lo_rho = (d_min / 100.0).ln();
    let hi_rho = (diag * 100.0).ln();
    let lo_s2 = (sample_var * 1e-6).ln();
    let hi_s2 = (sample_var * 1e6).ln();

    let problem = WindowProblem::new(residuals, locs, nu, nugget);
    let objective = |x: &[f64]| -> f64 {
        if x[0] < lo_rho || x[0] > hi_rho || x[1] < lo_s2 || x[1] > hi_s2 {
            return BOUND_PENALTY;
        }
        match problem.loglik(x[0].exp(), x[1].exp()) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => BOUND_PENALTY,
        }
    };

    // multi-modal in rho; three fixed starting points
    let starts = [
        (diag / 4.0, sample_var),
        (diag / 10.0, sample_var),
        (diag / 2.0, sample_var / 2.0),
    ];
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for (rho0, s20) in starts {
        let x0 = [rho0.max(d_min / 50.0).ln(), s20.ln()];
        let r = nelder_mead(&objective, &x0, &[0.7, 0.7], SIMPLEX_TOL, SIMPLEX_MAX_ITER);
        if best.as_ref().map_or(true, |(_, f, _)| r.fx < *f) {
            best = Some((r.x, r.fx, r.converged));
        }
    }
    let (x, fx, simplex_ok) = best.expect("at least one start");
    let at_bound = x[0] <= lo_rho + 0.1
        || x[0] >= hi_rho - 0.1
        || x[1] <= lo_s2 + 0.1
        || x[1] >= hi_s2 - 0.1;
    let mut rho_hat = x[0].exp();
    // Uncorrelated residuals leave the likelihood flat in the range: if the
    // fitted point barely improves on the no-correlation model (range at
    // the box's lower edge, variance at the sample variance), the range is
    // unidentified. Pin the estimate to the lower bound and flag it.
    let flat_ll = -objective(&[lo_rho, sample_var.ln()]);
    let range_pinned = -fx - flat_ll < 5.0;
    if range_pinned {
        rho_hat = lo_rho.exp();
    }
    Ok(FitOutcome {
        rho_hat,
        sigma2_hat: x[1].exp(),
        loglik: -fx,
        converged: simplex_ok && !at_bound && !range_pinned && fx < BOUND_PENALTY,
    })
}

/// Fit every window of the partition independently (in parallel) and fill
/// unconverged or undersized windows from their nearest converged
/// neighbor.
pub fn fit_all_windows(
    field: &SpaceTimeField,
    grid: &WindowGrid,
    nu: f64,
) -> Result<WindowEstimates> {
    fit_all_windows_with(field, grid, nu, NuggetMode::default())
}

/// [`fit_all_windows`] with an explicit nugget policy.
pub fn fit_all_windows_with(
    field: &SpaceTimeField,
    grid: &WindowGrid,
    nu: f64,
    nugget_mode: NuggetMode,
) -> Result<WindowEstimates> {
    if grid.assignment().len() != field.num_locations() {
        return Err(Error::GeometryMismatch(format!(
            "partition covers {} cells, field has {}",
            grid.assignment().len(),
            field.num_locations()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); grid.num_windows()];
    for (cell, w) in grid.assignment().iter().enumerate() {
        members[*w].push(cell);
    }

    let raw: Vec<(usize, Option<FitOutcome>)> = members
        .par_iter()
        .enumerate()
        .map(|(w, cells)| {
            if cells.len() < MIN_CELLS {
                return (w, None);
            }
            let locs: Vec<Location> = cells.iter().map(|&c| field.locations()[c]).collect();
            let resid = field.values().select_rows(cells.iter());
            match fit_window(&resid, &locs, nu, nugget_mode) {
                Ok(out) => (w, Some(out)),
                Err(_) => (w, None),
            }
        })
        .collect();

    let mut fits: Vec<WindowFit> = raw
        .into_iter()
        .map(|(w, out)| match out {
            Some(o) => WindowFit {
                window_id: w,
                rho_hat: o.rho_hat,
                sigma2_hat: o.sigma2_hat,
                n_cells: members[w].len(),
                loglik: o.loglik,
                converged: o.converged,
                fallback: None,
            },
            None => WindowFit {
                window_id: w,
                rho_hat: f64::NAN,
                sigma2_hat: f64::NAN,
                n_cells: members[w].len(),
                loglik: f64::NAN,
                converged: false,
                fallback: None,
            },
        })
        .collect();

    let converged_ids: Vec<usize> = fits
        .iter()
        .filter(|f| f.converged)
        .map(|f| f.window_id)
        .collect();
    if converged_ids.is_empty() {
        return Err(Error::NoConvergedWindows);
    }
    for w in 0..fits.len() {
        if fits[w].converged {
            continue;
        }
        let center = grid.windows()[w].center();
        let mut best = converged_ids[0];
        let mut best_d = f64::INFINITY;
        for &c in &converged_ids {
            let d = grid.windows()[c].center().distance2(&center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        fits[w].rho_hat = fits[best].rho_hat;
        fits[w].sigma2_hat = fits[best].sigma2_hat;
        fits[w].fallback = Some(best);
        log::info!(
            "window {} inherits estimates from window {} (fallback)",
            w,
            best
        );
    }
    WindowEstimates::new(fits)
}
