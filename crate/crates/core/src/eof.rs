//! Empirical orthogonal functions: centered SVD of the reference field.
//!
//! The field matrix has one row per grid location and one column per time
//! point. After subtracting each row's mean, the decomposition
//! `anomaly = E Lambda U^T` yields spatial patterns (EOFs) in the columns
//! of E and their temporal weights (principal components) in U. Since the
//! grids of interest have far more locations than time points, the thin
//! decomposition works on the small Gram matrix of the anomaly and
//! recovers the EOFs from it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::field_store::{Location, SpaceTimeField};

/// Leading spatial patterns of a field, with the full singular spectrum.
#[derive(Clone, Debug)]
pub struct EofBasis {
    /// n x M matrix; column m is the m-th EOF, unit norm, sign-fixed so its
    /// largest-magnitude entry is positive. Columns beyond the numerical
    /// rank are zero.
    eofs: DMatrix<f64>,
    /// All r = min(n, p) singular values, nonincreasing.
    singular_values: Vec<f64>,
    /// p x M principal components (columns of U), sign-aligned with `eofs`.
    pcs: DMatrix<f64>,
    /// Per-location means removed before the decomposition.
    row_means: Vec<f64>,
    /// Fraction of total anomaly variance carried by each retained mode.
    variance_explained: Vec<f64>,
    /// Set when the M-th singular value is numerically zero.
    rank_deficient: bool,
}

impl EofBasis {
    pub fn num_modes(&self) -> usize {
        self.eofs.ncols()
    }

    pub fn num_locations(&self) -> usize {
        self.eofs.nrows()
    }

    pub fn eofs(&self) -> &DMatrix<f64> {
        &self.eofs
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn pcs(&self) -> &DMatrix<f64> {
        &self.pcs
    }

    pub fn row_means(&self) -> &[f64] {
        &self.row_means
    }

    pub fn variance_explained(&self) -> &[f64] {
        &self.variance_explained
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }
}

/// Subtract each row's mean. Needs at least two time points, otherwise the
/// anomaly is identically zero by construction.
pub fn center_rows(field: &SpaceTimeField) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if field.num_times() < 2 {
        return Err(Error::DegenerateField(format!(
            "row centering needs p >= 2 time points, got {}",
            field.num_times()
        )));
    }
    let values = field.values();
    let p = values.ncols() as f64;
    let mut means = Vec::with_capacity(values.nrows());
    let mut anomaly = values.clone();
    for i in 0..values.nrows() {
        let mean = values.row(i).sum() / p;
        means.push(mean);
        for j in 0..values.ncols() {
            anomaly[(i, j)] -= mean;
        }
    }
    Ok((anomaly, means))
}

/// Leading `num_modes` EOFs of the row-centered field. `num_modes` may be 0
/// (useful for a pass-through detrend) and at most min(n, p).
pub fn compute_eofs(field: &SpaceTimeField, num_modes: usize) -> Result<EofBasis> {
    let n = field.num_locations();
    let p = field.num_times();
    let rank_cap = n.min(p);
    if num_modes > rank_cap {
        return Err(Error::Domain(format!(
            "requested {num_modes} EOFs but min(n, p) = {rank_cap}"
        )));
    }
    let (anomaly, row_means) = center_rows(field)?;

    // Eigen-decompose the smaller Gram matrix; its eigenvalues are the
    // squared singular values.
    let (mut spectrum, left, right) = if p <= n {
        let gram = anomaly.transpose() * &anomaly; // p x p
        let eig = nalgebra::SymmetricEigen::new(gram);
        let order = descending_order(eig.eigenvalues.as_slice());
        let lambdas: Vec<f64> = order
            .iter()
            .map(|&k| eig.eigenvalues[k].max(0.0).sqrt())
            .collect();
        let u = DMatrix::from_columns(
            &order
                .iter()
                .map(|&k| eig.eigenvectors.column(k).into_owned())
                .collect::<Vec<_>>(),
        );
        // recover E_m = anomaly u_m / lambda_m for the retained modes
        let mut e = DMatrix::zeros(n, num_modes);
        for m in 0..num_modes {
            if lambdas[m] > rank_tolerance(&lambdas) {
                let col = (&anomaly * u.column(m)) / lambdas[m];
                e.set_column(m, &col);
            }
        }
        let pcs = u.columns(0, num_modes).into_owned();
        (lambdas, e, pcs)
    } else {
        let gram = &anomaly * anomaly.transpose(); // n x n
        let eig = nalgebra::SymmetricEigen::new(gram);
        let order = descending_order(eig.eigenvalues.as_slice());
        let lambdas: Vec<f64> = order
            .iter()
            .map(|&k| eig.eigenvalues[k].max(0.0).sqrt())
            .collect();
        let e_full = DMatrix::from_columns(
            &order
                .iter()
                .map(|&k| eig.eigenvectors.column(k).into_owned())
                .collect::<Vec<_>>(),
        );
        let e = e_full.columns(0, num_modes).into_owned();
        let mut pcs = DMatrix::zeros(p, num_modes);
        for m in 0..num_modes {
            if lambdas[m] > rank_tolerance(&lambdas) {
                let col = (anomaly.transpose() * e.column(m)) / lambdas[m];
                pcs.set_column(m, &col);
            }
        }
        (lambdas, e, pcs)
    };
    spectrum.truncate(rank_cap);

    let mut eofs = left;
    let mut pcs = right;
    fix_signs(&mut eofs, &mut pcs);

    let total: f64 = spectrum.iter().map(|l| l * l).sum();
    let variance_explained: Vec<f64> = spectrum
        .iter()
        .take(num_modes)
        .map(|l| if total > 0.0 { l * l / total } else { 0.0 })
        .collect();

    let tol = rank_tolerance(&spectrum);
    let rank_deficient = num_modes > 0 && spectrum[num_modes - 1] <= tol;

    Ok(EofBasis {
        eofs,
        singular_values: spectrum,
        pcs,
        row_means,
        variance_explained,
        rank_deficient,
    })
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    order
}

fn rank_tolerance(spectrum: &[f64]) -> f64 {
    spectrum.first().copied().unwrap_or(0.0) * 1e-12
}

/// Flip each EOF column so its largest-magnitude entry is positive; the
/// matching PC column flips with it to keep the reconstruction intact.
fn fix_signs(eofs: &mut DMatrix<f64>, pcs: &mut DMatrix<f64>) {
    for m in 0..eofs.ncols() {
        let col = eofs.column(m);
        let mut idx = 0;
        let mut best = 0.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if eofs[(idx, m)] < 0.0 {
            eofs.column_mut(m).neg_mut();
            pcs.column_mut(m).neg_mut();
        }
    }
}

/// Value of EOF `m` (1-based, matching the e_m notation) at the grid cell
/// nearest to `s`.
pub fn eof_at(
    basis: &EofBasis,
    field: &SpaceTimeField,
    s: &Location,
    m: usize,
) -> Result<f64> {
    if m == 0 || m > basis.num_modes() {
        return Err(Error::IndexOutOfRange {
            index: m,
            max: basis.num_modes(),
        });
    }
    if basis.num_locations() != field.num_locations() {
        return Err(Error::GeometryMismatch(format!(
            "basis has {} locations, field has {}",
            basis.num_locations(),
            field.num_locations()
        )));
    }
    let cell = field.nearest_cell(s);
    Ok(basis.eofs()[(cell, m - 1)])
}

/// Remove the retained EOF projection from the row-centered field:
/// residual = anomaly - E (E^T anomaly). The residual rows still sum to
/// zero, so the operation is idempotent for a fixed basis.
pub fn detrend_by_eofs(field: &SpaceTimeField, basis: &EofBasis) -> Result<SpaceTimeField> {
    if basis.num_locations() != field.num_locations() {
        return Err(Error::GeometryMismatch(format!(
            "basis has {} locations, field has {}",
            basis.num_locations(),
            field.num_locations()
        )));
    }
    let (anomaly, _) = center_rows(field)?;
    let residual = if basis.num_modes() == 0 {
        anomaly
    } else {
        let coeffs = basis.eofs().transpose() * &anomaly; // M x p
        &anomaly - basis.eofs() * coeffs
    };
    field.with_values(residual)
}

/// Reconstruction of the anomaly from all modes of a full-rank basis
/// (testing hook for the spectral identity).
pub fn reconstruct_anomaly(basis: &EofBasis) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(basis.num_locations(), basis.pcs().nrows());
    for m in 0..basis.num_modes() {
        let lambda = basis.singular_values()[m];
        let e = basis.eofs().column(m);
        let u = basis.pcs().column(m);
        acc += e * u.transpose() * lambda;
    }
    acc
}
