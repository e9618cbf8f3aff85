//! Derivative-free Nelder-Mead simplex minimization.
//!
//! Small and self-contained: the window likelihood fits optimize over two
//! log-parameters, so a simple simplex with standard reflection/expansion/
//! contraction coefficients is plenty.

/// Outcome of a simplex run.
#[derive(Clone, Debug)]
pub struct SimplexResult {
    /// Best vertex found.
    pub x: Vec<f64>,
    /// Objective value at the best vertex.
    pub fx: f64,
    /// Maximum pairwise vertex distance at termination.
    pub diameter: f64,
    /// True when the diameter dropped below the tolerance.
    pub converged: bool,
    pub iterations: usize,
}

/// Minimize `f` starting from `x0`, with initial per-coordinate simplex
/// steps `step`. Terminates when the simplex diameter falls below `tol`
/// or after `max_iter` iterations.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    tol: f64,
    max_iter: usize,
) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), step.len());
    let dim = x0.len();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..dim {
        let mut v = x0.to_vec();
        v[i] += step[i];
        let fv = f(&v);
        simplex.push((v, fv));
    }

    let mut iterations = 0;
    loop {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let diameter = simplex_diameter(&simplex);
        if diameter < tol || iterations >= max_iter {
            return SimplexResult {
                x: simplex[0].0.clone(),
                fx: simplex[0].1,
                diameter,
                converged: diameter < tol,
                iterations,
            };
        }
        iterations += 1;

        // centroid of all but the worst vertex
        let mut centroid = vec![0.0; dim];
        for (v, _) in simplex.iter().take(dim) {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / dim as f64;
            }
        }
        let worst = simplex[dim].clone();

        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst.0)
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let f_reflect = f(&reflect);

        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + gamma * (c - w))
                .collect();
            let f_expand = f(&expand);
            simplex[dim] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect < simplex[dim - 1].1 {
            simplex[dim] = (reflect, f_reflect);
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + rho * (w - c))
                .collect();
            let f_contract = f(&contract);
            if f_contract < worst.1 {
                simplex[dim] = (contract, f_contract);
            } else {
                // shrink toward the best vertex
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let v: Vec<f64> = best
                        .iter()
                        .zip(&entry.0)
                        .map(|(b, x)| b + sigma * (x - b))
                        .collect();
                    let fv = f(&v);
                    *entry = (v, fv);
                }
            }
        }
    }
}

fn simplex_diameter(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let mut d = 0.0f64;
    for i in 0..simplex.len() {
        for j in (i + 1)..simplex.len() {
            let dist: f64 = simplex[i]
                .0
                .iter()
                .zip(&simplex[j].0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d = d.max(dist);
        }
    }
    d
}
