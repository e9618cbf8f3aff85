//! CSV serialization of pipeline artifacts.
//!
//! Every artifact is a plain UTF-8 CSV with `#` comment lines allowed.
//! Floats are written in shortest round-trip form so that a re-read
//! recovers the exact f64 and a rewrite is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::bhm::{AcceptanceRates, McmcState, PosteriorSamples, PredictionRow, PredictiveSummary};
use crate::eof::EofBasis;
use crate::error::{Error, Result};
use crate::field_store::{fmt_f64, Location, SpaceTimeField};
use crate::scoring::ScoreTable;
use crate::transfer::TransferCoefficients;
use crate::window_mle::{WindowEstimates, WindowFit, WindowGrid, WindowRect};
use nalgebra::DVector;

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Write the EOF patterns in long format (`lon,lat,eof_index,value`, with
/// 1-based mode indices).
pub fn write_basis_csv(
    basis: &EofBasis,
    field: &SpaceTimeField,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("lon,lat,eof_index,value\n");
    for m in 0..basis.num_modes() {
        for (i, loc) in field.locations().iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt_f64(loc.lon),
                fmt_f64(loc.lat),
                m + 1,
                fmt_f64(basis.eofs()[(i, m)])
            );
        }
    }
    write_file(path, &out)
}

/// Write the singular spectrum: `eof_index,singular_value,variance_explained`
/// over the full rank (variance fractions only for retained modes).
pub fn write_basis_summary_csv(basis: &EofBasis, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("eof_index,singular_value,variance_explained\n");
    let total: f64 = basis.singular_values().iter().map(|l| l * l).sum();
    for (k, lambda) in basis.singular_values().iter().enumerate() {
        let frac = if total > 0.0 { lambda * lambda / total } else { 0.0 };
        let _ = writeln!(out, "{},{},{}", k + 1, fmt_f64(*lambda), fmt_f64(frac));
    }
    write_file(path, &out)
}

/// Write per-window estimates:
/// `window_id,lon_min,lon_max,lat_min,lat_max,rho_hat,sigma2_hat,n_cells,converged,fallback`.
pub fn write_windows_csv(
    estimates: &WindowEstimates,
    grid: &WindowGrid,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(
        "window_id,lon_min,lon_max,lat_min,lat_max,rho_hat,sigma2_hat,n_cells,converged,fallback\n",
    );
    for fit in estimates.fits() {
        let w = &grid.windows()[fit.window_id];
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            fit.window_id,
            fmt_f64(w.lon_min),
            fmt_f64(w.lon_max),
            fmt_f64(w.lat_min),
            fmt_f64(w.lat_max),
            fmt_f64(fit.rho_hat),
            fmt_f64(fit.sigma2_hat),
            fit.n_cells,
            fit.converged,
            fit.fallback.map_or(String::from(""), |s| s.to_string()),
        );
    }
    write_file(path, &out)
}

/// Read back a windows CSV into estimates plus the reconstructed grid.
pub fn read_windows_csv(path: impl AsRef<Path>) -> Result<(WindowEstimates, WindowGrid)> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut rects = Vec::new();
    let mut fits = Vec::new();
    let mut saw_header = false;
    for (ln, line) in lines.iter().enumerate() {
        let lno = ln as u64 + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line.trim() != "window_id,lon_min,lon_max,lat_min,lat_max,rho_hat,sigma2_hat,n_cells,converged,fallback" {
                return Err(parse_err(path, lno, "unexpected windows header"));
            }
            saw_header = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(parse_err(path, lno, format!("expected 10 fields, found {}", parts.len())));
        }
        let f = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| parse_err(path, lno, format!("bad number '{}'", parts[i])))
        };
        let window_id: usize = parts[0]
            .parse()
            .map_err(|_| parse_err(path, lno, "bad window id"))?;
        rects.push(WindowRect {
            lon_min: f(1)?,
            lon_max: f(2)?,
            lat_min: f(3)?,
            lat_max: f(4)?,
        });
        let fallback = if parts[9].is_empty() {
            None
        } else {
            Some(
                parts[9]
                    .parse()
                    .map_err(|_| parse_err(path, lno, "bad fallback id"))?,
            )
        };
        fits.push(WindowFit {
            window_id,
            rho_hat: f(5)?,
            sigma2_hat: f(6)?,
            n_cells: parts[7]
                .parse()
                .map_err(|_| parse_err(path, lno, "bad cell count"))?,
            loglik: f64::NAN,
            converged: parts[8] == "true",
            fallback,
        });
    }
    if fits.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    let grid = WindowGrid::from_windows(rects)?;
    Ok((WindowEstimates::new(fits)?, grid))
}

/// Write retained posterior draws with chain metadata in `#` comments.
/// Columns: iteration counter, scalars, per-day coefficients, then the
/// spatial process at each training site.
pub fn write_samples_csv(samples: &PosteriorSamples, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "# seed: {}", samples.seed);
    let _ = writeln!(out, "# niter: {}", samples.niter);
    let _ = writeln!(out, "# burnin: {}", samples.burnin);
    let acc = &samples.acceptance;
    let _ = writeln!(
        out,
        "# acceptance: a1={} b1={} a2={} b2={} nu={}",
        fmt_f64(acc.a1),
        fmt_f64(acc.b1),
        fmt_f64(acc.a2),
        fmt_f64(acc.b2),
        fmt_f64(acc.nu)
    );
    let days: Vec<String> = samples.days.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "# days: {}", days.join(";"));
    for (i, s) in samples.sites.iter().enumerate() {
        let _ = writeln!(out, "# site_{}: {},{}", i, fmt_f64(s.lon), fmt_f64(s.lat));
    }

    let k = samples.draws.first().map_or(0, |d| d.beta[0].len());
    let mut header = String::from("iter,tau2,omega2,a1,b1,a2,b2,nu");
    for day in &samples.days {
        for kk in 0..k {
            let _ = write!(header, ",beta_d{day}_{kk}");
        }
    }
    for i in 0..samples.sites.len() {
        let _ = write!(header, ",w_{i}");
    }
    let _ = writeln!(out, "{header}");

    for (iter, d) in samples.draws.iter().enumerate() {
        let mut row = format!(
            "{},{},{},{},{},{},{},{}",
            samples.burnin + iter,
            fmt_f64(d.tau2),
            fmt_f64(d.omega2),
            fmt_f64(d.coef.a1),
            fmt_f64(d.coef.b1),
            fmt_f64(d.coef.a2),
            fmt_f64(d.coef.b2),
            fmt_f64(d.nu)
        );
        for b in &d.beta {
            for v in b.iter() {
                let _ = write!(row, ",{}", fmt_f64(*v));
            }
        }
        for v in d.w.iter() {
            let _ = write!(row, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(out, "{row}");
    }
    write_file(path, &out)
}

/// Read a samples CSV back into memory.
pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<PosteriorSamples> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut seed = 0u64;
    let mut niter = 0usize;
    let mut burnin = 0usize;
    let mut acceptance = AcceptanceRates::default();
    let mut days: Vec<i64> = Vec::new();
    let mut sites: Vec<Location> = Vec::new();
    let mut header: Option<Vec<String>> = None;
    let mut draws: Vec<McmcState> = Vec::new();

    for (ln, line) in lines.iter().enumerate() {
        let lno = ln as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("seed:") {
                seed = v.trim().parse().map_err(|_| parse_err(path, lno, "bad seed"))?;
            } else if let Some(v) = rest.strip_prefix("niter:") {
                niter = v.trim().parse().map_err(|_| parse_err(path, lno, "bad niter"))?;
            } else if let Some(v) = rest.strip_prefix("burnin:") {
                burnin = v.trim().parse().map_err(|_| parse_err(path, lno, "bad burnin"))?;
            } else if let Some(v) = rest.strip_prefix("acceptance:") {
                for tok in v.split_whitespace() {
                    let (name, val) = tok
                        .split_once('=')
                        .ok_or_else(|| parse_err(path, lno, "bad acceptance entry"))?;
                    let val: f64 = val
                        .parse()
                        .map_err(|_| parse_err(path, lno, "bad acceptance value"))?;
                    match name {
                        "a1" => acceptance.a1 = val,
                        "b1" => acceptance.b1 = val,
                        "a2" => acceptance.a2 = val,
                        "b2" => acceptance.b2 = val,
                        "nu" => acceptance.nu = val,
                        _ => {}
                    }
                }
            } else if let Some(v) = rest.strip_prefix("days:") {
                days = v
                    .trim()
                    .split(';')
                    .map(|d| d.parse().map_err(|_| parse_err(path, lno, "bad day")))
                    .collect::<Result<_>>()?;
            } else if let Some(v) = rest.strip_prefix("site_") {
                let (_, coords) = v
                    .split_once(':')
                    .ok_or_else(|| parse_err(path, lno, "bad site line"))?;
                let (lon, lat) = coords
                    .trim()
                    .split_once(',')
                    .ok_or_else(|| parse_err(path, lno, "bad site coordinates"))?;
                let lon: f64 = lon.parse().map_err(|_| parse_err(path, lno, "bad lon"))?;
                let lat: f64 = lat.parse().map_err(|_| parse_err(path, lno, "bad lat"))?;
                sites.push(Location::new(lon, lat)?);
            }
            continue;
        }
        if header.is_none() {
            header = Some(line.split(',').map(|s| s.to_string()).collect());
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse().map_err(|_| parse_err(path, lno, "bad value")))
            .collect::<Result<_>>()?;
        let cols = header.as_ref().unwrap().len();
        if vals.len() != cols {
            return Err(parse_err(
                path,
                lno,
                format!("expected {cols} fields, found {}", vals.len()),
            ));
        }
        let n_sites = sites.len();
        let n_days = days.len().max(1);
        let k = (cols - 8 - n_sites) / n_days;
        let mut beta = Vec::with_capacity(n_days);
        for t in 0..n_days {
            let start = 8 + t * k;
            beta.push(DVector::from_vec(vals[start..start + k].to_vec()));
        }
        let w = DVector::from_vec(vals[8 + n_days * k..].to_vec());
        draws.push(McmcState {
            beta,
            w,
            tau2: vals[1],
            omega2: vals[2],
            coef: TransferCoefficients {
                a1: vals[3],
                b1: vals[4],
                a2: vals[5],
                b2: vals[6],
            },
            nu: vals[7],
        });
    }
    if draws.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok(PosteriorSamples {
        draws,
        acceptance,
        seed,
        niter,
        burnin,
        sites,
        days,
    })
}

/// Write predictive summaries: `day,lon,lat,mean,sd,lo95,hi95`.
pub fn write_predictions_csv(pred: &PredictiveSummary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("day,lon,lat,mean,sd,lo95,hi95\n");
    for r in &pred.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.day,
            fmt_f64(r.loc.lon),
            fmt_f64(r.loc.lat),
            fmt_f64(r.mean),
            fmt_f64(r.sd),
            fmt_f64(r.lo95),
            fmt_f64(r.hi95)
        );
    }
    write_file(path, &out)
}

/// Read predictions back.
pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<PredictiveSummary> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (ln, line) in lines.iter().enumerate() {
        let lno = ln as u64 + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line.trim() != "day,lon,lat,mean,sd,lo95,hi95" {
                return Err(parse_err(path, lno, "unexpected predictions header"));
            }
            saw_header = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(parse_err(path, lno, "expected 7 fields"));
        }
        let f = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| parse_err(path, lno, format!("bad number '{}'", parts[i])))
        };
        rows.push(PredictionRow {
            day: parts[0]
                .parse()
                .map_err(|_| parse_err(path, lno, "bad day"))?,
            loc: Location::new(f(1)?, f(2)?)?,
            mean: f(3)?,
            sd: f(4)?,
            lo95: f(5)?,
            hi95: f(6)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(PredictiveSummary { rows })
}

/// Write a labeled score table:
/// `label,stratum,n_cases,log_loss,crps,rmse,coverage95`.
pub fn write_scores_csv(tables: &[(String, &ScoreTable)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("label,stratum,n_cases,log_loss,crps,rmse,coverage95\n");
    for (label, table) in tables {
        for row in table.rows() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                label,
                row.stratum,
                row.n_cases,
                fmt_f64(row.log_loss),
                fmt_f64(row.crps),
                fmt_f64(row.rmse),
                fmt_f64(row.coverage95)
            );
        }
    }
    write_file(path, &out)
}

/// Write the study summary in the published table layout:
/// `metric,model,partial_missing,all_missing,overall`.
pub fn write_study_summary_csv(
    ns: &ScoreTable,
    s: &ScoreTable,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("metric,model,partial_missing,all_missing,overall\n");
    let pull = |t: &ScoreTable, metric: &str| -> (f64, f64, f64) {
        let get = |name: &str| -> f64 {
            let row = t.stratum(name).unwrap_or_else(|| t.overall());
            match metric {
                "log_loss" => row.log_loss,
                "crps" => row.crps,
                "rmse" => row.rmse,
                _ => row.coverage95,
            }
        };
        (
            get("partial-missing"),
            get("all-missing"),
            get("overall"),
        )
    };
    for metric in ["log_loss", "crps", "rmse", "coverage95"] {
        for (label, table) in [("NS", ns), ("S", s)] {
            let (p, a, o) = pull(table, metric);
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                metric,
                label,
                fmt_f64(p),
                fmt_f64(a),
                fmt_f64(o)
            );
        }
    }
    write_file(path, &out)
}

/// Read per-location stratum labels: `lon,lat,stratum`.
pub fn read_strata_csv(path: impl AsRef<Path>) -> Result<Vec<(Location, String)>> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    let mut saw_header = false;
    for (ln, line) in lines.iter().enumerate() {
        let lno = ln as u64 + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line.trim() != "lon,lat,stratum" {
                return Err(parse_err(path, lno, "unexpected strata header"));
            }
            saw_header = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(parse_err(path, lno, "expected 3 fields"));
        }
        let lon: f64 = parts[0]
            .parse()
            .map_err(|_| parse_err(path, lno, "bad lon"))?;
        let lat: f64 = parts[1]
            .parse()
            .map_err(|_| parse_err(path, lno, "bad lat"))?;
        out.push((Location::new(lon, lat)?, parts[2].to_string()));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

/// Write per-location stratum labels.
pub fn write_strata_csv(strata: &[(Location, String)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("lon,lat,stratum\n");
    for (loc, label) in strata {
        let _ = writeln!(out, "{},{},{}", fmt_f64(loc.lon), fmt_f64(loc.lat), label);
    }
    write_file(path, &out)
}
