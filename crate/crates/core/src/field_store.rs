//! Data model and file ingestion for gridded space-time fields and sparse
//! monitor observations.
//!
//! All data files are long-format CSV with header `day,lon,lat,value`,
//! UTF-8, `.` decimal separator; lines starting with `#` are skipped.
//! Gridded fields must be complete (every location present on every day);
//! monitor sets may be arbitrarily sparse but must not contain duplicate
//! `(day, lon, lat)` records.
//!
//! Distances are Euclidean on raw `(lon, lat)` coordinates throughout; the
//! same types serve geographic grids (degrees) and planar simulation
//! domains.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A point in the spatial domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub lon: f64,
    pub lat: f64,
}

impl Location {
    /// Both coordinates must be finite.
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite location ({lon}, {lat})"
            )));
        }
        Ok(Location { lon, lat })
    }

    /// Euclidean distance in coordinate units.
    pub fn distance(&self, other: &Location) -> f64 {
        self.distance2(other).sqrt()
    }

    /// Squared Euclidean distance.
    pub fn distance2(&self, other: &Location) -> f64 {
        let dx = self.lon - other.lon;
        let dy = self.lat - other.lat;
        dx * dx + dy * dy
    }

    /// Bit-level key for exact-equality maps (hashable stand-in for f64 pairs).
    pub(crate) fn key(&self) -> (u64, u64) {
        (self.lon.to_bits(), self.lat.to_bits())
    }

    /// Ordering used everywhere for deterministic indexing: by (lat, lon).
    pub(crate) fn lex_cmp(&self, other: &Location) -> std::cmp::Ordering {
        self.lat
            .partial_cmp(&other.lat)
            .unwrap()
            .then(self.lon.partial_cmp(&other.lon).unwrap())
    }
}

/// Gridded values over `n` locations and `p` time points. Rows of `values`
/// align with `locations`, columns with `times`. Immutable after
/// construction.
#[derive(Clone, Debug)]
pub struct SpaceTimeField {
    locations: Vec<Location>,
    times: Vec<i64>,
    values: DMatrix<f64>,
    grid_spacing: Option<f64>,
    /// Sorted unique latitudes/longitudes when the locations form a complete
    /// rectangular grid; enables O(log n) nearest-cell lookup.
    lattice: Option<(Vec<f64>, Vec<f64>)>,
}

impl SpaceTimeField {
    /// Build a field from pre-sorted unique locations and an aligned value
    /// matrix. `locations` must already be sorted by `(lat, lon)`.
    pub fn new(locations: Vec<Location>, times: Vec<i64>, values: DMatrix<f64>) -> Result<Self> {
        if locations.is_empty() || times.is_empty() {
            return Err(Error::EmptyInput("field with no locations or times".into()));
        }
        if values.nrows() != locations.len() || values.ncols() != times.len() {
            return Err(Error::GeometryMismatch(format!(
                "value matrix is {}x{}, expected {}x{}",
                values.nrows(),
                values.ncols(),
                locations.len(),
                times.len()
            )));
        }
        for w in locations.windows(2) {
            match w[0].lex_cmp(&w[1]) {
                std::cmp::Ordering::Less => {}
                std::cmp::Ordering::Equal => return Err(Error::DuplicateLocations(0, 1)),
                std::cmp::Ordering::Greater => {
                    return Err(Error::GeometryMismatch(
                        "locations not sorted by (lat, lon)".into(),
                    ))
                }
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite field value {v}")));
        }
        let lattice = detect_lattice(&locations);
        let grid_spacing = lattice.as_ref().and_then(|(lats, lons)| {
            match (uniform_step(lats), uniform_step(lons)) {
                (Some(a), Some(b)) if (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0) => {
                    Some(a)
                }
                _ => None,
            }
        });
        Ok(SpaceTimeField {
            locations,
            times,
            values,
            grid_spacing,
            lattice,
        })
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Grid spacing when the locations form a regular square lattice.
    pub fn grid_spacing(&self) -> Option<f64> {
        self.grid_spacing
    }

    pub fn num_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn num_times(&self) -> usize {
        self.times.len()
    }

    /// Column index of a day value, if present.
    pub fn time_index(&self, day: i64) -> Option<usize> {
        self.times.binary_search(&day).ok()
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(self.locations.clone(), self.times.clone(), values)
    }

    /// Index of the grid location nearest to `s` (Euclidean); ties break to
    /// the lowest index. Uses lattice arithmetic on complete rectangular
    /// grids and falls back to a full scan otherwise.
    pub fn nearest_cell(&self, s: &Location) -> usize {
        if let Some((lats, lons)) = &self.lattice {
            let li = nearest_sorted(lats, s.lat);
            let lj = nearest_sorted(lons, s.lon);
            return li * lons.len() + lj;
        }
        nearest_cell_scan(&self.locations, s)
    }
}

/// Exhaustive nearest-location scan; lowest index wins ties.
pub fn nearest_cell_scan(locations: &[Location], s: &Location) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, loc) in locations.iter().enumerate() {
        let d = loc.distance2(s);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Index of the nearest value in a sorted slice; ties go to the smaller
/// value (hence the lower grid index).
fn nearest_sorted(sorted: &[f64], x: f64) -> usize {
    match sorted.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i == sorted.len() => sorted.len() - 1,
        Err(i) => {
            let lo = sorted[i - 1];
            let hi = sorted[i];
            // Strict inequality sends exact midpoints to the lower value.
            if (x - lo) <= (hi - x) {
                i - 1
            } else {
                i
            }
        }
    }
}

/// Sorted unique (lats, lons) when locations are exactly the full cross
/// product in (lat, lon) order.
fn detect_lattice(locations: &[Location]) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut lats: Vec<f64> = Vec::new();
    let mut lons: Vec<f64> = Vec::new();
    for l in locations {
        if lats.last() != Some(&l.lat) {
            lats.push(l.lat);
        }
    }
    for l in locations.iter() {
        if l.lat == lats[0] {
            lons.push(l.lon);
        } else {
            break;
        }
    }
    if lats.len() * lons.len() != locations.len() {
        return None;
    }
    for (i, l) in locations.iter().enumerate() {
        if l.lat != lats[i / lons.len()] || l.lon != lons[i % lons.len()] {
            return None;
        }
    }
    Some((lats, lons))
}

/// Common step of a sorted sequence, if uniform to 1e-9 relative.
fn uniform_step(sorted: &[f64]) -> Option<f64> {
    if sorted.len() < 2 {
        return None;
    }
    let step = sorted[1] - sorted[0];
    for w in sorted.windows(2) {
        let d = w[1] - w[0];
        if (d - step).abs() > 1e-9 * step.abs().max(1.0) {
            return None;
        }
    }
    Some(step)
}

/// One monitor observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonitorRecord {
    pub day: i64,
    pub loc: Location,
    pub value: f64,
}

/// Sparse point observations: unique `(day, location)` pairs, at least two
/// distinct locations, finite values. Record order is preserved.
#[derive(Clone, Debug)]
pub struct MonitorSet {
    records: Vec<MonitorRecord>,
}

impl MonitorSet {
    pub fn new(records: Vec<MonitorRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("monitor set with no records".into()));
        }
        let mut seen = HashMap::new();
        for r in &records {
            if !r.value.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite monitor value on day {} at ({}, {})",
                    r.day, r.loc.lon, r.loc.lat
                )));
            }
            if seen.insert((r.day, r.loc.key()), ()).is_some() {
                return Err(Error::DuplicateRecord {
                    day: r.day,
                    lon: r.loc.lon,
                    lat: r.loc.lat,
                });
            }
        }
        let mut site_keys: Vec<_> = records.iter().map(|r| r.loc.key()).collect();
        site_keys.sort_unstable();
        site_keys.dedup();
        if site_keys.len() < 2 {
            return Err(Error::TooFewSites(site_keys.len()));
        }
        Ok(MonitorSet { records })
    }

    pub fn records(&self) -> &[MonitorRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct monitor locations, sorted by (lat, lon).
    pub fn sites(&self) -> Vec<Location> {
        let mut sites: Vec<Location> = Vec::new();
        let mut seen = HashMap::new();
        for r in &self.records {
            if seen.insert(r.loc.key(), ()).is_none() {
                sites.push(r.loc);
            }
        }
        sites.sort_by(|a, b| a.lex_cmp(b));
        sites
    }

    /// Distinct days, ascending.
    pub fn days(&self) -> Vec<i64> {
        let mut days: Vec<i64> = self.records.iter().map(|r| r.day).collect();
        days.sort_unstable();
        days.dedup();
        days
    }
}

struct CsvRow {
    day: i64,
    loc: Location,
    value: f64,
    line: u64,
}

fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let pstr = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                &pstr,
                std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            ),
            _ => Error::Parse {
                path: pstr.clone(),
                line: 0,
                msg: e.to_string(),
            },
        })?;

    {
        let headers = reader.headers().map_err(|e| Error::Parse {
            path: pstr.clone(),
            line: 1,
            msg: e.to_string(),
        })?;
        let expected = ["day", "lon", "lat", "value"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::Parse {
                path: pstr,
                line: 1,
                msg: format!("expected header day,lon,lat,value, found {}", got.join(",")),
            });
        }
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: pstr.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::Parse {
                path: pstr.clone(),
                line,
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let field = |i: usize| record.get(i).unwrap();
        let day: i64 = field(0).parse().map_err(|_| Error::Parse {
            path: pstr.clone(),
            line,
            msg: format!("bad day '{}'", field(0)),
        })?;
        let parse_f = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = field(i).parse().map_err(|_| Error::Parse {
                path: pstr.clone(),
                line,
                msg: format!("bad {name} '{}'", field(i)),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: pstr.clone(),
                    line,
                    msg: format!("non-finite {name} '{}'", field(i)),
                });
            }
            Ok(v)
        };
        let lon = parse_f(1, "lon")?;
        let lat = parse_f(2, "lat")?;
        let value = parse_f(3, "value")?;
        rows.push(CsvRow {
            day,
            loc: Location::new(lon, lat)?,
            value,
            line,
        });
    }
    Ok(rows)
}

/// Load a complete gridded field. Every `(lon, lat)` must appear exactly
/// once for every day. Locations come out sorted by `(lat, lon)`, days
/// ascending.
pub fn load_gridded_csv(path: impl AsRef<Path>) -> Result<SpaceTimeField> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let rows = read_rows(path)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput(pstr));
    }

    let mut locations: Vec<Location> = Vec::new();
    let mut loc_index: HashMap<(u64, u64), usize> = HashMap::new();
    for r in &rows {
        if !loc_index.contains_key(&r.loc.key()) {
            loc_index.insert(r.loc.key(), 0);
            locations.push(r.loc);
        }
    }
    locations.sort_by(|a, b| a.lex_cmp(b));
    for (i, l) in locations.iter().enumerate() {
        loc_index.insert(l.key(), i);
    }

    let mut times: Vec<i64> = rows.iter().map(|r| r.day).collect();
    times.sort_unstable();
    times.dedup();
    let day_index: HashMap<i64, usize> = times.iter().enumerate().map(|(i, d)| (*d, i)).collect();

    let n = locations.len();
    let p = times.len();
    let mut values = DMatrix::from_element(n, p, f64::NAN);
    for r in &rows {
        let i = loc_index[&r.loc.key()];
        let j = day_index[&r.day];
        if !values[(i, j)].is_nan() {
            return Err(Error::Parse {
                path: pstr.clone(),
                line: r.line,
                msg: format!(
                    "duplicate cell for day {} at ({}, {})",
                    r.day, r.loc.lon, r.loc.lat
                ),
            });
        }
        values[(i, j)] = r.value;
    }
    for i in 0..n {
        for j in 0..p {
            if values[(i, j)].is_nan() {
                return Err(Error::MissingCell {
                    lon: locations[i].lon,
                    lat: locations[i].lat,
                    day: times[j],
                });
            }
        }
    }
    SpaceTimeField::new(locations, times, values)
}

/// Load sparse monitor records, preserving file order.
pub fn load_monitor_csv(path: impl AsRef<Path>) -> Result<MonitorSet> {
    let path = path.as_ref();
    let rows = read_rows(path)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    let records = rows
        .iter()
        .map(|r| MonitorRecord {
            day: r.day,
            loc: r.loc,
            value: r.value,
        })
        .collect();
    MonitorSet::new(records)
}

/// Shortest round-trip decimal formatting; parsing the output recovers the
/// exact f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Write a gridded field in long format, day-major then location order.
pub fn write_gridded_csv(field: &SpaceTimeField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("day,lon,lat,value\n");
    for (j, day) in field.times().iter().enumerate() {
        for (i, loc) in field.locations().iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                day,
                fmt_f64(loc.lon),
                fmt_f64(loc.lat),
                fmt_f64(field.values()[(i, j)])
            );
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write monitor records in their stored order.
pub fn write_monitor_csv(set: &MonitorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("day,lon,lat,value\n");
    for r in set.records() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.day,
            fmt_f64(r.loc.lon),
            fmt_f64(r.loc.lat),
            fmt_f64(r.value)
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
