//! Point datasets: CSV ingestion, class filling, analytic synthetic fields and splitting.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{csv_error, GeoPoint, DEFAULT_Z_MAX_KM};
use crate::modality::{ModalitySpec, RawValue, Registry, TaskKind, Value};

pub const CSV_HEADER: [&str; 4] = ["lat", "lon", "depth_km", "value"];

/// Observations of a single modality. Values are normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modality: String,
    pub points: Vec<GeoPoint>,
    pub values: Vec<Value>,
}

impl Dataset {
    pub fn new(modality: impl Into<String>) -> Self {
        Self {
            modality: modality.into(),
            points: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: GeoPoint, v: Value) {
        self.points.push(p);
        self.values.push(v);
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            modality: self.modality.clone(),
            points: rows.iter().map(|&i| self.points[i]).collect(),
            values: rows.iter().map(|&i| self.values[i]).collect(),
        }
    }

    /// Writes `lat,lon,depth_km,value` with raw (denormalized) values.
    pub fn write_csv(&self, path: &Path, spec: &ModalitySpec) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", CSV_HEADER.join(",")).map_err(io)?;
        for (p, v) in self.points.iter().zip(&self.values) {
            let raw = match spec.denormalize(v)? {
                RawValue::Number(x) => format!("{x}"),
                RawValue::Label(l) => l,
            };
            writeln!(w, "{},{},{},{}", p.lat, p.lon, p.depth_km, raw).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a `lat,lon,depth_km,value` file for one modality.
///
/// Empty class cells are filled with the modality's fill label when it has one.
pub fn ingest_csv(path: &Path, spec: &ModalitySpec, z_max: f64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut raw_rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        if rec.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", rec.len())));
        }
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("field {}: {e}", CSV_HEADER[i])))
        };
        let p = GeoPoint::new(num(0)?, num(1)?, num(2)?);
        p.validate(z_max)
            .map_err(|e| Error::Domain(format!("{}:{line}: {e}", path.display())))?;
        let cell = &rec[3];
        let raw = match spec.task_kind {
            TaskKind::Classification => (!cell.is_empty()).then(|| RawValue::Label(cell.to_string())),
            _ => Some(RawValue::Number(num(3)?)),
        };
        raw_rows.push((p, raw, line));
    }
    let mut ds = Dataset::new(&spec.name);
    let needs_fill = raw_rows.iter().any(|(_, r, _)| r.is_none());
    let fill = if needs_fill { Some(fill_value(spec)?) } else { None };
    for (p, raw, line) in raw_rows {
        let v = match raw {
            Some(r) => spec.normalize(&r).map_err(|e| match e {
                Error::Domain(m) => Error::Domain(format!("{}:{line}: {m}", path.display())),
                Error::Schema(m) => Error::Schema(format!("{}:{line}: {m}", path.display())),
                other => other,
            })?,
            None => fill.expect("fill resolved above"),
        };
        ds.push(p, v);
    }
    Ok(ds)
}

fn fill_value(spec: &ModalitySpec) -> Result<Value> {
    let label = spec
        .fill_label
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} declares no fill label", spec.name)))?;
    Ok(Value::Class(spec.class_index(label)?))
}

/// Labels sampled coordinates; points without a source label get the fill label.
pub fn fill_missing_class(points: &[(GeoPoint, Option<String>)], spec: &ModalitySpec) -> Result<Dataset> {
    let fill = fill_value(spec)?;
    let mut ds = Dataset::new(&spec.name);
    for (p, label) in points {
        let v = match label {
            Some(l) => Value::Class(spec.class_index(l)?),
            None => fill,
        };
        ds.push(*p, v);
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Angular,
    Scalar,
    ScalarDepth,
    Categorical,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [Self::Angular, Self::Scalar, Self::ScalarDepth, Self::Categorical];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub z_max: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { z_max: DEFAULT_Z_MAX_KM }
    }
}

/// Angle in degrees, `[0, 180)`.
pub fn angular_field(lat: f64, lon: f64) -> f64 {
    (90.0 + 60.0 * (PI * lat / 90.0).sin() * (PI * lon / 90.0).cos()).rem_euclid(180.0)
}

pub fn scalar_field(lat: f64, lon: f64) -> f64 {
    0.5 + 0.4 * (PI * lat / 60.0).sin() * (PI * lon / 120.0).sin()
}

pub fn scalar_depth_field(lat: f64, lon: f64, depth_km: f64, z_max: f64) -> f64 {
    scalar_field(lat, lon) * (1.0 - depth_km / z_max / 2.0)
}

/// Quadrant index: 0 = (+,+), 1 = (+,−), 2 = (−,+), 3 = (−,−); zero counts as positive.
pub fn quadrant(lat: f64, lon: f64) -> usize {
    2 * usize::from(lat < 0.0) + usize::from(lon < 0.0)
}

/// Evaluates an analytic field at a point, returning the normalized value
/// for the matching synthetic modality.
pub fn synth_value(kind: SynthKind, p: &GeoPoint, params: &SynthParams) -> Value {
    match kind {
        SynthKind::Angular => Value::Scalar(angular_field(p.lat, p.lon) / 180.0),
        SynthKind::Scalar => Value::Scalar(scalar_field(p.lat, p.lon)),
        SynthKind::ScalarDepth => Value::Scalar(scalar_depth_field(p.lat, p.lon, p.depth_km, params.z_max)),
        SynthKind::Categorical => Value::Class(quadrant(p.lat, p.lon)),
    }
}

/// Samples an analytic field at seeded uniform coordinates.
pub fn synth_field(kind: SynthKind, params: &SynthParams, n_points: usize, seed: u64) -> Result<Dataset> {
    if n_points < 1 {
        return Err(Error::Domain("synthetic field needs at least one point".into()));
    }
    let registry = Registry::synthetic();
    let name = &registry.get(kind as usize)?.name;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut ds = Dataset::new(name);
    for _ in 0..n_points {
        let lat = rng.random_range(-90.0..=90.0);
        let lon = rng.random_range(-180.0..=180.0);
        let depth = if kind == SynthKind::ScalarDepth {
            rng.random_range(0.0..=params.z_max)
        } else {
            0.0
        };
        let p = GeoPoint::new(lat, lon, depth);
        ds.push(p, synth_value(kind, &p, params));
    }
    Ok(ds)
}

/// Seeded disjoint partition into (train, test); rows keep their original order.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() < 20 {
        return Err(Error::Domain(format!(
            "{}: {} rows is too few to split (need at least 20)",
            ds.modality,
            ds.len()
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_test = (ds.len() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    let (mut test, mut train) = (test.to_vec(), train.to_vec());
    test.sort_unstable();
    train.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}
