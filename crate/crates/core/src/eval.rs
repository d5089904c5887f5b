//! Evaluation protocols: local neighbour inference, global few-shot inference,
//! held-out metrics, difference maps and gridded reconstructions.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geo::{csv_error, GeoPoint};
use crate::loss::OutputLayout;
use crate::modality::{ModalityId, ModalitySpec, RawValue, TaskKind, Value};
use crate::model::Model;
use crate::sampler::ObservationBatch;

/// Mean of `min(|Δ|, R − |Δ|)` over angle pairs in degrees.
pub fn wrapped_angular_mae(pred_deg: &[f64], true_deg: &[f64], r: f64) -> Result<f64> {
    if pred_deg.len() != true_deg.len() || pred_deg.is_empty() {
        return Err(Error::Contract("angle lists need equal, non-zero lengths".into()));
    }
    let s: f64 = pred_deg.iter().zip(true_deg).map(|(p, t)| wrapped_distance(*p, *t, r)).sum();
    Ok(s / pred_deg.len() as f64)
}

pub fn wrapped_distance(a: f64, b: f64, r: f64) -> f64 {
    let d = (a - b).rem_euclid(r);
    d.min(r - d)
}

/// Reads one query's prediction from a head row: a normalized scalar or the argmax class.
pub fn decode_row(row: &[f64], spec: &ModalitySpec, offset: usize) -> Value {
    match spec.task_kind {
        TaskKind::Classification => {
            let slice = &row[offset..offset + spec.classes.len()];
            let best = slice
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > slice[best] { i } else { best });
            Value::Class(best)
        }
        _ => Value::Scalar(row[offset]),
    }
}

/// Predicted values for `points` of one modality given encoder observations.
pub fn predict_values(model: &Model, observations: &[ObservationBatch], points: &[GeoPoint], task: ModalityId) -> Result<Vec<Value>> {
    let spec = model.registry().get(task)?;
    let (offset, _) = OutputLayout::new(model.registry()).slice(task)?;
    let out = model.predict(observations, points, &vec![task; points.len()])?;
    Ok((0..points.len()).map(|r| decode_row(out.row(r), spec, offset)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Wrapped angular MAE in degrees.
    AngularMae,
    /// MAE in raw (denormalized) units.
    Mae,
    Accuracy,
}

/// Metric appropriate to the modality: wrapped MAE, plain MAE or accuracy.
pub fn score(spec: &ModalitySpec, pred: &[Value], truth: &[Value]) -> Result<(MetricKind, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Contract(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let scalars = |vals: &[Value]| -> Result<Vec<f64>> {
        vals.iter()
            .map(|v| match v {
                Value::Scalar(x) => Ok(x * spec.scale()),
                Value::Class(_) => Err(Error::Schema(format!("{} expects scalar values", spec.name))),
            })
            .collect()
    };
    match spec.task_kind {
        TaskKind::AngularRegression => {
            let r = spec.angular_period.unwrap_or(180.0);
            Ok((MetricKind::AngularMae, wrapped_angular_mae(&scalars(pred)?, &scalars(truth)?, r)?))
        }
        TaskKind::ScalarRegression => Ok((MetricKind::Mae, crate::loss::mae(&scalars(pred)?, &scalars(truth)?)?)),
        TaskKind::Classification => {
            let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
            Ok((MetricKind::Accuracy, hits as f64 / pred.len() as f64))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalProtocolConfig {
    pub reference: GeoPoint,
    pub n_queries: usize,
    /// Sorted neighbour counts, e.g. `[0, 4, 8, 16, 24]`.
    pub neighbor_counts: Vec<usize>,
    pub modality: ModalityId,
    /// Modalities supplying observations; `None` means every modality with a test set.
    pub observation_modalities: Option<Vec<ModalityId>>,
}

impl LocalProtocolConfig {
    pub fn new(reference: GeoPoint, modality: ModalityId, neighbor_counts: Vec<usize>) -> Self {
        Self {
            reference,
            n_queries: 5,
            neighbor_counts,
            modality,
            observation_modalities: Some(vec![modality]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalRow {
    pub neighbors: usize,
    pub metric: MetricKind,
    pub value: f64,
}

/// Row indices sorted by Euclidean distance in degrees; ties keep row order.
pub fn rank_by_distance(ds: &Dataset, reference: &GeoPoint) -> Vec<usize> {
    let d: Vec<f64> = ds
        .points
        .iter()
        .map(|p| (p.lat - reference.lat).hypot(p.lon - reference.lon))
        .collect();
    let mut rows: Vec<usize> = (0..ds.len()).collect();
    rows.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    rows
}

/// Nearest `n_queries` test points are queries; the following `k` points of each
/// observed modality are the encoder input. `test` is indexed by modality id.
pub fn local_inference(model: &Model, cfg: &LocalProtocolConfig, test: &[Dataset]) -> Result<Vec<LocalRow>> {
    if cfg.neighbor_counts.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Protocol("neighbor counts must be sorted".into()));
    }
    let target = test
        .get(cfg.modality)
        .ok_or_else(|| Error::Protocol(format!("no test set for modality {}", cfg.modality)))?;
    let max_k = cfg.neighbor_counts.last().copied().unwrap_or(0);
    if cfg.n_queries == 0 || target.len() < cfg.n_queries + max_k {
        return Err(Error::Protocol(format!(
            "{} test points for {} queries and {max_k} neighbours",
            target.len(),
            cfg.n_queries
        )));
    }
    let observed: Vec<ModalityId> = match &cfg.observation_modalities {
        Some(m) => m.clone(),
        None => (0..test.len()).collect(),
    };
    let mut ranked = Vec::with_capacity(observed.len());
    for &m in &observed {
        let ds = test
            .get(m)
            .ok_or_else(|| Error::Protocol(format!("no test set for modality {m}")))?;
        let mut order = rank_by_distance(ds, &cfg.reference);
        if m == cfg.modality {
            order.drain(..cfg.n_queries);
        }
        if order.len() < max_k {
            return Err(Error::Protocol(format!("{} has only {} candidate neighbours", ds.modality, order.len())));
        }
        ranked.push((m, ds, order));
    }
    let q_rows: Vec<usize> = rank_by_distance(target, &cfg.reference)[..cfg.n_queries].to_vec();
    let q_points: Vec<GeoPoint> = q_rows.iter().map(|&r| target.points[r]).collect();
    let truth: Vec<Value> = q_rows.iter().map(|&r| target.values[r]).collect();
    let spec = model.registry().get(cfg.modality)?;

    let mut out = Vec::with_capacity(cfg.neighbor_counts.len());
    for &k in &cfg.neighbor_counts {
        let obs: Vec<ObservationBatch> = if k == 0 {
            Vec::new()
        } else {
            ranked
                .iter()
                .map(|(m, ds, order)| ObservationBatch::from_rows(*m, ds, &order[..k]))
                .collect()
        };
        let pred = predict_values(model, &obs, &q_points, cfg.modality)?;
        let (metric, value) = score(spec, &pred, &truth)?;
        out.push(LocalRow {
            neighbors: k,
            metric,
            value,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputCondition {
    None,
    SingleModality,
    AllModalities,
}

impl std::str::FromStr for InputCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "single" | "single-modality" => Ok(Self::SingleModality),
            "all" | "all-modalities" => Ok(Self::AllModalities),
            _ => Err(Error::Config(format!("unknown input condition {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalProtocolConfig {
    pub obs_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub conditions: Vec<InputCondition>,
    pub targets: Vec<ModalityId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRow {
    pub target: ModalityId,
    pub condition: InputCondition,
    /// Observations per included modality; 0 for the no-input condition.
    pub n_obs: usize,
    pub metric: MetricKind,
    pub mean: f64,
    /// Sample standard deviation over seeds divided by √seeds.
    pub std_error: f64,
    pub per_seed: Vec<f64>,
}

pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Draws `n` distinct training rows per included modality, predicts the whole test
/// split of each target, and aggregates over seeds.
pub fn global_inference(model: &Model, cfg: &GlobalProtocolConfig, train: &[Dataset], test: &[Dataset]) -> Result<Vec<GlobalRow>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Protocol("at least one seed is required".into()));
    }
    let mut rows = Vec::new();
    for &target in &cfg.targets {
        let spec = model.registry().get(target)?;
        let test_set = test
            .get(target)
            .filter(|d| !d.is_empty())
            .ok_or_else(|| Error::Protocol(format!("empty test split for {}", spec.name)))?;
        for &cond in &cfg.conditions {
            let included: Vec<ModalityId> = match cond {
                InputCondition::None => Vec::new(),
                InputCondition::SingleModality => vec![target],
                InputCondition::AllModalities => (0..model.registry().len()).collect(),
            };
            let counts: Vec<usize> = if cond == InputCondition::None { vec![0] } else { cfg.obs_counts.clone() };
            for n in counts {
                let mut per_seed = Vec::with_capacity(cfg.seeds.len());
                let mut metric = MetricKind::Mae;
                for &seed in &cfg.seeds {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut obs = Vec::with_capacity(included.len());
                    for &m in &included {
                        let ds = train
                            .get(m)
                            .filter(|d| !d.is_empty())
                            .ok_or_else(|| Error::Protocol(format!("empty training split for modality {m}")))?;
                        if n > ds.len() {
                            return Err(Error::Protocol(format!("{n} observations requested from {} training points", ds.len())));
                        }
                        let pick = index::sample(&mut rng, ds.len(), n).into_vec();
                        obs.push(ObservationBatch::from_rows(m, ds, &pick));
                    }
                    let pred = predict_values(model, &obs, &test_set.points, target)?;
                    let (k, v) = score(spec, &pred, &test_set.values)?;
                    metric = k;
                    per_seed.push(v);
                }
                let (mean, std_error) = mean_and_std_error(&per_seed);
                rows.push(GlobalRow {
                    target,
                    condition: cond,
                    n_obs: n,
                    metric,
                    mean,
                    std_error,
                    per_seed,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutRow {
    pub modality: ModalityId,
    pub name: String,
    pub metric: MetricKind,
    pub value: f64,
    pub n: usize,
}

/// Scores every modality's full test split. The encoder sees `n_context` training
/// points from every modality, drawn once with `seed`.
pub fn heldout_metrics(model: &Model, train: &[Dataset], test: &[Dataset], n_context: usize, seed: u64) -> Result<Vec<HeldoutRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::new();
    if n_context > 0 {
        for (m, ds) in train.iter().enumerate() {
            if ds.is_empty() {
                continue;
            }
            let pick = index::sample(&mut rng, ds.len(), n_context.min(ds.len())).into_vec();
            obs.push(ObservationBatch::from_rows(m, ds, &pick));
        }
    }
    let latents = model.encode_latents(&obs)?;
    let layout = OutputLayout::new(model.registry());
    let mut rows = Vec::new();
    for (m, ds) in test.iter().enumerate() {
        if ds.is_empty() {
            continue;
        }
        let spec = model.registry().get(m)?;
        let (offset, _) = layout.slice(m)?;
        let out = model.decode_latents(&latents, &ds.points, &vec![m; ds.len()])?;
        let pred: Vec<Value> = (0..ds.len()).map(|r| decode_row(out.row(r), spec, offset)).collect();
        let (metric, value) = score(spec, &pred, &ds.values)?;
        rows.push(HeldoutRow {
            modality: m,
            name: spec.name.clone(),
            metric,
            value,
            n: ds.len(),
        });
    }
    Ok(rows)
}

/// Per-point error record for plotting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointError {
    /// Absolute error in raw units; wrapped for angular modalities.
    Abs(f64),
    Correct(bool),
}

pub fn difference_map(pred: &[Value], truth: &[Value], spec: &ModalitySpec) -> Result<Vec<PointError>> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| match (spec.task_kind, p, t) {
            (TaskKind::Classification, Value::Class(a), Value::Class(b)) => Ok(PointError::Correct(a == b)),
            (TaskKind::AngularRegression, Value::Scalar(a), Value::Scalar(b)) => {
                let s = spec.scale();
                Ok(PointError::Abs(wrapped_distance(a * s, b * s, spec.angular_period.unwrap_or(180.0))))
            }
            (TaskKind::ScalarRegression, Value::Scalar(a), Value::Scalar(b)) => Ok(PointError::Abs((a - b).abs() * spec.scale())),
            _ => Err(Error::Schema(format!("{}: value kinds do not match the task", spec.name))),
        })
        .collect()
}

/// Writes `lat,lon,error` (regression) or `lat,lon,correct` (classification).
pub fn write_difference_csv(path: &Path, points: &[GeoPoint], errors: &[PointError]) -> Result<()> {
    if points.len() != errors.len() {
        return Err(Error::Contract("points and errors differ in length".into()));
    }
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let header = match errors.first() {
        Some(PointError::Correct(_)) => "lat,lon,correct",
        _ => "lat,lon,error",
    };
    writeln!(w, "{header}").map_err(io)?;
    for (p, e) in points.iter().zip(errors) {
        match e {
            PointError::Abs(x) => writeln!(w, "{},{},{}", p.lat, p.lon, x),
            PointError::Correct(c) => writeln!(w, "{},{},{}", p.lat, p.lon, u8::from(*c)),
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Predictions on an equirectangular grid of cell centres, row 0 northernmost.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub modality: ModalityId,
    pub resolution: f64,
    pub depth_km: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Denormalized value or class index per cell; `None` where masked.
    pub values: Vec<Option<f64>>,
}

impl FieldGrid {
    pub fn cell_count(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn cell_center(&self, cell: usize) -> GeoPoint {
        grid_center(self.resolution, self.n_lon, cell, self.depth_km)
    }

    /// `lat,lon,value`; masked cells are omitted and classes are written as labels.
    pub fn write_csv(&self, path: &Path, spec: &ModalitySpec) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "lat,lon,value").map_err(io)?;
        for (cell, v) in self.values.iter().enumerate() {
            let Some(v) = v else { continue };
            let p = self.cell_center(cell);
            match spec.task_kind {
                TaskKind::Classification => writeln!(w, "{},{},{}", p.lat, p.lon, spec.classes[*v as usize]),
                _ => writeln!(w, "{},{},{}", p.lat, p.lon, v),
            }
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Plain-text graymap; valid cells scale linearly onto 1..=255, masked cells are 0.
    /// Writes the scaling to `<path>.json`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let valid = self.values.iter().flatten();
        let min = valid.clone().copied().fold(f64::INFINITY, f64::min);
        let max = valid.copied().fold(f64::NEG_INFINITY, f64::max);
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "P2\n{} {}\n255", self.n_lon, self.n_lat).map_err(io)?;
        for row in self.values.chunks(self.n_lon) {
            let line: Vec<String> = row
                .iter()
                .map(|v| match v {
                    None => 0,
                    Some(_) if max <= min => 128,
                    Some(x) => 1 + ((x - min) / (max - min) * 254.0).round() as u32,
                })
                .map(|g| g.to_string())
                .collect();
            writeln!(w, "{}", line.join(" ")).map_err(io)?;
        }
        w.flush().map_err(io)?;
        let meta = serde_json::json!({
            "width": self.n_lon,
            "height": self.n_lat,
            "resolution_deg": self.resolution,
            "min": if min.is_finite() { Some(min) } else { None },
            "max": if max.is_finite() { Some(max) } else { None },
            "gray_min": 1,
            "gray_max": 255,
            "masked_gray": 0,
            "row0": "north",
        });
        let meta_path = path.with_extension("pgm.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))
    }
}

fn grid_dims(resolution: f64) -> Result<(usize, usize)> {
    if !(resolution.is_finite() && resolution > 0.0 && resolution <= 180.0) {
        return Err(Error::Domain(format!("grid resolution {resolution} must be in (0, 180]")));
    }
    let n = |span: f64| (span / resolution - 1e-9).ceil().max(1.0) as usize;
    Ok((n(180.0), n(360.0)))
}

fn grid_center(res: f64, n_lon: usize, cell: usize, depth_km: f64) -> GeoPoint {
    let (i, j) = (cell / n_lon, cell % n_lon);
    let lat = (90.0 - (i as f64 + 0.5) * res).max(-90.0);
    let lon = (-180.0 + (j as f64 + 0.5) * res).min(180.0);
    GeoPoint::new(lat, lon, depth_km)
}

/// Cell indices (single column, optional `cell` header) to leave out of a reconstruction.
pub fn load_mask(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut cells = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = rec.get(0).unwrap_or("");
        match field.parse::<usize>() {
            Ok(c) => cells.push(c),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i as u64 + 1,
                    msg: format!("bad cell index {field:?}: {e}"),
                })
            }
        }
    }
    Ok(cells)
}

/// Predicts `modality` at every cell centre given optional observations.
pub fn reconstruct_field(
    model: &Model,
    modality: ModalityId,
    resolution: f64,
    depth_km: f64,
    observations: &[ObservationBatch],
    mask: &[usize],
) -> Result<FieldGrid> {
    let spec = model.registry().get(modality)?;
    let (n_lat, n_lon) = grid_dims(resolution)?;
    let n = n_lat * n_lon;
    let mut keep = vec![true; n];
    for &c in mask {
        if c < n {
            keep[c] = false;
        }
    }
    let cells: Vec<usize> = (0..n).filter(|&c| keep[c]).collect();
    let mut values = vec![None; n];
    if !cells.is_empty() {
        let points: Vec<GeoPoint> = cells.iter().map(|&c| grid_center(resolution, n_lon, c, depth_km)).collect();
        let pred = predict_values(model, observations, &points, modality)?;
        for (&c, v) in cells.iter().zip(pred) {
            values[c] = Some(match spec.denormalize(&v)? {
                RawValue::Number(x) => x,
                RawValue::Label(_) => match v {
                    Value::Class(k) => k as f64,
                    Value::Scalar(x) => x,
                },
            });
        }
    }
    Ok(FieldGrid {
        modality,
        resolution,
        depth_km,
        n_lat,
        n_lon,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::HashEmbedding;
    use crate::modality::Registry;
    use crate::model::Preset;

    #[test]
    fn wrapped_distance_examples() {
        assert_eq!(wrapped_distance(179.0, 1.0, 180.0), 2.0);
        assert_eq!(wrapped_distance(1.0, 179.0, 180.0), 2.0);
        assert_eq!(wrapped_distance(30.0, 30.0, 180.0), 0.0);
        assert_eq!(wrapped_distance(0.0, 90.0, 180.0), 90.0);
    }

    #[test]
    fn difference_map_records() {
        let reg = Registry::synthetic();
        let ang = reg.get(0).unwrap();
        let d = difference_map(&[Value::Scalar(179.0 / 180.0)], &[Value::Scalar(1.0 / 180.0)], ang).unwrap();
        match d[0] {
            PointError::Abs(e) => assert!((e - 2.0).abs() < 1e-9),
            _ => panic!(),
        }
        let cat = reg.get(3).unwrap();
        let d = difference_map(&[Value::Class(1), Value::Class(2)], &[Value::Class(1), Value::Class(0)], cat).unwrap();
        assert_eq!(d, vec![PointError::Correct(true), PointError::Correct(false)]);
        assert!(matches!(difference_map(&[], &[Value::Class(0)], cat), Err(Error::Contract(_))));
    }

    #[test]
    fn grid_cell_counts() {
        assert_eq!(grid_dims(1.0).unwrap(), (180, 360));
        assert_eq!(grid_dims(5.0).unwrap(), (36, 72));
        assert_eq!(grid_dims(0.5).unwrap(), (360, 720));
        assert!(grid_dims(0.0).is_err());
        let c = grid_center(1.0, 360, 0, 0.0);
        assert_eq!((c.lat, c.lon), (89.5, -179.5));
    }

    #[test]
    fn ranking_breaks_ties_by_row() {
        let mut ds = Dataset::new("x");
        for p in [(1.0, 0.0), (0.0, 1.0), (0.0, 0.5), (-1.0, 0.0)] {
            ds.push(GeoPoint::surface(p.0, p.1), Value::Scalar(0.0));
        }
        assert_eq!(rank_by_distance(&ds, &GeoPoint::surface(0.0, 0.0)), vec![2, 0, 1, 3]);
    }

    #[test]
    fn std_error_of_constant_is_zero() {
        assert_eq!(mean_and_std_error(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, se) = mean_and_std_error(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn local_protocol_needs_enough_points() {
        let model = Model::new(Preset::Micro.config(), Registry::synthetic(), &HashEmbedding).unwrap();
        let mut ds = Dataset::new("synthetic stress angle");
        for i in 0..8 {
            ds.push(GeoPoint::surface(i as f64, 0.0), Value::Scalar(0.5));
        }
        let test = vec![ds];
        let cfg = LocalProtocolConfig::new(GeoPoint::surface(0.0, 0.0), 0, vec![0, 4]);
        assert!(matches!(local_inference(&model, &cfg, &test), Err(Error::Protocol(_))));
        let ok = LocalProtocolConfig::new(GeoPoint::surface(0.0, 0.0), 0, vec![0, 3]);
        let rows = local_inference(&model, &ok, &test).unwrap();
        assert_eq!(rows.len(), 2);
    }
}
