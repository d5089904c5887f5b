//! Geographic positional encoding and text-derived modality vectors.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the raw description vector.
pub const TEXT_DIM: usize = 64;

/// Depth normalizer: the core–mantle boundary, in kilometers.
pub const DEFAULT_Z_MAX_KM: f64 = 2891.0;

/// Latitude bands per degree of resolution: 36 bands at 0.5°.
const LAT_BANDS_AT_ONE_DEGREE: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    /// Kilometers below the surface; 0 for surface observations.
    pub depth_km: f64,
}

impl GeoPoint {
    pub fn surface(lat: f64, lon: f64) -> Self {
        Self { lat, lon, depth_km: 0.0 }
    }

    pub fn new(lat: f64, lon: f64, depth_km: f64) -> Self {
        Self { lat, lon, depth_km }
    }

    pub fn validate(&self, z_max: f64) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::Domain(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Domain(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        if !(0.0..=z_max).contains(&self.depth_km) {
            return Err(Error::Domain(format!(
                "depth {} km outside [0, {z_max}]",
                self.depth_km
            )));
        }
        Ok(())
    }
}

/// Frequency bands for the sinusoidal encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub lat_bands: Vec<f64>,
    pub lon_bands: Vec<f64>,
    pub z_max: f64,
}

impl PosEncConfig {
    /// `bands` latitude bands `1..=bands` and as many longitude bands `1, 4, 6, .., 2·bands`.
    ///
    /// Longitude uses even bands up to twice the latitude maximum, except that the
    /// lowest one is the fundamental: with only even bands every longitude feature
    /// repeats every 180° and the two hemispheres would encode identically.
    pub fn with_bands(bands: usize) -> Result<Self> {
        if bands < 1 {
            return Err(Error::Config("positional encoding needs at least one band".into()));
        }
        Ok(Self {
            lat_bands: (1..=bands).map(|f| f as f64).collect(),
            lon_bands: (1..=bands)
                .map(|f| if f == 1 && bands > 1 { 1.0 } else { 2.0 * f as f64 })
                .collect(),
            z_max: DEFAULT_Z_MAX_KM,
        })
    }

    pub fn bands(&self) -> usize {
        self.lat_bands.len()
    }

    /// `4F + 1`.
    pub fn dim(&self) -> usize {
        4 * self.bands() + 1
    }

    pub fn max_lat_band(&self) -> f64 {
        self.lat_bands.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_lon_band(&self) -> f64 {
        self.lon_bands.iter().copied().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lat_bands.is_empty() || self.lat_bands.len() != self.lon_bands.len() {
            return Err(Error::Config("latitude and longitude band counts must match and be non-zero".into()));
        }
        let integral = |f: &f64| *f > 0.0 && f.fract() == 0.0;
        if !self.lat_bands.iter().all(integral) || !self.lon_bands.iter().all(integral) {
            return Err(Error::Config("bands must be positive integers".into()));
        }
        if self.z_max <= 0.0 {
            return Err(Error::Config("z_max must be positive".into()));
        }
        Ok(())
    }
}

/// Band layout resolving a target grid spacing in degrees.
///
/// The maximum latitude band is 36 at 0.5° and scales inversely with the
/// spacing; longitude uses twice that maximum with the same band count.
pub fn nyquist_bands(resolution_deg: f64) -> Result<PosEncConfig> {
    if !(resolution_deg > 0.0) || !resolution_deg.is_finite() {
        return Err(Error::Config(format!("resolution must be positive, got {resolution_deg}")));
    }
    let f_max = (LAT_BANDS_AT_ONE_DEGREE / resolution_deg + 1e-9).floor();
    if f_max < 1.0 {
        return Err(Error::Config(format!(
            "resolution {resolution_deg}° yields no frequency bands"
        )));
    }
    PosEncConfig::with_bands(f_max as usize)
}

/// `[sin(πφ̂f_φ), cos(πφ̂f_φ), sin(πλ̂f_λ), cos(πλ̂f_λ), ẑ]`.
pub fn pos_enc(p: &GeoPoint, cfg: &PosEncConfig) -> Result<Vec<f64>> {
    p.validate(cfg.z_max)?;
    Ok(pos_enc_unchecked(p, cfg))
}

pub(crate) fn pos_enc_unchecked(p: &GeoPoint, cfg: &PosEncConfig) -> Vec<f64> {
    let lat = p.lat / 90.0;
    let lon = p.lon / 180.0;
    let mut out = Vec::with_capacity(cfg.dim());
    out.extend(cfg.lat_bands.iter().map(|f| (PI * lat * f).sin()));
    out.extend(cfg.lat_bands.iter().map(|f| (PI * lat * f).cos()));
    out.extend(cfg.lon_bands.iter().map(|f| (PI * lon * f).sin()));
    out.extend(cfg.lon_bands.iter().map(|f| (PI * lon * f).cos()));
    out.push(p.depth_km / cfg.z_max);
    out
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic unit-norm vector derived from a description string.
pub fn text_embed(description: &str) -> Result<Vec<f64>> {
    if description.is_empty() {
        return Err(Error::Domain("empty description".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(fnv1a64(description.as_bytes()));
    let raw: Vec<f64> = (0..TEXT_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(raw.into_iter().map(|v| v / norm).collect())
}

/// Supplies the raw description vector for a modality.
pub trait EmbeddingSource {
    fn vector(&self, modality: &str, description: &str) -> Result<Vec<f64>>;
}

/// Hash-seeded Gaussian vectors; see [`text_embed`].
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedding;

impl EmbeddingSource for HashEmbedding {
    fn vector(&self, _modality: &str, description: &str) -> Result<Vec<f64>> {
        text_embed(description)
    }
}

/// Precomputed vectors from a CSV with columns `modality_name, v0..v63`.
#[derive(Debug, Clone, Default)]
pub struct SidecarEmbeddings {
    vectors: HashMap<String, Vec<f64>>,
}

impl SidecarEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut vectors = HashMap::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != TEXT_DIM + 1 {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    msg: format!("expected {} columns, got {}", TEXT_DIM + 1, rec.len()),
                });
            }
            let v = rec
                .iter()
                .skip(1)
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.into(),
                    line,
                    msg: e.to_string(),
                })?;
            vectors.insert(rec[0].to_string(), v);
        }
        Ok(Self { vectors })
    }
}

impl EmbeddingSource for SidecarEmbeddings {
    fn vector(&self, modality: &str, _description: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(modality)
            .cloned()
            .ok_or_else(|| Error::Registry(format!("no sidecar vector for modality {modality}")))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.into(),
        line,
        msg: e.to_string(),
    }
}
