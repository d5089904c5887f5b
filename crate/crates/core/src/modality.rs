//! Modality registry and per-modality normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ModalityId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    AngularRegression,
    ScalarRegression,
    Classification,
}

impl TaskKind {
    pub fn is_regression(self) -> bool {
        !matches!(self, TaskKind::Classification)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// Divide by the range maximum.
    MaxDivisor(f64),
    Identity,
}

/// A raw observation value as it appears in source files.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Number(f64),
    Label(String),
}

/// A normalized value: a scaled scalar or a class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Scalar(f64),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub task_kind: TaskKind,
    /// Raw validation bounds for regression modalities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    /// Period in degrees (180 or 360) for angular modalities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angular_period: Option<f64>,
    pub normalizer: Normalizer,
    #[serde(default)]
    pub depth_varying: bool,
    pub description: String,
    /// Label assigned to sampled coordinates with no source value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill_label: Option<String>,
}

impl ModalitySpec {
    fn regression(name: &str, kind: TaskKind, range: (f64, f64), normalizer: Normalizer) -> Self {
        Self {
            name: name.into(),
            task_kind: kind,
            value_range: Some(range),
            classes: Vec::new(),
            angular_period: (kind == TaskKind::AngularRegression).then_some(180.0),
            normalizer,
            depth_varying: false,
            description: name.into(),
            fill_label: None,
        }
    }

    fn classification(name: &str, classes: Vec<String>, fill_label: Option<&str>) -> Self {
        Self {
            name: name.into(),
            task_kind: TaskKind::Classification,
            value_range: None,
            classes,
            angular_period: None,
            normalizer: Normalizer::Identity,
            depth_varying: false,
            description: name.into(),
            fill_label: fill_label.map(Into::into),
        }
    }

    /// Encoder feature width: 1 for regression, the class count otherwise.
    pub fn feature_width(&self) -> usize {
        match self.task_kind {
            TaskKind::Classification => self.classes.len(),
            _ => 1,
        }
    }

    /// Lowercase identifier with non-alphanumerics replaced by `_`.
    pub fn slug(&self) -> String {
        self.name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect()
    }

    /// File name used for this modality's CSV.
    pub fn file_name(&self) -> String {
        format!("{}.csv", self.slug())
    }

    pub fn scale(&self) -> f64 {
        match self.normalizer {
            Normalizer::MaxDivisor(m) => m,
            Normalizer::Identity => 1.0,
        }
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Schema(format!("unknown class {label:?} for {}", self.name)))
    }

    pub fn normalize(&self, raw: &RawValue) -> Result<Value> {
        match (self.task_kind, raw) {
            (TaskKind::Classification, RawValue::Label(l)) => Ok(Value::Class(self.class_index(l)?)),
            (TaskKind::Classification, RawValue::Number(x)) => Err(Error::Schema(format!(
                "{} expects a class label, got {x}",
                self.name
            ))),
            (_, RawValue::Number(x)) => {
                if let Some((lo, hi)) = self.value_range {
                    if !(lo..=hi).contains(x) {
                        return Err(Error::Domain(format!(
                            "{} value {x} outside [{lo}, {hi}]",
                            self.name
                        )));
                    }
                }
                Ok(Value::Scalar(x / self.scale()))
            }
            (_, RawValue::Label(l)) => Err(Error::Schema(format!(
                "{} expects a number, got {l:?}",
                self.name
            ))),
        }
    }

    pub fn denormalize(&self, v: &Value) -> Result<RawValue> {
        match (self.task_kind, v) {
            (TaskKind::Classification, Value::Class(i)) => self
                .classes
                .get(*i)
                .map(|c| RawValue::Label(c.clone()))
                .ok_or_else(|| Error::Schema(format!("class index {i} out of range for {}", self.name))),
            (TaskKind::Classification, Value::Scalar(_)) => {
                Err(Error::Schema(format!("{} expects a class index", self.name)))
            }
            (_, Value::Scalar(x)) => Ok(RawValue::Number(x * self.scale())),
            (_, Value::Class(_)) => Err(Error::Schema(format!("{} expects a scalar", self.name))),
        }
    }

    /// Encoder feature row: the normalized scalar, or a one-hot class vector.
    pub fn features(&self, v: &Value) -> Vec<f64> {
        match *v {
            Value::Scalar(x) => vec![x],
            Value::Class(i) => {
                let mut row = vec![0.0; self.classes.len()];
                row[i] = 1.0;
                row
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Registry(format!("{}: {m}", self.name)));
        if self.name.is_empty() || self.description.is_empty() {
            return err("name and description must be non-empty");
        }
        match self.task_kind {
            TaskKind::Classification => {
                if self.classes.len() < 2 {
                    return err("classification needs at least two classes");
                }
                let mut sorted = self.classes.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != self.classes.len() {
                    return err("duplicate class labels");
                }
                if let Some(fill) = &self.fill_label {
                    if !self.classes.contains(fill) {
                        return err("fill label is not a class");
                    }
                }
            }
            kind => {
                if !self.classes.is_empty() {
                    return err("regression modalities have no classes");
                }
                if let Normalizer::MaxDivisor(m) = self.normalizer {
                    if !(m > 0.0) {
                        return err("normalizer must be positive");
                    }
                }
                if kind == TaskKind::AngularRegression && !matches!(self.angular_period, Some(p) if p == 180.0 || p == 360.0) {
                    return err("angular period must be 180 or 360");
                }
            }
        }
        Ok(())
    }
}

/// Ordered modality list; a modality's id is its position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Registry {
    modalities: Vec<ModalitySpec>,
}

impl Registry {
    pub fn new(modalities: Vec<ModalitySpec>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Registry("registry is empty".into()));
        }
        for (i, m) in modalities.iter().enumerate() {
            m.validate()?;
            if modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Registry(format!("duplicate modality {}", m.name)));
            }
        }
        Ok(Self { modalities })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let list: Vec<ModalitySpec> = serde_json::from_str(&text)?;
        Self::new(list)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn get(&self, id: ModalityId) -> Result<&ModalitySpec> {
        self.modalities
            .get(id)
            .ok_or_else(|| Error::Registry(format!("unknown modality id {id}")))
    }

    pub fn id(&self, name: &str) -> Result<ModalityId> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Registry(format!("unknown modality {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.modalities.iter()
    }

    /// Total width of the shared output head.
    pub fn output_width(&self) -> usize {
        self.modalities.iter().map(ModalitySpec::feature_width).sum()
    }

    /// The eight-modality layout of the global subsurface datasets.
    pub fn default_earth() -> Self {
        use TaskKind::*;
        let numbered = |prefix: &str, n: usize, fill: Option<&str>| -> Vec<String> {
            let mut v: Vec<String> = fill.into_iter().map(String::from).collect();
            v.extend((1..=n - v.len()).map(|i| format!("{prefix} {i:02}")));
            v
        };
        let mut mantle = ModalitySpec::regression(
            "mantle temperature",
            ScalarRegression,
            (400.0, 1300.0),
            Normalizer::MaxDivisor(1300.0),
        );
        mantle.depth_varying = true;
        Self::new(vec![
            ModalitySpec::regression("stress angle", AngularRegression, (0.0, 180.0), Normalizer::MaxDivisor(180.0)),
            ModalitySpec::regression("strain angle", AngularRegression, (0.0, 180.0), Normalizer::MaxDivisor(180.0)),
            // Thickest basins reach about 22 km.
            ModalitySpec::regression("sediment thickness", ScalarRegression, (0.0, 22.0), Normalizer::Identity),
            mantle,
            ModalitySpec::classification("tectonic plates", numbered("plate", 52, None), None),
            ModalitySpec::classification("fault type", numbered("fault", 24, Some("None")), Some("None")),
            ModalitySpec::classification("basin type", numbered("basin type", 9, Some("No Basin")), Some("No Basin")),
            ModalitySpec::classification("basin age", numbered("basin age", 17, Some("No Basin")), Some("No Basin")),
        ])
        .expect("default registry is valid")
    }

    /// Four analytic stand-in modalities matching [`crate::data::SynthKind`].
    pub fn synthetic() -> Self {
        use TaskKind::*;
        let mut depth = ModalitySpec::regression(
            "synthetic mantle temperature",
            ScalarRegression,
            (0.0, 1.0),
            Normalizer::MaxDivisor(1.0),
        );
        depth.depth_varying = true;
        Self::new(vec![
            ModalitySpec::regression("synthetic stress angle", AngularRegression, (0.0, 180.0), Normalizer::MaxDivisor(180.0)),
            ModalitySpec::regression("synthetic scalar", ScalarRegression, (0.0, 1.0), Normalizer::MaxDivisor(1.0)),
            depth,
            ModalitySpec::classification(
                "synthetic quadrant",
                ["north-east", "north-west", "south-east", "south-west"].map(String::from).to_vec(),
                None,
            ),
        ])
        .expect("synthetic registry is valid")
    }
}
