//! Per-step stochastic sampling of encoder observations and decoder queries.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::modality::{ModalityId, Value};

/// Observations of one modality fed to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub modality: ModalityId,
    pub points: Vec<GeoPoint>,
    pub values: Vec<Value>,
}

impl ObservationBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_rows(modality: ModalityId, ds: &Dataset, rows: &[usize]) -> Self {
        Self {
            modality,
            points: rows.iter().map(|&i| ds.points[i]).collect(),
            values: rows.iter().map(|&i| ds.values[i]).collect(),
        }
    }
}

/// Decoder queries with their task ids and (when known) targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<GeoPoint>,
    pub task_ids: Vec<ModalityId>,
    pub targets: Vec<Value>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: GeoPoint, task: ModalityId, target: Value) {
        self.points.push(p);
        self.task_ids.push(task);
        self.targets.push(target);
    }

    pub fn extend_from(&mut self, task: ModalityId, ds: &Dataset, rows: impl IntoIterator<Item = usize>) {
        for i in rows {
            self.push(ds.points[i], task, ds.values[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Upper bound of observations per fused modality.
    pub k_max: usize,
    /// Upper bound of queries per modality.
    pub q_max: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k_max: 384,
            q_max: 64,
            seed: 0,
        }
    }
}

/// One training scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledStep {
    /// Fused modalities in their randomized order; empty selects the null token.
    pub observations: Vec<ObservationBatch>,
    pub queries: QueryBatch,
}

impl SampledStep {
    pub fn token_count(&self) -> usize {
        self.observations.iter().map(ObservationBatch::len).sum()
    }
}

/// Resumable generator position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    /// ChaCha word position, decimal.
    pub word_pos: String,
}

pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        if cfg.k_max < 1 || cfg.q_max < 1 {
            return Err(Error::Config("k_max and q_max must be at least 1".into()));
        }
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.cfg.seed,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(cfg: SamplerConfig, state: &SamplerState) -> Result<Self> {
        let mut s = Self::new(SamplerConfig { seed: state.seed, ..cfg })?;
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad sampler position {:?}", state.word_pos)))?;
        s.rng.set_word_pos(pos);
        Ok(s)
    }

    /// Uniform subset of `0..m` (each member independently with probability ½),
    /// returned in random order.
    pub fn draw_subset(&mut self, m: usize) -> Vec<ModalityId> {
        let mut subset: Vec<ModalityId> = (0..m).filter(|_| self.rng.random_bool(0.5)).collect();
        subset.shuffle(&mut self.rng);
        subset
    }

    pub fn draw_count(&mut self, max: usize) -> usize {
        self.rng.random_range(1..=max)
    }

    /// Draws a scene from per-modality training sets indexed by modality id.
    pub fn sample_step(&mut self, train: &[Dataset]) -> Result<SampledStep> {
        if let Some(empty) = train.iter().find(|d| d.is_empty()) {
            return Err(Error::Config(format!("training set for {} is empty", empty.modality)));
        }
        let subset = self.draw_subset(train.len());
        let mut observations = Vec::with_capacity(subset.len());
        for m in subset {
            let k = self.draw_count(self.cfg.k_max);
            let rows: Vec<usize> = (0..k).map(|_| self.rng.random_range(0..train[m].len())).collect();
            observations.push(ObservationBatch::from_rows(m, &train[m], &rows));
        }
        let mut queries = QueryBatch::default();
        for (m, ds) in train.iter().enumerate() {
            let k = self.draw_count(self.cfg.q_max);
            let rows: Vec<usize> = (0..k).map(|_| self.rng.random_range(0..ds.len())).collect();
            queries.extend_from(m, ds, rows);
        }
        Ok(SampledStep { observations, queries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_field, SynthKind, SynthParams};

    fn sets() -> Vec<Dataset> {
        SynthKind::ALL
            .iter()
            .map(|&k| synth_field(k, &SynthParams::default(), 100, 2).unwrap())
            .collect()
    }

    #[test]
    fn steps_are_reproducible_and_bounded() {
        let train = sets();
        let cfg = SamplerConfig { seed: 11, ..Default::default() };
        let mut a = Sampler::new(cfg).unwrap();
        let mut b = Sampler::new(cfg).unwrap();
        for _ in 0..20 {
            let (sa, sb) = (a.sample_step(&train).unwrap(), b.sample_step(&train).unwrap());
            assert_eq!(sa, sb);
            for o in &sa.observations {
                assert!((1..=384).contains(&o.len()));
            }
            for m in 0..train.len() {
                assert!(sa.queries.task_ids.contains(&m));
            }
        }
    }

    #[test]
    fn restore_resumes_the_stream() {
        let train = sets();
        let cfg = SamplerConfig { seed: 5, ..Default::default() };
        let mut a = Sampler::new(cfg).unwrap();
        a.sample_step(&train).unwrap();
        let mut b = Sampler::restore(cfg, &a.state()).unwrap();
        assert_eq!(a.sample_step(&train).unwrap(), b.sample_step(&train).unwrap());
    }

    #[test]
    fn empty_training_set_is_a_config_error() {
        let mut train = sets();
        train[2] = Dataset::new("x");
        let mut s = Sampler::new(SamplerConfig::default()).unwrap();
        assert!(matches!(s.sample_step(&train), Err(Error::Config(_))));
    }
}
