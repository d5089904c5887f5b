//! Token construction, early fusion, latent encoder, query decoder and shared output head.

pub mod checkpoint;
mod config;
mod layers;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::geo::{pos_enc, EmbeddingSource, GeoPoint, TEXT_DIM};
use crate::modality::{ModalityId, ModalitySpec, Registry, TaskKind, Value};
use crate::param::ParamStore;
use crate::sampler::ObservationBatch;
use crate::tensor::Tensor;

pub use config::{parameter_breakdown, parameter_count, ModelConfig, Preset};
use layers::{repeat_row, Attention, Linear, Mlp, Norm};

/// Queries decoded per tape during inference.
pub const INFERENCE_CHUNK: usize = 512;

#[derive(Debug, Clone)]
struct Block {
    norm_q: Norm,
    norm_kv: Option<Norm>,
    attn: Attention,
    norm_mlp: Norm,
    mlp: Mlp,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.channel_width;
        let (heads, dim) = if cross {
            (cfg.cross_heads, cfg.cross_head_dim)
        } else {
            (cfg.self_heads, cfg.self_head_dim)
        };
        let norm_q = Norm::new(store, &format!("{name}.norm_q"), c, cfg.layer_norm)?;
        let norm_kv = if cross {
            Some(Norm::new(store, &format!("{name}.norm_kv"), c, cfg.layer_norm)?)
        } else {
            None
        };
        Ok(Self {
            norm_q,
            norm_kv,
            attn: Attention::new(store, &format!("{name}.attn"), c, heads, dim, rng)?,
            norm_mlp: Norm::new(store, &format!("{name}.norm_mlp"), c, cfg.layer_norm)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, cfg.mlp_hidden(), rng)?,
        })
    }

    fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: Var<'t>, context: Option<Var<'t>>) -> Result<Var<'t>> {
        let q = self.norm_q.forward(p, x)?;
        let kv = match (context, &self.norm_kv) {
            (Some(ctx), Some(norm)) => norm.forward(p, ctx)?,
            _ => q,
        };
        let x = x.add(self.attn.forward(tape, p, q, kv)?)?;
        let h = self.norm_mlp.forward(p, x)?;
        Ok(x.add(self.mlp.forward(p, h)?)?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    norm_q: Norm,
    norm_kv: Norm,
    attn: Attention,
    mlps: Vec<(Norm, Mlp)>,
    norm_out: Norm,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    latents: ParamId,
    null_token: ParamId,
    text: Vec<ParamId>,
    modality_embed: Linear,
    task_embed: Linear,
    tokens: Vec<Linear>,
    query_proj: Linear,
    encoder: Vec<Block>,
    decoder: Decoder,
}

/// Sequence handed to the encoder.
#[derive(Debug, Clone, Copy)]
pub struct FusedSequence<'t> {
    pub tokens: Var<'t>,
    /// Number of fused tokens; 1 when the null token stands in.
    pub n_tokens: usize,
    pub is_null: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    registry: Registry,
    store: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(cfg: ModelConfig, registry: Registry, embeddings: &dyn EmbeddingSource) -> Result<Self> {
        cfg.validate()?;
        if registry.is_empty() {
            return Err(Error::Registry("model needs at least one modality".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channel_width;
        let pe = cfg.pos_enc.dim();

        let latents = store.normal("latents", &[cfg.n_latents, c], 0.02, &mut rng)?;
        let null_token = store.zeros("null_token", &[1, c])?;
        let modality_embed = Linear::new(&mut store, "modality_embed", TEXT_DIM, cfg.modality_embed_dim, &mut rng)?;
        let task_embed = Linear::new(&mut store, "task_embed", TEXT_DIM, pe, &mut rng)?;
        let mut text = Vec::with_capacity(registry.len());
        let mut tokens = Vec::with_capacity(registry.len());
        for spec in registry.iter() {
            let v = embeddings.vector(&spec.name, &spec.description)?;
            if v.len() != TEXT_DIM {
                return Err(Error::Registry(format!(
                    "embedding for {} has {} entries, expected {TEXT_DIM}",
                    spec.name,
                    v.len()
                )));
            }
            text.push(store.insert_frozen(format!("text.{}", spec.slug()), Tensor::new(vec![1, TEXT_DIM], v)?)?);
            let width = spec.feature_width() + pe + cfg.modality_embed_dim;
            tokens.push(Linear::new(&mut store, &format!("tokens.{}", spec.slug()), width, c, &mut rng)?);
        }
        let query_proj = Linear::new(&mut store, "query_proj", 2 * pe, c, &mut rng)?;

        let mut encoder = vec![Block::new(&mut store, "encoder.cross", &cfg, true, &mut rng)?];
        for i in 0..cfg.n_self_blocks {
            encoder.push(Block::new(&mut store, &format!("encoder.self{i}"), &cfg, false, &mut rng)?);
        }

        let ln = cfg.layer_norm;
        let decoder = Decoder {
            norm_q: Norm::new(&mut store, "decoder.norm_q", c, ln)?,
            norm_kv: Norm::new(&mut store, "decoder.norm_kv", c, ln)?,
            attn: Attention::new(&mut store, "decoder.attn", c, cfg.cross_heads, cfg.cross_head_dim, &mut rng)?,
            mlps: (0..cfg.n_decoder_mlps)
                .map(|i| {
                    let name = format!("decoder.mlp{i}");
                    Ok((
                        Norm::new(&mut store, &format!("{name}.norm"), c, ln)?,
                        Mlp::new(&mut store, &name, c, cfg.mlp_hidden(), &mut rng)?,
                    ))
                })
                .collect::<Result<_>>()?,
            norm_out: Norm::new(&mut store, "decoder.norm_out", c, ln)?,
            head: Linear::new(&mut store, "decoder.head", c, registry.output_width(), &mut rng)?,
        };

        let layout = Layout {
            latents,
            null_token,
            text,
            modality_embed,
            task_embed,
            tokens,
            query_proj,
            encoder,
            decoder,
        };
        Ok(Self {
            cfg,
            registry,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn output_width(&self) -> usize {
        self.registry.output_width()
    }

    /// Trainable scalars per top-level component, read from the instantiated store.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in self.store.iter().filter(|p| p.trainable) {
            let group = p.name.split('.').next().unwrap_or(&p.name);
            match out.iter_mut().find(|(g, _)| g == group) {
                Some((_, n)) => *n += p.tensor.len(),
                None => out.push((group.to_string(), p.tensor.len())),
            }
        }
        out
    }

    /// Binds all parameters to `tape` for one forward/backward pass.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape) -> Bound<'m, 't> {
        Bound {
            model: self,
            tape,
            p: self.store.bind(tape),
        }
    }

    /// Pre-projection token vector `[features ‖ pos_enc ‖ modality embedding]`.
    pub fn token_input(&self, features: &[f64], p: &GeoPoint, modality: ModalityId) -> Result<Vec<f64>> {
        let spec = self.registry.get(modality)?;
        if features.len() != spec.feature_width() {
            return Err(Error::Schema(format!(
                "{} expects {} features, got {}",
                spec.name,
                spec.feature_width(),
                features.len()
            )));
        }
        let mut row = features.to_vec();
        row.extend(pos_enc(p, &self.cfg.pos_enc)?);
        let tape = Tape::new();
        let b = self.bind(&tape);
        row.extend_from_slice(b.modality_embedding(modality)?.value().data());
        Ok(row)
    }

    /// Projected token of width `channel_width`.
    pub fn build_token(&self, features: &[f64], p: &GeoPoint, modality: ModalityId) -> Result<Vec<f64>> {
        let x = self.token_input(features, p, modality)?;
        let tape = Tape::new();
        let b = self.bind(&tape);
        let row = tape.constant(Tensor::new(vec![1, x.len()], x)?);
        Ok(self.layout.tokens[modality].forward(&b.p, row)?.value().data().to_vec())
    }

    /// Pre-projection query vector `[pos_enc ‖ task embedding]`.
    pub fn query_input(&self, q: &GeoPoint, task: ModalityId) -> Result<Vec<f64>> {
        self.registry.get(task)?;
        let mut row = pos_enc(q, &self.cfg.pos_enc)?;
        let tape = Tape::new();
        let b = self.bind(&tape);
        row.extend_from_slice(b.task_table()?.gather_rows(&[task])?.value().data());
        Ok(row)
    }

    /// Latent array after encoding the given observations, without gradient tracking.
    pub fn encode_latents(&self, observations: &[ObservationBatch]) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.bind(&tape);
        let seq = b.fuse(observations)?;
        Ok((*b.encode(&seq)?.value()).clone())
    }

    /// Decodes queries against precomputed latents in chunks of [`INFERENCE_CHUNK`].
    pub fn decode_latents(&self, latents: &Tensor, points: &[GeoPoint], tasks: &[ModalityId]) -> Result<Tensor> {
        if points.len() != tasks.len() {
            return Err(Error::Config("points and task ids differ in length".into()));
        }
        if points.is_empty() {
            return Err(Error::Config("at least one query is required".into()));
        }
        let width = self.output_width();
        let mut data = Vec::with_capacity(points.len() * width);
        for (pc, tc) in points.chunks(INFERENCE_CHUNK).zip(tasks.chunks(INFERENCE_CHUNK)) {
            let tape = Tape::new();
            let b = self.bind(&tape);
            let lat = tape.constant(latents.clone());
            let q = b.form_queries(pc, tc)?;
            data.extend_from_slice(b.decode(lat, q)?.value().data());
        }
        Ok(Tensor::new(vec![points.len(), width], data)?)
    }

    /// Encodes `observations` and decodes the queries: `[n_queries × output_width]`.
    pub fn predict(&self, observations: &[ObservationBatch], points: &[GeoPoint], tasks: &[ModalityId]) -> Result<Tensor> {
        let latents = self.encode_latents(observations)?;
        self.decode_latents(&latents, points, tasks)
    }
}

/// Parameters of a model bound to one tape.
pub struct Bound<'m, 't> {
    model: &'m Model,
    tape: &'t Tape,
    p: Vec<Var<'t>>,
}

impl<'m, 't> Bound<'m, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.p[id]
    }

    pub fn latents(&self) -> Var<'t> {
        self.p[self.model.layout.latents]
    }

    pub fn null_token(&self) -> Var<'t> {
        self.p[self.model.layout.null_token]
    }

    /// Projected modality embedding, `[1 × modality_embed_dim]`.
    fn modality_embedding(&self, m: ModalityId) -> Result<Var<'t>> {
        let text = self.p[self.model.layout.text[m]];
        self.model.layout.modality_embed.forward(&self.p, text)
    }

    /// Projected task embeddings for every registered modality, `[M × pos_enc_dim]`.
    fn task_table(&self) -> Result<Var<'t>> {
        let rows: Vec<Var<'t>> = self.model.layout.text.iter().map(|&id| self.p[id]).collect();
        let text = self.tape.concat(&rows, 0)?;
        self.model.layout.task_embed.forward(&self.p, text)
    }

    /// Projected tokens for one observation batch, `[k × channel_width]`.
    pub fn tokens(&self, obs: &ObservationBatch) -> Result<Var<'t>> {
        let model = self.model;
        let spec = model.registry.get(obs.modality)?;
        if obs.points.len() != obs.values.len() {
            return Err(Error::Schema(format!("{}: points and values differ in length", spec.name)));
        }
        if obs.is_empty() {
            return Err(Error::Schema(format!("{}: empty observation batch", spec.name)));
        }
        let k = obs.len();
        let fw = spec.feature_width();
        let pe = model.cfg.pos_enc.dim();
        let mut feats = Vec::with_capacity(k * fw);
        let mut enc = Vec::with_capacity(k * pe);
        for (p, v) in obs.points.iter().zip(&obs.values) {
            check_value(spec, v)?;
            feats.extend(spec.features(v));
            enc.extend(pos_enc(p, &model.cfg.pos_enc)?);
        }
        let feats = self.tape.constant(Tensor::new(vec![k, fw], feats)?);
        let enc = self.tape.constant(Tensor::new(vec![k, pe], enc)?);
        let emb = repeat_row(self.tape, self.modality_embedding(obs.modality)?, k)?;
        let x = self.tape.concat(&[feats, enc, emb], 1)?;
        model.layout.tokens[obs.modality].forward(&self.p, x)
    }

    /// Concatenates token blocks in the given order; an empty list yields the null token.
    pub fn fuse(&self, observations: &[ObservationBatch]) -> Result<FusedSequence<'t>> {
        if observations.is_empty() {
            return Ok(FusedSequence {
                tokens: self.null_token(),
                n_tokens: 1,
                is_null: true,
            });
        }
        let blocks = observations.iter().map(|o| self.tokens(o)).collect::<Result<Vec<_>>>()?;
        let tokens = if blocks.len() == 1 {
            blocks[0]
        } else {
            self.tape.concat(&blocks, 0)?
        };
        Ok(FusedSequence {
            tokens,
            n_tokens: observations.iter().map(ObservationBatch::len).sum(),
            is_null: false,
        })
    }

    /// `[n_latents × channel_width]`, independent of sequence length.
    pub fn encode(&self, seq: &FusedSequence<'t>) -> Result<Var<'t>> {
        let blocks = &self.model.layout.encoder;
        let mut x = blocks[0].forward(self.tape, &self.p, self.latents(), Some(seq.tokens))?;
        for b in &blocks[1..] {
            x = b.forward(self.tape, &self.p, x, None)?;
        }
        Ok(x)
    }

    /// Projected queries `[n × channel_width]`.
    pub fn form_queries(&self, points: &[GeoPoint], tasks: &[ModalityId]) -> Result<Var<'t>> {
        let model = self.model;
        if points.len() != tasks.len() || points.is_empty() {
            return Err(Error::Config("queries need matching, non-empty points and task ids".into()));
        }
        for &t in tasks {
            model.registry.get(t)?;
        }
        let pe = model.cfg.pos_enc.dim();
        let mut enc = Vec::with_capacity(points.len() * pe);
        for p in points {
            enc.extend(pos_enc(p, &model.cfg.pos_enc)?);
        }
        let enc = self.tape.constant(Tensor::new(vec![points.len(), pe], enc)?);
        let task = self.task_table()?.gather_rows(tasks)?;
        let x = self.tape.concat(&[enc, task], 1)?;
        model.layout.query_proj.forward(&self.p, x)
    }

    /// `[n_queries × output_width]`; every query row is computed independently.
    pub fn decode(&self, latents: Var<'t>, queries: Var<'t>) -> Result<Var<'t>> {
        let d = &self.model.layout.decoder;
        let q = d.norm_q.forward(&self.p, queries)?;
        let kv = d.norm_kv.forward(&self.p, latents)?;
        let mut x = d.attn.forward(self.tape, &self.p, q, kv)?;
        if self.model.cfg.decoder_query_residual {
            x = x.add(queries)?;
        }
        for (norm, mlp) in &d.mlps {
            let h = norm.forward(&self.p, x)?;
            x = x.add(mlp.forward(&self.p, h)?)?;
        }
        let x = d.norm_out.forward(&self.p, x)?;
        d.head.forward(&self.p, x)
    }

    /// Full pass from observations to head outputs.
    pub fn forward(&self, observations: &[ObservationBatch], points: &[GeoPoint], tasks: &[ModalityId]) -> Result<Var<'t>> {
        let seq = self.fuse(observations)?;
        let latents = self.encode(&seq)?;
        let q = self.form_queries(points, tasks)?;
        self.decode(latents, q)
    }
}

fn check_value(spec: &ModalitySpec, v: &Value) -> Result<()> {
    match (spec.task_kind, v) {
        (TaskKind::Classification, Value::Class(i)) if *i < spec.classes.len() => Ok(()),
        (TaskKind::Classification, Value::Class(i)) => Err(Error::Schema(format!(
            "{}: class index {i} outside {} classes",
            spec.name,
            spec.classes.len()
        ))),
        (k, Value::Scalar(x)) if k.is_regression() && x.is_finite() => Ok(()),
        _ => Err(Error::Schema(format!("{}: value {v:?} does not match {:?}", spec.name, spec.task_kind))),
    }
}

/// Shared-ownership handle to frozen model values, for read-only inference from many threads.
pub type SharedModel = Arc<Model>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::HashEmbedding;

    fn micro(reg: Registry) -> Model {
        Model::new(Preset::Micro.config(), reg, &HashEmbedding).unwrap()
    }

    fn obs(m: ModalityId, v: Value, n: usize) -> ObservationBatch {
        ObservationBatch {
            modality: m,
            points: (0..n).map(|i| GeoPoint::surface(10.0 * i as f64 - 20.0, 17.0 * i as f64)).collect(),
            values: vec![v; n],
        }
    }

    #[test]
    fn token_widths_at_half_degree() {
        let mut cfg = Preset::Micro.config();
        cfg.pos_enc = crate::geo::nyquist_bands(0.5).unwrap();
        let reg = Registry::default_earth();
        let model = Model::new(cfg, reg.clone(), &HashEmbedding).unwrap();
        let stress = reg.id("stress angle").unwrap();
        let p = GeoPoint::surface(1.0, 2.0);
        assert_eq!(model.token_input(&[0.5], &p, stress).unwrap().len(), 154);
        let plates = reg.iter().position(|m| m.classes.len() == 52).unwrap();
        let mut onehot = vec![0.0; 52];
        onehot[3] = 1.0;
        assert_eq!(model.token_input(&onehot, &p, plates).unwrap().len(), 205);
        assert_eq!(model.build_token(&onehot, &p, plates).unwrap().len(), 32);
        assert!(matches!(model.token_input(&[0.5, 0.5], &p, stress), Err(Error::Schema(_))));
        assert_eq!(model.query_input(&p, 0).unwrap().len(), 290);
        assert_eq!(model.output_width(), 106);
    }

    #[test]
    fn analytic_count_matches_instantiated_store() {
        for reg in [Registry::synthetic(), Registry::default_earth()] {
            for ln in [true, false] {
                let mut cfg = Preset::Micro.config();
                cfg.layer_norm = ln;
                let model = Model::new(cfg.clone(), reg.clone(), &HashEmbedding).unwrap();
                assert_eq!(model.params().scalar_count(), parameter_count(&cfg, &reg));
                let analytic: Vec<(String, usize)> = parameter_breakdown(&cfg, &reg)
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect();
                assert_eq!(model.parameter_breakdown(), analytic);
            }
        }
    }

    #[test]
    fn fusion_lengths_and_null_token() {
        let model = micro(Registry::synthetic());
        let tape = Tape::new();
        let b = model.bind(&tape);
        let seq = b.fuse(&[obs(0, Value::Scalar(0.2), 3), obs(3, Value::Class(1), 5)]).unwrap();
        assert_eq!(seq.n_tokens, 8);
        assert_eq!(seq.tokens.shape(), vec![8, 32]);
        let null = b.fuse(&[]).unwrap();
        assert!(null.is_null);
        assert_eq!(null.tokens.shape(), vec![1, 32]);
        assert!(null.tokens.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(b.encode(&seq).unwrap().shape(), vec![8, 32]);
        assert_eq!(b.encode(&null).unwrap().shape(), vec![8, 32]);
    }

    #[test]
    fn bad_values_are_schema_errors() {
        let model = micro(Registry::synthetic());
        let tape = Tape::new();
        let b = model.bind(&tape);
        assert!(matches!(b.tokens(&obs(3, Value::Class(9), 2)), Err(Error::Schema(_))));
        assert!(matches!(b.tokens(&obs(0, Value::Class(0), 2)), Err(Error::Schema(_))));
        assert!(matches!(b.form_queries(&[GeoPoint::surface(0.0, 0.0)], &[9]), Err(Error::Registry(_))));
    }

    #[test]
    fn task_changes_the_query() {
        let model = micro(Registry::synthetic());
        let p = GeoPoint::surface(5.0, 5.0);
        let tape = Tape::new();
        let b = model.bind(&tape);
        let q = b.form_queries(&[p, p], &[0, 1]).unwrap().value();
        assert_eq!(q.shape(), &[2, 32]);
        assert!(q.row(0).iter().zip(q.row(1)).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn chunked_decoding_matches_single_pass() {
        let model = micro(Registry::synthetic());
        let o = [obs(1, Value::Scalar(0.4), 4)];
        let n = INFERENCE_CHUNK + 3;
        let points: Vec<GeoPoint> = (0..n).map(|i| GeoPoint::surface((i % 170) as f64 - 85.0, (i % 350) as f64 - 175.0)).collect();
        let tasks: Vec<ModalityId> = (0..n).map(|i| i % 4).collect();
        let chunked = model.predict(&o, &points, &tasks).unwrap();
        let tape = Tape::new();
        let full = model.bind(&tape).forward(&o, &points, &tasks).unwrap().value();
        assert_eq!(chunked.shape(), &[n, 7]);
        assert!(chunked.max_abs_diff(&full) <= 1e-12);
    }
}
