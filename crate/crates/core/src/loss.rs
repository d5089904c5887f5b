//! Per-modality losses over the shared output head and their weighted aggregate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::modality::{ModalityId, ModalitySpec, Registry, TaskKind, Value};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on each angular term (C1).
    pub angular: f64,
    /// Weight on depth-varying scalar terms such as mantle temperature (C2).
    pub depth_scalar: f64,
    pub other: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            angular: 20.0,
            depth_scalar: 10.0,
            other: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.angular, self.depth_scalar, self.other].iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be positive: {self:?}")))
        }
    }

    pub fn weight(&self, spec: &ModalitySpec) -> f64 {
        match spec.task_kind {
            TaskKind::AngularRegression => self.angular,
            TaskKind::ScalarRegression if spec.depth_varying => self.depth_scalar,
            _ => self.other,
        }
    }
}

/// How per-modality terms combine into the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean within each modality, then the average of weighted means over present modalities.
    #[default]
    PerModality,
    /// Weighted per-query terms summed and divided by the total query count.
    PerQuery,
}

/// Column ranges of the shared head, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayout {
    slices: Vec<(ModalityId, usize, usize)>,
}

impl OutputLayout {
    pub fn new(registry: &Registry) -> Self {
        let mut offset = 0;
        let slices = registry
            .iter()
            .enumerate()
            .map(|(id, spec)| {
                let w = spec.feature_width();
                let s = (id, offset, w);
                offset += w;
                s
            })
            .collect();
        Self { slices }
    }

    pub fn width(&self) -> usize {
        self.slices.last().map_or(0, |&(_, o, w)| o + w)
    }

    pub fn slices(&self) -> &[(ModalityId, usize, usize)] {
        &self.slices
    }

    /// `(offset, width)` of a modality's slice.
    pub fn slice(&self, m: ModalityId) -> Result<(usize, usize)> {
        self.slices
            .get(m)
            .map(|&(_, o, w)| (o, w))
            .ok_or_else(|| Error::Routing(format!("task id {m} has no output slice")))
    }
}

/// Predictions routed to one modality.
#[derive(Debug, Clone)]
pub struct SliceGroup<T> {
    pub modality: ModalityId,
    /// Query rows, in input order.
    pub rows: Vec<usize>,
    /// `[rows × slice width]`.
    pub pred: T,
}

fn group_rows(task_ids: &[ModalityId], layout: &OutputLayout) -> Result<Vec<(ModalityId, Vec<usize>)>> {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); layout.slices.len()];
    for (r, &t) in task_ids.iter().enumerate() {
        layout.slice(t)?;
        rows[t].push(r);
    }
    Ok(rows.into_iter().enumerate().filter(|(_, r)| !r.is_empty()).collect())
}

/// Splits `pred [n × out_dim]` into per-modality slices; each row keeps only its own task's columns.
pub fn slice_by_mod(pred: &Tensor, task_ids: &[ModalityId], layout: &OutputLayout) -> Result<Vec<SliceGroup<Tensor>>> {
    check_head(pred.shape(), task_ids.len(), layout)?;
    group_rows(task_ids, layout)?
        .into_iter()
        .map(|(m, rows)| {
            let (o, w) = layout.slice(m)?;
            let data = rows.iter().flat_map(|&r| pred.row(r)[o..o + w].iter().copied()).collect();
            Ok(SliceGroup {
                modality: m,
                pred: Tensor::new(vec![rows.len(), w], data)?,
                rows,
            })
        })
        .collect()
}

/// Differentiable counterpart of [`slice_by_mod`].
pub fn slice_by_mod_var<'t>(pred: Var<'t>, task_ids: &[ModalityId], layout: &OutputLayout) -> Result<Vec<SliceGroup<Var<'t>>>> {
    check_head(&pred.shape(), task_ids.len(), layout)?;
    group_rows(task_ids, layout)?
        .into_iter()
        .map(|(m, rows)| {
            let (o, w) = layout.slice(m)?;
            let picked = pred.gather_rows(&rows)?.slice(1, o, w)?;
            Ok(SliceGroup {
                modality: m,
                pred: picked,
                rows,
            })
        })
        .collect()
}

fn check_head(shape: &[usize], n: usize, layout: &OutputLayout) -> Result<()> {
    if shape.len() != 2 || shape[0] != n || shape[1] != layout.width() {
        return Err(Error::Routing(format!(
            "head output {shape:?} does not match {n} queries of width {}",
            layout.width()
        )));
    }
    Ok(())
}

fn check_period(r: f64) -> Result<()> {
    if r == 180.0 || r == 360.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("angular period must be 180 or 360, got {r}")))
    }
}

/// Wrapped squared angular error in degrees, normalized to `[0, 1]`.
pub fn angular_loss(pred_deg: &[f64], true_deg: &[f64], r: f64) -> Result<f64> {
    check_period(r)?;
    check_pair(pred_deg.len(), true_deg.len())?;
    let half = r / 2.0;
    let s: f64 = pred_deg
        .iter()
        .zip(true_deg)
        .map(|(p, t)| {
            let d = ((p - t + half).rem_euclid(r) - half) / half;
            d * d
        })
        .sum();
    Ok(s / pred_deg.len() as f64)
}

pub fn angular_loss_var<'t>(tape: &'t Tape, pred_deg: Var<'t>, true_deg: &[f64], r: f64) -> Result<Var<'t>> {
    check_period(r)?;
    let t = column(tape, true_deg, &pred_deg)?;
    let d = pred_deg.sub(t)?.wrap(r).scale(2.0 / r);
    Ok(d.mul(d)?.mean())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred.len(), target.len())?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mse_var<'t>(tape: &'t Tape, pred: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    let t = column(tape, target, &pred)?;
    let d = pred.sub(t)?;
    Ok(d.mul(d)?.mean())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred.len(), target.len())?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean negative log-probability of the true classes; `logits` is `[n × classes]`.
pub fn cross_entropy(logits: &Tensor, class_index: &[usize]) -> Result<f64> {
    check_classes(logits.shape(), class_index)?;
    let mut total = 0.0;
    for (r, &c) in class_index.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[c];
    }
    Ok(total / class_index.len() as f64)
}

pub fn cross_entropy_var<'t>(logits: Var<'t>, class_index: &[usize]) -> Result<Var<'t>> {
    check_classes(&logits.shape(), class_index)?;
    Ok(logits.log_softmax(1)?.pick(class_index)?.mean().scale(-1.0))
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Contract(format!("loss inputs need equal, non-zero lengths ({a} vs {b})")));
    }
    Ok(())
}

fn check_classes(shape: &[usize], idx: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] != idx.len() || idx.is_empty() {
        return Err(Error::Contract(format!("logits {shape:?} do not match {} labels", idx.len())));
    }
    if let Some(bad) = idx.iter().find(|&&c| c >= shape[1]) {
        return Err(Error::Domain(format!("class index {bad} outside {} classes", shape[1])));
    }
    Ok(())
}

fn column<'t>(tape: &'t Tape, values: &[f64], like: &Var<'t>) -> Result<Var<'t>> {
    let shape = like.shape();
    if shape.iter().product::<usize>() != values.len() {
        return Err(Error::Contract(format!("{} targets for predictions of shape {shape:?}", values.len())));
    }
    Ok(tape.constant(Tensor::new(shape, values.to_vec())?))
}

/// One modality's contribution to a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityLoss {
    pub modality: ModalityId,
    pub n_queries: usize,
    pub weight: f64,
    /// Mean over this modality's queries.
    pub loss: f64,
}

/// Combines per-modality means; modalities without queries must be omitted.
pub fn total_loss(terms: &[ModalityLoss], agg: Aggregation) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::Contract("no modality contributed to the loss".into()));
    }
    Ok(match agg {
        Aggregation::PerModality => terms.iter().map(|t| t.weight * t.loss).sum::<f64>() / terms.len() as f64,
        Aggregation::PerQuery => {
            let n: usize = terms.iter().map(|t| t.n_queries).sum();
            terms.iter().map(|t| t.weight * t.n_queries as f64 * t.loss).sum::<f64>() / n as f64
        }
    })
}

fn scalar_targets(spec: &ModalitySpec, targets: &[Value]) -> Result<Vec<f64>> {
    targets
        .iter()
        .map(|v| match v {
            Value::Scalar(x) => Ok(*x),
            Value::Class(_) => Err(Error::Schema(format!("{} expects scalar targets", spec.name))),
        })
        .collect()
}

fn class_targets(spec: &ModalitySpec, targets: &[Value]) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|v| match v {
            Value::Class(c) => Ok(*c),
            Value::Scalar(_) => Err(Error::Schema(format!("{} expects class targets", spec.name))),
        })
        .collect()
}

/// Loss of one routed slice against its targets, on the tape.
pub fn modality_loss_var<'t>(tape: &'t Tape, spec: &ModalitySpec, pred: Var<'t>, targets: &[Value]) -> Result<Var<'t>> {
    match spec.task_kind {
        TaskKind::AngularRegression => {
            let r = spec.angular_period.unwrap_or(180.0);
            let s = spec.scale();
            let deg: Vec<f64> = scalar_targets(spec, targets)?.iter().map(|t| t * s).collect();
            angular_loss_var(tape, pred.scale(s), &deg, r)
        }
        TaskKind::ScalarRegression => mse_var(tape, pred, &scalar_targets(spec, targets)?),
        TaskKind::Classification => cross_entropy_var(pred, &class_targets(spec, targets)?),
    }
}

/// Routes head outputs to their modalities and builds the weighted training objective.
pub fn training_loss<'t>(
    tape: &'t Tape,
    pred: Var<'t>,
    task_ids: &[ModalityId],
    targets: &[Value],
    registry: &Registry,
    weights: &LossWeights,
    agg: Aggregation,
) -> Result<(Var<'t>, Vec<ModalityLoss>)> {
    if targets.len() != task_ids.len() {
        return Err(Error::Contract("targets and task ids differ in length".into()));
    }
    let layout = OutputLayout::new(registry);
    let groups = slice_by_mod_var(pred, task_ids, &layout)?;
    if groups.is_empty() {
        return Err(Error::Contract("no modality contributed to the loss".into()));
    }
    let n_total: usize = groups.iter().map(|g| g.rows.len()).sum();
    let mut terms = Vec::with_capacity(groups.len());
    let mut weighted = Vec::with_capacity(groups.len());
    for g in groups {
        let spec = registry.get(g.modality)?;
        let t: Vec<Value> = g.rows.iter().map(|&r| targets[r]).collect();
        let l = modality_loss_var(tape, spec, g.pred, &t)?;
        let w = weights.weight(spec);
        let factor = match agg {
            Aggregation::PerModality => w,
            Aggregation::PerQuery => w * g.rows.len() as f64,
        };
        terms.push(ModalityLoss {
            modality: g.modality,
            n_queries: g.rows.len(),
            weight: w,
            loss: l.value().item()?,
        });
        weighted.push(l.scale(factor));
    }
    let denom = match agg {
        Aggregation::PerModality => terms.len() as f64,
        Aggregation::PerQuery => n_total as f64,
    };
    let sum = tape.concat(&weighted.iter().map(|v| v.reshape(&[1])).collect::<std::result::Result<Vec<_>, _>>()?, 0)?;
    Ok((sum.sum().scale(1.0 / denom), terms))
}
