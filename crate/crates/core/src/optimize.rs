//! Gradient descent on latent vectors against frozen predictors, with an
//! optional penalty holding chosen string positions near an anchor.

use std::collections::BTreeMap;

use limo_chem::selfies::decode as decode_selfies;
use limo_chem::{canonical_key, MolGraph, SelfiesString};
use limo_tensor::nn::Binder;
use limo_tensor::{Adam, Graph, Param, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LimoError, Result};
use crate::predictor::Predictor;
use crate::vae::{argmax_rows, sample_latents, Vae};

pub const DEFAULT_MASK_WEIGHT: f32 = 1000.0;

/// What a term wants from its predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goal {
    Maximize,
    Minimize,
    /// Penalize squared distance from a target value.
    Target(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct Term<'p> {
    pub predictor: &'p Predictor,
    pub weight: f64,
    pub goal: Goal,
}

#[derive(Debug, Clone)]
pub struct Objective<'p> {
    pub terms: Vec<Term<'p>>,
    pub steps: usize,
    pub lr: f32,
}

impl<'p> Objective<'p> {
    pub fn new(terms: Vec<Term<'p>>, steps: usize, lr: f32) -> Result<Self> {
        if terms.is_empty() {
            return Err(LimoError::InvalidInput(
                "objective needs at least one term".into(),
            ));
        }
        if terms.iter().any(|t| !t.weight.is_finite()) {
            return Err(LimoError::InvalidInput(
                "objective weights must be finite".into(),
            ));
        }
        Ok(Objective { terms, steps, lr })
    }

    pub fn single(predictor: &'p Predictor, goal: Goal, steps: usize, lr: f32) -> Self {
        Objective {
            terms: vec![Term {
                predictor,
                weight: 1.0,
                goal,
            }],
            steps,
            lr,
        }
    }
}

/// Penalty `λ Σ (M ⊙ (y − anchor))²` over the decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstructureMask {
    /// Fixed string positions, ascending.
    pub positions: Vec<usize>,
    /// `n·d` entries in {0, 1}.
    pub mask: Vec<f32>,
    /// Soft decoder output of the start molecule, `n·d` entries.
    pub anchor: Vec<f32>,
    pub weight: f32,
}

impl SubstructureMask {
    /// Argmax symbol ids of the anchor.
    pub fn anchor_ids(&self, d: usize) -> Vec<u8> {
        argmax_rows(&self.anchor, d)
    }

    /// Whether `s` carries the anchor's argmax symbol at every fixed position.
    pub fn retained_by(&self, s: &SelfiesString, d: usize) -> bool {
        let anchor = self.anchor_ids(d);
        self.positions.iter().all(|&i| s.ids()[i] == anchor[i])
    }
}

/// Anchor = decoder output at the encoder mean of `x_start`; the mask
/// covers every symbol at each fixed position.
pub fn build_mask(
    vae: &Vae,
    x_start: &SelfiesString,
    positions: &[usize],
    weight: f32,
) -> Result<SubstructureMask> {
    let (n, d) = (vae.dims().n, vae.dims().d);
    if let Some(&bad) = positions.iter().find(|&&i| i >= n) {
        return Err(LimoError::InvalidInput(format!(
            "fixed position {bad} is outside 0..{n}"
        )));
    }
    let (mu, _) = vae.encode(x_start)?;
    let anchor = vae.decode(&mu)?.probs().to_vec();
    let mut positions = positions.to_vec();
    positions.sort_unstable();
    positions.dedup();
    let mut mask = vec![0.0; n * d];
    for &i in &positions {
        mask[i * d..(i + 1) * d].fill(1.0);
    }
    Ok(SubstructureMask {
        positions,
        mask,
        anchor,
        weight,
    })
}

/// Host-side value of the mask penalty for one decoded row.
pub fn masked_loss(y: &[f32], mask: &SubstructureMask) -> Result<f64> {
    if y.len() != mask.mask.len() || y.len() != mask.anchor.len() {
        return Err(LimoError::InvalidInput(format!(
            "decoder output has {} entries, mask {}",
            y.len(),
            mask.mask.len()
        )));
    }
    let sum: f64 = y
        .iter()
        .zip(&mask.mask)
        .zip(&mask.anchor)
        .map(|((&y, &m), &a)| (f64::from(m) * (f64::from(y) - f64::from(a))).powi(2))
        .sum();
    Ok(f64::from(mask.weight) * sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub z: Vec<f32>,
    pub loss: f64,
    pub selfies: SelfiesString,
    /// One predicted value per objective term.
    pub predicted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Initialization followed by one entry per completed step.
    pub steps: Vec<TraceStep>,
    /// Index of the lowest loss, earliest on ties.
    pub best: usize,
    /// Step at which a non-finite loss stopped the run.
    pub aborted_at: Option<usize>,
}

impl Trace {
    pub fn best_step(&self) -> &TraceStep {
        &self.steps[self.best]
    }

    pub fn first(&self) -> &TraceStep {
        &self.steps[0]
    }

    pub fn last(&self) -> &TraceStep {
        self.steps.last().expect("trace holds the initialization")
    }
}

struct Evaluation {
    /// Per-row loss.
    losses: Vec<f64>,
    /// Per-row predicted values, one per term.
    predicted: Vec<Vec<f64>>,
    strings: Vec<Vec<u8>>,
    grad: Option<Tensor>,
}

const ROW_CHUNK: usize = 128;

/// Mask penalties for a block of rows.
#[derive(Clone, Copy)]
enum Masks<'m> {
    None,
    Shared(&'m SubstructureMask),
    PerRow(&'m [SubstructureMask]),
}

impl<'m> Masks<'m> {
    fn of(mask: Option<&'m SubstructureMask>) -> Self {
        mask.map_or(Masks::None, Masks::Shared)
    }

    fn rows(self, start: usize, end: usize) -> Self {
        match self {
            Masks::PerRow(all) => Masks::PerRow(&all[start..end]),
            other => other,
        }
    }

    fn get(self, r: usize) -> Option<&'m SubstructureMask> {
        match self {
            Masks::None => None,
            Masks::Shared(m) => Some(m),
            Masks::PerRow(all) => Some(&all[r]),
        }
    }
}

/// Loss, predictions, argmax strings and optionally `∂loss/∂z` for the rows of `z`.
fn evaluate(
    vae: &Vae,
    obj: &Objective,
    masks: Masks,
    z: &Tensor,
    want_grad: bool,
) -> Result<Evaluation> {
    let (n, d) = (vae.dims().n, vae.dims().d);
    let rows = z.rows();
    let mut g = Graph::new();
    let zv = if want_grad {
        g.variable(z.clone())
    } else {
        g.constant(z.clone())
    };
    let y = vae.decoder_probs(&mut g, &mut Binder::frozen(), zv)?;
    let mut parts: Vec<Var> = Vec::new();
    let mut predicted = vec![Vec::with_capacity(obj.terms.len()); rows];
    let mut losses = vec![0.0f64; rows];
    for term in &obj.terms {
        let p = term.predictor.forward(vae, &mut g, zv, Some(y))?;
        for (r, &v) in g.value(p).data().iter().enumerate() {
            let v = f64::from(v);
            predicted[r].push(v);
            losses[r] += term.weight
                * match term.goal {
                    Goal::Maximize => -v,
                    Goal::Minimize => v,
                    Goal::Target(mid) => (v - mid).powi(2),
                };
        }
        let w = term.weight as f32;
        let part = match term.goal {
            Goal::Maximize => g.scale(p, -w),
            Goal::Minimize => g.scale(p, w),
            Goal::Target(mid) => {
                let off = g.add_scalar(p, -(mid as f32));
                let sq = g.square(off);
                g.scale(sq, w)
            }
        };
        parts.push(g.sum(part));
    }
    if !matches!(masks, Masks::None) {
        // λ Σ (M ⊙ (y − a))² = Σ (λM) ⊙ (y − a)² since M is 0/1.
        let mut anchor = Vec::with_capacity(rows * n * d);
        let mut scale = Vec::with_capacity(rows * n * d);
        for r in 0..rows {
            let mask = masks.get(r).expect("mask for every row");
            anchor.extend_from_slice(&mask.anchor);
            scale.extend(mask.mask.iter().map(|&v| v * mask.weight));
        }
        let anchor = g.constant(Tensor::matrix(rows, n * d, anchor)?);
        let scale = g.constant(Tensor::matrix(rows, n * d, scale)?);
        let diff = g.sub(y, anchor)?;
        let sq = g.square(diff);
        let weighted = g.mul(sq, scale)?;
        parts.push(g.sum(weighted));
        for (r, row) in g.value(y).data().chunks(n * d).enumerate() {
            losses[r] += masked_loss(row, masks.get(r).expect("mask for every row"))?;
        }
    }
    let strings = g
        .value(y)
        .data()
        .chunks(n * d)
        .map(|row| argmax_rows(row, d))
        .collect();
    let grad = if want_grad {
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        g.backward(total)?;
        Some(g.take_grad(zv).unwrap_or_else(|| Tensor::zeros(z.shape())))
    } else {
        None
    };
    Ok(Evaluation {
        losses,
        predicted,
        strings,
        grad,
    })
}

/// `∂ℓ/∂z` at `z` (rows independent).
pub fn objective_gradient(
    vae: &Vae,
    obj: &Objective,
    mask: Option<&SubstructureMask>,
    z: &Tensor,
) -> Result<Tensor> {
    Ok(evaluate(vae, obj, Masks::of(mask), z, true)?
        .grad
        .expect("requested"))
}

fn check_latents(vae: &Vae, z0: &Tensor) -> Result<()> {
    if z0.shape().len() != 2 || z0.cols() != vae.dims().m {
        return Err(LimoError::InvalidInput(format!(
            "latent batch shape {:?}, m = {}",
            z0.shape(),
            vae.dims().m
        )));
    }
    Ok(())
}

fn optimize_chunk(vae: &Vae, obj: &Objective, masks: Masks, z0: Tensor) -> Result<Vec<Trace>> {
    let (rows, m) = (z0.rows(), z0.cols());
    let alphabet = vae.alphabet();
    let mut traces: Vec<Trace> = (0..rows)
        .map(|_| Trace {
            steps: Vec::with_capacity(obj.steps + 1),
            best: 0,
            aborted_at: None,
        })
        .collect();
    let mut z = Param::new(z0);
    let mut adam = Adam::new(obj.lr);
    for step in 0..=obj.steps {
        let want_grad = step < obj.steps;
        let eval = evaluate(vae, obj, masks, &z.value, want_grad)?;
        let mut alive = false;
        for (r, trace) in traces.iter_mut().enumerate() {
            if trace.aborted_at.is_some() {
                continue;
            }
            let loss = eval.losses[r];
            let zr = z.value.row(r);
            if !loss.is_finite() || zr.iter().any(|v| !v.is_finite()) {
                trace.aborted_at = Some(step);
                continue;
            }
            alive = true;
            if loss
                < trace
                    .steps
                    .get(trace.best)
                    .map_or(f64::INFINITY, |s| s.loss)
            {
                trace.best = trace.steps.len();
            }
            trace.steps.push(TraceStep {
                z: zr.to_vec(),
                loss,
                selfies: SelfiesString::from_ids(eval.strings[r].clone(), alphabet)?,
                predicted: eval.predicted[r].clone(),
            });
        }
        if !alive || !want_grad {
            break;
        }
        let mut grad = eval.grad.expect("requested");
        for (r, trace) in traces.iter().enumerate() {
            if trace.aborted_at.is_some() {
                grad.data_mut()[r * m..(r + 1) * m].fill(0.0);
            }
        }
        z.grad = Some(grad);
        adam.step(&mut [&mut z])?;
    }
    for trace in &traces {
        if trace.steps.is_empty() {
            return Err(LimoError::NonFinite("objective at initialization"));
        }
    }
    Ok(traces)
}

fn optimize_rows(vae: &Vae, obj: &Objective, masks: Masks, z0: &Tensor) -> Result<Vec<Trace>> {
    check_latents(vae, z0)?;
    let mut out = Vec::with_capacity(z0.rows());
    for start in (0..z0.rows()).step_by(ROW_CHUNK) {
        let end = (start + ROW_CHUNK).min(z0.rows());
        out.extend(optimize_chunk(
            vae,
            obj,
            masks.rows(start, end),
            z0.slice_rows(start, end),
        )?);
    }
    Ok(out)
}

/// Runs Adam on every row of `z0` independently; one trace per row.
pub fn reverse_optimize_batch(
    vae: &Vae,
    obj: &Objective,
    mask: Option<&SubstructureMask>,
    z0: &Tensor,
) -> Result<Vec<Trace>> {
    optimize_rows(vae, obj, Masks::of(mask), z0)
}

/// Like [`reverse_optimize_batch`] with row `i` held by `masks[i]`.
pub fn reverse_optimize_masked(
    vae: &Vae,
    obj: &Objective,
    masks: &[SubstructureMask],
    z0: &Tensor,
) -> Result<Vec<Trace>> {
    if masks.len() != z0.rows() {
        return Err(LimoError::InvalidInput(format!(
            "{} masks for {} latent rows",
            masks.len(),
            z0.rows()
        )));
    }
    optimize_rows(vae, obj, Masks::PerRow(masks), z0)
}

pub fn reverse_optimize(
    vae: &Vae,
    obj: &Objective,
    mask: Option<&SubstructureMask>,
    z0: &[f32],
) -> Result<Trace> {
    let z = Tensor::matrix(1, z0.len(), z0.to_vec())?;
    Ok(reverse_optimize_batch(vae, obj, mask, &z)?.remove(0))
}

/// Best trace entry of one restart, decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub key: String,
    pub graph: MolGraph,
    pub selfies: SelfiesString,
    pub loss: f64,
    pub predicted: Vec<f64>,
    pub restart: usize,
}

/// Independent restarts from `N(0, I)` draws. Best-of-trace molecules are
/// deduplicated by canonical key (lowest loss kept) and sorted by loss, then key.
pub fn multi_start(
    vae: &Vae,
    obj: &Objective,
    mask: Option<&SubstructureMask>,
    restarts: usize,
    seed: u64,
) -> Result<(Vec<Candidate>, Vec<Trace>)> {
    let z0 = sample_latents(restarts, vae.dims().m, seed);
    let traces = reverse_optimize_batch(vae, obj, mask, &z0)?;
    let mut by_key: BTreeMap<String, Candidate> = BTreeMap::new();
    for (restart, trace) in traces.iter().enumerate() {
        let best = trace.best_step();
        let graph = decode_selfies(&best.selfies, vae.alphabet());
        let key = canonical_key(&graph);
        let candidate = Candidate {
            key: key.clone(),
            graph,
            selfies: best.selfies.clone(),
            loss: best.loss,
            predicted: best.predicted.clone(),
            restart,
        };
        match by_key.get(&key) {
            Some(existing) if existing.loss <= candidate.loss => {}
            _ => {
                by_key.insert(key, candidate);
            }
        }
    }
    let mut out: Vec<Candidate> = by_key.into_values().collect();
    out.sort_by(|a, b| a.loss.total_cmp(&b.loss).then_with(|| a.key.cmp(&b.key)));
    Ok((out, traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_loss_examples() {
        let mask = SubstructureMask {
            positions: vec![0],
            mask: vec![1.0, 0.0, 0.0, 0.0],
            anchor: vec![0.5, 0.5, 0.2, 0.8],
            weight: 1000.0,
        };
        assert!((masked_loss(&[0.6, 0.9, 0.9, 0.1], &mask).unwrap() - 10.0).abs() < 1e-4);
        assert_eq!(masked_loss(&mask.anchor.clone(), &mask).unwrap(), 0.0);
        let empty = SubstructureMask {
            mask: vec![0.0; 4],
            positions: vec![],
            ..mask.clone()
        };
        assert_eq!(masked_loss(&[0.0, 1.0, 0.0, 1.0], &empty).unwrap(), 0.0);
        assert!(masked_loss(&[0.0; 3], &mask).is_err());
    }
}
