//! Reference-free DPO over action workflows.
//!
//! A workflow's log-likelihood under the head is
//! `sum_t log softmax(head(H_t))[a_t]`, where `H_t` is the hidden sequence
//! the decoder had before step `t`. Snapshots are not stored in preference
//! files; they are regenerated by replaying each workflow through the
//! simulator and checked against the recorded tokens.

use serde::{Deserialize, Serialize};

use crate::cd::{run_workflow, CdConfig, DecodeResult};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::head::{
    central, check_coordinates, rounding_floor, head_backward_into, head_forward, lift, logits_after_change, precise_log_softmax, precise_softplus,
    ForwardTrace, HeadParams, PreciseHead, Prepared,
};
pub use crate::head::{relative_error, GradCheckReport};

type Dd = qd::Quad;
use crate::optim::{adam_step, AdamState};
use crate::preference::{PairSide, PreferencePair, PreferenceSet};
use crate::rng::RngState;
use crate::sim::SimModel;
use crate::tensor::{log_softmax, sigmoid, softmax_in_place, softplus, Matrix};
use crate::world::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            lr: 1e-3,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            clip_norm: 5.0,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

/// `-log sigmoid(beta (logp_pos - logp_neg))` in softplus form.
pub fn dpo_loss(logp_pos: f64, logp_neg: f64, beta: f64) -> f64 {
    softplus(-beta * (logp_pos - logp_neg))
}

/// Derivative of [`dpo_loss`] with respect to `logp_pos` (the derivative
/// with respect to `logp_neg` is its negation).
pub fn dpo_loss_grad(logp_pos: f64, logp_neg: f64, beta: f64) -> f64 {
    -beta * sigmoid(-beta * (logp_pos - logp_neg))
}

/// A pair side regenerated by replay, ready for the head.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayedSide {
    pub decode: DecodeResult,
}

impl ReplayedSide {
    pub fn steps(&self) -> usize {
        self.decode.actions.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayedPair {
    pub sample_id: u64,
    pub pos: ReplayedSide,
    pub neg: ReplayedSide,
}

/// Re-decodes one stored side and checks the tokens match.
pub fn replay_side(model: &SimModel, dataset: &Dataset, sample_id: u64, side: &PairSide, cd: &CdConfig) -> Result<ReplayedSide> {
    let sample = dataset
        .get(sample_id)
        .ok_or_else(|| Error::DataIntegrity(format!("sample {sample_id} is not in the dataset")))?;
    let decode = run_workflow(model, sample, &side.workflow(), cd)
        .map_err(|e| Error::DataIntegrity(format!("sample {sample_id}: replay failed: {e}")))?;
    if decode.generated != side.tokens || decode.actions != side.actions {
        return Err(Error::DataIntegrity(format!(
            "sample {sample_id}: replayed tokens differ from the stored response"
        )));
    }
    Ok(ReplayedSide { decode })
}

pub fn replay_pair(model: &SimModel, dataset: &Dataset, pair: &PreferencePair, cd: &CdConfig) -> Result<ReplayedPair> {
    Ok(ReplayedPair {
        sample_id: pair.sample_id,
        pos: replay_side(model, dataset, pair.sample_id, &pair.pos, cd)?,
        neg: replay_side(model, dataset, pair.sample_id, &pair.neg, cd)?,
    })
}

/// Checks provenance, then replays every pair in file order.
pub fn replay_all(
    model: &SimModel,
    dataset: &Dataset,
    prefs: &PreferenceSet,
    cd: &CdConfig,
    exec: Execution,
) -> Result<Vec<ReplayedPair>> {
    check_provenance(model, dataset, prefs)?;
    exec.map(&prefs.pairs, |p| replay_pair(model, dataset, p, cd))
        .into_iter()
        .collect()
}

pub fn check_provenance(model: &SimModel, dataset: &Dataset, prefs: &PreferenceSet) -> Result<()> {
    let p = &prefs.provenance;
    if p.model_fingerprint != model.fingerprint() {
        return Err(Error::DataIntegrity(format!(
            "preference file was built for model {} but the model is {}",
            p.model_fingerprint,
            model.fingerprint()
        )));
    }
    let df = dataset.fingerprint();
    if p.dataset_fingerprint != df {
        return Err(Error::DataIntegrity(format!(
            "preference file was built from dataset {} but the dataset is {df}",
            p.dataset_fingerprint
        )));
    }
    Ok(())
}

struct SideEval {
    logp: f64,
    traces: Vec<(ForwardTrace, Vec<f64>)>,
}

fn eval_side(head: &HeadParams, side: &ReplayedSide, keep: bool) -> Result<SideEval> {
    let d = &side.decode;
    let mut logp = 0.0;
    let mut traces = Vec::new();
    for (t, a) in d.actions.iter().enumerate() {
        let (logits, trace) = head_forward(head, &d.snapshot(t))?;
        let mut probs = logits;
        softmax_in_place(&mut probs);
        logp += probs[a.index()].ln();
        if keep {
            traces.push((trace, probs));
        }
    }
    Ok(SideEval { logp, traces })
}

/// `sum_t log softmax(head(H_t))[a_t]`.
pub fn workflow_logprob(head: &HeadParams, side: &ReplayedSide) -> Result<f64> {
    Ok(eval_side(head, side, false)?.logp)
}

fn backward_side(head: &HeadParams, side: &ReplayedSide, eval: &SideEval, coef: f64, grad: &mut [f64]) -> Result<()> {
    let k = head.config().k;
    for ((trace, probs), a) in eval.traces.iter().zip(&side.decode.actions) {
        // d log p_a / d logits = onehot(a) - p.
        let d: Vec<f64> = (0..k)
            .map(|i| coef * (f64::from(u8::from(i == a.index())) - probs[i]))
            .collect();
        head_backward_into(head, trace, &d, grad)?;
    }
    Ok(())
}

/// Loss and gradient of one pair; the gradient is accumulated into `grad`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEval {
    pub loss: f64,
    pub logp_pos: f64,
    pub logp_neg: f64,
}

pub fn pair_loss_and_grad(head: &HeadParams, pair: &ReplayedPair, beta: f64, grad: &mut [f64]) -> Result<PairEval> {
    let pos = eval_side(head, &pair.pos, true)?;
    let neg = eval_side(head, &pair.neg, true)?;
    let g = dpo_loss_grad(pos.logp, neg.logp, beta);
    // Each side's gradient separately so identical sides cancel exactly.
    let mut gp = vec![0.0; head.len()];
    let mut gn = vec![0.0; head.len()];
    backward_side(head, &pair.pos, &pos, 1.0, &mut gp)?;
    backward_side(head, &pair.neg, &neg, 1.0, &mut gn)?;
    for ((acc, p), n) in grad.iter_mut().zip(&gp).zip(&gn) {
        *acc += g * (p - n);
    }
    Ok(PairEval {
        loss: dpo_loss(pos.logp, neg.logp, beta),
        logp_pos: pos.logp,
        logp_neg: neg.logp,
    })
}

pub fn pair_loss(head: &HeadParams, pair: &ReplayedPair, beta: f64) -> Result<f64> {
    Ok(dpo_loss(
        workflow_logprob(head, &pair.pos)?,
        workflow_logprob(head, &pair.neg)?,
        beta,
    ))
}

/// Distinct head inputs of a pair. Steps where both sides saw the same
/// snapshot are evaluated once.
struct PairInputs {
    /// `(snapshot, action index on the A+ side, on the A- side)`.
    steps: Vec<(Matrix, Option<usize>, Option<usize>)>,
}

impl PairInputs {
    fn new(pair: &ReplayedPair) -> Self {
        let (p, n) = (&pair.pos.decode, &pair.neg.decode);
        let mut steps = Vec::new();
        for t in 0..p.actions.len().max(n.actions.len()) {
            let sp = (t < p.actions.len()).then(|| p.snapshot(t));
            let sn = (t < n.actions.len()).then(|| n.snapshot(t));
            let ap = p.actions.get(t).map(|a| a.index());
            let an = n.actions.get(t).map(|a| a.index());
            match (sp, sn) {
                (Some(x), Some(y)) if x == y => steps.push((x, ap, an)),
                (x, y) => {
                    steps.extend(x.map(|x| (x, ap, None)));
                    steps.extend(y.map(|y| (y, None, an)));
                }
            }
        }
        PairInputs { steps }
    }

    fn traces(&self, head: &HeadParams) -> Result<Vec<ForwardTrace>> {
        self.steps.iter().map(|(snap, _, _)| head_forward(head, snap).map(|(_, t)| t)).collect()
    }

    /// Loss when `probe` differs from the traced head only at coordinate `i`.
    fn loss_after_change(&self, probe: &HeadParams, traces: &[ForwardTrace], i: usize, beta: f64) -> Result<f64> {
        let (mut lp, mut ln) = (0.0, 0.0);
        for ((snap, ap, an), trace) in self.steps.iter().zip(traces) {
            let logits = logits_after_change(probe, trace, snap, i)?;
            let ls = log_softmax(&logits)?;
            lp += ap.map_or(0.0, |a| ls[a]);
            ln += an.map_or(0.0, |a| ls[a]);
        }
        Ok(dpo_loss(lp, ln, beta))
    }
}

fn precise_pair_loss(
    ph: &PreciseHead,
    inputs: &PairInputs,
    prepared: &[Prepared],
    i: usize,
    beta: f64,
) -> Dd {
    let (mut lp, mut ln) = (Dd::from_f64(0.0), Dd::from_f64(0.0));
    for ((_, ap, an), prep) in inputs.steps.iter().zip(prepared) {
        let ls = precise_log_softmax(&ph.logits_from(prep, i));
        if let Some(a) = ap {
            lp += ls[*a];
        }
        if let Some(a) = an {
            ln += ls[*a];
        }
    }
    precise_softplus(-((lp - ln) * Dd::from_f64(beta)))
}

/// Central differences (step `h`) of the pair loss against the analytic
/// gradient, over every parameter coordinate. See [`GradCheckReport`] for how
/// differences near the f64 rounding floor are handled.
pub fn grad_check(head: &HeadParams, pair: &ReplayedPair, beta: f64, h: f64) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut grad = vec![0.0; head.len()];
    let eval = pair_loss_and_grad(head, pair, beta, &mut grad)?;
    let inputs = PairInputs::new(pair);
    let traces = inputs.traces(head)?;
    let mut probe = head.clone();
    let coarse = |i: usize| -> Result<f64> {
        let orig = head.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = inputs.loss_after_change(&probe, &traces, i, beta)?;
        probe.values_mut()[i] = orig - h;
        let down = inputs.loss_after_change(&probe, &traces, i, beta)?;
        probe.values_mut()[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    let mut ph = PreciseHead::new(head);
    let mut prepared: Option<Vec<Prepared>> = None;
    let precise = |i: usize| -> Result<f64> {
        let prepared = prepared.get_or_insert_with(|| {
            inputs
                .steps
                .iter()
                .map(|(snap, _, _)| ph.prepare(&lift(snap), snap.rows()))
                .collect()
        });
        ph.shift(i, h);
        let up = precise_pair_loss(&ph, &inputs, prepared, i, beta);
        ph.shift(i, -h);
        let down = precise_pair_loss(&ph, &inputs, prepared, i, beta);
        ph.reset(i);
        Ok(central(up, down, h))
    };
    let scale = beta * (eval.logp_pos.abs() + eval.logp_neg.abs());
    check_coordinates(&grad, rounding_floor(scale, h), coarse, precise)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Per epoch: share of pairs with `logp(A+) > logp(A-)` as seen during the epoch.
    pub preference_accuracy: Vec<f64>,
    /// Pre-clip global gradient norm per step.
    pub grad_norms: Vec<f64>,
    pub pairs: usize,
    pub steps: usize,
}

/// Order of pair indices for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    RngState::keyed(seed, "dpo-shuffle", &[epoch as u64]).shuffle(&mut idx);
    idx
}

/// Mini-batch Adam on the mean pair loss. Only `head` changes.
pub fn train_replayed(head: &mut HeadParams, pairs: &[ReplayedPair], cfg: &TrainConfig) -> Result<LossReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no preference pairs to train on"));
    }
    let mut adam = AdamState::new(head.len(), cfg.lr);
    adam.beta1 = 0.9;
    adam.beta2 = 0.999;
    adam.eps = 1e-8;
    let mut report = LossReport {
        pairs: pairs.len(),
        ..LossReport::default()
    };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(pairs.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &HeadParams = head;
            let results = cfg.exec.map(batch, |&i| {
                let mut g = vec![0.0; frozen.len()];
                pair_loss_and_grad(frozen, &pairs[i], cfg.beta, &mut g).map(|e| (e, g))
            });
            let mut grad = vec![0.0; head.len()];
            let mut loss = 0.0;
            for r in results {
                let (e, g) = r?;
                loss += e.loss;
                correct += usize::from(e.logp_pos > e.logp_neg);
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            for v in &mut grad {
                *v *= scale;
            }
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let c = cfg.clip_norm / norm;
                for v in &mut grad {
                    *v *= c;
                }
            }
            adam_step(head.values_mut(), &grad, &mut adam)?;
            if !loss.is_finite() {
                return Err(Error::InvalidState(format!("loss became non-finite in epoch {epoch}")));
            }
            report.step_losses.push(loss);
            report.grad_norms.push(norm);
            epoch_loss += loss * batch.len() as f64;
        }
        report.epoch_losses.push(epoch_loss / pairs.len() as f64);
        report.preference_accuracy.push(correct as f64 / pairs.len() as f64);
    }
    report.steps = report.step_losses.len();
    Ok(report)
}

/// Verifies provenance, replays every pair, then trains.
pub fn train(
    head: &mut HeadParams,
    prefs: &PreferenceSet,
    dataset: &Dataset,
    model: &SimModel,
    cd: &CdConfig,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if prefs.is_empty() {
        return Err(Error::invalid("no preference pairs to train on"));
    }
    let replayed = replay_all(model, dataset, prefs, cd, cfg.exec)?;
    train_replayed(head, &replayed, cfg)
}
