//! Preference data for training the head: random-workflow rollouts scored by
//! a hallucination criterion (describe samples) or per-action answer
//! confidence (exists samples), reduced to one best-versus-worst pair each.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cd::{decode_step, decode_with, Action, CdConfig, DecodeResult, Workflow};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::ResponseStats;
use crate::rng::RngState;
use crate::sim::SimModel;
use crate::world::{Answer, CooccurrencePrior, Dataset, Sample, Scene, Task, Token};

pub const DEFAULT_ROLLOUTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Hallucinated share of mentions; lower is better.
    Chair,
    /// Share of scene objects mentioned; higher is better.
    Cover,
    /// Mean of cover and `1 - chair`; higher is better.
    Average,
    /// Signed answer confidence (exists pairs only); higher is better.
    Confidence,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Chair => "chair",
            Criterion::Cover => "cover",
            Criterion::Average => "average",
            Criterion::Confidence => "confidence",
        }
    }

    pub fn lower_is_better(self) -> bool {
        matches!(self, Criterion::Chair)
    }

    /// True when score `a` is strictly preferred to score `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.lower_is_better() {
            a < b
        } else {
            a > b
        }
    }

    /// Scalar score of one response under a generative criterion.
    pub fn score(self, stats: &ResponseStats) -> Result<f64> {
        match self {
            Criterion::Chair => Ok(stats.chair()),
            Criterion::Cover => Ok(stats.cover()),
            Criterion::Average => Ok((stats.cover() + 1.0 - stats.chair()) / 2.0),
            Criterion::Confidence => Err(Error::invalid(
                "the confidence criterion only scores exists answers",
            )),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chair" => Ok(Criterion::Chair),
            "cover" => Ok(Criterion::Cover),
            "average" => Ok(Criterion::Average),
            other => Err(Error::invalid(format!(
                "unknown criterion `{other}` (expected chair, cover or average)"
            ))),
        }
    }
}

/// One random-workflow decode of a describe sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub sample_id: u64,
    pub decode: DecodeResult,
    pub stats: ResponseStats,
}

impl Rollout {
    pub fn workflow(&self) -> Workflow {
        self.decode.workflow()
    }
}

/// Per-sample random stream for rollouts.
pub fn rollout_rng(seed: u64, sample_id: u64) -> RngState {
    RngState::keyed(seed, "rollout", &[sample_id])
}

/// `count` decodes, each drawing every step's action uniformly.
pub fn sample_rollouts(
    model: &SimModel,
    sample: &Sample,
    count: usize,
    rng: &mut RngState,
    cfg: &CdConfig,
) -> Result<Vec<Rollout>> {
    if count < 2 {
        return Err(Error::invalid("at least two rollouts are needed per sample"));
    }
    (0..count)
        .map(|_| {
            let decode = decode_with(model, sample, cfg, |_, _| {
                Ok(Action::ALL[rng.below(Action::K)])
            })?;
            let stats = ResponseStats::evaluate(&decode.tokens(), &sample.scene, model.prior());
            Ok(Rollout {
                sample_id: sample.id,
                decode,
                stats,
            })
        })
        .collect()
}

pub fn score_rollout(rollout: &Rollout, criterion: Criterion) -> Result<f64> {
    criterion.score(&rollout.stats)
}

/// Re-evaluates a stored response against its scene.
pub fn response_stats(tokens: &[Token], scene: &Scene, prior: &CooccurrencePrior) -> ResponseStats {
    ResponseStats::evaluate(tokens, scene, prior)
}

/// One side of a preference pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSide {
    pub actions: Vec<Action>,
    /// Generated tokens (prompt excluded).
    pub tokens: Vec<Token>,
}

impl PairSide {
    fn from_decode(d: &DecodeResult) -> Self {
        PairSide {
            actions: d.actions.clone(),
            tokens: d.generated.clone(),
        }
    }

    pub fn workflow(&self) -> Workflow {
        Workflow(self.actions.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairScores {
    pub pos: f64,
    pub neg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub sample_id: u64,
    pub criterion: Criterion,
    pub pos: PairSide,
    pub neg: PairSide,
    pub scores: PairScores,
}

impl PreferencePair {
    pub fn gap(&self) -> f64 {
        (self.scores.pos - self.scores.neg).abs()
    }
}

/// `(score, index)` pairs; first index wins ties.
fn best_and_worst(scores: &[f64], criterion: Criterion) -> Option<(usize, usize)> {
    let mut best = 0;
    let mut worst = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if criterion.better(*s, scores[best]) {
            best = i;
        }
        if criterion.better(scores[worst], *s) {
            worst = i;
        }
    }
    (!scores.is_empty() && criterion.better(scores[best], scores[worst])).then_some((best, worst))
}

/// Best rollout becomes the positive side, worst the negative; none when all tie.
pub fn build_pair_generative(rollouts: &[Rollout], criterion: Criterion) -> Result<Option<PreferencePair>> {
    let records: Vec<RolloutRecord> = rollouts.iter().map(Rollout::record).collect();
    pair_from_records(&records, criterion)
}

fn pair_from_records(records: &[RolloutRecord], criterion: Criterion) -> Result<Option<PreferencePair>> {
    if records.len() < 2 {
        return Err(Error::invalid("at least two rollouts are needed per sample"));
    }
    let sample_id = records[0].sample_id;
    if records.iter().any(|r| r.sample_id != sample_id) {
        return Err(Error::invalid("rollouts for one pair must share a sample"));
    }
    let scores = records
        .iter()
        .map(|r| criterion.score(&r.stats))
        .collect::<Result<Vec<_>>>()?;
    Ok(best_and_worst(&scores, criterion).map(|(b, w)| PreferencePair {
        sample_id,
        criterion,
        pos: records[b].side.clone(),
        neg: records[w].side.clone(),
        scores: PairScores {
            pos: scores[b],
            neg: scores[w],
        },
    }))
}

/// Runs `f` over maximal runs of consecutive items sharing a sample id.
fn per_sample_group<T>(
    items: &[T],
    id: impl Fn(&T) -> u64,
    mut f: impl FnMut(&[T]) -> Result<Option<PreferencePair>>,
) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < items.len() {
        let first = id(&items[start]);
        let end = items[start..]
            .iter()
            .position(|r| id(r) != first)
            .map_or(items.len(), |p| start + p);
        if let Some(p) = f(&items[start..end])? {
            out.push(p);
        }
        start = end;
    }
    Ok(out)
}

/// Groups rollouts by sample (in order of first appearance) and builds one
/// pair per group.
pub fn build_pairs_generative(rollouts: &[Rollout], criterion: Criterion) -> Result<Vec<PreferencePair>> {
    per_sample_group(rollouts, |r| r.sample_id, |g| build_pair_generative(g, criterion))
}

/// A rollout as stored on disk: the workflow, its tokens, and the response
/// statistics they earn against the sample's scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub sample_id: u64,
    pub side: PairSide,
    pub stats: ResponseStats,
}

impl Rollout {
    pub fn record(&self) -> RolloutRecord {
        RolloutRecord {
            sample_id: self.sample_id,
            side: PairSide::from_decode(&self.decode),
            stats: self.stats,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutLine {
    actions: Vec<Action>,
    dataset: String,
    dataset_fingerprint: String,
    model_fingerprint: String,
    sample_id: u64,
    seed: u64,
    tokens: Vec<Token>,
}

/// Rollouts for a dataset plus the provenance needed to use them.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSet {
    pub provenance: Provenance,
    pub records: Vec<RolloutRecord>,
}

impl RolloutSet {
    pub fn to_jsonl(&self) -> String {
        let p = &self.provenance;
        let mut out = String::new();
        for r in &self.records {
            let line = RolloutLine {
                actions: r.side.actions.clone(),
                dataset: p.dataset.clone(),
                dataset_fingerprint: p.dataset_fingerprint.clone(),
                model_fingerprint: p.model_fingerprint.clone(),
                sample_id: r.sample_id,
                seed: p.seed,
                tokens: r.side.tokens.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("rollout record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a rollout file, re-scoring each response against its scene in
    /// `dataset`. The file must have been written for `dataset`.
    pub fn from_jsonl(text: &str, dataset: &Dataset, prior: &CooccurrencePrior) -> Result<Self> {
        let fp = dataset.fingerprint();
        let mut provenance: Option<Provenance> = None;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: RolloutLine = serde_json::from_str(line)
                .map_err(|e| Error::DataIntegrity(format!("rollout line {}: {e}", lineno + 1)))?;
            let p = Provenance {
                dataset: rec.dataset,
                dataset_fingerprint: rec.dataset_fingerprint,
                model_fingerprint: rec.model_fingerprint,
                seed: rec.seed,
            };
            if p.dataset_fingerprint != fp {
                return Err(Error::DataIntegrity(format!(
                    "rollout line {} was made from dataset {} but the dataset is {fp}",
                    lineno + 1,
                    p.dataset_fingerprint
                )));
            }
            match &provenance {
                None => provenance = Some(p),
                Some(q) if *q != p => {
                    return Err(Error::DataIntegrity(format!(
                        "rollout line {} has different provenance than line 1",
                        lineno + 1
                    )))
                }
                Some(_) => {}
            }
            let sample = dataset.get(rec.sample_id).ok_or_else(|| {
                Error::DataIntegrity(format!("rollout line {}: unknown sample {}", lineno + 1, rec.sample_id))
            })?;
            if !sample.task.is_describe() {
                return Err(Error::DataIntegrity(format!(
                    "rollout line {}: sample {} is not a describe sample",
                    lineno + 1,
                    rec.sample_id
                )));
            }
            if rec.actions.len() != rec.tokens.len() {
                return Err(Error::DataIntegrity(format!(
                    "rollout line {}: {} actions for {} tokens",
                    lineno + 1,
                    rec.actions.len(),
                    rec.tokens.len()
                )));
            }
            records.push(RolloutRecord {
                sample_id: rec.sample_id,
                stats: ResponseStats::evaluate(&rec.tokens, &sample.scene, prior),
                side: PairSide {
                    actions: rec.actions,
                    tokens: rec.tokens,
                },
            });
        }
        let provenance = provenance.ok_or_else(|| Error::DataIntegrity("rollout file is empty".into()))?;
        Ok(RolloutSet { provenance, records })
    }

    /// One pair per sample group, in file order.
    pub fn pairs(&self, criterion: Criterion) -> Result<Vec<PreferencePair>> {
        per_sample_group(&self.records, |r| r.sample_id, |g| pair_from_records(g, criterion))
    }
}

/// Per-action answer and confidence for an exists sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionAnswer {
    pub action: Action,
    pub answer: Option<Answer>,
    pub confidence: f64,
}

pub fn answer_under_each_action(model: &SimModel, sample: &Sample, cfg: &CdConfig) -> Result<Vec<ActionAnswer>> {
    let history = model.prompt_history(sample);
    Action::ALL
        .iter()
        .map(|&action| {
            let s = decode_step(model, sample, &history, action, cfg)?;
            Ok(ActionAnswer {
                action,
                answer: Answer::from_token(s.token),
                confidence: s.confidence,
            })
        })
        .collect()
}

/// Positive: the most confident correct action. Negative: the least
/// confident incorrect action, or the least confident correct one when every
/// action is correct. No pair when no action is correct.
pub fn build_pairs_discriminative(model: &SimModel, sample: &Sample, cfg: &CdConfig) -> Result<Option<PreferencePair>> {
    let Task::Exists { gold, .. } = sample.task else {
        return Err(Error::invalid("discriminative pairs need an exists sample"));
    };
    let answers = answer_under_each_action(model, sample, cfg)?;
    // Signed confidence: correct answers positive, incorrect negative.
    let signed: Vec<f64> = answers
        .iter()
        .map(|a| {
            if a.answer == Some(gold) {
                a.confidence
            } else {
                -a.confidence
            }
        })
        .collect();
    if signed.iter().all(|s| *s < 0.0) {
        return Ok(None);
    }
    let mut pos = 0;
    for i in 1..signed.len() {
        if signed[i] > signed[pos] {
            pos = i;
        }
    }
    let any_wrong = signed.iter().any(|s| *s < 0.0);
    let mut neg: Option<usize> = None;
    for (i, s) in signed.iter().enumerate() {
        let eligible = if any_wrong { *s < 0.0 } else { true };
        // Least confident wrong answer is the most negative signed score only
        // when compared by confidence, so compare raw confidences.
        if eligible {
            let take = match neg {
                None => true,
                Some(j) => {
                    if any_wrong {
                        answers[i].confidence < answers[j].confidence
                    } else {
                        signed[i] < signed[j]
                    }
                }
            };
            if take {
                neg = Some(i);
            }
        }
    }
    let neg = neg.expect("at least one eligible action");
    if !(signed[pos] > signed[neg]) {
        return Ok(None);
    }
    let side = |i: usize| PairSide {
        actions: vec![answers[i].action],
        tokens: vec![answers[i].answer.map_or(Token::PAD, Answer::token)],
    };
    Ok(Some(PreferencePair {
        sample_id: sample.id,
        criterion: Criterion::Confidence,
        pos: side(pos),
        neg: side(neg),
        scores: PairScores {
            pos: signed[pos],
            neg: signed[neg],
        },
    }))
}

/// What a trainer needs to regenerate hidden snapshots by replay.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub model_fingerprint: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    criterion: Criterion,
    dataset: String,
    dataset_fingerprint: String,
    model_fingerprint: String,
    neg: PairSide,
    pos: PairSide,
    sample_id: u64,
    scores: PairScores,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceSet {
    pub provenance: Provenance,
    pub pairs: Vec<PreferencePair>,
}

impl PreferenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let p = &self.provenance;
        let mut out = String::new();
        for pair in &self.pairs {
            let rec = PairRecord {
                criterion: pair.criterion,
                dataset: p.dataset.clone(),
                dataset_fingerprint: p.dataset_fingerprint.clone(),
                model_fingerprint: p.model_fingerprint.clone(),
                neg: pair.neg.clone(),
                pos: pair.pos.clone(),
                sample_id: pair.sample_id,
                scores: pair.scores,
                seed: p.seed,
            };
            out.push_str(&serde_json::to_string(&rec).expect("pair record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a pair file. An empty file has no provenance and is rejected.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut provenance: Option<Provenance> = None;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: PairRecord = serde_json::from_str(line)
                .map_err(|e| Error::DataIntegrity(format!("pair line {}: {e}", lineno + 1)))?;
            let p = Provenance {
                dataset: rec.dataset,
                dataset_fingerprint: rec.dataset_fingerprint,
                model_fingerprint: rec.model_fingerprint,
                seed: rec.seed,
            };
            match &provenance {
                None => provenance = Some(p),
                Some(q) if *q != p => {
                    return Err(Error::DataIntegrity(format!(
                        "pair line {} has different provenance than line 1",
                        lineno + 1
                    )))
                }
                Some(_) => {}
            }
            let pair = PreferencePair {
                sample_id: rec.sample_id,
                criterion: rec.criterion,
                pos: rec.pos,
                neg: rec.neg,
                scores: rec.scores,
            };
            if !pair.criterion.better(pair.scores.pos, pair.scores.neg) {
                return Err(Error::DataIntegrity(format!(
                    "pair line {}: positive side does not outscore the negative",
                    lineno + 1
                )));
            }
            pairs.push(pair);
        }
        let provenance = provenance.ok_or_else(|| Error::DataIntegrity("preference file is empty".into()))?;
        Ok(PreferenceSet { provenance, pairs })
    }
}

/// Settings for assembling a preference set from a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrefBuildConfig {
    pub criterion: Criterion,
    pub rollouts: usize,
    pub seed: u64,
    /// Stop once this many pairs exist (dataset order).
    pub max_pairs: Option<usize>,
    /// Keep only exists samples that base decoding answers wrongly.
    pub hallucinated_only: bool,
    pub exec: Execution,
}

impl Default for PrefBuildConfig {
    fn default() -> Self {
        PrefBuildConfig {
            criterion: Criterion::Chair,
            rollouts: DEFAULT_ROLLOUTS,
            seed: 0,
            max_pairs: None,
            hallucinated_only: false,
            exec: Execution::default(),
        }
    }
}

/// Rollouts for every describe sample, in dataset order.
pub fn dataset_rollouts(
    model: &SimModel,
    dataset: &Dataset,
    count: usize,
    seed: u64,
    cd: &CdConfig,
    exec: Execution,
) -> Result<Vec<Rollout>> {
    let samples: Vec<&Sample> = dataset.describe_samples().collect();
    let per = exec.map(&samples, |s| {
        let mut rng = rollout_rng(seed, s.id);
        sample_rollouts(model, s, count, &mut rng, cd)
    });
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

fn base_answers_correctly(model: &SimModel, sample: &Sample, gold: Answer, cd: &CdConfig) -> Result<bool> {
    let history = model.prompt_history(sample);
    let s = decode_step(model, sample, &history, Action::Null, cd)?;
    Ok(Answer::from_token(s.token) == Some(gold))
}

/// One pair per describe sample (from rollouts) or exists sample (from
/// per-action confidences), merged in dataset order.
pub fn build_preference_pairs(
    model: &SimModel,
    dataset: &Dataset,
    cd: &CdConfig,
    cfg: &PrefBuildConfig,
) -> Result<Vec<PreferencePair>> {
    assemble(model, dataset, cd, cfg, |s| {
        let mut rng = rollout_rng(cfg.seed, s.id);
        let rollouts = sample_rollouts(model, s, cfg.rollouts, &mut rng, cd)?;
        build_pair_generative(&rollouts, cfg.criterion)
    })
}

/// As [`build_preference_pairs`], but describe pairs come from stored
/// rollouts. Describe samples without rollouts emit no pair.
pub fn build_preference_pairs_from(
    model: &SimModel,
    dataset: &Dataset,
    rollouts: &RolloutSet,
    cd: &CdConfig,
    cfg: &PrefBuildConfig,
) -> Result<Vec<PreferencePair>> {
    let mut groups: std::collections::BTreeMap<u64, Vec<RolloutRecord>> = Default::default();
    for r in &rollouts.records {
        groups.entry(r.sample_id).or_default().push(r.clone());
    }
    assemble(model, dataset, cd, cfg, |s| match groups.get(&s.id) {
        Some(g) => pair_from_records(g, cfg.criterion),
        None => Ok(None),
    })
}

fn assemble<F>(model: &SimModel, dataset: &Dataset, cd: &CdConfig, cfg: &PrefBuildConfig, describe: F) -> Result<Vec<PreferencePair>>
where
    F: Fn(&Sample) -> Result<Option<PreferencePair>> + Sync,
{
    let samples: Vec<&Sample> = dataset.samples.iter().collect();
    let per = cfg.exec.map(&samples, |s| -> Result<Option<PreferencePair>> {
        match s.task {
            Task::Describe => describe(s),
            Task::Exists { gold, .. } => {
                if cfg.hallucinated_only && base_answers_correctly(model, s, gold, cd)? {
                    return Ok(None);
                }
                build_pairs_discriminative(model, s, cd)
            }
        }
    });
    let mut pairs = Vec::new();
    for p in per {
        if let Some(p) = p? {
            pairs.push(p);
            if cfg.max_pairs.is_some_and(|m| pairs.len() >= m) {
                break;
            }
        }
    }
    Ok(pairs)
}
