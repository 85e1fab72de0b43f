//! Policy evaluation and the two diagnostic analyses (sample-level strategy
//! overlap and strategy enumeration over hallucinated mentions), with their
//! JSON/CSV reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cd::{decode_with, decode_with_policy, run_workflow, Action, CdConfig, DecodeResult, Workflow};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::dpo::{grad_check as dpo_grad_check, LossReport, ReplayedPair, TrainConfig};
use crate::head::{head_grad_check, load_checkpoint, GradCheckReport, HeadConfig, HeadParams};
use crate::preference::Provenance;
use crate::io::{fingerprint_json, write_atomic, write_json};
use crate::metrics::{disc_metrics, DiscMetrics, GenMetrics, ResponseStats};
use crate::rng::RngState;
use crate::sim::SimModel;
use crate::world::{Answer, Dataset, Sample, Task};

/// A policy as named on the command line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PolicySpec {
    Base,
    Fixed(Action),
    Random,
    Octopus(PathBuf),
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => return Ok(PolicySpec::Base),
            "random" => return Ok(PolicySpec::Random),
            _ => {}
        }
        if let Some(a) = s.strip_prefix("fixed:") {
            let action: Action = a.parse()?;
            if action == Action::Null {
                return Err(Error::invalid("fixed policy needs s1, s2 or s3; use `base` for null"));
            }
            return Ok(PolicySpec::Fixed(action));
        }
        if let Some(p) = s.strip_prefix("octopus:") {
            if p.is_empty() {
                return Err(Error::invalid("octopus policy needs a checkpoint path"));
            }
            return Ok(PolicySpec::Octopus(PathBuf::from(p)));
        }
        Err(Error::invalid(format!(
            "unknown policy `{s}` (expected base, fixed:s1|s2|s3, random, octopus:CKPT)"
        )))
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Base => f.write_str("base"),
            PolicySpec::Fixed(a) => write!(f, "fixed:{}", a.name()),
            PolicySpec::Random => f.write_str("random"),
            PolicySpec::Octopus(p) => write!(f, "octopus:{}", p.display()),
        }
    }
}

/// A policy ready to decode.
#[derive(Clone, Debug)]
pub enum Policy {
    Base,
    Fixed(Action),
    /// Uniform over the three contrastive strategies at every step, keyed by
    /// `(seed, sample id)`.
    Random { seed: u64 },
    Octopus(Box<HeadParams>),
}

impl Policy {
    /// Resolves a spec, loading and vetting the checkpoint for `octopus:`.
    pub fn resolve(spec: &PolicySpec, model: &SimModel, seed: u64) -> Result<Policy> {
        Ok(match spec {
            PolicySpec::Base => Policy::Base,
            PolicySpec::Fixed(a) => Policy::Fixed(*a),
            PolicySpec::Random => Policy::Random { seed },
            PolicySpec::Octopus(path) => {
                let ckpt = load_checkpoint(path)?;
                let want = model.fingerprint();
                match ckpt.model_fingerprint.as_deref() {
                    Some(fp) if fp == want => {}
                    Some(fp) => {
                        return Err(Error::DataIntegrity(format!(
                            "checkpoint {} was trained against model {fp}, current model is {want}",
                            path.display()
                        )))
                    }
                    None => {
                        return Err(Error::DataIntegrity(format!(
                            "checkpoint {} records no model fingerprint",
                            path.display()
                        )))
                    }
                }
                if ckpt.params.config().d != model.config().hidden_dim {
                    return Err(Error::DataIntegrity(format!(
                        "checkpoint head width {} does not match model hidden width {}",
                        ckpt.params.config().d,
                        model.config().hidden_dim
                    )));
                }
                Policy::Octopus(Box::new(ckpt.params))
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Policy::Base => "base".into(),
            Policy::Fixed(a) => format!("fixed:{}", a.name()),
            Policy::Random { .. } => "random".into(),
            Policy::Octopus(_) => "octopus".into(),
        }
    }

    fn head_fingerprint(&self) -> Option<String> {
        match self {
            Policy::Octopus(h) => Some(h.fingerprint()),
            _ => None,
        }
    }

    pub fn decode(&self, model: &SimModel, sample: &Sample, cd: &CdConfig) -> Result<DecodeResult> {
        match self {
            Policy::Base => decode_with(model, sample, cd, |_, _| Ok(Action::Null)),
            Policy::Fixed(a) => decode_with(model, sample, cd, |_, _| Ok(*a)),
            Policy::Random { seed } => {
                let mut rng = RngState::keyed(*seed, "random-policy", &[sample.id]);
                decode_with(model, sample, cd, |_, _| Ok(Action::STRATEGIES[rng.below(3)]))
            }
            Policy::Octopus(head) => decode_with_policy(model, sample, head, cd).map(|(r, _)| r),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Gen,
    Disc,
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen" => Ok(EvalTask::Gen),
            "disc" => Ok(EvalTask::Disc),
            _ => Err(Error::invalid(format!("unknown task `{s}` (expected gen or disc)"))),
        }
    }
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Gen => "gen",
            EvalTask::Disc => "disc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub dataset: String,
    pub model: String,
    pub cd: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub head: Option<String>,
}

impl Fingerprints {
    pub fn new(dataset: &Dataset, model: &SimModel, cd: &CdConfig) -> Self {
        Fingerprints {
            dataset: dataset.fingerprint(),
            model: model.fingerprint(),
            cd: fingerprint_json(&serde_json::to_value(cd).expect("cd config serializes")),
            head: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub task: EvalTask,
    pub policy: String,
    pub seed: u64,
    pub samples: usize,
    pub fingerprints: Fingerprints,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gen: Option<GenMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disc: Option<DiscMetrics>,
}

pub const EVAL_CSV_HEADER: &str = "experiment,task,policy,seed,samples,chair_s,chair_i,cover,hal,cog,accuracy,precision,recall,f1,dataset_fp,model_fp,head_fp";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let g = |f: fn(&GenMetrics) -> f64| self.gen.as_ref().map(|m| f(m).to_string()).unwrap_or_default();
        let d = |f: fn(&DiscMetrics) -> f64| self.disc.as_ref().map(|m| f(m).to_string()).unwrap_or_default();
        [
            self.experiment.clone(),
            self.task.name().to_string(),
            self.policy.clone(),
            self.seed.to_string(),
            self.samples.to_string(),
            g(|m| m.chair_s),
            g(|m| m.chair_i),
            g(|m| m.cover),
            g(|m| m.hal),
            g(|m| m.cog),
            d(|m| m.accuracy),
            d(|m| m.precision),
            d(|m| m.recall),
            d(|m| m.f1),
            self.fingerprints.dataset.clone(),
            self.fingerprints.model.clone(),
            self.fingerprints.head.clone().unwrap_or_default(),
        ]
        .join(",")
    }
}

/// Per-sample generative statistics of `policy` over the describe samples.
pub fn gen_stats(
    model: &SimModel,
    samples: &[&Sample],
    policy: &Policy,
    cd: &CdConfig,
    exec: Execution,
) -> Result<Vec<ResponseStats>> {
    exec.map(samples, |s| {
        let r = policy.decode(model, s, cd)?;
        Ok(ResponseStats::evaluate(&r.tokens(), &s.scene, model.prior()))
    })
    .into_iter()
    .collect()
}

/// The answer a decode gave; anything other than "yes" reads as "no".
pub fn read_answer(decode: &DecodeResult) -> Answer {
    match decode.generated.first().and_then(|t| Answer::from_token(*t)) {
        Some(Answer::Yes) => Answer::Yes,
        _ => Answer::No,
    }
}

pub fn disc_predictions(
    model: &SimModel,
    samples: &[&Sample],
    policy: &Policy,
    cd: &CdConfig,
    exec: Execution,
) -> Result<Vec<Answer>> {
    exec.map(samples, |s| policy.decode(model, s, cd).map(|r| read_answer(&r)))
        .into_iter()
        .collect()
}

/// Decodes every sample of the task's kind under `policy` and scores it.
pub fn evaluate(
    model: &SimModel,
    dataset: &Dataset,
    policy: &Policy,
    task: EvalTask,
    cd: &CdConfig,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    let mut fingerprints = Fingerprints::new(dataset, model, cd);
    fingerprints.head = policy.head_fingerprint();
    let mut report = EvalReport {
        experiment: "eval".into(),
        task,
        policy: policy.name(),
        seed,
        samples: 0,
        fingerprints,
        gen: None,
        disc: None,
    };
    match task {
        EvalTask::Gen => {
            let samples: Vec<&Sample> = dataset.describe_samples().collect();
            let stats = gen_stats(model, &samples, policy, cd, exec)?;
            report.samples = samples.len();
            report.gen = Some(GenMetrics::from_stats(&stats)?);
        }
        EvalTask::Disc => {
            let samples: Vec<&Sample> = dataset.exists_samples().collect();
            let preds = disc_predictions(model, &samples, policy, cd, exec)?;
            let gold: Vec<Answer> = samples
                .iter()
                .map(|s| match s.task {
                    Task::Exists { gold, .. } => gold,
                    Task::Describe => unreachable!("exists_samples yields exists tasks"),
                })
                .collect();
            report.samples = samples.len();
            report.disc = Some(disc_metrics(&preds, &gold)?);
        }
    }
    Ok(report)
}

/// Writes `report` as JSON at `path` and one CSV row (with header) next to it.
pub fn write_report<T: Serialize>(path: &Path, report: &T, csv_header: &str, csv_rows: &[String]) -> Result<()> {
    write_json(path, report)?;
    let mut csv = String::from(csv_header);
    csv.push('\n');
    for r in csv_rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write_atomic(&path.with_extension("csv"), csv.as_bytes())
}

fn describe_samples(dataset: &Dataset) -> Result<Vec<&Sample>> {
    let samples: Vec<&Sample> = dataset.describe_samples().collect();
    if samples.is_empty() {
        return Err(Error::invalid("analysis needs at least one describe sample"));
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapFractions {
    pub none: f64,
    pub exactly_one: f64,
    pub exactly_two: f64,
    pub all_three: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub experiment: String,
    pub fingerprints: Fingerprints,
    pub samples: usize,
    /// Samples with 0, 1, 2 and 3 effective strategies.
    pub counts: [usize; 4],
    pub fractions: OverlapFractions,
    /// Samples on which s1, s2, s3 (in order) are effective.
    pub effective_by_strategy: [usize; 3],
}

pub const OVERLAP_CSV_HEADER: &str = "experiment,samples,none,exactly_one,exactly_two,all_three,s1_effective,s2_effective,s3_effective,dataset_fp,model_fp";

impl OverlapReport {
    pub fn csv_row(&self) -> String {
        let f = &self.fractions;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.samples,
            f.none,
            f.exactly_one,
            f.exactly_two,
            f.all_three,
            self.effective_by_strategy[0],
            self.effective_by_strategy[1],
            self.effective_by_strategy[2],
            self.fingerprints.dataset,
            self.fingerprints.model
        )
    }
}

/// Which fixed strategies strictly lower a sample's chair_i below base.
pub fn effective_strategies(model: &SimModel, sample: &Sample, cd: &CdConfig) -> Result<[bool; 3]> {
    let chair = |p: &Policy| -> Result<f64> {
        let r = p.decode(model, sample, cd)?;
        Ok(ResponseStats::evaluate(&r.tokens(), &sample.scene, model.prior()).chair())
    };
    let base = chair(&Policy::Base)?;
    let mut out = [false; 3];
    for (i, a) in Action::STRATEGIES.iter().enumerate() {
        out[i] = chair(&Policy::Fixed(*a))? < base;
    }
    Ok(out)
}

pub fn analyze_overlap(model: &SimModel, dataset: &Dataset, cd: &CdConfig, exec: Execution) -> Result<OverlapReport> {
    let samples = describe_samples(dataset)?;
    let per: Vec<[bool; 3]> = exec
        .map(&samples, |s| effective_strategies(model, s, cd))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut counts = [0usize; 4];
    let mut by = [0usize; 3];
    for e in &per {
        counts[e.iter().filter(|x| **x).count()] += 1;
        for i in 0..3 {
            by[i] += usize::from(e[i]);
        }
    }
    let n = samples.len() as f64;
    Ok(OverlapReport {
        experiment: "analyze-overlap".into(),
        fingerprints: Fingerprints::new(dataset, model, cd),
        samples: samples.len(),
        counts,
        fractions: OverlapFractions {
            none: counts[0] as f64 / n,
            exactly_one: counts[1] as f64 / n,
            exactly_two: counts[2] as f64 / n,
            all_three: counts[3] as f64 / n,
        },
        effective_by_strategy: by,
    })
}

/// Largest enumeration prefix accepted (3^4 = 81 assignments per sample).
pub const MAX_PREFIX_LEN: usize = 4;

/// Strategy families reported by the enumeration, as bit masks over
/// (s1, s2, s3).
pub const FAMILIES: [(&str, u8); 7] = [
    ("s1", 0b001),
    ("s2", 0b010),
    ("s3", 0b100),
    ("s1+s2", 0b011),
    ("s1+s3", 0b101),
    ("s2+s3", 0b110),
    ("s1+s2+s3", 0b111),
];

/// Per-sample outcome of one enumerated assignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub chair: f64,
    pub cog: f64,
    pub hallucinated: bool,
}

impl Outcome {
    fn of(stats: &ResponseStats) -> Self {
        let cog = if stats.mentions == 0 {
            0.0
        } else {
            stats.prior_hallucinated as f64 / stats.mentions as f64
        };
        Outcome {
            chair: stats.chair(),
            cog,
            hallucinated: stats.hallucinated > 0,
        }
    }

    /// Lower chair first, then lower cog.
    fn better_than(&self, other: &Outcome) -> bool {
        self.chair < other.chair || (self.chair == other.chair && self.cog < other.cog)
    }
}

/// Steps of the base decode that emitted a hallucinated object, first `limit`.
pub fn hallucinated_steps(decode: &DecodeResult, sample: &Sample, limit: usize) -> Vec<usize> {
    decode
        .generated
        .iter()
        .enumerate()
        .filter(|(_, t)| t.object().is_some_and(|o| !sample.scene.contains(o)))
        .map(|(i, _)| i)
        .take(limit)
        .collect()
}

/// Every assignment of `alphabet` to the mentions ending at `steps`, others
/// null, in lexicographic order of the alphabet. A mention is the object
/// step and the article step before it, so the action also decides whether
/// the mention is opened at all.
pub fn assignments(steps: &[usize], alphabet: &[Action]) -> Vec<Workflow> {
    let len = steps.iter().max().map_or(0, |m| m + 1);
    let total = alphabet.len().pow(steps.len() as u32);
    (0..total)
        .map(|mut code| {
            let mut wf = vec![Action::Null; len];
            for &s in steps.iter().rev() {
                let a = alphabet[code % alphabet.len()];
                wf[s.saturating_sub(1)] = a;
                wf[s] = a;
                code /= alphabet.len();
            }
            Workflow(wf)
        })
        .collect()
}

/// Runs `wf` and continues with null once it is exhausted.
fn run_padded(model: &SimModel, sample: &Sample, wf: &Workflow, cd: &CdConfig) -> Result<DecodeResult> {
    let padded = wf.padded(model.max_steps(sample));
    run_workflow(model, sample, &padded, cd)
}

/// Best outcome per family for one sample, plus the base outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEnumeration {
    pub sample_id: u64,
    pub steps: Vec<usize>,
    pub base: Outcome,
    /// Same order as [`FAMILIES`].
    pub families: Vec<Outcome>,
}

pub fn enumerate_sample(model: &SimModel, sample: &Sample, prefix_len: usize, cd: &CdConfig) -> Result<SampleEnumeration> {
    let outcome = |wf: &Workflow| -> Result<Outcome> {
        let r = run_padded(model, sample, wf, cd)?;
        Ok(Outcome::of(&ResponseStats::evaluate(&r.tokens(), &sample.scene, model.prior())))
    };
    let base_decode = decode_with(model, sample, cd, |_, _| Ok(Action::Null))?;
    let base = Outcome::of(&ResponseStats::evaluate(&base_decode.tokens(), &sample.scene, model.prior()));
    let steps = hallucinated_steps(&base_decode, sample, prefix_len);
    // All-three assignments contain every family's; score each once.
    let all = assignments(&steps, &Action::STRATEGIES);
    let scored: Vec<(Workflow, Outcome)> = all
        .into_iter()
        .map(|wf| outcome(&wf).map(|o| (wf, o)))
        .collect::<Result<_>>()?;
    let families = FAMILIES
        .iter()
        .map(|(_, mask)| {
            let allowed = |a: Action| a != Action::Null && mask & (1 << (a.index() - 1)) != 0;
            let mut best: Option<Outcome> = None;
            for (wf, o) in &scored {
                if steps.iter().all(|s| allowed(wf.0[*s])) && best.is_none_or(|b| o.better_than(&b)) {
                    best = Some(*o);
                }
            }
            best.unwrap_or(base)
        })
        .collect();
    Ok(SampleEnumeration {
        sample_id: sample.id,
        steps,
        base,
        families,
    })
}

/// Macro averages of per-sample best outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub chair: f64,
    pub cog: f64,
    pub hal: f64,
}

impl FamilyScore {
    fn mean(outcomes: impl Iterator<Item = Outcome>) -> Self {
        let (mut c, mut g, mut h, mut n) = (0.0, 0.0, 0.0, 0usize);
        for o in outcomes {
            c += o.chair;
            g += o.cog;
            h += f64::from(u8::from(o.hallucinated));
            n += 1;
        }
        let n = n.max(1) as f64;
        FamilyScore {
            chair: c / n,
            cog: g / n,
            hal: h / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedScore {
    pub family: String,
    pub assignments_per_sample: usize,
    pub score: FamilyScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationReport {
    pub experiment: String,
    pub fingerprints: Fingerprints,
    pub samples: usize,
    pub prefix_len: usize,
    pub base: FamilyScore,
    pub families: Vec<NamedScore>,
    /// Per sample, the best over the three single families.
    pub best_single: FamilyScore,
    /// Per sample, the best over the three pair families.
    pub best_pair: FamilyScore,
    pub best_all_three: FamilyScore,
    /// `best_all_three <= best_pair <= best_single <= base` in chair.
    pub monotone: bool,
    pub note: String,
}

pub const ENUMERATION_CSV_HEADER: &str = "experiment,prefix_len,family,assignments_per_sample,chair,cog,hal";

impl EnumerationReport {
    pub fn csv_rows(&self) -> Vec<String> {
        let row = |name: &str, n: usize, s: &FamilyScore| {
            format!("{},{},{},{},{},{},{}", self.experiment, self.prefix_len, name, n, s.chair, s.cog, s.hal)
        };
        let p = self.prefix_len as u32;
        let mut rows = vec![row("base", 1, &self.base)];
        rows.extend(self.families.iter().map(|f| row(&f.family, f.assignments_per_sample, &f.score)));
        rows.push(row("best-single", 1, &self.best_single));
        rows.push(row("best-pair", 2usize.pow(p), &self.best_pair));
        rows.push(row("best-all-three", 3usize.pow(p), &self.best_all_three));
        rows
    }
}

fn best_of(outcomes: impl Iterator<Item = Outcome>) -> Outcome {
    let mut it = outcomes;
    let first = it.next().expect("at least one family");
    it.fold(first, |b, o| if o.better_than(&b) { o } else { b })
}

pub fn analyze_enumerate(
    model: &SimModel,
    dataset: &Dataset,
    prefix_len: usize,
    cd: &CdConfig,
    exec: Execution,
) -> Result<EnumerationReport> {
    if prefix_len == 0 || prefix_len > MAX_PREFIX_LEN {
        return Err(Error::invalid(format!(
            "prefix length must be in 1..={MAX_PREFIX_LEN}, got {prefix_len}"
        )));
    }
    let samples = describe_samples(dataset)?;
    let per: Vec<SampleEnumeration> = exec
        .map(&samples, |s| enumerate_sample(model, s, prefix_len, cd))
        .into_iter()
        .collect::<Result<_>>()?;
    let p = prefix_len as u32;
    let families = FAMILIES
        .iter()
        .enumerate()
        .map(|(i, (name, mask))| NamedScore {
            family: (*name).into(),
            assignments_per_sample: (mask.count_ones() as usize).pow(p),
            score: FamilyScore::mean(per.iter().map(|e| e.families[i])),
        })
        .collect();
    let base = FamilyScore::mean(per.iter().map(|e| e.base));
    let best_single = FamilyScore::mean(per.iter().map(|e| best_of(e.families[0..3].iter().copied())));
    let best_pair = FamilyScore::mean(per.iter().map(|e| best_of(e.families[3..6].iter().copied())));
    let best_all_three = FamilyScore::mean(per.iter().map(|e| e.families[6]));
    let monotone =
        best_all_three.chair <= best_pair.chair && best_pair.chair <= best_single.chair && best_single.chair <= base.chair;
    Ok(EnumerationReport {
        experiment: "analyze-enumerate".into(),
        fingerprints: Fingerprints::new(dataset, model, cd),
        samples: samples.len(),
        prefix_len,
        base,
        families,
        best_single,
        best_pair,
        best_all_three,
        monotone,
        note: format!(
            "a two-strategy family has 2^{prefix_len} = {} assignments per sample; the figure this mirrors counts 6 for three tokens, here the full space is enumerated",
            2usize.pow(p)
        ),
    })
}

/// Written by training alongside the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub experiment: String,
    pub config: TrainConfig,
    pub head_config: HeadConfig,
    pub fingerprints: Fingerprints,
    pub preferences: Provenance,
    pub loss: LossReport,
}

/// Finite-difference check of the head and of the pair loss on one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub experiment: String,
    pub pair_index: usize,
    pub step: f64,
    pub threshold: f64,
    pub head: GradCheckReport,
    pub dpo: GradCheckReport,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Checks `head` on the first snapshot of the pair's positive side and the
/// full pair loss under `beta`.
pub fn grad_check_pair(
    head: &HeadParams,
    pair: &ReplayedPair,
    pair_index: usize,
    beta: f64,
    step: f64,
    threshold: f64,
) -> Result<GradCheckSummary> {
    let side = if pair.pos.steps() > 0 { &pair.pos } else { &pair.neg };
    if side.steps() == 0 {
        return Err(Error::invalid("pair has no decoding steps to check"));
    }
    let head_report = head_grad_check(head, &side.decode.snapshot(0), step)?;
    let dpo_report = dpo_grad_check(head, pair, beta, step)?;
    let max = head_report.max_relative_error.max(dpo_report.max_relative_error);
    Ok(GradCheckSummary {
        experiment: "gradcheck".into(),
        pair_index,
        step,
        threshold,
        head: head_report,
        dpo: dpo_report,
        max_relative_error: max,
        passed: max < threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{init_head, save_checkpoint};
    use crate::sim::ModelConfig;
    use crate::world::{gen_dataset, CauseMix, DatasetConfig, HallucinationCause};

    fn model() -> SimModel {
        SimModel::new(ModelConfig::default()).unwrap()
    }

    #[test]
    fn policy_specs_roundtrip() {
        for s in ["base", "random", "fixed:s1", "fixed:s2", "fixed:s3", "octopus:/tmp/h.json"] {
            let spec: PolicySpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        for bad in ["fixed:null", "fixed:s4", "octopus:", "Base", ""] {
            assert!(bad.parse::<PolicySpec>().is_err(), "{bad}");
        }
        assert_eq!("gen".parse::<EvalTask>().unwrap(), EvalTask::Gen);
        assert!("pope".parse::<EvalTask>().is_err());
    }

    #[test]
    fn random_policy_uses_strategies_and_replays() {
        let m = model();
        let ds = gen_dataset(&DatasetConfig::describe(4, CauseMix::uniform()), 3).unwrap();
        let p = Policy::Random { seed: 9 };
        for s in &ds.samples {
            let a = p.decode(&m, s, &CdConfig::default()).unwrap();
            let b = p.decode(&m, s, &CdConfig::default()).unwrap();
            assert_eq!(a.generated, b.generated);
            assert_eq!(a.actions, b.actions);
            assert!(a.actions.iter().all(|a| *a != Action::Null));
        }
    }

    #[test]
    fn checkpoints_from_other_models_are_refused() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        let head = init_head(HeadConfig::default(), 1).unwrap();
        let spec = PolicySpec::Octopus(path.clone());

        save_checkpoint(&head, Some(&m.fingerprint()), &path).unwrap();
        assert!(matches!(Policy::resolve(&spec, &m, 0).unwrap(), Policy::Octopus(_)));

        save_checkpoint(&head, Some("feedfacefeedface"), &path).unwrap();
        assert!(Policy::resolve(&spec, &m, 0).unwrap_err().is_integrity());

        save_checkpoint(&head, None, &path).unwrap();
        assert!(Policy::resolve(&spec, &m, 0).unwrap_err().is_integrity());
    }

    #[test]
    fn overlap_on_clean_scenes_is_all_none() {
        let m = model();
        let ds = gen_dataset(&DatasetConfig::describe(40, CauseMix::only(HallucinationCause::None)), 5).unwrap();
        let r = analyze_overlap(&m, &ds, &CdConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(r.counts, [40, 0, 0, 0]);
        assert_eq!(r.fractions.none, 1.0);
    }

    #[test]
    fn overlap_fractions_partition_the_samples() {
        let m = model();
        let ds = gen_dataset(&DatasetConfig::describe(60, CauseMix::uniform()), 6).unwrap();
        let r = analyze_overlap(&m, &ds, &CdConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(r.counts.iter().sum::<usize>(), 60);
        let f = r.fractions;
        assert!((f.none + f.exactly_one + f.exactly_two + f.all_three - 1.0).abs() < 1e-12);
        let weighted: usize = r.counts.iter().enumerate().map(|(k, c)| k * c).sum();
        assert_eq!(weighted, r.effective_by_strategy.iter().sum::<usize>());
    }

    #[test]
    fn assignments_cover_the_alphabet_product() {
        let wfs = assignments(&[2, 5], &Action::STRATEGIES);
        assert_eq!(wfs.len(), 9);
        for wf in &wfs {
            assert_eq!(wf.len(), 6);
            assert_eq!(wf.0[0], Action::Null);
            assert_eq!(wf.0[3], Action::Null);
            assert_eq!(wf.0[1], wf.0[2]);
            assert_eq!(wf.0[4], wf.0[5]);
        }
        let distinct: std::collections::BTreeSet<_> = wfs.iter().map(|w| (w.0[2].index(), w.0[5].index())).collect();
        assert_eq!(distinct.len(), 9);
        assert_eq!(assignments(&[], &Action::STRATEGIES), vec![Workflow(vec![])]);
    }

    /// Independent oracle: a naive re-decode per assignment, choosing each
    /// step's action from a lookup instead of a prepared workflow.
    fn brute_force(m: &SimModel, s: &Sample, steps: &[usize], alphabet: &[Action]) -> Outcome {
        let cd = CdConfig::default();
        let mut best: Option<(f64, f64)> = None;
        let mut hallucinated = false;
        for code in 0..alphabet.len().pow(steps.len() as u32) {
            let mut pick = std::collections::HashMap::new();
            let mut c = code;
            for &t in steps {
                pick.insert(t - 1, alphabet[c % alphabet.len()]);
                pick.insert(t, alphabet[c % alphabet.len()]);
                c /= alphabet.len();
            }
            let d = decode_with(m, s, &cd, |t, _| Ok(*pick.get(&t).unwrap_or(&Action::Null))).unwrap();
            let mentioned: Vec<_> = d.generated.iter().filter_map(|t| t.object()).collect();
            let bad = mentioned.iter().filter(|o| !s.scene.contains(**o)).count();
            let mut unique = mentioned.clone();
            unique.sort();
            unique.dedup();
            let chair = if unique.is_empty() {
                0.0
            } else {
                unique.iter().filter(|o| !s.scene.contains(**o)).count() as f64 / unique.len() as f64
            };
            let stats = ResponseStats::evaluate(&d.tokens(), &s.scene, m.prior());
            assert_eq!(stats.chair(), chair);
            let cog = Outcome::of(&stats).cog;
            if best.is_none_or(|(bc, bg)| chair < bc || (chair == bc && cog < bg)) {
                best = Some((chair, cog));
                hallucinated = bad > 0;
            }
        }
        let (chair, cog) = best.unwrap();
        Outcome { chair, cog, hallucinated }
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let m = model();
        let ds = gen_dataset(&DatasetConfig::describe(12, CauseMix::uniform()), 8).unwrap();
        let mut checked = 0;
        for s in &ds.samples {
            let e = enumerate_sample(&m, s, 2, &CdConfig::default()).unwrap();
            if e.steps.is_empty() {
                assert!(e.families.iter().all(|f| *f == e.base));
                continue;
            }
            for ((name, mask), got) in FAMILIES.iter().zip(&e.families) {
                let alphabet: Vec<Action> = Action::STRATEGIES
                    .iter()
                    .copied()
                    .filter(|a| mask & (1 << (a.index() - 1)) != 0)
                    .collect();
                let want = brute_force(&m, s, &e.steps, &alphabet);
                assert_eq!((got.chair, got.cog), (want.chair, want.cog), "sample {} family {name}", s.id);
            }
            checked += 1;
        }
        assert!(checked >= 4, "only {checked} samples had hallucinated steps");
    }

    #[test]
    fn singleton_family_is_fixed_strategy_on_the_steps() {
        let m = model();
        let cd = CdConfig::default();
        let ds = gen_dataset(&DatasetConfig::describe(10, CauseMix::uniform()), 9).unwrap();
        for s in &ds.samples {
            let e = enumerate_sample(&m, s, 3, &cd).unwrap();
            if e.steps.is_empty() {
                continue;
            }
            for (i, a) in Action::STRATEGIES.iter().enumerate() {
                let d = decode_with(&m, s, &cd, |t, _| Ok(if e.steps.contains(&t) || e.steps.contains(&(t + 1)) { *a } else { Action::Null })).unwrap();
                let o = Outcome::of(&ResponseStats::evaluate(&d.tokens(), &s.scene, m.prior()));
                assert_eq!(e.families[i], o);
            }
        }
    }

    #[test]
    fn enumeration_report_is_monotone_and_guards_prefix() {
        let m = model();
        let cd = CdConfig::default();
        for seed in [10, 11] {
            let ds = gen_dataset(&DatasetConfig::describe(12, CauseMix::uniform()), seed).unwrap();
            let r = analyze_enumerate(&m, &ds, 2, &cd, Execution::Sequential).unwrap();
            assert!(r.monotone);
            assert!(r.best_all_three.chair <= r.best_pair.chair);
            assert!(r.best_pair.chair <= r.best_single.chair);
            assert_eq!(r.families.iter().map(|f| f.assignments_per_sample).collect::<Vec<_>>(), [1, 1, 1, 4, 4, 4, 9]);
        }
        let ds = gen_dataset(&DatasetConfig::describe(2, CauseMix::uniform()), 1).unwrap();
        assert!(analyze_enumerate(&m, &ds, 0, &cd, Execution::Sequential).is_err());
        assert!(analyze_enumerate(&m, &ds, MAX_PREFIX_LEN + 1, &cd, Execution::Sequential).is_err());
    }

    #[test]
    fn eval_reports_write_json_and_csv() {
        let m = model();
        let ds = gen_dataset(&DatasetConfig { n_describe: 5, n_exists: 6, cause_mix: CauseMix::uniform() }, 2).unwrap();
        let cd = CdConfig::default();
        let gen = evaluate(&m, &ds, &Policy::Base, EvalTask::Gen, &cd, 0, Execution::Sequential).unwrap();
        assert_eq!(gen.samples, 5);
        assert!(gen.gen.is_some() && gen.disc.is_none());
        let disc = evaluate(&m, &ds, &Policy::Fixed(Action::S2), EvalTask::Disc, &cd, 0, Execution::Sequential).unwrap();
        assert_eq!(disc.samples, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_report(&path, &disc, EVAL_CSV_HEADER, &[disc.csv_row()]).unwrap();
        let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, disc);
        let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }
}
