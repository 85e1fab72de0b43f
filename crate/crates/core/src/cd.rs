//! Contrastive decoding over the simulator's streams, the four-action space,
//! and workflow-driven greedy decoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{head_forward, select_action, HeadParams};
use crate::sim::{distorted_stream, HiddenSeq, SimModel};
use crate::tensor::{argmax, softmax_in_place, Matrix};
use crate::world::{Sample, Token};

/// One per-step decoding choice. Variant order is the tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Null,
    S1,
    S2,
    S3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Null, Action::S1, Action::S2, Action::S3];
    pub const STRATEGIES: [Action; 3] = [Action::S1, Action::S2, Action::S3];
    pub const K: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Null => "null",
            Action::S1 => "s1",
            Action::S2 => "s2",
            Action::S3 => "s3",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown action `{s}`")))
    }
}

/// Contrast strength: `m = 1 + alpha`, `n = alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdConfig {
    pub alpha: f64,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig { alpha: 1.0 }
    }
}

impl CdConfig {
    pub fn m(&self) -> f64 {
        1.0 + self.alpha
    }

    pub fn n(&self) -> f64 {
        self.alpha
    }
}

/// `m * base - n * distorted`, elementwise.
pub fn contrast(base: &[f64], distorted: &[f64], cfg: &CdConfig) -> Result<Vec<f64>> {
    contrast_mn(base, distorted, cfg.m(), cfg.n())
}

/// Contrast with explicit coefficients.
pub fn contrast_mn(base: &[f64], distorted: &[f64], m: f64, n: f64) -> Result<Vec<f64>> {
    if base.len() != distorted.len() {
        return Err(Error::invalid(format!(
            "contrast of lengths {} and {}",
            base.len(),
            distorted.len()
        )));
    }
    Ok(base
        .iter()
        .zip(distorted)
        .map(|(b, d)| m * b - n * d)
        .collect())
}

/// An action per generated token.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Workflow(pub Vec<Action>);

impl Workflow {
    pub fn constant(action: Action, len: usize) -> Self {
        Workflow(vec![action; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    /// Copy extended with `Null` up to `len`.
    pub fn padded(&self, len: usize) -> Workflow {
        let mut v = self.0.clone();
        if v.len() < len {
            v.resize(len, Action::Null);
        }
        Workflow(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub token: Token,
    /// Chosen logit minus the runner-up.
    pub margin: f64,
    /// Softmax probability of the chosen token under the decoding logits.
    pub confidence: f64,
}

/// Logits actually decoded from under `action`.
pub fn step_logits(
    model: &SimModel,
    sample: &Sample,
    history: &[Token],
    action: Action,
    cfg: &CdConfig,
) -> Result<Vec<f64>> {
    let bundle = model.logits(sample, history)?;
    match action {
        Action::Null => Ok(bundle.base),
        a => contrast(&bundle.base, distorted_stream(&bundle, a)?, cfg),
    }
}

/// Greedy next token under `action`; ties go to the lowest token index.
pub fn decode_step(
    model: &SimModel,
    sample: &Sample,
    history: &[Token],
    action: Action,
    cfg: &CdConfig,
) -> Result<StepOutput> {
    let logits = step_logits(model, sample, history, action, cfg)?;
    let best = argmax(&logits);
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    Ok(StepOutput {
        token: Token(best as u8),
        margin: logits[best] - runner_up,
        confidence: probs[best],
    })
}

/// Everything recorded while decoding one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Tokens the decoder started from (BOS for describe).
    pub prompt: Vec<Token>,
    pub generated: Vec<Token>,
    pub actions: Vec<Action>,
    /// Final hidden sequence; step `t` saw `snapshot_len(t)` leading states.
    pub hidden: HiddenSeq,
    pub margins: Vec<f64>,
    pub confidences: Vec<f64>,
}

impl DecodeResult {
    /// Prompt followed by generated tokens.
    pub fn tokens(&self) -> Vec<Token> {
        let mut v = self.prompt.clone();
        v.extend_from_slice(&self.generated);
        v
    }

    pub fn workflow(&self) -> Workflow {
        Workflow(self.actions.clone())
    }

    pub fn steps(&self) -> usize {
        self.generated.len()
    }

    pub fn snapshot_len(&self, step: usize) -> usize {
        self.hidden.image_len() + self.hidden.query_len() + self.prompt.len() + step
    }

    /// Hidden states visible before step `step`.
    pub fn snapshot(&self, step: usize) -> Matrix {
        self.hidden.prefix(self.snapshot_len(step))
    }
}

/// Greedy decoding where `choose(step, states)` picks each step's action.
pub fn decode_with<F>(
    model: &SimModel,
    sample: &Sample,
    cfg: &CdConfig,
    mut choose: F,
) -> Result<DecodeResult>
where
    F: FnMut(usize, &HiddenSeq) -> Result<Action>,
{
    let prompt = model.prompt_history(sample);
    let mut history = prompt.clone();
    let mut hidden = model.encode(sample, &prompt);
    let mut out = DecodeResult {
        prompt,
        generated: Vec::new(),
        actions: Vec::new(),
        hidden: hidden.clone(),
        margins: Vec::new(),
        confidences: Vec::new(),
    };
    while !model.is_finished(sample, &history) {
        let step = out.generated.len();
        let action = choose(step, &hidden)?;
        let s = decode_step(model, sample, &history, action, cfg)?;
        history.push(s.token);
        hidden.append(s.token);
        out.generated.push(s.token);
        out.actions.push(action);
        out.margins.push(s.margin);
        out.confidences.push(s.confidence);
    }
    out.hidden = hidden;
    Ok(out)
}

/// Decodes with `workflow[t]` at step `t`.
pub fn run_workflow(
    model: &SimModel,
    sample: &Sample,
    workflow: &Workflow,
    cfg: &CdConfig,
) -> Result<DecodeResult> {
    decode_with(model, sample, cfg, |step, _| {
        workflow.0.get(step).copied().ok_or_else(|| {
            Error::invalid(format!(
                "workflow of length {} ran out at step {step}; pad it with null",
                workflow.len()
            ))
        })
    })
}

/// Plain greedy decoding of the base stream.
pub fn decode_base(model: &SimModel, sample: &Sample, cfg: &CdConfig) -> Result<DecodeResult> {
    decode_with(model, sample, cfg, |_, _| Ok(Action::Null))
}

/// Decoding where the head chooses every step's action from the current hidden states.
pub fn decode_with_policy(
    model: &SimModel,
    sample: &Sample,
    head: &HeadParams,
    cfg: &CdConfig,
) -> Result<(DecodeResult, Workflow)> {
    if head.config().d != model.config().hidden_dim {
        return Err(Error::invalid(format!(
            "head width {} does not match model hidden width {}",
            head.config().d,
            model.config().hidden_dim
        )));
    }
    let result = decode_with(model, sample, cfg, |_, hidden| {
        let (logits, _) = head_forward(head, hidden.states())?;
        Ok(select_action(&logits))
    })?;
    let wf = result.workflow();
    Ok((result, wf))
}
