//! Generative (CHAIR-style) and discriminative (yes/no) hallucination metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Answer, CooccurrencePrior, ObjectId, Scene, Token};

/// Object tokens in order of appearance, repeats kept.
pub fn mention_multiset(tokens: &[Token]) -> Vec<ObjectId> {
    tokens.iter().filter_map(|t| t.object()).collect()
}

/// Distinct objects mentioned in a response.
pub fn parse_mentions(tokens: &[Token]) -> BTreeSet<ObjectId> {
    mention_multiset(tokens).into_iter().collect()
}

/// Per-response counts that the dataset metrics pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseStats {
    pub mentions: usize,
    pub hallucinated: usize,
    pub prior_hallucinated: usize,
    pub covered: usize,
    pub objects: usize,
}

impl ResponseStats {
    pub fn evaluate(tokens: &[Token], scene: &Scene, prior: &CooccurrencePrior) -> Self {
        let mentions = parse_mentions(tokens);
        let prior_set = scene.prior_set(prior);
        let mut s = ResponseStats {
            mentions: mentions.len(),
            objects: scene.objects.len(),
            ..Default::default()
        };
        for o in &mentions {
            if scene.contains(*o) {
                s.covered += 1;
            } else {
                s.hallucinated += 1;
                if prior_set.contains(o) {
                    s.prior_hallucinated += 1;
                }
            }
        }
        s
    }

    /// Hallucinated share of this response's mentions (0 with no mentions).
    pub fn chair(&self) -> f64 {
        ratio(self.hallucinated, self.mentions)
    }

    pub fn cover(&self) -> f64 {
        ratio(self.covered, self.objects)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenCounts {
    pub responses: usize,
    pub hallucinated_responses: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
    pub prior_hallucinated_mentions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMetrics {
    pub chair_s: f64,
    pub chair_i: f64,
    pub cover: f64,
    pub hal: f64,
    pub cog: f64,
    pub counts: GenCounts,
}

impl GenMetrics {
    pub fn from_stats(stats: &[ResponseStats]) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::invalid("generative metrics need at least one response"));
        }
        let mut c = GenCounts {
            responses: stats.len(),
            ..Default::default()
        };
        let mut cover = 0.0;
        for s in stats {
            c.mentions += s.mentions;
            c.hallucinated_mentions += s.hallucinated;
            c.prior_hallucinated_mentions += s.prior_hallucinated;
            c.hallucinated_responses += usize::from(s.hallucinated > 0);
            cover += s.cover();
        }
        let chair_s = ratio(c.hallucinated_responses, c.responses);
        Ok(GenMetrics {
            chair_s,
            chair_i: ratio(c.hallucinated_mentions, c.mentions),
            cover: cover / stats.len() as f64,
            hal: chair_s,
            cog: ratio(c.prior_hallucinated_mentions, c.mentions),
            counts: c,
        })
    }
}

pub fn gen_metrics(
    responses: &[Vec<Token>],
    scenes: &[&Scene],
    prior: &CooccurrencePrior,
) -> Result<GenMetrics> {
    if responses.len() != scenes.len() {
        return Err(Error::invalid(format!(
            "{} responses for {} scenes",
            responses.len(),
            scenes.len()
        )));
    }
    let stats: Vec<ResponseStats> = responses
        .iter()
        .zip(scenes)
        .map(|(r, s)| ResponseStats::evaluate(r, s, prior))
        .collect();
    GenMetrics::from_stats(&stats)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: DiscCounts,
}

/// Accuracy and F1 with "yes" as the positive class.
pub fn disc_metrics(predictions: &[Answer], gold: &[Answer]) -> Result<DiscMetrics> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::invalid("discriminative metrics need at least one sample"));
    }
    let mut c = DiscCounts::default();
    for (p, g) in predictions.iter().zip(gold) {
        match (p, g) {
            (Answer::Yes, Answer::Yes) => c.tp += 1,
            (Answer::Yes, Answer::No) => c.fp += 1,
            (Answer::No, Answer::Yes) => c.fn_ += 1,
            (Answer::No, Answer::No) => c.tn += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DiscMetrics {
        accuracy: ratio(c.tp + c.tn, gold.len()),
        precision,
        recall,
        f1,
        counts: c,
    })
}
