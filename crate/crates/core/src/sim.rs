//! A toy autoregressive vision-language model.
//!
//! Next-token logits are a weighted sum of four named components:
//!
//! * `G` grammar/template term. It forces `BOS ("a" obj)* EOS` for describe
//!   and `{yes, no}` for exists, and carries an *ungrounded* part `U`
//!   (object popularity, or a yes-bias) that ignores the image.
//! * `V` visual evidence for unmentioned scene objects (or for the correct
//!   exists answer).
//! * `L` co-occurrence prior toward objects related to the context,
//!   regardless of presence.
//! * `B` spurious mass on the scene's blind object.
//!
//! A scene's cause re-weights the components (`Prior` raises `w_L`,
//! `VisLoss` lowers `w_V`, `AttnBias` raises `w_B`). Every call also builds
//! the three distorted streams used for contrast:
//!
//! ```text
//! base = G + wV V + wL L + wB B + n0
//! S1   = G + k wL L + n1                          (noise image)
//! S2   = G + (k-1) U + wL Lbar + wB Bbar + n2     (query masked)
//! S3   = G + wL L + k wB B + n3                   (blind-token image)
//! ```
//!
//! With `m = 2, n = 1` and `k = 2`, contrasting against S1 cancels `L`,
//! against S2 cancels `U`, and against S3 cancels `B`.

use serde::{Deserialize, Serialize};

use crate::cd::Action;
use crate::error::{Error, Result};
pub use crate::io::fingerprint_json;
use crate::rng::RngState;
use crate::tensor::Matrix;
use crate::world::{
    channel, CooccurrencePrior, HallucinationCause, ObjectId, Sample, Scene, Task, Token,
    FEATURE_DIM, IMAGE_TOKENS, NUM_OBJECTS, VOCAB_SIZE,
};

/// Fixed configuration of the simulated model. Field names are the JSON keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Clean component weights.
    pub w_visual: f64,
    pub w_prior: f64,
    pub w_bias: f64,
    /// Corrupted weights, one per cause.
    pub prior_cause_w_prior: f64,
    pub vis_loss_w_visual: f64,
    pub attn_bias_w_bias: f64,
    /// Amplification of the corrupting component inside a distorted stream.
    pub kappa: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub max_decode_len: usize,
    /// Grammar score of EOS at a continuation slot.
    pub eos_threshold: f64,
    /// Ungrounded preference for continuing ("a") over stopping.
    pub continue_bias: f64,
    /// Ungrounded popularity of an object by its rank inside its cluster.
    pub popularity: [f64; 6],
    /// Ungrounded preference for answering "yes".
    pub yes_bias: f64,
    /// Visual evidence for "no" when the queried object is absent.
    pub absence_evidence: f64,
    /// Grammar score of tokens the template forbids.
    pub forbidden_logit: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: FEATURE_DIM,
            w_visual: 4.0,
            w_prior: 1.0,
            w_bias: 0.0,
            prior_cause_w_prior: 4.0,
            vis_loss_w_visual: 1.0,
            attn_bias_w_bias: 4.0,
            kappa: 2.0,
            noise_sigma: 0.05,
            noise_seed: 0,
            max_decode_len: 16,
            eos_threshold: 0.9,
            continue_bias: 0.0,
            popularity: [2.2, 0.0, 0.0, 0.0, 0.0, 0.0],
            yes_bias: 1.2,
            absence_evidence: 0.5,
            forbidden_logit: -50.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.w_visual,
            self.w_prior,
            self.w_bias,
            self.prior_cause_w_prior,
            self.vis_loss_w_visual,
            self.attn_bias_w_bias,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("component weights must be non-negative"));
        }
        if !(self.kappa > 1.0) {
            return Err(Error::invalid("kappa must exceed 1"));
        }
        if self.hidden_dim != FEATURE_DIM {
            return Err(Error::invalid(format!("hidden_dim must be {FEATURE_DIM}")));
        }
        if self.max_decode_len == 0 {
            return Err(Error::invalid("max_decode_len must be positive"));
        }
        Ok(())
    }

    pub fn weights(&self, cause: HallucinationCause) -> ComponentWeights {
        let mut w = ComponentWeights {
            visual: self.w_visual,
            prior: self.w_prior,
            bias: self.w_bias,
        };
        match cause {
            HallucinationCause::None => {}
            HallucinationCause::Prior => w.prior = self.prior_cause_w_prior,
            HallucinationCause::VisLoss => w.visual = self.vis_loss_w_visual,
            HallucinationCause::AttnBias => w.bias = self.attn_bias_w_bias,
        }
        w
    }

    pub fn popularity_of(&self, o: ObjectId) -> f64 {
        self.popularity[o.rank_in_cluster()]
    }

    /// Short hex digest of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub visual: f64,
    pub prior: f64,
    pub bias: f64,
}

/// Per-token component vectors behind one step's logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    /// Full template term, ungrounded part included.
    pub grammar: Vec<f64>,
    /// The ungrounded part of `grammar` alone.
    pub ungrounded: Vec<f64>,
    pub visual: Vec<f64>,
    pub prior: Vec<f64>,
    /// Query-marginal prior.
    pub prior_marginal: Vec<f64>,
    pub bias: Vec<f64>,
    /// Query-marginal blind bias.
    pub bias_marginal: Vec<f64>,
    /// Stream noise for base, S1, S2, S3.
    pub noise: [Vec<f64>; 4],
}

/// Base logits plus the three distorted streams for one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBundle {
    pub base: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
    pub weights: ComponentWeights,
    pub kappa: f64,
    pub components: Components,
}

impl LogitBundle {
    fn compose(components: Components, weights: ComponentWeights, kappa: f64) -> LogitBundle {
        let c = &components;
        let w = weights;
        let base = (0..VOCAB_SIZE)
            .map(|i| base_entry(c, w, i))
            .collect::<Vec<_>>();
        let s1 = (0..VOCAB_SIZE)
            .map(|i| c.grammar[i] + kappa * w.prior * c.prior[i] + c.noise[1][i])
            .collect();
        let s2 = (0..VOCAB_SIZE)
            .map(|i| {
                c.grammar[i]
                    + (kappa - 1.0) * c.ungrounded[i]
                    + w.prior * c.prior_marginal[i]
                    + w.bias * c.bias_marginal[i]
                    + c.noise[2][i]
            })
            .collect();
        let s3 = (0..VOCAB_SIZE)
            .map(|i| {
                c.grammar[i] + w.prior * c.prior[i] + kappa * w.bias * c.bias[i] + c.noise[3][i]
            })
            .collect();
        LogitBundle {
            base,
            s1,
            s2,
            s3,
            weights,
            kappa,
            components,
        }
    }

    /// Recomputes the base stream from the retained components.
    pub fn reconstruct_base(&self) -> Vec<f64> {
        (0..VOCAB_SIZE)
            .map(|i| base_entry(&self.components, self.weights, i))
            .collect()
    }
}

#[inline]
fn base_entry(c: &Components, w: ComponentWeights, i: usize) -> f64 {
    c.grammar[i] + w.visual * c.visual[i] + w.prior * c.prior[i] + w.bias * c.bias[i] + c.noise[0][i]
}

/// Matching distorted stream for a strategy.
pub fn distorted_stream(bundle: &LogitBundle, action: Action) -> Result<&[f64]> {
    match action {
        Action::Null => Err(Error::ContractViolation(
            "the null action never consults a distorted stream".into(),
        )),
        Action::S1 => Ok(&bundle.s1),
        Action::S2 => Ok(&bundle.s2),
        Action::S3 => Ok(&bundle.s3),
    }
}

/// Hidden states for image tokens, query tokens, then history tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSeq {
    states: Matrix,
    image_len: usize,
    query_len: usize,
}

impl HiddenSeq {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    pub fn image_len(&self) -> usize {
        self.image_len
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    /// Number of history (generated) states.
    pub fn history_len(&self) -> usize {
        self.len() - self.image_len - self.query_len
    }

    pub fn states(&self) -> &Matrix {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[f64] {
        self.states.row(i)
    }

    /// Snapshot holding only the first `n` states.
    pub fn prefix(&self, n: usize) -> Matrix {
        self.states.head_rows(n)
    }

    pub fn append(&mut self, token: Token) {
        self.states
            .push_row(&token_state(token, channel::SEG_GENERATED))
            .expect("token states have the hidden width");
    }
}

fn token_state(token: Token, segment: usize) -> Vec<f64> {
    let mut h = vec![0.0; FEATURE_DIM];
    match token.object() {
        Some(o) => h[o.index()] = 1.0,
        None => {
            let k = (token.index() - NUM_OBJECTS) as f64;
            let angle = std::f64::consts::TAU * k / 8.0;
            h[channel::FUNCTION_A] = angle.cos();
            h[channel::FUNCTION_B] = angle.sin();
        }
    }
    h[segment] = 1.0;
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    /// After BOS or an object: "a" or EOS.
    Continue,
    /// After "a": an unmentioned object.
    Object,
    /// The single exists answer.
    Answer,
}

/// The frozen simulator.
#[derive(Clone, Debug)]
pub struct SimModel {
    config: ModelConfig,
    prior: CooccurrencePrior,
}

impl SimModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(SimModel {
            config,
            prior: CooccurrencePrior::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prior(&self) -> &CooccurrencePrior {
        &self.prior
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// Tokens the decoder starts from: BOS for describe, nothing for exists.
    pub fn prompt_history(&self, sample: &Sample) -> Vec<Token> {
        match sample.task {
            Task::Describe => vec![Token::BOS],
            Task::Exists { .. } => Vec::new(),
        }
    }

    /// Maximum number of generated tokens for this task.
    pub fn max_steps(&self, sample: &Sample) -> usize {
        match sample.task {
            Task::Describe => self.config.max_decode_len,
            Task::Exists { .. } => 1,
        }
    }

    /// True once `history` ends the response.
    pub fn is_finished(&self, sample: &Sample, history: &[Token]) -> bool {
        let prompt = self.prompt_history(sample).len();
        history.last() == Some(&Token::EOS)
            || history.len().saturating_sub(prompt) >= self.max_steps(sample)
    }

    /// Hidden states for the image and query (plus any given history).
    pub fn encode(&self, sample: &Sample, history: &[Token]) -> HiddenSeq {
        let w = self.config.weights(sample.scene.cause);
        let visual_scale = if self.config.w_visual > 0.0 {
            w.visual / self.config.w_visual
        } else {
            0.0
        };
        let prior_level = if self.config.prior_cause_w_prior > 0.0 {
            w.prior / self.config.prior_cause_w_prior
        } else {
            0.0
        };
        let query = sample.query_tokens();
        let mut states = Matrix::zeros(0, FEATURE_DIM);
        for tok in 0..IMAGE_TOKENS {
            let mut h = sample.scene.features.row(tok).to_vec();
            for v in &mut h[..NUM_OBJECTS] {
                *v *= visual_scale;
            }
            h[channel::BLIND] *= 1.0 + w.bias;
            h[channel::PRIOR_STRENGTH] = prior_level;
            h[channel::EVIDENCE_STRENGTH] = visual_scale;
            h[channel::SEG_IMAGE] = 1.0;
            states.push_row(&h).expect("hidden width");
        }
        for t in &query {
            states
                .push_row(&token_state(*t, channel::SEG_QUERY))
                .expect("hidden width");
        }
        let mut seq = HiddenSeq {
            states,
            image_len: IMAGE_TOKENS,
            query_len: query.len(),
        };
        for t in history {
            seq.append(*t);
        }
        seq
    }

    fn slot(&self, sample: &Sample, history: &[Token]) -> Result<Slot> {
        match sample.task {
            Task::Exists { .. } => {
                if history.is_empty() {
                    Ok(Slot::Answer)
                } else {
                    Err(Error::InvalidState("exists answer already emitted".into()))
                }
            }
            Task::Describe => {
                if history.first() != Some(&Token::BOS) {
                    return Err(Error::InvalidState("describe history must start with BOS".into()));
                }
                if history.len() > self.config.max_decode_len {
                    return Err(Error::InvalidState(format!(
                        "history exceeds max decode length {}",
                        self.config.max_decode_len
                    )));
                }
                match *history.last().expect("non-empty") {
                    Token::EOS => Err(Error::InvalidState("response already ended".into())),
                    Token::A => Ok(Slot::Object),
                    t if t == Token::BOS || t.object().is_some() => Ok(Slot::Continue),
                    t => Err(Error::InvalidState(format!("ungrammatical history token {t}"))),
                }
            }
        }
    }

    /// Logits for the next token after `history`, with every distorted stream.
    pub fn logits(&self, sample: &Sample, history: &[Token]) -> Result<LogitBundle> {
        let slot = self.slot(sample, history)?;
        let scene = &sample.scene;
        let cfg = &self.config;
        let forbid = cfg.forbidden_logit;
        let mut grammar = vec![forbid; VOCAB_SIZE];
        let mut ungrounded = vec![0.0; VOCAB_SIZE];
        let mut visual = vec![0.0; VOCAB_SIZE];
        let mut prior = vec![0.0; VOCAB_SIZE];
        let mut prior_marginal = vec![0.0; VOCAB_SIZE];
        let mut bias = vec![0.0; VOCAB_SIZE];
        let mut bias_marginal = vec![0.0; VOCAB_SIZE];

        let mentioned: Vec<ObjectId> = history.iter().filter_map(|t| t.object()).collect();
        let context: &[ObjectId] = if mentioned.is_empty() {
            &scene.objects
        } else {
            &mentioned
        };
        let unmentioned = || ObjectId::all().filter(|o| !mentioned.contains(o));

        match slot {
            Slot::Continue => {
                let a = Token::A.index();
                grammar[a] = cfg.continue_bias;
                ungrounded[a] = cfg.continue_bias;
                grammar[Token::EOS.index()] = cfg.eos_threshold;
                visual[a] = unmentioned()
                    .filter_map(|o| scene.salience(o))
                    .fold(0.0, f64::max);
                prior[a] = unmentioned()
                    .map(|o| self.prior.affinity(o, context))
                    .fold(0.0, f64::max);
                prior_marginal[a] = prior[a];
                bias[a] = if mentioned.contains(&scene.blind_object) {
                    0.0
                } else {
                    1.0
                };
                bias_marginal[a] = bias[a];
            }
            Slot::Object => {
                for o in unmentioned() {
                    let i = o.index();
                    let u = cfg.popularity_of(o);
                    grammar[i] = u;
                    ungrounded[i] = u;
                    visual[i] = scene.salience(o).unwrap_or(0.0);
                    prior[i] = self.prior.affinity(o, context);
                    prior_marginal[i] = prior[i];
                    bias[i] = if o == scene.blind_object { 1.0 } else { 0.0 };
                    bias_marginal[i] = bias[i];
                }
            }
            Slot::Answer => {
                let Task::Exists { object, .. } = sample.task else {
                    unreachable!("answer slot only for exists")
                };
                let (yes, no) = (Token::YES.index(), Token::NO.index());
                grammar[yes] = cfg.yes_bias;
                ungrounded[yes] = cfg.yes_bias;
                grammar[no] = 0.0;
                match scene.salience(object) {
                    Some(s) => visual[yes] = s,
                    None => visual[no] = cfg.absence_evidence,
                }
                prior[yes] = self.prior.affinity(object, &scene.objects);
                prior_marginal[yes] = ObjectId::all()
                    .map(|o| self.prior.affinity(o, &scene.objects))
                    .sum::<f64>()
                    / NUM_OBJECTS as f64;
                bias[yes] = if object == scene.blind_object { 1.0 } else { 0.0 };
                bias_marginal[yes] = 1.0 / NUM_OBJECTS as f64;
            }
        }

        let noise = self.noise(scene, sample, history.len());
        let components = Components {
            grammar,
            ungrounded,
            visual,
            prior,
            prior_marginal,
            bias,
            bias_marginal,
            noise,
        };
        Ok(LogitBundle::compose(
            components,
            cfg.weights(scene.cause),
            cfg.kappa,
        ))
    }

    fn noise(&self, scene: &Scene, sample: &Sample, step: usize) -> [Vec<f64>; 4] {
        let task = u64::from(!sample.task.is_describe());
        std::array::from_fn(|stream| {
            RngState::keyed(
                self.config.noise_seed,
                "noise",
                &[scene.id, task, step as u64, stream as u64],
            )
            .gaussian(VOCAB_SIZE, self.config.noise_sigma)
        })
    }
}

/// `max absent-object logit - max present-object logit`.
pub fn hallucination_margin(logits: &[f64], scene: &Scene) -> f64 {
    let mut absent = f64::NEG_INFINITY;
    let mut present = f64::NEG_INFINITY;
    for o in ObjectId::all() {
        let v = logits[o.index()];
        if scene.contains(o) {
            present = present.max(v);
        } else {
            absent = absent.max(v);
        }
    }
    absent - present
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_dataset, Answer, CauseMix, DatasetConfig};

    fn model() -> SimModel {
        SimModel::new(ModelConfig::default()).unwrap()
    }

    fn scene_with(cause: HallucinationCause) -> Scene {
        Scene::materialize(
            42,
            vec![ObjectId(0), ObjectId(1), ObjectId(7)],
            ObjectId(13),
            cause,
        )
        .unwrap()
    }

    #[test]
    fn shared_scene_shares_image_states() {
        let scene = scene_with(HallucinationCause::Prior);
        let a = Sample { id: 0, scene: scene.clone(), task: Task::Describe };
        let b = Sample {
            id: 1,
            scene,
            task: Task::Exists { object: ObjectId(0), gold: Answer::Yes },
        };
        let m = model();
        let (ha, hb) = (m.encode(&a, &[]), m.encode(&b, &[]));
        for i in 0..IMAGE_TOKENS {
            assert_eq!(ha.state(i), hb.state(i));
        }
    }

    #[test]
    fn attention_bias_lights_one_blind_token() {
        let m = model();
        let clean = Sample { id: 0, scene: scene_with(HallucinationCause::None), task: Task::Describe };
        let biased = Sample { id: 0, scene: scene_with(HallucinationCause::AttnBias), task: Task::Describe };
        let hc = m.encode(&clean, &[]);
        let hb = m.encode(&biased, &[]);
        let lit: Vec<usize> = (0..IMAGE_TOKENS)
            .filter(|&i| hb.state(i)[channel::BLIND] >= 4.0 * hc.state(i)[channel::BLIND].abs())
            .filter(|&i| hb.state(i)[channel::BLIND] > 1.0)
            .collect();
        assert_eq!(lit, vec![biased.scene.blind_token]);
    }

    #[test]
    fn appending_keeps_prior_states() {
        let m = model();
        let s = Sample { id: 0, scene: scene_with(HallucinationCause::None), task: Task::Describe };
        let mut h = m.encode(&s, &[Token::BOS]);
        let before = h.states().clone();
        h.append(Token::A);
        assert_eq!(h.len(), before.rows() + 1);
        assert_eq!(h.prefix(before.rows()), before);
        assert_eq!(h.history_len(), 2);
    }

    #[test]
    fn base_is_exact_sum_of_components() {
        let m = model();
        let d = gen_dataset(&DatasetConfig { n_describe: 10, n_exists: 10, cause_mix: CauseMix::uniform() }, 4).unwrap();
        for s in &d.samples {
            let b = m.logits(s, &m.prompt_history(s)).unwrap();
            assert_eq!(b.base, b.reconstruct_base());
        }
    }

    #[test]
    fn stream_table_rows() {
        let m = model();
        let s = Sample { id: 0, scene: scene_with(HallucinationCause::AttnBias), task: Task::Describe };
        let b = m.logits(&s, &[Token::BOS, Token::A]).unwrap();
        let c = &b.components;
        for i in 0..VOCAB_SIZE {
            // S1 carries no visual term.
            let s1 = c.grammar[i] + b.kappa * b.weights.prior * c.prior[i] + c.noise[1][i];
            assert_eq!(b.s1[i], s1);
            // S3 doubles the blind term.
            let s3_bias = b.s3[i] - c.grammar[i] - b.weights.prior * c.prior[i] - c.noise[3][i];
            assert!((s3_bias - 2.0 * b.weights.bias * c.bias[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn query_masked_stream_ignores_query() {
        let m = model();
        let scene = scene_with(HallucinationCause::AttnBias);
        let q1 = Sample { id: 0, scene: scene.clone(), task: Task::Exists { object: ObjectId(13), gold: Answer::No } };
        let q2 = Sample { id: 1, scene, task: Task::Exists { object: ObjectId(0), gold: Answer::Yes } };
        let a = m.logits(&q1, &[]).unwrap();
        let b = m.logits(&q2, &[]).unwrap();
        assert_eq!(a.s2, b.s2);
        assert_ne!(a.base, b.base);
    }

    #[test]
    fn null_has_no_stream() {
        let m = model();
        let s = Sample { id: 0, scene: scene_with(HallucinationCause::None), task: Task::Describe };
        let b = m.logits(&s, &[Token::BOS]).unwrap();
        assert!(matches!(distorted_stream(&b, Action::Null), Err(Error::ContractViolation(_))));
        assert_eq!(distorted_stream(&b, Action::S2).unwrap(), &b.s2[..]);
    }

    #[test]
    fn overlong_history_is_invalid_state() {
        let m = model();
        let s = Sample { id: 0, scene: scene_with(HallucinationCause::None), task: Task::Describe };
        let mut h = vec![Token::BOS];
        for i in 0..16 {
            h.push(if i % 2 == 0 { Token::A } else { Token(i as u8) });
        }
        assert!(matches!(m.logits(&s, &h), Err(Error::InvalidState(_))));
        assert!(matches!(m.logits(&s, &[Token::A]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn exists_clean_answers_yes_for_present() {
        let m = model();
        let s = Sample {
            id: 0,
            scene: scene_with(HallucinationCause::None),
            task: Task::Exists { object: ObjectId(1), gold: Answer::Yes },
        };
        let b = m.logits(&s, &[]).unwrap();
        assert!(b.base[Token::YES.index()] > b.base[Token::NO.index()]);
    }

    #[test]
    fn config_json_roundtrip_and_fingerprint() {
        let c = ModelConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        let other = ModelConfig { kappa: 3.0, ..c.clone() };
        assert_ne!(other.fingerprint(), c.fingerprint());
        assert!(SimModel::new(ModelConfig { kappa: 1.0, ..c }).is_err());
    }
}
