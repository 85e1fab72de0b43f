//! The synthetic universe: a 32-token vocabulary, a clustered object
//! co-occurrence prior, scenes with an injected hallucination cause, and
//! describe / exists task samples.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Matrix;

pub const NUM_OBJECTS: usize = 24;
pub const NUM_CLUSTERS: usize = 4;
pub const CLUSTER_SIZE: usize = 6;
pub const VOCAB_SIZE: usize = 32;
pub const IMAGE_TOKENS: usize = 8;
pub const FEATURE_DIM: usize = 32;
pub const MIN_SCENE_OBJECTS: usize = 3;
pub const MAX_SCENE_OBJECTS: usize = 6;
pub const WITHIN_CLUSTER: f64 = 0.6;
pub const CROSS_CLUSTER: f64 = 0.05;
/// Mean co-occurrence with a scene at or above which an absent object is bait.
pub const PRIOR_SET_THRESHOLD: f64 = 0.3;
pub const SALIENCE_RANGE: (f64, f64) = (0.75, 1.0);
pub const FEATURE_NOISE: f64 = 0.05;

/// Feature channels of an image-token state.
pub mod channel {
    /// Objects occupy channels `0..24`, one per object id.
    pub const BLIND: usize = 24;
    pub const PRIOR_STRENGTH: usize = 25;
    pub const EVIDENCE_STRENGTH: usize = 26;
    pub const SEG_IMAGE: usize = 27;
    pub const SEG_QUERY: usize = 28;
    pub const SEG_GENERATED: usize = 29;
    pub const FUNCTION_A: usize = 30;
    pub const FUNCTION_B: usize = 31;
}

const OBJECT_NAMES: [&str; NUM_OBJECTS] = [
    "cup", "plate", "fork", "knife", "bowl", "oven", // kitchen
    "car", "bus", "bicycle", "person", "traffic_light", "bench", // street
    "dog", "cat", "bird", "horse", "frisbee", "tree", // park
    "sofa", "tv", "lamp", "book", "chair", "clock", // living room
];

const FUNCTION_NAMES: [&str; 8] = ["<bos>", "<eos>", "a", "the", "and", "yes", "no", "<pad>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Token(pub u8);

impl Token {
    pub const BOS: Token = Token(24);
    pub const EOS: Token = Token(25);
    pub const A: Token = Token(26);
    pub const THE: Token = Token(27);
    pub const AND: Token = Token(28);
    pub const YES: Token = Token(29);
    pub const NO: Token = Token(30);
    pub const PAD: Token = Token(31);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn object(self) -> Option<ObjectId> {
        (self.index() < NUM_OBJECTS).then_some(ObjectId(self.0))
    }

    pub fn name(self) -> &'static str {
        Vocab.name(self)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectId(pub u8);

impl ObjectId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn token(self) -> Token {
        Token(self.0)
    }

    pub fn cluster(self) -> usize {
        self.index() / CLUSTER_SIZE
    }

    /// Position inside its cluster, `0..6`.
    pub fn rank_in_cluster(self) -> usize {
        self.index() % CLUSTER_SIZE
    }

    pub fn name(self) -> &'static str {
        OBJECT_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = ObjectId> {
        (0..NUM_OBJECTS as u8).map(ObjectId)
    }
}

/// Token table: 24 object nouns at `0..24`, then 8 function tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct Vocab;

impl Vocab {
    pub const fn len(&self) -> usize {
        VOCAB_SIZE
    }

    pub const fn is_empty(&self) -> bool {
        false
    }

    pub const fn object_range(&self) -> std::ops::Range<usize> {
        0..NUM_OBJECTS
    }

    pub fn name(&self, t: Token) -> &'static str {
        let i = t.index();
        if i < NUM_OBJECTS {
            OBJECT_NAMES[i]
        } else {
            FUNCTION_NAMES[i - NUM_OBJECTS]
        }
    }

    pub fn lookup(&self, name: &str) -> Option<Token> {
        OBJECT_NAMES
            .iter()
            .chain(FUNCTION_NAMES.iter())
            .position(|n| *n == name)
            .map(|i| Token(i as u8))
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE as u8).map(Token)
    }
}

/// Symmetric object co-occurrence matrix over four clusters of six.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrencePrior {
    p: Vec<f64>,
}

impl CooccurrencePrior {
    pub fn new(within: f64, cross: f64) -> Self {
        let mut p = vec![0.0; NUM_OBJECTS * NUM_OBJECTS];
        for a in ObjectId::all() {
            for b in ObjectId::all() {
                if a != b {
                    p[a.index() * NUM_OBJECTS + b.index()] = if a.cluster() == b.cluster() {
                        within
                    } else {
                        cross
                    };
                }
            }
        }
        CooccurrencePrior { p }
    }

    #[inline]
    pub fn get(&self, a: ObjectId, b: ObjectId) -> f64 {
        self.p[a.index() * NUM_OBJECTS + b.index()]
    }

    pub fn cluster_of(&self, o: ObjectId) -> usize {
        o.cluster()
    }

    /// Mean co-occurrence of `o` with the objects in `context` (0 for an empty context).
    pub fn affinity(&self, o: ObjectId, context: &[ObjectId]) -> f64 {
        if context.is_empty() {
            return 0.0;
        }
        context.iter().map(|c| self.get(o, *c)).sum::<f64>() / context.len() as f64
    }

    /// Absent objects whose mean co-occurrence with the scene reaches the bait threshold.
    pub fn prior_set(&self, scene_objects: &[ObjectId]) -> Vec<ObjectId> {
        ObjectId::all()
            .filter(|o| !scene_objects.contains(o))
            .filter(|o| self.affinity(*o, scene_objects) >= PRIOR_SET_THRESHOLD)
            .collect()
    }
}

impl Default for CooccurrencePrior {
    fn default() -> Self {
        CooccurrencePrior::new(WITHIN_CLUSTER, CROSS_CLUSTER)
    }
}

/// The prior is fully pinned by its cluster constants; the seed is accepted
/// for interface symmetry with the other generators.
pub fn gen_prior(_seed: u64) -> CooccurrencePrior {
    CooccurrencePrior::default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationCause {
    None,
    Prior,
    VisLoss,
    AttnBias,
}

impl HallucinationCause {
    pub const ALL: [HallucinationCause; 4] = [
        HallucinationCause::None,
        HallucinationCause::Prior,
        HallucinationCause::VisLoss,
        HallucinationCause::AttnBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HallucinationCause::None => "none",
            HallucinationCause::Prior => "prior",
            HallucinationCause::VisLoss => "vis_loss",
            HallucinationCause::AttnBias => "attn_bias",
        }
    }
}

/// Probability of each cause, in `HallucinationCause::ALL` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauseMix(pub [f64; 4]);

impl CauseMix {
    pub fn uniform() -> Self {
        CauseMix([0.25; 4])
    }

    pub fn only(cause: HallucinationCause) -> Self {
        let mut w = [0.0; 4];
        w[cause as usize] = 1.0;
        CauseMix(w)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "cause mix must be non-negative and sum to 1, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

impl Default for CauseMix {
    fn default() -> Self {
        CauseMix::uniform()
    }
}

/// A synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<ObjectId>,
    /// Visual evidence strength of each object, parallel to `objects`.
    pub saliences: Vec<f64>,
    pub blind_object: ObjectId,
    /// Image token that carries the blind-channel activation.
    pub blind_token: usize,
    pub cause: HallucinationCause,
    /// Cause-independent visual features, `IMAGE_TOKENS x FEATURE_DIM`.
    pub features: Matrix,
}

impl Scene {
    /// Rebuilds saliences and features deterministically from the scene id.
    pub fn materialize(
        id: u64,
        objects: Vec<ObjectId>,
        blind_object: ObjectId,
        cause: HallucinationCause,
    ) -> Result<Scene> {
        validate_scene_parts(&objects, blind_object)?;
        let mut rng = RngState::keyed(0, "scene-features", &[id]);
        let (lo, hi) = SALIENCE_RANGE;
        let saliences: Vec<f64> = objects.iter().map(|_| lo + (hi - lo) * rng.uniform()).collect();
        let free = IMAGE_TOKENS - objects.len();
        let blind_token = objects.len() + rng.below(free);
        let noise = rng.gaussian(IMAGE_TOKENS * (channel::BLIND + 1), FEATURE_NOISE);
        let mut features = Matrix::zeros(IMAGE_TOKENS, FEATURE_DIM);
        for tok in 0..IMAGE_TOKENS {
            let row = features.row_mut(tok);
            row[..=channel::BLIND]
                .copy_from_slice(&noise[tok * (channel::BLIND + 1)..(tok + 1) * (channel::BLIND + 1)]);
        }
        for (i, (o, s)) in objects.iter().zip(&saliences).enumerate() {
            let v = features.get(i, o.index());
            features.set(i, o.index(), v + s);
        }
        let v = features.get(blind_token, channel::BLIND);
        features.set(blind_token, channel::BLIND, v + 1.0);
        Ok(Scene {
            id,
            objects,
            saliences,
            blind_object,
            blind_token,
            cause,
            features,
        })
    }

    pub fn contains(&self, o: ObjectId) -> bool {
        self.objects.contains(&o)
    }

    pub fn salience(&self, o: ObjectId) -> Option<f64> {
        self.objects
            .iter()
            .position(|x| *x == o)
            .map(|i| self.saliences[i])
    }

    pub fn prior_set(&self, prior: &CooccurrencePrior) -> Vec<ObjectId> {
        prior.prior_set(&self.objects)
    }

    pub fn validate(&self) -> Result<()> {
        validate_scene_parts(&self.objects, self.blind_object)
    }
}

fn validate_scene_parts(objects: &[ObjectId], blind: ObjectId) -> Result<()> {
    if !(MIN_SCENE_OBJECTS..=MAX_SCENE_OBJECTS).contains(&objects.len()) {
        return Err(Error::invalid(format!(
            "scene needs {MIN_SCENE_OBJECTS}..={MAX_SCENE_OBJECTS} objects, got {}",
            objects.len()
        )));
    }
    if objects.iter().any(|o| o.index() >= NUM_OBJECTS) || blind.index() >= NUM_OBJECTS {
        return Err(Error::invalid("object id out of range"));
    }
    for (i, o) in objects.iter().enumerate() {
        if objects[..i].contains(o) {
            return Err(Error::invalid(format!("duplicate object {}", o.name())));
        }
    }
    if objects.contains(&blind) {
        return Err(Error::invalid("blind object must be absent from the scene"));
    }
    Ok(())
}

/// Draws one scene: a uniform anchor, co-occurrence-weighted companions,
/// a uniformly chosen absent blind object, and a cause from `mix`.
pub fn gen_scene(rng: &mut RngState, prior: &CooccurrencePrior, mix: &CauseMix) -> Result<Scene> {
    mix.validate()?;
    let n = MIN_SCENE_OBJECTS + rng.below(MAX_SCENE_OBJECTS - MIN_SCENE_OBJECTS + 1);
    let mut objects = vec![ObjectId(rng.below(NUM_OBJECTS) as u8)];
    while objects.len() < n {
        let weights: Vec<f64> = ObjectId::all()
            .map(|o| {
                if objects.contains(&o) {
                    0.0
                } else {
                    prior.affinity(o, &objects)
                }
            })
            .collect();
        objects.push(ObjectId(rng.weighted(&weights) as u8));
    }
    let absent: Vec<ObjectId> = ObjectId::all().filter(|o| !objects.contains(o)).collect();
    let blind = absent[rng.below(absent.len())];
    let cause = HallucinationCause::ALL[rng.weighted(&mix.0)];
    let id = rng.next_u64() & ((1u64 << 53) - 1);
    Scene::materialize(id, objects, blind, cause)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn token(self) -> Token {
        match self {
            Answer::Yes => Token::YES,
            Answer::No => Token::NO,
        }
    }

    pub fn from_token(t: Token) -> Option<Answer> {
        match t {
            Token::YES => Some(Answer::Yes),
            Token::NO => Some(Answer::No),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Describe,
    Exists { object: ObjectId, gold: Answer },
}

impl Task {
    pub fn is_describe(&self) -> bool {
        matches!(self, Task::Describe)
    }
}

/// Fixed prompt standing in for "describe this image in detail".
pub const DESCRIBE_PROMPT: [Token; 2] = [Token::THE, Token::A];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub scene: Scene,
    pub task: Task,
}

impl Sample {
    pub fn query_tokens(&self) -> Vec<Token> {
        match self.task {
            Task::Describe => DESCRIBE_PROMPT.to_vec(),
            Task::Exists { object, .. } => vec![Token::THE, object.token()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if let Task::Exists { object, gold } = self.task {
            let expected = if self.scene.contains(object) {
                Answer::Yes
            } else {
                Answer::No
            };
            if gold != expected {
                return Err(Error::DataIntegrity(format!(
                    "sample {}: gold label disagrees with scene membership",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_describe: usize,
    pub n_exists: usize,
    pub cause_mix: CauseMix,
}

impl DatasetConfig {
    pub fn describe(n: usize, cause_mix: CauseMix) -> Self {
        DatasetConfig {
            n_describe: n,
            n_exists: 0,
            cause_mix,
        }
    }

    pub fn exists(n: usize, cause_mix: CauseMix) -> Self {
        DatasetConfig {
            n_describe: 0,
            n_exists: n,
            cause_mix,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Sample> {
        self.samples
            .get(id as usize)
            .filter(|s| s.id == id)
            .or_else(|| self.samples.iter().find(|s| s.id == id))
    }

    pub fn describe_samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.task.is_describe())
    }

    pub fn exists_samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| !s.task.is_describe())
    }

    /// One JSON object per line with sorted keys.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let rec = SampleRecord::from(s);
            out.push_str(&serde_json::to_string(&rec).expect("sample record serializes"));
            out.push('\n');
        }
        out
    }

    /// Fingerprint of the serialized form.
    pub fn fingerprint(&self) -> String {
        crate::io::fingerprint_bytes(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl(text: &str) -> Result<Dataset> {
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(line).map_err(|e| {
                Error::DataIntegrity(format!("dataset line {}: {e}", lineno + 1))
            })?;
            samples.push(rec.into_sample()?);
        }
        Ok(Dataset { samples })
    }
}

/// Generates `n_describe` describe samples followed by `n_exists` balanced
/// exists samples, each on its own scene.
pub fn gen_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.cause_mix.validate()?;
    let prior = CooccurrencePrior::default();
    let mut scene_rng = RngState::new(seed, "scene-gen");
    let mut query_rng = RngState::new(seed, "query-gen");
    let mut samples = Vec::with_capacity(config.n_describe + config.n_exists);
    for _ in 0..config.n_describe {
        let scene = gen_scene(&mut scene_rng, &prior, &config.cause_mix)?;
        samples.push(Sample {
            id: samples.len() as u64,
            scene,
            task: Task::Describe,
        });
    }
    for i in 0..config.n_exists {
        let scene = gen_scene(&mut scene_rng, &prior, &config.cause_mix)?;
        let task = if i % 2 == 0 {
            let object = scene.objects[query_rng.below(scene.objects.len())];
            Task::Exists {
                object,
                gold: Answer::Yes,
            }
        } else {
            Task::Exists {
                object: pick_absent_query(&mut query_rng, &scene, &prior),
                gold: Answer::No,
            }
        };
        samples.push(Sample {
            id: samples.len() as u64,
            scene,
            task,
        });
    }
    Ok(Dataset { samples })
}

/// Absent query: the blind object, a prior-set object, or any absent object,
/// each with probability 1/3.
fn pick_absent_query(rng: &mut RngState, scene: &Scene, prior: &CooccurrencePrior) -> ObjectId {
    let absent: Vec<ObjectId> = ObjectId::all().filter(|o| !scene.contains(*o)).collect();
    match rng.below(3) {
        0 => scene.blind_object,
        1 => {
            let bait = scene.prior_set(prior);
            if bait.is_empty() {
                absent[rng.below(absent.len())]
            } else {
                bait[rng.below(bait.len())]
            }
        }
        _ => absent[rng.below(absent.len())],
    }
}

/// Serialized form of a sample. Field order is alphabetical, so the JSON
/// keys come out sorted.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    blind_object: String,
    cause: HallucinationCause,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_label: Option<Answer>,
    objects: Vec<String>,
    query_tokens: Vec<String>,
    sample_id: u64,
    scene_id: u64,
    task: String,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        let (task, gold) = match s.task {
            Task::Describe => ("describe", None),
            Task::Exists { gold, .. } => ("exists", Some(gold)),
        };
        SampleRecord {
            blind_object: s.scene.blind_object.name().to_string(),
            cause: s.scene.cause,
            gold_label: gold,
            objects: s.scene.objects.iter().map(|o| o.name().to_string()).collect(),
            query_tokens: s.query_tokens().iter().map(|t| t.name().to_string()).collect(),
            sample_id: s.id,
            scene_id: s.scene.id,
            task: task.to_string(),
        }
    }
}

fn parse_object(name: &str) -> Result<ObjectId> {
    Vocab
        .lookup(name)
        .and_then(Token::object)
        .ok_or_else(|| Error::DataIntegrity(format!("unknown object `{name}`")))
}

impl SampleRecord {
    fn into_sample(self) -> Result<Sample> {
        let objects = self
            .objects
            .iter()
            .map(|n| parse_object(n))
            .collect::<Result<Vec<_>>>()?;
        let blind = parse_object(&self.blind_object)?;
        let scene = Scene::materialize(self.scene_id, objects, blind, self.cause)
            .map_err(|e| Error::DataIntegrity(format!("sample {}: {e}", self.sample_id)))?;
        let task = match self.task.as_str() {
            "describe" => Task::Describe,
            "exists" => {
                let object = self
                    .query_tokens
                    .get(1)
                    .ok_or_else(|| Error::DataIntegrity("exists query lacks an object".into()))
                    .and_then(|n| parse_object(n))?;
                let gold = self
                    .gold_label
                    .ok_or_else(|| Error::DataIntegrity("exists sample lacks gold_label".into()))?;
                Task::Exists { object, gold }
            }
            other => return Err(Error::DataIntegrity(format!("unknown task `{other}`"))),
        };
        let sample = Sample {
            id: self.sample_id,
            scene,
            task,
        };
        let expected: Vec<String> = sample.query_tokens().iter().map(|t| t.name().to_string()).collect();
        if expected != self.query_tokens {
            return Err(Error::DataIntegrity(format!(
                "sample {}: query tokens {:?} do not match task",
                sample.id, self.query_tokens
            )));
        }
        sample.validate()?;
        Ok(sample)
    }
}
