//! The decision head: a learnable decision token prepended to the model's
//! hidden states, learned position embeddings, post-LN transformer layers
//! with bidirectional attention, and an MLP from the decision token's output
//! to one logit per action.
//!
//! All parameters live in one flat vector. The canonical order (also the
//! checkpoint order) is:
//!
//! ```text
//! eye                      [d]
//! pos_embed                [max_len, d]
//! layers.{i}.attn.w_q      [d, d]       (repeated for every layer i)
//! layers.{i}.attn.w_k      [d, d]
//! layers.{i}.attn.w_v      [d, d]
//! layers.{i}.attn.w_o      [d, d]
//! layers.{i}.ln1.gamma     [d]
//! layers.{i}.ln1.beta      [d]
//! layers.{i}.ffn.w1        [ffn_hidden, d]
//! layers.{i}.ffn.b1        [ffn_hidden]
//! layers.{i}.ffn.w2        [d, ffn_hidden]
//! layers.{i}.ffn.b2        [d]
//! layers.{i}.ln2.gamma     [d]
//! layers.{i}.ln2.beta      [d]
//! mlp.w1                   [mlp_hidden, d]
//! mlp.b1                   [mlp_hidden]
//! mlp.w2                   [k, mlp_hidden]
//! mlp.b2                   [k]
//! ```
//!
//! Weight matrices are `[out, in]` and applied as `x W^T`.

mod checkpoint;
mod forward;
mod gradcheck;
mod precise;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::cd::Action;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::argmax;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use forward::{head_backward, head_backward_into, head_forward, ForwardTrace, HeadGrads};
pub use gradcheck::{head_grad_check, relative_error, GradCheckReport, REFINE_TOLERANCE};
pub(crate) use forward::logits_after_change;
pub(crate) use gradcheck::{check_coordinates, rounding_floor};
pub(crate) use precise::{central, log_softmax as precise_log_softmax, softplus as precise_softplus, lift, PreciseHead, Prepared};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub mlp_hidden: usize,
    pub k: usize,
    pub max_len: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            d: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            mlp_hidden: 64,
            k: Action::K,
            max_len: 64,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.k != Action::K {
            return Err(Error::invalid(format!("k must be {}", Action::K)));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must leave room for the decision token"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, h, k) = (self.d, self.ffn_hidden, self.mlp_hidden, self.k);
        let per_layer = 4 * d * d + 2 * d + (f * d + f) + (d * f + d) + 2 * d;
        d + self.max_len * d + self.layers * per_layer + (h * d + h) + (k * h + k)
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerOffsets {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub eye: usize,
    pub pos: usize,
    pub layers: Vec<LayerOffsets>,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
    pub total: usize,
    /// `(name, shape, offset)` in canonical order.
    pub entries: Vec<(String, Vec<usize>, usize)>,
}

impl Layout {
    fn new(c: &HeadConfig) -> Layout {
        let mut entries = Vec::new();
        let mut at = 0usize;
        let mut take = |name: String, shape: Vec<usize>| {
            let off = at;
            at += shape.iter().product::<usize>();
            entries.push((name, shape, off));
            off
        };
        let (d, f, h, k) = (c.d, c.ffn_hidden, c.mlp_hidden, c.k);
        let eye = take("eye".into(), vec![d]);
        let pos = take("pos_embed".into(), vec![c.max_len, d]);
        let mut layers = Vec::with_capacity(c.layers);
        for i in 0..c.layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerOffsets {
                wq: take(p("attn.w_q"), vec![d, d]),
                wk: take(p("attn.w_k"), vec![d, d]),
                wv: take(p("attn.w_v"), vec![d, d]),
                wo: take(p("attn.w_o"), vec![d, d]),
                ln1_g: take(p("ln1.gamma"), vec![d]),
                ln1_b: take(p("ln1.beta"), vec![d]),
                ff_w1: take(p("ffn.w1"), vec![f, d]),
                ff_b1: take(p("ffn.b1"), vec![f]),
                ff_w2: take(p("ffn.w2"), vec![d, f]),
                ff_b2: take(p("ffn.b2"), vec![d]),
                ln2_g: take(p("ln2.gamma"), vec![d]),
                ln2_b: take(p("ln2.beta"), vec![d]),
            });
        }
        let mlp_w1 = take("mlp.w1".into(), vec![h, d]);
        let mlp_b1 = take("mlp.b1".into(), vec![h]);
        let mlp_w2 = take("mlp.w2".into(), vec![k, h]);
        let mlp_b2 = take("mlp.b2".into(), vec![k]);
        Layout {
            eye,
            pos,
            layers,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            total: at,
            entries,
        }
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Head parameters as one flat vector in canonical order.
#[derive(Debug)]
pub struct HeadParams {
    config: HeadConfig,
    layout: Layout,
    values: Vec<f64>,
    /// Changes on every mutable access; traces remember the version they saw.
    version: u64,
}

impl Clone for HeadParams {
    fn clone(&self) -> Self {
        HeadParams {
            config: self.config,
            layout: self.layout.clone(),
            values: self.values.clone(),
            version: self.version,
        }
    }
}

impl PartialEq for HeadParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

impl HeadParams {
    pub fn from_values(config: HeadConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if values.len() != layout.total {
            return Err(Error::ShapeMismatch {
                name: "parameters".into(),
                expected: layout.total,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite head parameter"));
        }
        Ok(HeadParams {
            config,
            layout,
            values,
            version: fresh_version(),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    /// `(name, shape, values)` for every tensor in canonical order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.layout.entries.iter().map(|(name, shape, off)| {
            let n: usize = shape.iter().product();
            (name.as_str(), shape.as_slice(), &self.values[*off..off + n])
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (_, shape, off) = self.layout.entries.iter().find(|(n, _, _)| n == name)?;
        let (off, n) = (*off, shape.iter().product::<usize>());
        self.version = fresh_version();
        Some(&mut self.values[off..off + n])
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.named().find(|(n, _, _)| *n == name).map(|(_, _, v)| v)
    }

    /// Fingerprint of the config and the exact parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.config).expect("config serializes");
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::io::fingerprint_bytes(&bytes)
    }
}

/// Weights and embeddings ~ N(0, 0.02^2); layer-norm gains 1; biases 0.
pub fn init_head(config: HeadConfig, seed: u64) -> Result<HeadParams> {
    config.validate()?;
    let layout = config.layout();
    let mut rng = RngState::new(seed, "head-init");
    let mut values = vec![0.0; layout.total];
    for (name, shape, off) in &layout.entries {
        let n: usize = shape.iter().product();
        let slot = &mut values[*off..off + n];
        if name.ends_with(".gamma") {
            slot.fill(1.0);
        } else if name.ends_with(".beta") || is_bias(name) {
            slot.fill(0.0);
        } else {
            slot.copy_from_slice(&rng.gaussian(n, 0.02));
        }
    }
    HeadParams::from_values(config, values)
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b1") || name.ends_with(".b2")
}

/// Argmax over action logits; ties resolve in `Null < S1 < S2 < S3` order.
pub fn select_action(h_act: &[f64]) -> Action {
    Action::from_index(argmax(h_act)).unwrap_or(Action::Null)
}
