//! A small autoregressive "unified" token model.
//!
//! Every position is predicted from the previous token and a pooled context:
//!
//! ```text
//! c    = mean(E_T[context])
//! u_t  = [E_m[y_{t-1}] ; c]                (begin sentinel embeds to 0)
//! h0   = tanh(W_in u_t + b_in)
//! hl   = tanh((W_l + s B_l A_l) h(l-1) + b_l),   l = 1..L
//! logp = log_softmax(H_m hL + b_m)
//! ```
//!
//! The trunk (`W_in`, `W_l`) is shared by the text and code modalities, which
//! only differ in embedding table and head. Low-rank adapters `A_l`, `B_l` sit on
//! every trunk layer and form the shared parameter set that both tasks update.
//!
//! All parameters live in one flat `Vec<f64>` addressed through a [`Layout`];
//! the frozen reference policy is a second copy of the same vector.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use forward::{ParamSource, Trace};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientVector;

/// Token stream kind. Selects the embedding table and output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Code,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Text => f.write_str("text"),
            Modality::Code => f.write_str("code"),
        }
    }
}

/// Which heads are trained in addition to the adapters (always trainable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainableSet {
    pub code_head: bool,
    pub text_head: bool,
}

impl Default for TrainableSet {
    fn default() -> Self {
        Self {
            code_head: true,
            text_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub trunk_layers: usize,
    pub text_vocab: usize,
    pub code_vocab: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    /// Length of every code (generation) response.
    pub gen_tokens: usize,
    pub base_init_std: f64,
    /// Seed for the frozen base weights.
    pub rng_seed: u64,
    /// Seed for the adapter `A` factors; defaults to `rng_seed`.
    pub adapter_seed: Option<u64>,
    pub trainable: TrainableSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            trunk_layers: 4,
            text_vocab: 128,
            code_vocab: 256,
            adapter_rank: 4,
            adapter_scale: 2.0,
            gen_tokens: 576,
            base_init_std: 0.2,
            rng_seed: 0,
            adapter_seed: None,
            trainable: TrainableSet::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden_dim", self.hidden_dim),
            ("trunk_layers", self.trunk_layers),
            ("text_vocab", self.text_vocab),
            ("code_vocab", self.code_vocab),
            ("adapter_rank", self.adapter_rank),
            ("gen_tokens", self.gen_tokens),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.adapter_scale > 0.0 && self.adapter_scale.is_finite()) {
            return Err(Error::config("adapter_scale", "must be positive and finite"));
        }
        if !(self.base_init_std >= 0.0 && self.base_init_std.is_finite()) {
            return Err(Error::config("base_init_std", "must be non-negative and finite"));
        }
        Ok(())
    }

    pub fn vocab(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text_vocab,
            Modality::Code => self.code_vocab,
        }
    }
}

/// A modality-tagged list of token ids. Position 0 is conditioned on an
/// implicit begin sentinel, so `tokens[0]` is the first predicted token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub modality: Modality,
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(modality: Modality, tokens: Vec<u32>) -> Self {
        Self { modality, tokens }
    }

    pub fn text(tokens: Vec<u32>) -> Self {
        Self::new(Modality::Text, tokens)
    }

    pub fn code(tokens: Vec<u32>) -> Self {
        Self::new(Modality::Code, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks every id against the modality's vocabulary.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let vocab = config.vocab(self.modality);
        if let Some(bad) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Domain(format!(
                "{} token id {bad} outside vocabulary of size {vocab}",
                self.modality
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Base,
    Embedding,
    Head,
    AdapterA,
    AdapterB,
}

impl SegmentKind {
    pub fn is_adapter(self) -> bool {
        matches!(self, SegmentKind::AdapterA | SegmentKind::AdapterB)
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Adapter factors make up the shared parameter view used for interference analysis.
    pub fn is_adapter(&self) -> bool {
        self.kind.is_adapter()
    }
}

/// Offsets of the individual tensors, resolved once per layout.
#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub input_w: usize,
    pub input_b: usize,
    pub trunk_w: Vec<usize>,
    pub trunk_b: Vec<usize>,
    pub embed_text: usize,
    pub embed_code: usize,
    pub head_text_w: usize,
    pub head_text_b: usize,
    pub head_code_w: usize,
    pub head_code_b: usize,
    pub adapter_a: Vec<usize>,
    pub adapter_b: Vec<usize>,
}

impl Offsets {
    pub fn embed(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.embed_text,
            Modality::Code => self.embed_code,
        }
    }

    pub fn head(&self, modality: Modality) -> (usize, usize) {
        match modality {
            Modality::Text => (self.head_text_w, self.head_text_b),
            Modality::Code => (self.head_code_w, self.head_code_b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
    pub(crate) offsets: Offsets,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let r = config.adapter_rank;
        let mut segments = Vec::new();
        let mut total = 0;
        let mut push = |name: String, kind: SegmentKind, rows: usize, cols: usize, trainable: bool| {
            let offset = total;
            total += rows * cols;
            segments.push(Segment {
                name,
                kind,
                offset,
                rows,
                cols,
                trainable,
            });
            offset
        };

        let input_w = push("input.w".into(), SegmentKind::Base, d, 2 * d, false);
        let input_b = push("input.b".into(), SegmentKind::Base, d, 1, false);
        let mut trunk_w = Vec::new();
        let mut trunk_b = Vec::new();
        for l in 0..config.trunk_layers {
            trunk_w.push(push(format!("trunk.{l}.w"), SegmentKind::Base, d, d, false));
            trunk_b.push(push(format!("trunk.{l}.b"), SegmentKind::Base, d, 1, false));
        }
        let embed_text = push("embed.text".into(), SegmentKind::Embedding, config.text_vocab, d, false);
        let embed_code = push("embed.code".into(), SegmentKind::Embedding, config.code_vocab, d, false);
        let th = config.trainable.text_head;
        let ch = config.trainable.code_head;
        let head_text_w = push("head.text.w".into(), SegmentKind::Head, config.text_vocab, d, th);
        let head_text_b = push("head.text.b".into(), SegmentKind::Head, config.text_vocab, 1, th);
        let head_code_w = push("head.code.w".into(), SegmentKind::Head, config.code_vocab, d, ch);
        let head_code_b = push("head.code.b".into(), SegmentKind::Head, config.code_vocab, 1, ch);
        let mut adapter_a = Vec::new();
        let mut adapter_b = Vec::new();
        for l in 0..config.trunk_layers {
            adapter_a.push(push(format!("adapter.{l}.a"), SegmentKind::AdapterA, r, d, true));
            adapter_b.push(push(format!("adapter.{l}.b"), SegmentKind::AdapterB, d, r, true));
        }

        Layout {
            segments,
            total,
            offsets: Offsets {
                input_w,
                input_b,
                trunk_w,
                trunk_b,
                embed_text,
                embed_code,
                head_text_w,
                head_text_b,
                head_code_w,
                head_code_b,
                adapter_a,
                adapter_b,
            },
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.trainable)
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable().map(Segment::len).sum()
    }
}

/// Live parameters, the frozen reference snapshot and the layout tying them together.
#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    reference: Vec<f64>,
    version: u64,
}

/// Builds a fresh model: normal base weights, uniform `A`, zero `B`.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut params = vec![0.0; layout.total_len()];

    let mut base_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let normal = Normal::new(0.0, config.base_init_std).map_err(|e| Error::config("base_init_std", e.to_string()))?;
    // Adapters draw from their own stream so that changing the adapter seed
    // leaves the "pretrained" base untouched.
    let adapter_seed = config.adapter_seed.unwrap_or(config.rng_seed);
    let mut adapter_rng = ChaCha8Rng::seed_from_u64(adapter_seed ^ 0x9E37_79B9_7F4A_7C15);
    let bound = 1.0 / (config.hidden_dim as f64).sqrt();

    for seg in layout.segments() {
        let slot = &mut params[seg.range()];
        match seg.kind {
            SegmentKind::Base | SegmentKind::Embedding | SegmentKind::Head => {
                for p in slot.iter_mut() {
                    *p = normal.sample(&mut base_rng);
                }
            }
            SegmentKind::AdapterA => {
                for p in slot.iter_mut() {
                    *p = adapter_rng.random_range(-bound..bound);
                }
            }
            SegmentKind::AdapterB => slot.fill(0.0),
        }
    }

    Ok(ModelState {
        config: config.clone(),
        layout,
        reference: params.clone(),
        params,
        version: 0,
    })
}

impl ModelState {
    /// Reassembles a state from raw vectors, checking that frozen entries agree.
    pub fn from_parts(config: ModelConfig, params: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total_len() || reference.len() != layout.total_len() {
            return Err(Error::State(format!(
                "parameter vector length {} / reference length {} do not match layout length {}",
                params.len(),
                reference.len(),
                layout.total_len()
            )));
        }
        for seg in layout.segments().iter().filter(|s| !s.trainable) {
            let live = &params[seg.range()];
            let frozen = &reference[seg.range()];
            if live.iter().zip(frozen).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::State(format!(
                    "frozen segment `{}` differs from the reference snapshot",
                    seg.name
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
            reference,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub(crate) fn source(&self, source: ParamSource) -> &[f64] {
        match source {
            ParamSource::Live => &self.params,
            ParamSource::Reference => &self.reference,
        }
    }

    /// Bumped on every mutation; traces recorded against older versions are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.params[s.range()])
    }

    /// Trainable parameters gathered into one flat vector, in layout order.
    pub fn trainable_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.trainable_len());
        for seg in self.layout.trainable() {
            out.extend_from_slice(&self.params[seg.range()]);
        }
        out
    }

    /// Scatters a flat trainable vector back into the parameters.
    pub fn set_trainable_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.layout.trainable_len() {
            return Err(Error::Domain(format!(
                "expected {} trainable values, got {}",
                self.layout.trainable_len(),
                values.len()
            )));
        }
        let mut cursor = 0;
        for seg in self.layout.segments.iter().filter(|s| s.trainable) {
            let n = seg.len();
            self.params[seg.range()].copy_from_slice(&values[cursor..cursor + n]);
            cursor += n;
        }
        self.version += 1;
        Ok(())
    }

    /// Mutable access to one trainable segment. Frozen segments are refused.
    pub fn trainable_segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let seg = self
            .layout
            .segment(name)
            .ok_or_else(|| Error::Domain(format!("no parameter segment named `{name}`")))?
            .clone();
        if !seg.trainable {
            return Err(Error::State(format!("segment `{name}` is frozen")));
        }
        self.version += 1;
        Ok(&mut self.params[seg.range()])
    }

    /// Largest absolute entry over all `B` factors.
    pub fn max_abs_adapter_b(&self) -> f64 {
        self.layout
            .segments()
            .iter()
            .filter(|s| s.kind == SegmentKind::AdapterB)
            .flat_map(|s| self.params[s.range()].iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// FNV-1a over the bit patterns of the reference snapshot.
    pub fn reference_fingerprint(&self) -> u64 {
        crate::util::fnv1a_f64(&self.reference)
    }

    pub fn params_fingerprint(&self) -> u64 {
        crate::util::fnv1a_f64(&self.params)
    }

    /// `log p(y | context)` summed over the response, in nats.
    pub fn sequence_logprob(
        &self,
        context: &TokenSequence,
        response: &TokenSequence,
        source: ParamSource,
    ) -> Result<f64> {
        let trace = self.trace(context, std::slice::from_ref(response), source)?;
        Ok(trace.logprobs()[0])
    }

    /// Gradient of `Σ_i cotangents[i] · log p(response_i)` with respect to the trainable set.
    pub fn backward(&self, trace: &Trace, cotangents: &[f64]) -> Result<GradientVector> {
        forward::backward(self, trace, cotangents)
    }

    /// Same as [`ModelState::backward`], but also checks the pieces of a
    /// gradient for a batch of traces and sums them.
    pub fn backward_many(&self, items: &[(&Trace, &[f64])]) -> Result<GradientVector> {
        let mut acc = GradientVector::zeros_for(&self.layout);
        for (trace, cot) in items {
            let g = forward::backward(self, trace, cot)?;
            acc.add_scaled(&g, 1.0)?;
        }
        Ok(acc)
    }
}
