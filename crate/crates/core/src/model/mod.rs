//! Desk-scale post-norm transformer encoder with a masked-LM head.
//!
//! Every feed-forward intermediate neuron (the GELU output that multiplies the
//! FFN output projection) can be captured, differentiated and overridden.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::Cloze;
use crate::error::{Error, Result};
use crate::relation::BiasPrompt;

pub mod checkpoint;
mod encoder;
pub mod synth;
pub mod train;
pub mod vocab;

pub use encoder::{Encoder, ForwardOutput, Params, ProbeOutput};
pub use vocab::Vocab;

/// An encoder together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub encoder: Encoder,
    pub vocab: Vocab,
}

impl LanguageModel {
    pub fn load(path: &Path) -> Result<Self> {
        let (encoder, vocab) = checkpoint::load(path)?;
        Ok(LanguageModel { encoder, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.encoder, &self.vocab)
    }

    pub fn cloze(&self, id: impl Into<String>, prompt: &BiasPrompt) -> Result<Cloze> {
        Cloze::from_prompt(&self.vocab, id, prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Toy defaults: 4 layers, width 64, 4 heads, 128 FFN neurons per layer.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            max_len: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_ff
    }
}

/// Coordinate of one FFN intermediate neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        NeuronId { layer, index }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OverrideSpec {
    Zero,
    Scale(f64),
    SetTo(f64),
}

impl OverrideSpec {
    #[inline]
    pub fn apply(self, value: f64) -> f64 {
        match self {
            OverrideSpec::Zero => 0.0,
            OverrideSpec::Scale(a) => a * value,
            OverrideSpec::SetTo(v) => v,
        }
    }

    /// Derivative of the overridden value with respect to the original.
    #[inline]
    pub(crate) fn slope(self) -> f64 {
        match self {
            OverrideSpec::Zero | OverrideSpec::SetTo(_) => 0.0,
            OverrideSpec::Scale(a) => a,
        }
    }
}

/// Which token positions an override touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideScope {
    /// Only the `[MASK]` position; sequences without one are left untouched.
    #[default]
    MaskPosition,
    AllPositions,
}

/// Inference-time replacement of neuron values before the FFN output
/// projection. At most one entry per neuron; the last insert wins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeuronOverride {
    entries: BTreeMap<NeuronId, OverrideSpec>,
    scope: OverrideScope,
}

impl NeuronOverride {
    pub fn new(scope: OverrideScope) -> Self {
        NeuronOverride {
            entries: BTreeMap::new(),
            scope,
        }
    }

    /// Applies the same spec to every neuron in `neurons`.
    pub fn uniform<'a>(
        neurons: impl IntoIterator<Item = &'a NeuronId>,
        spec: OverrideSpec,
        scope: OverrideScope,
    ) -> Result<Self> {
        let mut o = NeuronOverride::new(scope);
        for &n in neurons {
            o.insert(n, spec)?;
        }
        Ok(o)
    }

    /// The given spec on every neuron of a model.
    pub fn everywhere(config: &ModelConfig, spec: OverrideSpec, scope: OverrideScope) -> Result<Self> {
        let mut o = NeuronOverride::new(scope);
        for layer in 0..config.n_layers {
            for index in 0..config.d_ff {
                o.insert(NeuronId { layer, index }, spec)?;
            }
        }
        Ok(o)
    }

    pub fn insert(&mut self, neuron: NeuronId, spec: OverrideSpec) -> Result<()> {
        match spec {
            OverrideSpec::Scale(a) if !(a.is_finite() && a >= 0.0) => {
                return Err(Error::InvalidOverride(format!("scale {a} must be finite and >= 0")))
            }
            OverrideSpec::SetTo(v) if !v.is_finite() => {
                return Err(Error::InvalidOverride(format!("value {v} must be finite")))
            }
            _ => {}
        }
        self.entries.insert(neuron, spec);
        Ok(())
    }

    pub fn get(&self, neuron: &NeuronId) -> Option<OverrideSpec> {
        self.entries.get(neuron).copied()
    }

    pub fn scope(&self) -> OverrideScope {
        self.scope
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NeuronId, &OverrideSpec)> {
        self.entries.iter()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self.entries.keys().find(|n| n.layer >= config.n_layers || n.index >= config.d_ff) {
            Some(&neuron) => Err(Error::OverrideOutOfBounds {
                neuron,
                n_layers: config.n_layers,
                d_ff: config.d_ff,
            }),
            None => Ok(()),
        }
    }

    /// Dense per-layer lookup table.
    pub(crate) fn dense(&self, config: &ModelConfig) -> Vec<Vec<Option<OverrideSpec>>> {
        let mut table = vec![vec![None; config.d_ff]; config.n_layers];
        for (n, &s) in &self.entries {
            table[n.layer][n.index] = Some(s);
        }
        table
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub mask_position: Option<usize>,
}

/// FFN intermediate values at the mask position, one vector per layer.
///
/// Values are those entering the output projection, i.e. after any override.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub mask_position: Option<usize>,
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn get(&self, n: NeuronId) -> f64 {
        self.activations[n.layer][n.index]
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}
