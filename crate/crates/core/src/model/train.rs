//! Masked-LM training with Adam.
//!
//! Corpus lines are whitespace-tokenized. A token written as `*word` is the
//! cloze answer of its line and is masked on every pass; lines without an
//! answer are masked at the generic rate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::MASK_ID;
use super::{softmax, Encoder, ModelConfig, NeuronOverride, Params, TokenSequence, Vocab};
use crate::error::{Error, Result};

pub const ANSWER_MARKER: char = '*';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLine {
    pub tokens: Vec<String>,
    /// Position of the marked cloze answer, if any.
    pub answer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingCorpus {
    pub lines: Vec<CorpusLine>,
}

impl TrainingCorpus {
    pub fn parse(text: &str) -> Self {
        let lines = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut answer = None;
                let tokens = l
                    .split_whitespace()
                    .enumerate()
                    .map(|(i, t)| match t.strip_prefix(ANSWER_MARKER) {
                        Some(rest) if !rest.is_empty() => {
                            answer.get_or_insert(i);
                            rest.to_string()
                        }
                        _ => t.to_string(),
                    })
                    .collect();
                CorpusLine { tokens, answer }
            })
            .collect();
        TrainingCorpus { lines }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for line in &self.lines {
            let toks: Vec<String> = line
                .tokens
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if line.answer == Some(i) {
                        format!("{ANSWER_MARKER}{t}")
                    } else {
                        t.clone()
                    }
                })
                .collect();
            s.push_str(&toks.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let joined: Vec<String> = self.lines.iter().map(|l| l.tokens.join(" ")).collect();
        Vocab::build(joined.iter().map(String::as_str))
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Optimizer updates.
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Masking rate for lines without a marked answer.
    pub mask_prob: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub trainable: Trainable,
}

/// Which parameters the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    All,
    /// Feed-forward sublayers and the output head; embeddings, attention and
    /// layer norms stay at their current values.
    FeedForward,
    /// The output head only.
    Head,
}

impl Trainable {
    /// Per-tensor update flags in checkpoint order.
    pub(crate) fn mask(self, config: &ModelConfig) -> Vec<bool> {
        let n = Params::zeros_like(config).tensors().len();
        match self {
            Trainable::All => vec![true; n],
            Trainable::FeedForward => {
                // 4 embedding tensors, then 14 per block (ff_in/ff_out at
                // offsets 10..14), then the head.
                let mut m = vec![false; n];
                for l in 0..config.n_layers {
                    for k in 10..14 {
                        m[4 + 14 * l + k] = true;
                    }
                }
                m[n - 2] = true;
                m[n - 1] = true;
                m
            }
            Trainable::Head => {
                let mut m = vec![false; n];
                m[n - 2] = true;
                m[n - 1] = true;
                m
            }
        }
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            steps: 600,
            learning_rate: 4e-3,
            batch_size: 16,
            mask_prob: 0.15,
            weight_decay: 0.0,
            seed: 0,
            trainable: Trainable::FeedForward,
        }
    }
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8) and
/// optional decoupled weight decay.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    update: Vec<bool>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(shapes: &[usize], lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            t: 0,
            update: vec![true; shapes.len()],
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Leaves tensors whose flag is false untouched.
    pub(crate) fn freeze(mut self, update: Vec<bool>) -> Self {
        assert_eq!(update.len(), self.m.len());
        self.update = update;
        self
    }

    pub(crate) fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&[f64]>) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if !self.update[k] {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                p[i] -= self.lr * (update + self.weight_decay * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Mean batch loss per block of `steps / 20` updates.
    pub loss_curve: Vec<f64>,
}

pub(crate) struct Example {
    pub(crate) seq: TokenSequence,
    pub(crate) targets: Vec<(usize, usize)>,
}

fn make_example(line: &CorpusLine, vocab: &Vocab, mask_prob: f64, rng: &mut ChaCha8Rng) -> Example {
    let ids: Vec<usize> = line.tokens.iter().map(|t| vocab.id_or_unk(t)).collect();
    let positions: Vec<usize> = match line.answer {
        Some(a) => vec![a],
        None => {
            let mut p: Vec<usize> = (0..ids.len()).filter(|_| rng.random::<f64>() < mask_prob).collect();
            if p.is_empty() {
                p.push(rng.random_range(0..ids.len()));
            }
            p
        }
    };
    let mut tokens = ids.clone();
    for &p in &positions {
        tokens[p] = MASK_ID;
    }
    Example {
        seq: TokenSequence {
            mask_position: positions.first().copied(),
            tokens,
        },
        targets: positions.into_iter().map(|p| (p, ids[p])).collect(),
    }
}

/// Adds the gradient of the summed cross-entropy over `ex.targets` into
/// `grads` and returns that summed loss.
pub(crate) fn mlm_loss_and_grad(encoder: &Encoder, ex: &Example, grads: &mut Params) -> Result<f64> {
    let pass = encoder.run(&ex.seq, &NeuronOverride::default())?;
    let d = encoder.config.d_model;
    let mut dhidden = vec![0.0; pass.len * d];
    let mut loss = 0.0;
    for &(pos, target) in &ex.targets {
        let probs = softmax(&encoder.logits_at(&pass, pos));
        loss -= probs[target].max(f64::MIN_POSITIVE).ln();
        let mut dlogits = probs;
        dlogits[target] -= 1.0;
        let head = &encoder.params.head;
        let h = pass.hidden_row(pos, d).to_vec();
        for (o, &g) in dlogits.iter().enumerate() {
            grads.head.b[o] += g;
            for j in 0..d {
                grads.head.w[o * d + j] += g * h[j];
                dhidden[pos * d + j] += g * head.w[o * d + j];
            }
        }
    }
    encoder.backward(&pass, dhidden, Some(grads), false);
    Ok(loss)
}

/// Trains an encoder from scratch on `corpus`. Deterministic given
/// `config.seed` (initialization) and `hp.seed` (batching and masking).
pub fn train_mlm(
    corpus: &TrainingCorpus,
    vocab: &Vocab,
    config: ModelConfig,
    hp: &Hyperparams,
) -> Result<(Encoder, TrainReport)> {
    let encoder = Encoder::new(config)?;
    continue_mlm(encoder, corpus, vocab, hp)
}

/// Continues masked-LM training of an existing encoder.
pub fn continue_mlm(
    mut encoder: Encoder,
    corpus: &TrainingCorpus,
    vocab: &Vocab,
    hp: &Hyperparams,
) -> Result<(Encoder, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if vocab.len() != encoder.config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "vocabulary has {} tokens but config.vocab_size is {}",
            vocab.len(),
            encoder.config.vocab_size
        )));
    }
    if let Some(l) = corpus.lines.iter().find(|l| l.tokens.len() > encoder.config.max_len) {
        return Err(Error::SequenceTooLong {
            len: l.tokens.len(),
            max_len: encoder.config.max_len,
        });
    }
    let cfg = encoder.config;
    let shapes: Vec<usize> = encoder.params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes, hp.learning_rate, hp.weight_decay).freeze(hp.trainable.mask(&cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..corpus.lines.len()).collect();
    let mut cursor = order.len();
    let batch = hp.batch_size.max(1);
    let block = (hp.steps / 20).max(1);
    let mut curve = Vec::new();
    let mut block_sum = 0.0;
    let mut block_n = 0;
    let mut final_loss = f64::NAN;

    for step in 0..hp.steps {
        let mut grads = Params::zeros_like(&cfg);
        let mut loss = 0.0;
        let mut n_targets = 0usize;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = make_example(&corpus.lines[order[cursor]], vocab, hp.mask_prob, &mut rng);
            cursor += 1;
            n_targets += ex.targets.len();
            loss += mlm_loss_and_grad(&encoder, &ex, &mut grads)?;
        }
        let norm = 1.0 / n_targets as f64;
        loss *= norm;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        for g in grads.tensors_mut() {
            for v in g.iter_mut() {
                *v *= norm;
            }
        }
        adam.step(encoder.params.tensors_mut(), grads.tensors());
        final_loss = loss;
        block_sum += loss;
        block_n += 1;
        if block_n == block {
            curve.push(block_sum / block_n as f64);
            log::debug!("step {}: loss {:.5}", step + 1, block_sum / block_n as f64);
            block_sum = 0.0;
            block_n = 0;
        }
    }
    if block_n > 0 {
        curve.push(block_sum / block_n as f64);
    }
    Ok((
        encoder,
        TrainReport {
            steps: hp.steps,
            final_loss,
            loss_curve: curve,
        },
    ))
}

/// Fraction of answer-marked corpus lines whose answer is the argmax
/// prediction at the masked position.
pub fn cloze_recall(encoder: &Encoder, corpus: &TrainingCorpus, vocab: &Vocab) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for line in &corpus.lines {
        let Some(a) = line.answer else { continue };
        let mut tokens: Vec<usize> = line.tokens.iter().map(|t| vocab.id_or_unk(t)).collect();
        let target = tokens[a];
        tokens[a] = MASK_ID;
        let seq = TokenSequence {
            tokens,
            mask_position: Some(a),
        };
        let out = encoder.forward(&seq, &NeuronOverride::default())?;
        let row = &out.logits[a];
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        hits += usize::from(argmax == target);
        total += 1;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}
