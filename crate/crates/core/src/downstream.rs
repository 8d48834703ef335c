//! Downstream task harness: fit task heads on top of an encoder, evaluate
//! them with and without neuron suppression, and report metric deltas.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::train::{continue_mlm, Adam, CorpusLine, Hyperparams, Trainable, TrainingCorpus};
use crate::model::vocab::{MASK, MASK_ID};
use crate::model::{softmax, Encoder, LanguageModel, NeuronOverride, OverrideScope, OverrideSpec, Params};
use crate::relation::{BiasCategory, RelationDataset};
use crate::selection::{NeuronIdSet, NeuronSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass { n_classes: usize },
    MaskedLm,
}

impl TaskKind {
    pub fn n_classes(self) -> Option<usize> {
        match self {
            TaskKind::Binary => Some(2),
            TaskKind::Multiclass { n_classes } => Some(n_classes),
            TaskKind::MaskedLm => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    /// Expected token at `[MASK]`.
    Token(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub train: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

impl TaskSpec {
    /// Checks labels against the kind and tokens against `lm`'s vocabulary.
    pub fn validate(&self, lm: &LanguageModel) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidTask(format!("{}: {why}", self.id)));
        if self.train.is_empty() || self.test.is_empty() {
            return bad("train and test splits must be non-empty".into());
        }
        if let Some(n) = self.kind.n_classes() {
            if n < 2 {
                return bad("need at least 2 classes".into());
            }
        }
        for ex in self.train.iter().chain(&self.test) {
            let seq = lm.vocab.encode(&ex.text);
            if seq.tokens.len() > lm.encoder.config.max_len {
                return Err(Error::SequenceTooLong {
                    len: seq.tokens.len(),
                    max_len: lm.encoder.config.max_len,
                });
            }
            if let Some(w) = ex.text.split_whitespace().find(|w| lm.vocab.id(w).is_none()) {
                return bad(format!("token `{w}` not in vocabulary"));
            }
            match (&ex.label, self.kind.n_classes()) {
                (Label::Class(c), Some(n)) if *c >= n => {
                    return Err(Error::LabelOutOfRange {
                        label: *c,
                        n_classes: n,
                    })
                }
                (Label::Class(_), Some(_)) => {}
                (Label::Token(t), None) => {
                    lm.vocab.answer_id(t)?;
                    if ex.text.matches(MASK).count() != 1 {
                        return bad(format!("`{}` needs exactly one {MASK}", ex.text));
                    }
                }
                _ => return bad(format!("label of `{}` does not match the task kind", ex.text)),
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Every `*.json` task in `dir`, ordered by id.
pub fn load_tasks(dir: &Path) -> Result<Vec<TaskSpec>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(TaskSpec::load(&path)?);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSuiteSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Cue tokens per class.
    pub cues: usize,
    pub seed: u64,
}

impl Default for TaskSuiteSpec {
    fn default() -> Self {
        TaskSuiteSpec {
            train_per_class: 40,
            test_per_class: 25,
            cues: 3,
            seed: 0,
        }
    }
}

/// Content tokens of `vocab` usable in task text: everything but the
/// special tokens and the group answers.
fn task_pool(lm: &LanguageModel) -> Vec<String> {
    lm.vocab
        .tokens()
        .iter()
        .filter(|t| !t.starts_with('[') && !t.starts_with("grp"))
        .cloned()
        .collect()
}

fn cue_task(id: &str, n_classes: usize, pool: &[String], spec: &TaskSuiteSpec, rng: &mut ChaCha8Rng) -> TaskSpec {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let cues: Vec<&[String]> = (0..n_classes).map(|c| &shuffled[c * spec.cues..(c + 1) * spec.cues]).collect();
    let neutral = &shuffled[n_classes * spec.cues..];
    let mut make = |per_class: usize| {
        let mut out = Vec::with_capacity(per_class * n_classes);
        for _ in 0..per_class {
            for (c, set) in cues.iter().enumerate() {
                let len = rng.random_range(3..=5);
                let mut words: Vec<&str> = (0..len).map(|_| neutral[rng.random_range(0..neutral.len())].as_str()).collect();
                let at = rng.random_range(0..=len);
                words.insert(at, set[rng.random_range(0..set.len())].as_str());
                out.push(TaskExample {
                    text: words.join(" "),
                    label: Label::Class(c),
                });
            }
        }
        out
    };
    let train = make(spec.train_per_class);
    let test = make(spec.test_per_class);
    let kind = if n_classes == 2 {
        TaskKind::Binary
    } else {
        TaskKind::Multiclass { n_classes }
    };
    TaskSpec {
        id: id.into(),
        kind,
        train,
        test,
    }
}

/// Completion task: a key token fixes the answer regardless of the filler.
fn completion_task(id: &str, pool: &[String], spec: &TaskSuiteSpec, rng: &mut ChaCha8Rng) -> TaskSpec {
    let n_keys = 6;
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let (keys, rest) = shuffled.split_at(n_keys);
    let (answers, neutral) = rest.split_at(n_keys);
    let mut make = |per_key: usize| {
        let mut out = Vec::new();
        for _ in 0..per_key {
            for (k, a) in keys.iter().zip(answers) {
                let len = rng.random_range(1..=3);
                let mut words: Vec<&str> = (0..len).map(|_| neutral[rng.random_range(0..neutral.len())].as_str()).collect();
                words.insert(rng.random_range(0..=len), k);
                words.insert(rng.random_range(0..=len + 1), MASK);
                out.push(TaskExample {
                    text: words.join(" "),
                    label: Label::Token(a.clone()),
                });
            }
        }
        out
    };
    let train = make(spec.train_per_class);
    let test = make(spec.test_per_class);
    TaskSpec {
        id: id.into(),
        kind: TaskKind::MaskedLm,
        train,
        test,
    }
}

/// Five tasks over `lm`'s vocabulary: IN, TB and RT (binary), SN (three
/// classes) and RC (masked completion). Each class is marked by its own
/// small set of cue tokens placed among neutral ones.
pub fn synthetic_tasks(lm: &LanguageModel, spec: &TaskSuiteSpec) -> Result<Vec<TaskSpec>> {
    let pool = task_pool(lm);
    if spec.cues == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config {
            field: "tasks".into(),
            reason: "cues, train_per_class and test_per_class must be >= 1".into(),
        });
    }
    let needed = (3 * spec.cues).max(12) + 4;
    if pool.len() < needed {
        return Err(Error::VocabTooSmall {
            required: needed,
            available: pool.len(),
        });
    }
    let tasks = [("IN", 2), ("TB", 2), ("RT", 2), ("SN", 3), ("RC", 0)]
        .iter()
        .map(|&(id, n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(spec.seed, id));
            if n == 0 {
                completion_task(id, &pool, spec, &mut rng)
            } else {
                cue_task(id, n, &pool, spec, &mut rng)
            }
        })
        .collect();
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder left as trained; only the task head is fitted.
    Raw,
    /// Encoder and head fitted together.
    FineTuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneParams {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        FinetuneParams {
            steps: 400,
            learning_rate: 3e-3,
            batch_size: 16,
            freeze_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    /// Linear map from mean-pooled final hidden states to class logits.
    Classifier { n_classes: usize, w: Vec<f64>, b: Vec<f64> },
    /// The encoder's own masked-LM head.
    MaskedLm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub task_id: String,
    pub kind: TaskKind,
    pub variant: Variant,
    pub lm: LanguageModel,
    pub head: TaskHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: Option<f64>,
    pub perplexity: Option<f64>,
}

/// Accuracy and macro-F1. Classes absent from both predictions and gold do
/// not enter the F1 mean.
pub fn classification_metrics(pred: &[usize], gold: &[usize], n_classes: usize) -> Result<Metrics> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&c) = pred.iter().chain(gold).find(|&&c| c >= n_classes) {
        return Err(Error::LabelOutOfRange { label: c, n_classes });
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    let mut f1 = Vec::new();
    for c in 0..n_classes {
        let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count();
        let fp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g != c).count();
        let fn_ = pred.iter().zip(gold).filter(|&(&p, &g)| p != c && g == c).count();
        if tp + fp + fn_ > 0 {
            f1.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
    }
    Ok(Metrics {
        accuracy: hits as f64 / pred.len() as f64,
        macro_f1: Some(f1.iter().sum::<f64>() / f1.len() as f64),
        perplexity: None,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn pooled(encoder: &Encoder, text: &str, lm: &LanguageModel, o: &NeuronOverride) -> Result<Vec<f64>> {
    let pass = encoder.run(&lm.vocab.encode(text), o)?;
    Ok(mean_rows(&pass.hidden, pass.len, encoder.config.d_model))
}

fn mean_rows(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for t in 0..n {
        for j in 0..d {
            out[j] += x[t * d + j];
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

fn head_logits(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    b.iter()
        .enumerate()
        .map(|(c, &bc)| bc + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn class_of(ex: &TaskExample) -> usize {
    match ex.label {
        Label::Class(c) => c,
        Label::Token(_) => unreachable!("validated"),
    }
}

/// Fits the task head (and the encoder unless frozen) on the train split and
/// returns the model with its test metrics.
pub fn finetune_head(base: &LanguageModel, task: &TaskSpec, fp: &FinetuneParams, seed: u64) -> Result<(TaskModel, Metrics)> {
    task.validate(base)?;
    let variant = if fp.freeze_encoder { Variant::Raw } else { Variant::FineTuned };
    let model = match task.kind.n_classes() {
        None => {
            let lines: Vec<CorpusLine> = task
                .train
                .iter()
                .map(|ex| {
                    let Label::Token(answer) = &ex.label else { unreachable!("validated") };
                    let tokens: Vec<String> = ex.text.split_whitespace().map(String::from).collect();
                    let at = tokens.iter().position(|t| t == MASK).expect("validated");
                    let mut tokens = tokens;
                    tokens[at] = answer.clone();
                    CorpusLine { tokens, answer: Some(at) }
                })
                .collect();
            let hp = Hyperparams {
                steps: fp.steps,
                learning_rate: fp.learning_rate,
                batch_size: fp.batch_size,
                seed,
                trainable: if fp.freeze_encoder { Trainable::Head } else { Trainable::All },
                ..Hyperparams::default()
            };
            let (encoder, _) = continue_mlm(base.encoder.clone(), &TrainingCorpus { lines }, &base.vocab, &hp)?;
            TaskModel {
                task_id: task.id.clone(),
                kind: task.kind,
                variant,
                lm: LanguageModel {
                    encoder,
                    vocab: base.vocab.clone(),
                },
                head: TaskHead::MaskedLm,
            }
        }
        Some(n_classes) => fit_classifier(base, task, n_classes, fp, seed, variant)?,
    };
    let metrics = evaluate(&model, task, &NeuronOverride::default())?;
    Ok((model, metrics))
}

fn fit_classifier(
    base: &LanguageModel,
    task: &TaskSpec,
    n_classes: usize,
    fp: &FinetuneParams,
    seed: u64,
    variant: Variant,
) -> Result<TaskModel> {
    let mut encoder = base.encoder.clone();
    let d = encoder.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.02).expect("valid std");
    let mut w: Vec<f64> = (0..n_classes * d).map(|_| init.sample(&mut rng)).collect();
    let mut b = vec![0.0; n_classes];
    let none = NeuronOverride::default();
    // A frozen encoder maps each example to a fixed feature vector.
    let features: Option<Vec<Vec<f64>>> = if fp.freeze_encoder {
        Some(
            task.train
                .par_iter()
                .map(|ex| pooled(&encoder, &ex.text, base, &none))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut shapes: Vec<usize> = encoder.params.tensors().iter().map(|t| t.len()).collect();
    shapes.extend([w.len(), b.len()]);
    let mut update = vec![!fp.freeze_encoder; shapes.len()];
    let k = update.len();
    update[k - 2] = true;
    update[k - 1] = true;
    let mut adam = Adam::new(&shapes, fp.learning_rate, 0.0).freeze(update);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut cursor = order.len();
    let batch = fp.batch_size.max(1);
    for step in 0..fp.steps {
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let mut genc = (!fp.freeze_encoder).then(|| Params::zeros_like(&encoder.config));
        let mut loss = 0.0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &task.train[order[cursor]];
            cursor += 1;
            let gold = class_of(ex);
            let (x, pass) = match &features {
                Some(f) => (f[order[cursor - 1]].clone(), None),
                None => {
                    let pass = encoder.run(&base.vocab.encode(&ex.text), &none)?;
                    (mean_rows(&pass.hidden, pass.len, d), Some(pass))
                }
            };
            let mut p = softmax(&head_logits(&w, &b, &x));
            loss -= p[gold].max(f64::MIN_POSITIVE).ln();
            p[gold] -= 1.0;
            let mut dx = vec![0.0; d];
            for (c, &g) in p.iter().enumerate() {
                gb[c] += g;
                for j in 0..d {
                    gw[c * d + j] += g * x[j];
                    dx[j] += g * w[c * d + j];
                }
            }
            if let (Some(pass), Some(g)) = (pass, genc.as_mut()) {
                let n = pass.len;
                let dhidden: Vec<f64> = (0..n * d).map(|i| dx[i % d] / n as f64).collect();
                encoder.backward(&pass, dhidden, Some(g), false);
            }
        }
        let norm = 1.0 / batch as f64;
        if !(loss * norm).is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        gw.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= norm);
        let mut genc = genc.unwrap_or_else(|| Params::zeros_like(&encoder.config));
        for g in genc.tensors_mut() {
            g.iter_mut().for_each(|v| *v *= norm);
        }
        let mut params = encoder.params.tensors_mut();
        params.extend([&mut w, &mut b]);
        let mut grads = genc.tensors();
        grads.extend([gw.as_slice(), gb.as_slice()]);
        adam.step(params, grads);
    }
    Ok(TaskModel {
        task_id: task.id.clone(),
        kind: task.kind,
        variant,
        lm: LanguageModel {
            encoder,
            vocab: base.vocab.clone(),
        },
        head: TaskHead::Classifier { n_classes, w, b },
    })
}

/// Test-split metrics under `overrides`.
pub fn evaluate(model: &TaskModel, task: &TaskSpec, overrides: &NeuronOverride) -> Result<Metrics> {
    let lm = &model.lm;
    match &model.head {
        TaskHead::Classifier { n_classes, w, b } => {
            let pred: Vec<usize> = task
                .test
                .par_iter()
                .map(|ex| Ok(argmax(&head_logits(w, b, &pooled(&lm.encoder, &ex.text, lm, overrides)?))))
                .collect::<Result<_>>()?;
            let gold: Vec<usize> = task.test.iter().map(class_of).collect();
            classification_metrics(&pred, &gold, *n_classes)
        }
        TaskHead::MaskedLm => {
            let rows: Vec<(bool, f64)> = task
                .test
                .par_iter()
                .map(|ex| {
                    let Label::Token(answer) = &ex.label else { unreachable!("validated") };
                    let target = lm.vocab.answer_id(answer)?;
                    let out = lm.encoder.forward(&lm.vocab.encode(&ex.text), overrides)?;
                    let at = lm.vocab.encode(&ex.text).tokens.iter().position(|&t| t == MASK_ID).expect("validated");
                    let row = &out.logits[at];
                    let p = softmax(row)[target];
                    Ok((argmax(row) == target, -p.max(f64::MIN_POSITIVE).ln()))
                })
                .collect::<Result<_>>()?;
            let n = rows.len() as f64;
            Ok(Metrics {
                accuracy: rows.iter().filter(|r| r.0).count() as f64 / n,
                macro_f1: None,
                perplexity: Some((rows.iter().map(|r| r.1).sum::<f64>() / n).exp()),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub absolute: f64,
    /// Absent when the baseline is zero.
    pub relative_pct: Option<f64>,
}

impl Delta {
    pub fn new(base: f64, post: f64) -> Self {
        let absolute = post - base;
        let relative_pct = (base != 0.0).then(|| 100.0 * absolute / base);
        Delta { absolute, relative_pct }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub accuracy: Delta,
    pub macro_f1: Option<Delta>,
    pub perplexity: Option<Delta>,
}

impl MetricDeltas {
    pub fn between(base: &Metrics, post: &Metrics) -> Self {
        let pair = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| Delta::new(a, b));
        MetricDeltas {
            accuracy: Delta::new(base.accuracy, post.accuracy),
            macro_f1: pair(base.macro_f1, post.macro_f1),
            perplexity: pair(base.perplexity, post.perplexity),
        }
    }
}

/// A named neuron set to suppress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionSet {
    pub label: String,
    pub neurons: NeuronIdSet,
}

/// One suppression condition per category present in `dataset` (the union
/// of its relations' sets), or per relation when `per_relation` is set.
pub fn suppression_sets(dataset: &RelationDataset, sets: &[NeuronSet], per_relation: bool) -> Vec<SuppressionSet> {
    let by_id: BTreeMap<&str, &NeuronSet> = sets.iter().map(|s| (s.relation_id.as_str(), s)).collect();
    if per_relation {
        return dataset
            .relations()
            .iter()
            .map(|r| SuppressionSet {
                label: r.id.clone(),
                neurons: by_id.get(r.id.as_str()).map(|s| s.neurons.clone()).unwrap_or_default(),
            })
            .collect();
    }
    BiasCategory::ALL
        .iter()
        .filter(|c| dataset.relations().iter().any(|r| r.category == **c))
        .map(|&c| SuppressionSet {
            label: c.code().to_string(),
            neurons: dataset
                .relations()
                .iter()
                .filter(|r| r.category == c)
                .filter_map(|r| by_id.get(r.id.as_str()))
                .flat_map(|s| s.neurons.iter().copied())
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: String,
    pub variant: Variant,
    /// `None` for the baseline.
    pub condition: Option<String>,
    pub n_suppressed: usize,
    pub metrics: Metrics,
    /// Against the baseline; `None` on the baseline record itself.
    pub deltas: Option<MetricDeltas>,
}

/// Baseline plus one record per suppression set. Suppression zeroes the
/// neurons at every position.
pub fn eval_under_suppression(model: &TaskModel, task: &TaskSpec, sets: &[SuppressionSet]) -> Result<Vec<EvalRecord>> {
    let base = evaluate(model, task, &NeuronOverride::default())?;
    let mut out = vec![EvalRecord {
        task_id: task.id.clone(),
        variant: model.variant,
        condition: None,
        n_suppressed: 0,
        metrics: base,
        deltas: None,
    }];
    for s in sets {
        let o = NeuronOverride::uniform(&s.neurons, OverrideSpec::Zero, OverrideScope::AllPositions)?;
        let m = evaluate(model, task, &o)?;
        out.push(EvalRecord {
            task_id: task.id.clone(),
            variant: model.variant,
            condition: Some(s.label.clone()),
            n_suppressed: s.neurons.len(),
            metrics: m,
            deltas: Some(MetricDeltas::between(&base, &m)),
        });
    }
    Ok(out)
}

/// Mean and worst case of one metric's absolute deltas. Worst is the
/// lowest value, or the highest for perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub mean: f64,
    pub worst: f64,
}

/// Sorting first keeps the sum independent of input order.
fn stats_of(mut v: Vec<f64>, higher_is_worse: bool) -> Option<DeltaStats> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let worst = if higher_is_worse { v[v.len() - 1] } else { v[0] };
    Some(DeltaStats { mean, worst })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    /// Task id for per-task rows, condition label for per-condition rows.
    pub key: String,
    pub variant: Variant,
    pub accuracy: DeltaStats,
    pub macro_f1: Option<DeltaStats>,
    pub perplexity: Option<DeltaStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawVsFineTuned {
    pub task_id: String,
    pub raw_accuracy_delta: f64,
    pub finetuned_accuracy_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rq3Summary {
    pub per_task: Vec<DeltaRow>,
    pub per_condition: Vec<DeltaRow>,
    pub raw_vs_finetuned: Vec<RawVsFineTuned>,
    /// Mean absolute accuracy delta over every suppressed record.
    pub mean_accuracy_delta: f64,
}

fn rows_by(records: &[&EvalRecord], key: impl Fn(&EvalRecord) -> String) -> Vec<DeltaRow> {
    let mut groups: BTreeMap<(String, Variant), Vec<&MetricDeltas>> = BTreeMap::new();
    for r in records {
        if let Some(d) = &r.deltas {
            groups.entry((key(r), r.variant)).or_default().push(d);
        }
    }
    groups
        .into_iter()
        .map(|((key, variant), ds)| DeltaRow {
            key,
            variant,
            accuracy: stats_of(ds.iter().map(|d| d.accuracy.absolute).collect(), false).expect("non-empty group"),
            macro_f1: stats_of(ds.iter().filter_map(|d| d.macro_f1.map(|x| x.absolute)).collect(), false),
            perplexity: stats_of(ds.iter().filter_map(|d| d.perplexity.map(|x| x.absolute)).collect(), true),
        })
        .collect()
}

/// Per-task and per-condition delta summaries plus the raw against
/// fine-tuned comparison. Independent of record order.
pub fn aggregate_rq3(records: &[EvalRecord]) -> Rq3Summary {
    let refs: Vec<&EvalRecord> = records.iter().collect();
    let per_task = rows_by(&refs, |r| r.task_id.clone());
    let per_condition = rows_by(&refs, |r| r.condition.clone().unwrap_or_default());
    let mut by_task: BTreeMap<&str, BTreeMap<Variant, f64>> = BTreeMap::new();
    for row in &per_task {
        by_task.entry(&row.key).or_default().insert(row.variant, row.accuracy.mean);
    }
    let raw_vs_finetuned = by_task
        .into_iter()
        .filter_map(|(t, m)| {
            Some(RawVsFineTuned {
                task_id: t.to_string(),
                raw_accuracy_delta: *m.get(&Variant::Raw)?,
                finetuned_accuracy_delta: *m.get(&Variant::FineTuned)?,
            })
        })
        .collect();
    let all: Vec<f64> = records.iter().filter_map(|r| r.deltas.map(|d| d.accuracy.absolute)).collect();
    Rq3Summary {
        per_task,
        per_condition,
        raw_vs_finetuned,
        mean_accuracy_delta: stats_of(all, false).map_or(0.0, |s| s.mean),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let m = classification_metrics(&[1, 1, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, Some(1.0)));
        let m = classification_metrics(&[1, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.macro_f1.unwrap() - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let m = classification_metrics(&[0, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!(matches!(classification_metrics(&[0], &[0, 1], 2), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn absent_class_left_out_of_f1() {
        let m = classification_metrics(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.macro_f1, Some(1.0));
    }

    #[test]
    fn delta_arithmetic() {
        let d = Delta::new(0.80, 0.74);
        assert!((d.absolute + 0.06).abs() < 1e-12);
        assert!((d.relative_pct.unwrap() + 7.5).abs() < 1e-9);
        assert_eq!(Delta::new(0.0, 0.3).relative_pct, None);
    }

    fn record(task: &str, variant: Variant, cond: &str, acc: f64) -> EvalRecord {
        let m = Metrics {
            accuracy: acc,
            macro_f1: None,
            perplexity: None,
        };
        EvalRecord {
            task_id: task.into(),
            variant,
            condition: Some(cond.into()),
            n_suppressed: 1,
            metrics: m,
            deltas: Some(MetricDeltas {
                accuracy: Delta::new(1.0, acc),
                macro_f1: None,
                perplexity: None,
            }),
        }
    }

    #[test]
    fn aggregate_mean_and_worst() {
        let recs = vec![
            record("IN", Variant::Raw, "BR01", 0.9),
            record("IN", Variant::Raw, "BR02", 0.8),
        ];
        let s = aggregate_rq3(&recs);
        assert_eq!(s.per_task.len(), 1);
        assert!((s.per_task[0].accuracy.mean + 0.15).abs() < 1e-12);
        assert!((s.per_task[0].accuracy.worst + 0.2).abs() < 1e-12);
        let one = aggregate_rq3(&recs[..1]);
        assert_eq!(one.per_task[0].accuracy.mean, recs[0].deltas.unwrap().accuracy.absolute);
    }

    #[test]
    fn aggregate_ignores_record_order() {
        let mut recs = Vec::new();
        for (i, t) in ["IN", "TB", "SN"].iter().enumerate() {
            for v in [Variant::Raw, Variant::FineTuned] {
                for c in 0..5 {
                    recs.push(record(t, v, &format!("BR0{c}"), 0.3 + 0.1 * ((i * 7 + c * 3) % 7) as f64));
                }
            }
        }
        let a = aggregate_rq3(&recs);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            recs.shuffle(&mut rng);
            assert_eq!(aggregate_rq3(&recs), a);
        }
        assert_eq!(a.raw_vs_finetuned.len(), 3);
    }
}
