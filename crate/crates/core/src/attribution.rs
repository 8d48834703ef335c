//! Per-neuron attribution at the mask position: integrated gradients along
//! the activation-scaling path, and the raw-activation baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Encoder, NeuronId, NeuronOverride, OverrideScope, OverrideSpec, ProbeOutput, TokenSequence, Vocab,
};
use crate::relation::BiasPrompt;

/// Anything that can report the mask-position probability of an answer and
/// its gradient with respect to per-layer neuron values.
pub trait NeuronProbe: Sync {
    /// `(n_layers, neurons_per_layer)`.
    fn shape(&self) -> (usize, usize);

    fn probe(
        &self,
        seq: &TokenSequence,
        answer: usize,
        overrides: &NeuronOverride,
        with_grads: bool,
    ) -> Result<ProbeOutput>;
}

impl NeuronProbe for Encoder {
    fn shape(&self) -> (usize, usize) {
        (self.config.n_layers, self.config.d_ff)
    }

    fn probe(
        &self,
        seq: &TokenSequence,
        answer: usize,
        overrides: &NeuronOverride,
        with_grads: bool,
    ) -> Result<ProbeOutput> {
        Encoder::probe(self, seq, answer, overrides, with_grads)
    }
}

/// A tokenized cloze prompt with its single-token answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cloze {
    pub id: String,
    pub seq: TokenSequence,
    pub answer: usize,
}

impl Cloze {
    pub fn from_prompt(vocab: &Vocab, id: impl Into<String>, prompt: &BiasPrompt) -> Result<Self> {
        let seq = vocab.encode(&prompt.text);
        if seq.mask_position.is_none() {
            return Err(Error::NoMaskPosition);
        }
        Ok(Cloze {
            id: id.into(),
            seq,
            answer: vocab.answer_id(&prompt.answer)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    IntegratedGradients,
    ActivationBaseline,
}

/// How the integration path scales neurons at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgPath {
    /// Every neuron of every layer scaled together: one backward pass per step.
    Joint,
    /// One layer scaled at a time, the others left at their observed values.
    /// Costs one backward pass per step and layer.
    #[default]
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub steps: usize,
    pub method: Method,
    pub path: IgPath,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            steps: 20,
            method: Method::IntegratedGradients,
            path: IgPath::PerLayer,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidAttributionConfig("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dense per-neuron scores and observed activations for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub prompt_id: String,
    pub scores: Vec<Vec<f64>>,
    pub observed: Vec<Vec<f64>>,
}

impl AttributionMap {
    pub fn score(&self, n: NeuronId) -> f64 {
        self.scores[n.layer][n.index]
    }

    pub fn max_score(&self) -> f64 {
        self.scores
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(neuron, score, activation)` in `(layer, index)` order.
    pub fn entries(&self) -> impl Iterator<Item = (NeuronId, f64, f64)> + '_ {
        self.scores.iter().enumerate().flat_map(move |(l, row)| {
            row.iter()
                .enumerate()
                .map(move |(i, &s)| (NeuronId::new(l, i), s, self.observed[l][i]))
        })
    }
}

fn pinned_override<F>(observed: &[Vec<f64>], mut value: F) -> Result<NeuronOverride>
where
    F: FnMut(NeuronId, f64) -> Option<f64>,
{
    let mut o = NeuronOverride::new(OverrideScope::MaskPosition);
    for (l, row) in observed.iter().enumerate() {
        for (i, &w) in row.iter().enumerate() {
            let n = NeuronId::new(l, i);
            if let Some(v) = value(n, w) {
                o.insert(n, OverrideSpec::SetTo(v))?;
            }
        }
    }
    Ok(o)
}

fn sum_into(acc: &mut [Vec<f64>], g: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Integrated-gradients attribution of `P(answer)` to every neuron.
///
/// score_i = (w_i / m) * sum_{k=1..m} dP/dw_i evaluated with the neurons
/// pinned to (k/m) * w. Steps are evaluated in parallel and summed in step
/// order, so results do not depend on the thread count.
pub fn ig_attribution<M: NeuronProbe + ?Sized>(
    model: &M,
    cloze: &Cloze,
    cfg: &AttributionConfig,
) -> Result<AttributionMap> {
    cfg.validate()?;
    if cloze.seq.mask_position.is_none() {
        return Err(Error::NoMaskPosition);
    }
    let base = model.probe(&cloze.seq, cloze.answer, &NeuronOverride::default(), false)?;
    let observed = base.trace.activations;
    let (n_layers, width) = model.shape();
    let m = cfg.steps;

    let layers: Vec<Option<usize>> = match cfg.path {
        IgPath::Joint => vec![None],
        IgPath::PerLayer => (0..n_layers).map(Some).collect(),
    };
    let jobs: Vec<(Option<usize>, usize)> = layers
        .iter()
        .flat_map(|&l| (1..=m).map(move |k| (l, k)))
        .collect();
    let grads: Vec<Vec<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(layer, k)| {
            let alpha = k as f64 / m as f64;
            let o = pinned_override(&observed, |n, w| match layer {
                Some(l) if n.layer != l => None,
                _ => Some(alpha * w),
            })?;
            let mut g = model
                .probe(&cloze.seq, cloze.answer, &o, true)?
                .grads
                .expect("gradients requested");
            if let Some(l) = layer {
                for (ll, row) in g.iter_mut().enumerate() {
                    if ll != l {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let mut total = vec![vec![0.0; width]; n_layers];
    for g in &grads {
        sum_into(&mut total, g);
    }
    let scores = observed
        .iter()
        .zip(&total)
        .map(|(w, s)| w.iter().zip(s).map(|(&w, &s)| w / m as f64 * s).collect())
        .collect();
    Ok(AttributionMap {
        prompt_id: cloze.id.clone(),
        scores,
        observed,
    })
}

/// Scores every neuron by its observed activation at the mask position.
pub fn baseline_attribution<M: NeuronProbe + ?Sized>(model: &M, cloze: &Cloze) -> Result<AttributionMap> {
    if cloze.seq.mask_position.is_none() {
        return Err(Error::NoMaskPosition);
    }
    let base = model.probe(&cloze.seq, cloze.answer, &NeuronOverride::default(), false)?;
    Ok(AttributionMap {
        prompt_id: cloze.id.clone(),
        scores: base.trace.activations.clone(),
        observed: base.trace.activations,
    })
}

pub fn attribute<M: NeuronProbe + ?Sized>(model: &M, cloze: &Cloze, cfg: &AttributionConfig) -> Result<AttributionMap> {
    match cfg.method {
        Method::IntegratedGradients => ig_attribution(model, cloze, cfg),
        Method::ActivationBaseline => baseline_attribution(model, cloze),
    }
}

/// Attribution maps for many prompts, in input order.
pub fn attribute_all<M: NeuronProbe + ?Sized>(
    model: &M,
    clozes: &[Cloze],
    cfg: &AttributionConfig,
) -> Result<Vec<AttributionMap>> {
    clozes.par_iter().map(|c| attribute(model, c, cfg)).collect()
}

/// One line of a sparse attribution file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrRecord {
    pub prompt_id: String,
    pub layer: usize,
    pub index: usize,
    pub score: f64,
    pub activation: f64,
}

/// Entries scoring at least `fraction` of the prompt's maximum. A map with
/// no positive score keeps only its first maximal entry, so the prompt still
/// shows up (and still reads back as degenerate).
pub fn sparse_records(map: &AttributionMap, fraction: f64) -> Vec<AttrRecord> {
    let max = map.max_score();
    let rec = |(n, s, a): (NeuronId, f64, f64)| AttrRecord {
        prompt_id: map.prompt_id.clone(),
        layer: n.layer,
        index: n.index,
        score: s,
        activation: a,
    };
    if max > 0.0 {
        map.entries().filter(|&(_, s, _)| s >= fraction * max).map(rec).collect()
    } else {
        map.entries().find(|&(_, s, _)| s == max).map(rec).into_iter().collect()
    }
}

/// Rebuilds maps from sparse records, one per prompt in first-appearance
/// order. Unwritten neurons read back as zero.
pub fn maps_from_records(records: &[AttrRecord], n_layers: usize, width: usize) -> Result<Vec<AttributionMap>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_prompt: std::collections::HashMap<&str, AttributionMap> = std::collections::HashMap::new();
    for r in records {
        if r.layer >= n_layers || r.index >= width {
            return Err(Error::OverrideOutOfBounds {
                neuron: NeuronId::new(r.layer, r.index),
                n_layers,
                d_ff: width,
            });
        }
        let m = by_prompt.entry(&r.prompt_id).or_insert_with(|| {
            order.push(&r.prompt_id);
            AttributionMap {
                prompt_id: r.prompt_id.clone(),
                scores: vec![vec![0.0; width]; n_layers],
                observed: vec![vec![0.0; width]; n_layers],
            }
        });
        m.scores[r.layer][r.index] = r.score;
        m.observed[r.layer][r.index] = r.activation;
    }
    Ok(order.iter().map(|p| by_prompt.remove(p).expect("inserted")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Completeness {
    pub ig_score: f64,
    /// P(answer) unmodified minus P(answer) with the neuron zeroed.
    pub suppression_gap: f64,
    pub abs_error: f64,
}

/// Exact single-neuron integrated gradients against the suppression gap it
/// should converge to as the step count grows.
pub fn completeness_check<M: NeuronProbe + ?Sized>(
    model: &M,
    cloze: &Cloze,
    neuron: NeuronId,
    steps: usize,
) -> Result<Completeness> {
    AttributionConfig {
        steps,
        ..AttributionConfig::default()
    }
    .validate()?;
    let base = model.probe(&cloze.seq, cloze.answer, &NeuronOverride::default(), false)?;
    let w = base.trace.get(neuron);
    let mut zero = NeuronOverride::new(OverrideScope::MaskPosition);
    zero.insert(neuron, OverrideSpec::Zero)?;
    let suppressed = model.probe(&cloze.seq, cloze.answer, &zero, false)?.prob;
    let mut sum = 0.0;
    for k in 1..=steps {
        let mut o = NeuronOverride::new(OverrideScope::MaskPosition);
        o.insert(neuron, OverrideSpec::SetTo(k as f64 / steps as f64 * w))?;
        sum += model
            .probe(&cloze.seq, cloze.answer, &o, true)?
            .grad(neuron)
            .expect("gradients requested");
    }
    let ig_score = w / steps as f64 * sum;
    let suppression_gap = base.prob - suppressed;
    Ok(Completeness {
        ig_score,
        suppression_gap,
        abs_error: (ig_score - suppression_gap).abs(),
    })
}

/// `completeness_check` on the encoder for several step counts at once.
/// Grid points shared between counts are evaluated once and the sums run in
/// the same order, so each entry equals the generic check.
pub fn completeness_sweep(
    encoder: &Encoder,
    cloze: &Cloze,
    neuron: NeuronId,
    steps: &[usize],
) -> Result<Vec<Completeness>> {
    for &s in steps {
        AttributionConfig {
            steps: s,
            ..AttributionConfig::default()
        }
        .validate()?;
    }
    let base = encoder.probe(&cloze.seq, cloze.answer, &NeuronOverride::default(), false)?;
    let w = base.trace.get(neuron);
    let mut points: Vec<f64> = vec![0.0];
    for &s in steps {
        points.extend((1..=s).map(|k| k as f64 / s as f64 * w));
    }
    points.sort_by(f64::total_cmp);
    points.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let swept = encoder.neuron_sweep(&cloze.seq, cloze.answer, neuron, &points)?;
    let at = |v: f64| {
        let j = points
            .binary_search_by(|p| p.total_cmp(&v))
            .expect("grid point evaluated");
        swept[j]
    };
    let suppression_gap = base.prob - at(0.0).0;
    Ok(steps
        .iter()
        .map(|&s| {
            let mut sum = 0.0;
            for k in 1..=s {
                sum += at(k as f64 / s as f64 * w).1;
            }
            let ig_score = w / s as f64 * sum;
            Completeness {
                ig_score,
                suppression_gap,
                abs_error: (ig_score - suppression_gap).abs(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardTrace, ModelConfig};

    /// P = c + sum_i a_i w_i over a single layer of neurons whose observed
    /// values are fixed.
    struct LinearProbe {
        c: f64,
        a: Vec<f64>,
        w: Vec<f64>,
    }

    impl LinearProbe {
        fn values(&self, o: &NeuronOverride) -> Vec<f64> {
            self.w
                .iter()
                .enumerate()
                .map(|(i, &w)| o.get(&NeuronId::new(0, i)).map_or(w, |s| s.apply(w)))
                .collect()
        }
    }

    impl NeuronProbe for LinearProbe {
        fn shape(&self) -> (usize, usize) {
            (1, self.w.len())
        }

        fn probe(&self, _: &TokenSequence, _: usize, o: &NeuronOverride, g: bool) -> Result<ProbeOutput> {
            let v = self.values(o);
            Ok(ProbeOutput {
                prob: self.c + self.a.iter().zip(&v).map(|(a, x)| a * x).sum::<f64>(),
                trace: ForwardTrace {
                    mask_position: Some(0),
                    activations: vec![v],
                },
                grads: g.then(|| vec![self.a.clone()]),
            })
        }
    }

    /// Binary logistic probe with temperature: P = sigmoid(T * sum_i a_i w_i).
    struct LogisticProbe {
        temperature: f64,
        a: Vec<f64>,
        w: Vec<f64>,
    }

    impl NeuronProbe for LogisticProbe {
        fn shape(&self) -> (usize, usize) {
            (1, self.w.len())
        }

        fn probe(&self, _: &TokenSequence, _: usize, o: &NeuronOverride, g: bool) -> Result<ProbeOutput> {
            let v: Vec<f64> = self
                .w
                .iter()
                .enumerate()
                .map(|(i, &w)| o.get(&NeuronId::new(0, i)).map_or(w, |s| s.apply(w)))
                .collect();
            let z = self.temperature * self.a.iter().zip(&v).map(|(a, x)| a * x).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            Ok(ProbeOutput {
                prob: p,
                trace: ForwardTrace {
                    mask_position: Some(0),
                    activations: vec![v],
                },
                grads: g.then(|| vec![self.a.iter().map(|a| p * (1.0 - p) * self.temperature * a).collect()]),
            })
        }
    }

    fn cloze() -> Cloze {
        Cloze {
            id: "p#0".into(),
            seq: TokenSequence {
                tokens: vec![0],
                mask_position: Some(0),
            },
            answer: 0,
        }
    }

    #[test]
    fn linear_probe_is_complete_for_any_step_count() {
        let probe = LinearProbe {
            c: 0.1,
            a: vec![0.05, -0.02, 0.1, 0.0],
            w: vec![1.5, 2.0, 0.0, 3.0],
        };
        for m in [1, 2, 7, 20] {
            let map = ig_attribution(
                &probe,
                &cloze(),
                &AttributionConfig {
                    steps: m,
                    ..AttributionConfig::default()
                },
            )
            .unwrap();
            for i in 0..4 {
                let n = NeuronId::new(0, i);
                let mut zero = NeuronOverride::new(OverrideScope::MaskPosition);
                zero.insert(n, OverrideSpec::Zero).unwrap();
                let full = probe.probe(&cloze().seq, 0, &NeuronOverride::default(), false).unwrap().prob;
                let cut = probe.probe(&cloze().seq, 0, &zero, false).unwrap().prob;
                assert!((map.score(n) - (full - cut)).abs() < 1e-15);
            }
            assert_eq!(map.score(NeuronId::new(0, 2)), 0.0);
        }
    }

    #[test]
    fn argmax_neuron_is_temperature_invariant() {
        let a = vec![0.3, -0.8, 0.5, 0.2, 0.9];
        let w = vec![1.0, 0.5, 2.0, -1.0, 0.7];
        let argmax = |t: f64| {
            let probe = LogisticProbe {
                temperature: t,
                a: a.clone(),
                w: w.clone(),
            };
            let map = ig_attribution(&probe, &cloze(), &AttributionConfig::default()).unwrap();
            map.entries()
                .fold((NeuronId::new(0, 0), f64::NEG_INFINITY), |b, (n, s, _)| if s > b.1 { (n, s) } else { b })
                .0
        };
        let reference = argmax(1.0);
        for t in [0.1, 0.5, 2.0, 5.0] {
            assert_eq!(argmax(t), reference);
        }
    }

    #[test]
    fn baseline_equals_observed_activations() {
        let probe = LinearProbe {
            c: 0.0,
            a: vec![0.1; 3],
            w: vec![0.0, 0.0, 0.0],
        };
        let map = baseline_attribution(&probe, &cloze()).unwrap();
        assert!(map.scores.iter().flatten().all(|&s| s == 0.0));
        assert_eq!(map.scores, map.observed);
    }

    #[test]
    fn zero_steps_and_missing_mask_rejected() {
        let probe = LinearProbe {
            c: 0.0,
            a: vec![0.1],
            w: vec![1.0],
        };
        let cfg = AttributionConfig {
            steps: 0,
            ..AttributionConfig::default()
        };
        assert!(ig_attribution(&probe, &cloze(), &cfg).is_err());
        let mut c = cloze();
        c.seq.mask_position = None;
        assert!(matches!(
            ig_attribution(&probe, &c, &AttributionConfig::default()),
            Err(Error::NoMaskPosition)
        ));
        assert!(matches!(baseline_attribution(&probe, &c), Err(Error::NoMaskPosition)));
    }

    #[test]
    fn encoder_sweep_matches_generic_check() {
        let enc = Encoder::new(ModelConfig {
            seed: 3,
            ..ModelConfig::toy(20)
        })
        .unwrap();
        let c = Cloze {
            id: "p#1".into(),
            seq: TokenSequence {
                tokens: vec![1, 5, 2, 9, 4],
                mask_position: Some(2),
            },
            answer: 7,
        };
        for n in [NeuronId::new(0, 3), NeuronId::new(2, 100), NeuronId::new(3, 17)] {
            let fast = completeness_sweep(&enc, &c, n, &[5, 8]).unwrap();
            for (r, steps) in fast.iter().zip([5, 8]) {
                let slow = completeness_check(&enc, &c, n, steps).unwrap();
                assert!((r.ig_score - slow.ig_score).abs() < 1e-12, "{n:?} {steps}");
                assert!((r.suppression_gap - slow.suppression_gap).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn completeness_exact_on_linear_probe() {
        let probe = LinearProbe {
            c: 0.2,
            a: vec![0.04, 0.03],
            w: vec![2.0, -1.0],
        };
        let r = completeness_check(&probe, &cloze(), NeuronId::new(0, 1), 3).unwrap();
        assert!(r.abs_error < 1e-15);
        assert!((r.suppression_gap - (-0.03)).abs() < 1e-15);
    }

    #[test]
    fn sparse_records_keep_threshold_selection() {
        use crate::selection::{select_per_prompt, SelectionMode};
        let scores = vec![vec![0.9, 0.01, -0.2, 0.3], vec![0.05, 0.5, 0.0, 0.2]];
        let map = AttributionMap {
            prompt_id: "r#0".into(),
            observed: scores.clone(),
            scores,
        };
        let recs = sparse_records(&map, 0.05);
        assert_eq!(recs.len(), 5);
        let back = maps_from_records(&recs, 2, 4).unwrap();
        for t in [0.05, 0.2, 0.5, 1.0] {
            let mode = SelectionMode::RelativeThreshold(t);
            assert_eq!(select_per_prompt(&back[0], mode), select_per_prompt(&map, mode));
        }
        let flat = AttributionMap {
            prompt_id: "r#1".into(),
            scores: vec![vec![-0.1, -0.3]],
            observed: vec![vec![0.0, 0.0]],
        };
        let recs = sparse_records(&flat, 0.05);
        assert_eq!(recs.len(), 1);
        let back = maps_from_records(&recs, 1, 2).unwrap();
        assert!(select_per_prompt(&back[0], SelectionMode::RelativeThreshold(0.2)).all_non_positive);
    }
}
