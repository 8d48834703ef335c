//! From per-prompt attribution maps to per-relation neuron sets, and the
//! inner/inter intersection statistics over those sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::model::NeuronId;

pub type NeuronIdSet = BTreeSet<NeuronId>;

/// Lowest share the adaptive refinement will go down to.
pub const MIN_ADAPTIVE_SHARE: f64 = 0.3;
pub const ADAPTIVE_SHARE_STEP: f64 = 0.05;
const SHARE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Neurons scoring at least `t` times the per-prompt maximum.
    RelativeThreshold(f64),
    /// The `k` highest-scoring neurons.
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    pub share: f64,
    pub adaptive: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            mode: SelectionMode::RelativeThreshold(0.2),
            share: 0.7,
            adaptive: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SelectionMode::RelativeThreshold(t) if !(t > 0.0 && t <= 1.0) => {
                return Err(Error::InvalidSelectionConfig(format!("threshold {t} outside (0, 1]")))
            }
            SelectionMode::TopK(0) => return Err(Error::InvalidSelectionConfig("k must be >= 1".into())),
            _ => {}
        }
        if !(self.share > 0.0 && self.share <= 1.0) {
            return Err(Error::InvalidSelectionConfig(format!("share {} outside (0, 1]", self.share)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSelection {
    pub neurons: NeuronIdSet,
    /// No neuron had a positive score; the set is empty.
    pub all_non_positive: bool,
}

/// Salient neurons of one prompt.
pub fn select_per_prompt(map: &AttributionMap, mode: SelectionMode) -> PromptSelection {
    select_from_scores(map.entries().map(|(n, s, _)| (n, s)), mode)
}

pub fn select_from_scores(scores: impl IntoIterator<Item = (NeuronId, f64)>, mode: SelectionMode) -> PromptSelection {
    let scores: Vec<(NeuronId, f64)> = scores.into_iter().collect();
    let max = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        log::warn!("attribution map has no positive score; selecting nothing");
        return PromptSelection {
            neurons: NeuronIdSet::new(),
            all_non_positive: true,
        };
    }
    let neurons = match mode {
        SelectionMode::RelativeThreshold(t) => {
            let cut = t * max;
            scores.iter().filter(|&&(_, s)| s >= cut).map(|&(n, _)| n).collect()
        }
        SelectionMode::TopK(k) => {
            let mut ranked = scores;
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.into_iter().take(k).map(|(n, _)| n).collect()
        }
    };
    PromptSelection {
        neurons,
        all_non_positive: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub neurons: NeuronIdSet,
    /// Share actually used after any adaptive lowering.
    pub effective_share: f64,
}

fn consensus(counts: &BTreeMap<NeuronId, usize>, n_sets: usize, share: f64) -> NeuronIdSet {
    let need = ((share * n_sets as f64) - SHARE_EPS).ceil().max(1.0) as usize;
    counts.iter().filter(|&(_, &c)| c >= need).map(|(&n, _)| n).collect()
}

/// Neurons present in at least `ceil(share * #sets)` of the per-prompt sets.
/// With `adaptive`, an empty result lowers the share in steps of 0.05 while
/// it stays at or above 0.3.
pub fn refine_across_prompts(per_prompt: &[NeuronIdSet], share: f64, adaptive: bool) -> Refined {
    let mut counts: BTreeMap<NeuronId, usize> = BTreeMap::new();
    for s in per_prompt {
        for &n in s {
            *counts.entry(n).or_default() += 1;
        }
    }
    let mut effective = share;
    let mut neurons = consensus(&counts, per_prompt.len(), share);
    let mut step = 1;
    while adaptive && neurons.is_empty() {
        let next = ((share - ADAPTIVE_SHARE_STEP * step as f64) * 1e9).round() / 1e9;
        if next < MIN_ADAPTIVE_SHARE - SHARE_EPS {
            break;
        }
        effective = next;
        neurons = consensus(&counts, per_prompt.len(), next);
        step += 1;
    }
    Refined {
        neurons,
        effective_share: effective,
    }
}

fn mean_pairwise(sets: &[&NeuronIdSet]) -> f64 {
    let mut total = 0usize;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            total += sets[i].intersection(sets[j]).count();
            pairs += 1;
        }
    }
    total as f64 / pairs as f64
}

/// Mean pairwise intersection size over one relation's per-prompt sets.
pub fn inner_intersection(per_prompt: &[NeuronIdSet]) -> Result<f64> {
    if per_prompt.len() < 2 {
        return Err(Error::TooFewSets {
            needed: 2,
            got: per_prompt.len(),
        });
    }
    Ok(mean_pairwise(&per_prompt.iter().collect::<Vec<_>>()))
}

/// Mean pairwise intersection size over refined sets of distinct relations.
pub fn inter_intersection(relation_sets: &BTreeMap<String, NeuronIdSet>) -> Result<f64> {
    if relation_sets.len() < 2 {
        return Err(Error::TooFewRelations {
            needed: 2,
            got: relation_sets.len(),
        });
    }
    Ok(mean_pairwise(&relation_sets.values().collect::<Vec<_>>()))
}

/// A relation's refined neuron set with its per-prompt evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSet {
    pub relation_id: String,
    pub neurons: NeuronIdSet,
    pub per_prompt_sets: Vec<NeuronIdSet>,
    pub effective_share: f64,
    /// Prompts whose map had no positive score.
    pub degenerate_prompts: usize,
}

impl NeuronSet {
    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn inner_intersection(&self) -> Option<f64> {
        inner_intersection(&self.per_prompt_sets).ok()
    }
}

/// Selects and refines the neuron set of one relation from its prompts' maps.
pub fn select_relation(relation_id: &str, maps: &[&AttributionMap], cfg: &SelectionConfig) -> Result<NeuronSet> {
    cfg.validate()?;
    let picks: Vec<PromptSelection> = maps.iter().map(|m| select_per_prompt(m, cfg.mode)).collect();
    let degenerate_prompts = picks.iter().filter(|p| p.all_non_positive).count();
    let per_prompt_sets: Vec<NeuronIdSet> = picks.into_iter().map(|p| p.neurons).collect();
    let refined = if per_prompt_sets.is_empty() {
        Refined {
            neurons: NeuronIdSet::new(),
            effective_share: cfg.share,
        }
    } else {
        refine_across_prompts(&per_prompt_sets, cfg.share, cfg.adaptive)
    };
    Ok(NeuronSet {
        relation_id: relation_id.to_string(),
        neurons: refined.neurons,
        per_prompt_sets,
        effective_share: refined.effective_share,
        degenerate_prompts,
    })
}

/// One row of the per-method identification summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub relations: usize,
    pub empty_sets: usize,
    /// Mean refined-set size over relations.
    pub avg_neurons: f64,
    /// Mean of per-relation inner intersections.
    pub inner_intersection: f64,
    pub inter_intersection: f64,
}

pub fn summarize_sets(sets: &[NeuronSet]) -> SelectionSummary {
    let n = sets.len();
    let avg_neurons = if n == 0 {
        0.0
    } else {
        sets.iter().map(|s| s.neurons.len()).sum::<usize>() as f64 / n as f64
    };
    let inner: Vec<f64> = sets.iter().filter_map(NeuronSet::inner_intersection).collect();
    let inner_mean = if inner.is_empty() {
        0.0
    } else {
        inner.iter().sum::<f64>() / inner.len() as f64
    };
    let map: BTreeMap<String, NeuronIdSet> = sets.iter().map(|s| (s.relation_id.clone(), s.neurons.clone())).collect();
    SelectionSummary {
        relations: n,
        empty_sets: sets.iter().filter(|s| s.is_empty()).count(),
        avg_neurons,
        inner_intersection: inner_mean,
        inter_intersection: inter_intersection(&map).unwrap_or(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: usize) -> NeuronId {
        NeuronId::new(0, i)
    }

    fn set(ix: &[usize]) -> NeuronIdSet {
        ix.iter().map(|&i| n(i)).collect()
    }

    #[test]
    fn relative_threshold_and_top_k() {
        let scores = vec![(n(1), 0.9), (n(2), 0.5), (n(3), 0.1)];
        let t = select_from_scores(scores.clone(), SelectionMode::RelativeThreshold(0.2));
        assert_eq!(t.neurons, set(&[1, 2]));
        let k = select_from_scores(scores, SelectionMode::TopK(1));
        assert_eq!(k.neurons, set(&[1]));
    }

    #[test]
    fn top_k_ties_prefer_lower_coordinates() {
        let scores = vec![
            (NeuronId::new(1, 0), 0.5),
            (NeuronId::new(0, 7), 0.5),
            (NeuronId::new(0, 2), 0.9),
        ];
        let k = select_from_scores(scores, SelectionMode::TopK(2));
        assert_eq!(k.neurons, [NeuronId::new(0, 2), NeuronId::new(0, 7)].into_iter().collect());
    }

    #[test]
    fn non_positive_maps_select_nothing() {
        let p = select_from_scores(vec![(n(0), -0.1), (n(1), 0.0)], SelectionMode::TopK(1));
        assert!(p.all_non_positive);
        assert!(p.neurons.is_empty());
    }

    #[test]
    fn refinement_rules() {
        let mut sets: Vec<NeuronIdSet> = (0..10).map(|_| set(&[5])).collect();
        sets[0] = set(&[]);
        assert_eq!(refine_across_prompts(&sets, 0.7, false).neurons, set(&[5]));

        let same: Vec<NeuronIdSet> = (0..10).map(|_| set(&[1, 2])).collect();
        for p in [0.1, 0.5, 1.0] {
            assert_eq!(refine_across_prompts(&same, p, false).neurons, set(&[1, 2]));
        }

        let disjoint: Vec<NeuronIdSet> = (0..10).map(|i| set(&[i])).collect();
        let r = refine_across_prompts(&disjoint, 0.7, false);
        assert!(r.neurons.is_empty());
        assert_eq!(r.effective_share, 0.7);
    }

    #[test]
    fn share_of_exact_multiple_is_not_rounded_up() {
        // 0.7 * 10 is 7.000000000000001 in floating point.
        let mut sets: Vec<NeuronIdSet> = (0..10).map(|_| set(&[])).collect();
        for s in sets.iter_mut().take(7) {
            s.insert(n(3));
        }
        assert_eq!(refine_across_prompts(&sets, 0.7, false).neurons, set(&[3]));
    }

    #[test]
    fn adaptive_lowering_stops_at_floor() {
        let mut sets: Vec<NeuronIdSet> = (0..10).map(|i| set(&[100 + i])).collect();
        for s in sets.iter_mut().take(4) {
            s.insert(n(1));
        }
        let r = refine_across_prompts(&sets, 0.7, true);
        assert_eq!(r.neurons, set(&[1]));
        assert!((r.effective_share - 0.4).abs() < 1e-12);

        let disjoint: Vec<NeuronIdSet> = (0..10).map(|i| set(&[i])).collect();
        let r = refine_across_prompts(&disjoint, 0.7, true);
        assert!(r.neurons.is_empty());
        assert!((r.effective_share - 0.3).abs() < 1e-12);
    }

    #[test]
    fn intersections_worked_examples() {
        assert_eq!(inner_intersection(&[set(&[1, 2]), set(&[2, 3]), set(&[2, 4])]).unwrap(), 1.0);
        assert_eq!(inner_intersection(&vec![set(&[1, 2, 3]); 4]).unwrap(), 3.0);
        assert_eq!(inner_intersection(&[set(&[1]), set(&[2]), set(&[3])]).unwrap(), 0.0);
        assert!(matches!(inner_intersection(&[set(&[1])]), Err(Error::TooFewSets { .. })));

        let rel = |v: Vec<NeuronIdSet>| -> BTreeMap<String, NeuronIdSet> {
            v.into_iter().enumerate().map(|(i, s)| (format!("r{i}"), s)).collect()
        };
        assert_eq!(inter_intersection(&rel(vec![set(&[1]), set(&[2])])).unwrap(), 0.0);
        assert_eq!(inter_intersection(&rel(vec![set(&[1, 2, 3]), set(&[1, 2, 3])])).unwrap(), 3.0);
        let third = inter_intersection(&rel(vec![set(&[1, 2]), set(&[2]), set(&[3])])).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            inter_intersection(&rel(vec![set(&[1])])),
            Err(Error::TooFewRelations { .. })
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        for mode in [SelectionMode::RelativeThreshold(0.0), SelectionMode::RelativeThreshold(1.5), SelectionMode::TopK(0)] {
            let cfg = SelectionConfig {
                mode,
                ..SelectionConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
        let cfg = SelectionConfig {
            share: 0.0,
            ..SelectionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
