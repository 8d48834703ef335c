//! Erasure and amplification experiments over traced neuron sets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::Cloze;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{Encoder, LanguageModel, NeuronOverride, OverrideScope, OverrideSpec};
use crate::relation::{control_prompts, pooled_control_prompts, BiasedRelation, RelationDataset};
use crate::selection::NeuronSet;

/// exp(mean(-ln P(answer))) over the prompts; one prompt gives 1 / P.
pub fn masked_perplexity(encoder: &Encoder, prompts: &[Cloze], overrides: &NeuronOverride) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::EmptyPromptSet);
    }
    let nll: Vec<f64> = prompts
        .par_iter()
        .map(|c| Ok(-encoder.mask_token_prob(&c.seq, c.answer, overrides)?.ln()))
        .collect::<Result<_>>()?;
    Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    Suppress,
    Amplify { factor: f64 },
}

impl Intervention {
    fn spec(self) -> OverrideSpec {
        match self {
            Intervention::Suppress => OverrideSpec::Zero,
            Intervention::Amplify { factor } => OverrideSpec::Scale(factor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPooling {
    /// Controls drawn from relations in other bias categories.
    #[default]
    Matched,
    /// Controls drawn from every other relation, any category.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErasureConfig {
    pub ctrl_n: usize,
    pub seed: u64,
    pub pooling: ControlPooling,
    pub scope: OverrideScope,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        ErasureConfig {
            ctrl_n: 10,
            seed: 0,
            pooling: ControlPooling::Matched,
            scope: OverrideScope::MaskPosition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureResult {
    pub relation_id: String,
    pub category: String,
    pub intervention: Intervention,
    pub n_suppressed: usize,
    pub n_target_prompts: usize,
    pub n_ctrl_prompts: usize,
    pub ctrl_shortfall: bool,
    /// The neuron set was empty; nothing was modified.
    pub skipped: bool,
    pub ppl_target_before: f64,
    pub ppl_target_after: f64,
    pub ppl_ctrl_before: f64,
    pub ppl_ctrl_after: f64,
    pub ratio_target: f64,
    pub ratio_ctrl: f64,
    pub selectivity: f64,
}

impl ErasureResult {
    #[allow(clippy::too_many_arguments)]
    fn new(
        relation: &BiasedRelation,
        intervention: Intervention,
        n_suppressed: usize,
        counts: (usize, usize, bool),
        skipped: bool,
        target: (f64, f64),
        ctrl: (f64, f64),
    ) -> Self {
        let ratio_target = target.1 / target.0;
        let ratio_ctrl = ctrl.1 / ctrl.0;
        let r = ErasureResult {
            relation_id: relation.id.clone(),
            category: relation.category.code().to_string(),
            intervention,
            n_suppressed,
            n_target_prompts: counts.0,
            n_ctrl_prompts: counts.1,
            ctrl_shortfall: counts.2,
            skipped,
            ppl_target_before: target.0,
            ppl_target_after: target.1,
            ppl_ctrl_before: ctrl.0,
            ppl_ctrl_after: ctrl.1,
            ratio_target,
            ratio_ctrl,
            selectivity: ratio_target - ratio_ctrl,
        };
        debug_assert!(r.identities_hold());
        r
    }

    /// The ratio and selectivity identities, checked exactly.
    pub fn identities_hold(&self) -> bool {
        self.ratio_target == self.ppl_target_after / self.ppl_target_before
            && self.ratio_ctrl == self.ppl_ctrl_after / self.ppl_ctrl_before
            && self.selectivity == self.ratio_target - self.ratio_ctrl
    }
}

fn control_clozes(
    lm: &LanguageModel,
    dataset: &RelationDataset,
    relation: &BiasedRelation,
    cfg: &ErasureConfig,
) -> Result<(Vec<Cloze>, bool)> {
    let seed = derive_seed(cfg.seed, &relation.id);
    let sample = match cfg.pooling {
        ControlPooling::Matched => control_prompts(dataset, relation, cfg.ctrl_n, seed)?,
        ControlPooling::Pooled => pooled_control_prompts(dataset, relation, cfg.ctrl_n, seed)?,
    };
    let clozes = sample
        .prompts
        .iter()
        .map(|(id, p)| lm.cloze(id.clone(), p))
        .collect::<Result<_>>()?;
    Ok((clozes, sample.shortfall))
}

/// Applies `intervention` to `set` and measures target/control perplexity
/// before and after.
pub fn intervene(
    lm: &LanguageModel,
    dataset: &RelationDataset,
    relation: &BiasedRelation,
    set: &NeuronSet,
    intervention: Intervention,
    cfg: &ErasureConfig,
) -> Result<ErasureResult> {
    if let Intervention::Amplify { factor } = intervention {
        if !(factor.is_finite() && factor >= 1.0) {
            return Err(Error::InvalidFactor(factor));
        }
    }
    let targets: Vec<Cloze> = dataset
        .prompts_of(&relation.id)
        .into_iter()
        .map(|(id, p)| lm.cloze(id, p))
        .collect::<Result<_>>()?;
    let (controls, shortfall) = control_clozes(lm, dataset, relation, cfg)?;
    let none = NeuronOverride::new(cfg.scope);
    let t_before = masked_perplexity(&lm.encoder, &targets, &none)?;
    let c_before = masked_perplexity(&lm.encoder, &controls, &none)?;
    let counts = (targets.len(), controls.len(), shortfall);
    if set.is_empty() {
        return Ok(ErasureResult::new(
            relation,
            intervention,
            0,
            counts,
            true,
            (t_before, t_before),
            (c_before, c_before),
        ));
    }
    let o = NeuronOverride::uniform(&set.neurons, intervention.spec(), cfg.scope)?;
    let t_after = masked_perplexity(&lm.encoder, &targets, &o)?;
    let c_after = masked_perplexity(&lm.encoder, &controls, &o)?;
    Ok(ErasureResult::new(
        relation,
        intervention,
        set.neurons.len(),
        counts,
        false,
        (t_before, t_after),
        (c_before, c_after),
    ))
}

/// Zeroes the relation's neurons.
pub fn erase(
    lm: &LanguageModel,
    dataset: &RelationDataset,
    relation: &BiasedRelation,
    set: &NeuronSet,
    cfg: &ErasureConfig,
) -> Result<ErasureResult> {
    intervene(lm, dataset, relation, set, Intervention::Suppress, cfg)
}

/// Scales the relation's neurons by `factor >= 1`.
pub fn amplify(
    lm: &LanguageModel,
    dataset: &RelationDataset,
    relation: &BiasedRelation,
    set: &NeuronSet,
    factor: f64,
    cfg: &ErasureConfig,
) -> Result<ErasureResult> {
    intervene(lm, dataset, relation, set, Intervention::Amplify { factor }, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureAggregate {
    /// Category code, or `all`.
    pub category: String,
    pub relations: usize,
    pub skipped: usize,
    pub mean_n_suppressed: f64,
    pub mean_ratio_target: f64,
    pub mean_ratio_ctrl: f64,
    pub mean_selectivity: f64,
}

/// Arithmetic means over non-skipped results.
pub fn aggregate(label: &str, results: &[&ErasureResult]) -> ErasureAggregate {
    let used: Vec<&&ErasureResult> = results.iter().filter(|r| !r.skipped).collect();
    let mean = |f: &dyn Fn(&ErasureResult) -> f64| {
        if used.is_empty() {
            f64::NAN
        } else {
            used.iter().map(|r| f(r)).sum::<f64>() / used.len() as f64
        }
    };
    ErasureAggregate {
        category: label.to_string(),
        relations: used.len(),
        skipped: results.len() - used.len(),
        mean_n_suppressed: mean(&|r| r.n_suppressed as f64),
        mean_ratio_target: mean(&|r| r.ratio_target),
        mean_ratio_ctrl: mean(&|r| r.ratio_ctrl),
        mean_selectivity: mean(&|r| r.selectivity),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rq2Report {
    pub results: Vec<ErasureResult>,
    pub by_category: Vec<ErasureAggregate>,
    pub overall: ErasureAggregate,
}

impl Rq2Report {
    pub fn from_results(results: Vec<ErasureResult>) -> Self {
        let mut groups: BTreeMap<String, Vec<&ErasureResult>> = BTreeMap::new();
        for r in &results {
            groups.entry(r.category.clone()).or_default().push(r);
        }
        let by_category = groups.iter().map(|(c, rs)| aggregate(c, rs)).collect();
        let overall = aggregate("all", &results.iter().collect::<Vec<_>>());
        Rq2Report {
            results,
            by_category,
            overall,
        }
    }

    /// CSV of category means: category, relations, skipped, Avg #BN, PPL
    /// ratio (bias), PPL ratio (ctrl), selectivity.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("category,relations,skipped,avg_n_suppressed,ppl_ratio_bias,ppl_ratio_ctrl,selectivity\n");
        for a in self.by_category.iter().chain(std::iter::once(&self.overall)) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                a.category,
                a.relations,
                a.skipped,
                a.mean_n_suppressed,
                a.mean_ratio_target,
                a.mean_ratio_ctrl,
                a.mean_selectivity
            ));
        }
        s
    }
}

/// Runs the intervention for every relation that has a set, in dataset order.
pub fn run_rq2(
    lm: &LanguageModel,
    dataset: &RelationDataset,
    sets: &[NeuronSet],
    intervention: Intervention,
    cfg: &ErasureConfig,
) -> Result<Rq2Report> {
    let by_id: BTreeMap<&str, &NeuronSet> = sets.iter().map(|s| (s.relation_id.as_str(), s)).collect();
    let jobs: Vec<(&BiasedRelation, &NeuronSet)> = dataset
        .relations()
        .iter()
        .filter_map(|r| by_id.get(r.id.as_str()).map(|s| (r, *s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|(r, s)| intervene(lm, dataset, r, s, intervention, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rq2Report::from_results(results))
}
