//! Synthetic biased-relation corpora for end-to-end runs at desk scale.
//!
//! Relations are laid out in crossed quads over two fresh association tokens
//! (a, b) and two fresh stereotype tokens (s, t): (a,s)->g, (a,t)->h,
//! (b,t)->g, (b,s)->h, with g != h drawn from the quad's category. No sum of
//! per-token evidence predicts the group, so the model has to store the pair.
//! Quads share no content tokens, which keeps one relation's stored pair away
//! from another's prompts. Every relation is rendered through the same
//! `paraphrases` cloze templates, which mix the three slots with filler words
//! in varying order.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{CorpusLine, TrainingCorpus};
use crate::error::{Error, Result};
use crate::relation::{BiasCategory, BiasPrompt, BiasedRelation, LoadOptions, RelationDataset, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub relations: usize,
    pub paraphrases: usize,
    pub groups_per_category: usize,
    pub associations: usize,
    pub stereotypes: usize,
    pub fillers: usize,
    /// Upper bound on distinct tokens the corpus may use.
    pub vocab_budget: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            relations: 30,
            paraphrases: 10,
            groups_per_category: 2,
            associations: 16,
            stereotypes: 16,
            fillers: 24,
            vocab_budget: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Mask,
    Association,
    Stereotype,
    Filler(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// One answer-marked line per prompt.
    pub corpus: TrainingCorpus,
    pub dataset: RelationDataset,
}

fn group_token(c: BiasCategory, k: usize) -> String {
    format!("grp{}_{k}", &c.code()[2..])
}

fn render(template: &[Slot], assoc: &str, stereo: &str, mask: &str) -> Vec<String> {
    template
        .iter()
        .map(|s| match s {
            Slot::Mask => mask.to_string(),
            Slot::Association => assoc.to_string(),
            Slot::Stereotype => stereo.to_string(),
            Slot::Filler(f) => format!("w{f}"),
        })
        .collect()
}

fn make_templates(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Slot>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(spec.paraphrases);
    while out.len() < spec.paraphrases {
        let n_fill = rng.random_range(1..=3usize.min(spec.fillers));
        let mut slots = vec![Slot::Mask, Slot::Association, Slot::Stereotype];
        for _ in 0..n_fill {
            slots.push(Slot::Filler(rng.random_range(0..spec.fillers)));
        }
        slots.shuffle(rng);
        let key = format!("{slots:?}");
        if seen.insert(key) {
            out.push(slots);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Planned {
    category: BiasCategory,
    group: usize,
    association: usize,
    stereotype: usize,
}

fn plan_relations(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Planned>> {
    let n_cat = BiasCategory::ALL.len();
    let quads = spec.relations.div_ceil(4);
    let needed = if spec.relations == 1 { 1 } else { 2 * quads };
    if spec.associations < needed || spec.stereotypes < needed {
        return Err(Error::Config {
            field: "synth".into(),
            reason: format!(
                "{} relations need {needed} associations and {needed} stereotypes",
                spec.relations
            ),
        });
    }
    let mut plan = Vec::with_capacity(spec.relations);
    for q in 0..quads {
        let category = BiasCategory::ALL[q % n_cat];
        let (g, h) = if spec.groups_per_category >= 2 {
            let g = rng.random_range(0..spec.groups_per_category);
            let h = (g + rng.random_range(1..spec.groups_per_category)) % spec.groups_per_category;
            (g, h)
        } else {
            (0, 0)
        };
        let (a, b, s, t) = (2 * q, 2 * q + 1, 2 * q, 2 * q + 1);
        let cells = [(a, s, g), (a, t, h), (b, t, g), (b, s, h)];
        for &(association, stereotype, group) in cells.iter().take(spec.relations - plan.len()) {
            plan.push(Planned {
                category,
                group,
                association,
                stereotype,
            });
        }
    }
    Ok(plan)
}

/// Generates a relation dataset and the matching memorization corpus.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    if spec.relations == 0
        || spec.paraphrases == 0
        || spec.groups_per_category == 0
        || spec.associations == 0
        || spec.stereotypes == 0
    {
        return Err(Error::Config {
            field: "synth".into(),
            reason: "relation, paraphrase, group, association and stereotype counts must be >= 1".into(),
        });
    }
    let categories = spec.relations.min(BiasCategory::ALL.len());
    let required = categories * spec.groups_per_category + spec.associations + spec.stereotypes + spec.fillers;
    if required > spec.vocab_budget {
        return Err(Error::VocabTooSmall {
            required,
            available: spec.vocab_budget,
        });
    }
    // Enough distinct templates must exist: with one to three fillers there
    // are far more orderings than any sensible paraphrase count, except when
    // the filler pool is empty.
    if spec.fillers == 0 {
        return Err(Error::VocabTooSmall {
            required: required + 1,
            available: spec.vocab_budget,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = make_templates(spec, &mut rng);
    let plan = plan_relations(spec, &mut rng)?;
    let mut relations = Vec::with_capacity(spec.relations);
    let mut prompts = Vec::with_capacity(spec.relations * spec.paraphrases);
    let mut lines = Vec::with_capacity(spec.relations * spec.paraphrases);
    for j in 0..spec.relations {
        let Planned { category, group, association, stereotype } = plan[j];
        let group = group_token(category, group);
        let association = format!("assoc{association}");
        let stereotype = format!("ster{stereotype}");
        let id = format!("rel{j:03}");
        for t in &templates {
            let toks = render(t, &association, &stereotype, MASK);
            let answer = toks.iter().position(|w| w == MASK);
            prompts.push(BiasPrompt {
                relation_id: id.clone(),
                text: toks.join(" "),
                answer: group.clone(),
            });
            lines.push(CorpusLine {
                tokens: render(t, &association, &stereotype, &group),
                answer,
            });
        }
        relations.push(BiasedRelation {
            source_sentence: Some(render(&templates[0], &association, &stereotype, &group).join(" ")),
            id,
            category,
            group,
            association,
            stereotype,
        });
    }
    let dataset = RelationDataset::new(
        relations,
        prompts,
        LoadOptions {
            strict: true,
            prompts_per_relation: spec.paraphrases,
        },
    )?;
    Ok(SyntheticCorpus {
        corpus: TrainingCorpus { lines },
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_relation_passes_strict_validation() {
        let s = generate_synthetic_corpus(&SynthSpec {
            relations: 1,
            paraphrases: 10,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(s.dataset.relations().len(), 1);
        assert_eq!(s.dataset.prompts().len(), 10);
        let texts: BTreeSet<_> = s.dataset.prompts().iter().map(|p| p.text.clone()).collect();
        assert_eq!(texts.len(), 10);
    }

    #[test]
    fn answers_are_single_vocab_tokens() {
        let s = generate_synthetic_corpus(&SynthSpec::default()).unwrap();
        let vocab = s.corpus.vocab().unwrap();
        for p in s.dataset.prompts() {
            assert!(vocab.answer_id(&p.answer).is_ok());
            assert_eq!(p.text.matches(MASK).count(), 1);
        }
        for line in &s.corpus.lines {
            assert!(line.answer.is_some());
        }
    }

    #[test]
    fn seed_changes_group_assignment() {
        let groups = |seed| {
            generate_synthetic_corpus(&SynthSpec {
                seed,
                ..SynthSpec::default()
            })
            .unwrap()
            .dataset
            .relations()
            .iter()
            .map(|r| r.group.clone())
            .collect::<Vec<_>>()
        };
        assert_eq!(groups(1), groups(1));
        assert_ne!(groups(1), groups(2));
    }

    #[test]
    fn vocab_budget_enforced() {
        let err = generate_synthetic_corpus(&SynthSpec {
            vocab_budget: 20,
            ..SynthSpec::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::VocabTooSmall { .. }));
    }
}
