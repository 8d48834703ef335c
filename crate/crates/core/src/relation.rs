//! Biased-relation datasets: `<group, association, stereotype>` triplets and
//! the cloze prompts that express them.
//!
//! Both files are line-delimited JSON. Relations carry `id`, `category`
//! (`"BR01"`..`"BR09"`), `group`, `association`, `stereotype` and an optional
//! `source_sentence`; prompts carry `relation_id`, `text` (exactly one
//! `[MASK]`) and `answer`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MASK: &str = "[MASK]";
pub const DEFAULT_PROMPTS_PER_RELATION: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BiasCategory {
    Age,
    Disability,
    Gender,
    Nationality,
    PhysicalAppearance,
    RaceColor,
    Religion,
    SexualOrientation,
    Socioeconomic,
}

impl BiasCategory {
    pub const ALL: [BiasCategory; 9] = [
        BiasCategory::Age,
        BiasCategory::Disability,
        BiasCategory::Gender,
        BiasCategory::Nationality,
        BiasCategory::PhysicalAppearance,
        BiasCategory::RaceColor,
        BiasCategory::Religion,
        BiasCategory::SexualOrientation,
        BiasCategory::Socioeconomic,
    ];

    pub fn code(self) -> &'static str {
        match self {
            BiasCategory::Age => "BR01",
            BiasCategory::Disability => "BR02",
            BiasCategory::Gender => "BR03",
            BiasCategory::Nationality => "BR04",
            BiasCategory::PhysicalAppearance => "BR05",
            BiasCategory::RaceColor => "BR06",
            BiasCategory::Religion => "BR07",
            BiasCategory::SexualOrientation => "BR08",
            BiasCategory::Socioeconomic => "BR09",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BiasCategory::Age => "Age",
            BiasCategory::Disability => "Disability",
            BiasCategory::Gender => "Gender",
            BiasCategory::Nationality => "Nationality",
            BiasCategory::PhysicalAppearance => "Physical Appearance",
            BiasCategory::RaceColor => "RaceColor",
            BiasCategory::Religion => "Religion",
            BiasCategory::SexualOrientation => "Sexual Orientation",
            BiasCategory::Socioeconomic => "Socioeconomic",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label)
    }
}

impl fmt::Display for BiasCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for BiasCategory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.code() == s)
            .ok_or_else(|| format!("unknown bias category `{s}` (expected BR01..BR09)"))
    }
}

impl TryFrom<String> for BiasCategory {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BiasCategory> for String {
    fn from(c: BiasCategory) -> String {
        c.code().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasedRelation {
    pub id: String,
    pub category: BiasCategory,
    pub group: String,
    pub association: String,
    pub stereotype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sentence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasPrompt {
    pub relation_id: String,
    pub text: String,
    pub answer: String,
}

/// Stable identifier of the `k`-th prompt (file order) of a relation.
pub fn prompt_id(relation_id: &str, k: usize) -> String {
    format!("{relation_id}#{k}")
}

/// Splits a prompt id back into `(relation_id, k)`.
pub fn parse_prompt_id(id: &str) -> Option<(&str, usize)> {
    let (rel, k) = id.rsplit_once('#')?;
    Some((rel, k.parse().ok()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub strict: bool,
    pub prompts_per_relation: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            strict: true,
            prompts_per_relation: DEFAULT_PROMPTS_PER_RELATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationDataset {
    relations: Vec<BiasedRelation>,
    prompts: Vec<BiasPrompt>,
    prompts_per_relation: usize,
    relation_index: HashMap<String, usize>,
    // prompt indices per relation, in file order
    by_relation: Vec<Vec<usize>>,
}

impl RelationDataset {
    /// Builds and validates a dataset from in-memory records.
    pub fn new(
        relations: Vec<BiasedRelation>,
        prompts: Vec<BiasPrompt>,
        opts: LoadOptions,
    ) -> Result<Self> {
        if opts.prompts_per_relation == 0 {
            return Err(Error::Config {
                field: "prompts_per_relation".into(),
                reason: "must be positive".into(),
            });
        }
        let mut relation_index = HashMap::with_capacity(relations.len());
        for (i, r) in relations.iter().enumerate() {
            validate_relation(r).map_err(|(field, reason)| Error::MalformedRecord {
                path: "<relations>".into(),
                line: i + 1,
                field: field.into(),
                reason,
            })?;
            if relation_index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateRelationId(r.id.clone()));
            }
        }
        let mut by_relation = vec![Vec::new(); relations.len()];
        for (i, p) in prompts.iter().enumerate() {
            validate_prompt(p).map_err(|(field, reason)| Error::MalformedRecord {
                path: "<prompts>".into(),
                line: i + 1,
                field: field.into(),
                reason,
            })?;
            let &ri = relation_index
                .get(&p.relation_id)
                .ok_or_else(|| Error::DanglingPromptRelation {
                    relation_id: p.relation_id.clone(),
                    line: i + 1,
                })?;
            by_relation[ri].push(i);
        }
        for (r, idx) in relations.iter().zip(&by_relation) {
            let ok = if opts.strict {
                idx.len() == opts.prompts_per_relation
            } else {
                !idx.is_empty()
            };
            if !ok {
                return Err(Error::PromptCountViolation {
                    relation_id: r.id.clone(),
                    found: idx.len(),
                    expected: if opts.strict { opts.prompts_per_relation } else { 1 },
                });
            }
        }
        Ok(RelationDataset {
            relations,
            prompts,
            prompts_per_relation: opts.prompts_per_relation,
            relation_index,
            by_relation,
        })
    }

    pub fn relations(&self) -> &[BiasedRelation] {
        &self.relations
    }

    pub fn prompts(&self) -> &[BiasPrompt] {
        &self.prompts
    }

    pub fn prompts_per_relation(&self) -> usize {
        self.prompts_per_relation
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn relation(&self, id: &str) -> Option<&BiasedRelation> {
        self.relation_index.get(id).map(|&i| &self.relations[i])
    }

    /// The prompts of one relation with their ids, in file order.
    pub fn prompts_of(&self, relation_id: &str) -> Vec<(String, &BiasPrompt)> {
        match self.relation_index.get(relation_id) {
            Some(&ri) => self.by_relation[ri]
                .iter()
                .enumerate()
                .map(|(k, &pi)| (prompt_id(relation_id, k), &self.prompts[pi]))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Every prompt with its id, grouped by relation in relation order.
    pub fn identified_prompts(&self) -> Vec<(String, &BiasPrompt)> {
        self.relations
            .iter()
            .flat_map(|r| self.prompts_of(&r.id))
            .collect()
    }

    pub fn save(&self, relations_path: &Path, prompts_path: &Path) -> Result<()> {
        write_jsonl(relations_path, &self.relations)?;
        write_jsonl(prompts_path, &self.prompts)
    }
}

fn validate_relation(r: &BiasedRelation) -> std::result::Result<(), (&'static str, String)> {
    for (field, value) in [
        ("id", &r.id),
        ("group", &r.group),
        ("association", &r.association),
        ("stereotype", &r.stereotype),
    ] {
        if value.trim().is_empty() {
            return Err((field, "must be non-empty".into()));
        }
    }
    Ok(())
}

fn validate_prompt(p: &BiasPrompt) -> std::result::Result<(), (&'static str, String)> {
    let masks = p.text.matches(MASK).count();
    if masks != 1 {
        return Err(("text", format!("expected exactly one {MASK}, found {masks}")));
    }
    if p.answer.trim().is_empty() {
        return Err(("answer", "must be non-empty".into()));
    }
    if p.relation_id.trim().is_empty() {
        return Err(("relation_id", "must be non-empty".into()));
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

struct RecordReader<'a> {
    path: &'a Path,
    line: usize,
    obj: serde_json::Map<String, Value>,
}

impl<'a> RecordReader<'a> {
    fn parse(path: &'a Path, line: usize, text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line,
            field: "<record>".into(),
            reason: e.to_string(),
        })?;
        match value {
            Value::Object(obj) => Ok(RecordReader { path, line, obj }),
            _ => Err(Error::MalformedRecord {
                path: path.display().to_string(),
                line,
                field: "<record>".into(),
                reason: "expected a JSON object".into(),
            }),
        }
    }

    fn err(&self, field: &str, reason: impl Into<String>) -> Error {
        Error::MalformedRecord {
            path: self.path.display().to_string(),
            line: self.line,
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn string(&self, field: &str) -> Result<String> {
        match self.obj.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.err(field, "expected a string")),
            None => Err(self.err(field, "missing")),
        }
    }

    fn opt_string(&self, field: &str) -> Result<Option<String>> {
        match self.obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(self.err(field, "expected a string")),
        }
    }
}

fn read_relations(path: &Path) -> Result<Vec<BiasedRelation>> {
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let rec = RecordReader::parse(path, line, &text)?;
        let category = rec
            .string("category")?
            .parse::<BiasCategory>()
            .map_err(|e| rec.err("category", e))?;
        let r = BiasedRelation {
            id: rec.string("id")?,
            category,
            group: rec.string("group")?,
            association: rec.string("association")?,
            stereotype: rec.string("stereotype")?,
            source_sentence: rec.opt_string("source_sentence")?,
        };
        validate_relation(&r).map_err(|(f, reason)| rec.err(f, reason))?;
        out.push(r);
    }
    Ok(out)
}

fn read_prompts(path: &Path) -> Result<Vec<(usize, BiasPrompt)>> {
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let rec = RecordReader::parse(path, line, &text)?;
        let p = BiasPrompt {
            relation_id: rec.string("relation_id")?,
            text: rec.string("text")?,
            answer: rec.string("answer")?,
        };
        validate_prompt(&p).map_err(|(f, reason)| rec.err(f, reason))?;
        out.push((line, p));
    }
    Ok(out)
}

/// Loads and validates a dataset. `strict` enforces exactly
/// [`DEFAULT_PROMPTS_PER_RELATION`] prompts per relation.
pub fn load_dataset(relations_path: &Path, prompts_path: &Path, strict: bool) -> Result<RelationDataset> {
    load_dataset_with(
        relations_path,
        prompts_path,
        LoadOptions {
            strict,
            ..LoadOptions::default()
        },
    )
}

pub fn load_dataset_with(
    relations_path: &Path,
    prompts_path: &Path,
    opts: LoadOptions,
) -> Result<RelationDataset> {
    let relations = read_relations(relations_path)?;
    let mut seen = BTreeSet::new();
    for r in &relations {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateRelationId(r.id.clone()));
        }
    }
    let prompts = read_prompts(prompts_path)?;
    for (line, p) in &prompts {
        if !seen.contains(p.relation_id.as_str()) {
            return Err(Error::DanglingPromptRelation {
                relation_id: p.relation_id.clone(),
                line: *line,
            });
        }
    }
    RelationDataset::new(relations, prompts.into_iter().map(|(_, p)| p).collect(), opts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SummaryRow {
    /// Category code, or `Total` for the total row.
    pub category: String,
    pub label: String,
    pub relations: usize,
    pub prompts: usize,
    pub groups: usize,
    pub stereotypes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub rows: Vec<SummaryRow>,
    pub total: SummaryRow,
}

impl DatasetSummary {
    pub fn row(&self, category: BiasCategory) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.category == category.code())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,label,relations,prompts,groups,stereotypes\n");
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.category, r.label, r.relations, r.prompts, r.groups, r.stereotypes
            ));
        }
        s
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Per-category counts of relations, prompts, distinct groups and distinct
/// stereotypes. Distinctness is per category after trim + lowercase; the
/// total row sums the category rows.
pub fn summarize(dataset: &RelationDataset) -> DatasetSummary {
    #[derive(Default)]
    struct Acc {
        relations: usize,
        prompts: usize,
        groups: BTreeSet<String>,
        stereotypes: BTreeSet<String>,
    }
    let mut acc: BTreeMap<BiasCategory, Acc> = BTreeMap::new();
    for (r, idx) in dataset.relations.iter().zip(&dataset.by_relation) {
        let a = acc.entry(r.category).or_default();
        a.relations += 1;
        a.prompts += idx.len();
        a.groups.insert(normalize(&r.group));
        a.stereotypes.insert(normalize(&r.stereotype));
    }
    let rows: Vec<SummaryRow> = acc
        .into_iter()
        .map(|(c, a)| SummaryRow {
            category: c.code().into(),
            label: c.label().into(),
            relations: a.relations,
            prompts: a.prompts,
            groups: a.groups.len(),
            stereotypes: a.stereotypes.len(),
        })
        .collect();
    let total = SummaryRow {
        category: "Total".into(),
        label: "Total".into(),
        relations: rows.iter().map(|r| r.relations).sum(),
        prompts: rows.iter().map(|r| r.prompts).sum(),
        groups: rows.iter().map(|r| r.groups).sum(),
        stereotypes: rows.iter().map(|r| r.stereotypes).sum(),
    };
    DatasetSummary { rows, total }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSample {
    /// `(prompt_id, prompt)` pairs in sampling order.
    pub prompts: Vec<(String, BiasPrompt)>,
    /// Set when fewer than the requested number of prompts were available.
    pub shortfall: bool,
}

/// Samples `n` prompts uniformly without replacement from relations outside
/// the target's category.
pub fn control_prompts(
    dataset: &RelationDataset,
    target: &BiasedRelation,
    n: usize,
    seed: u64,
) -> Result<ControlSample> {
    sample_controls(dataset, target, n, seed, |r| r.category != target.category)
}

/// Like [`control_prompts`] but draws from every other relation, including
/// ones in the target's category.
pub fn pooled_control_prompts(
    dataset: &RelationDataset,
    target: &BiasedRelation,
    n: usize,
    seed: u64,
) -> Result<ControlSample> {
    sample_controls(dataset, target, n, seed, |r| r.id != target.id)
}

fn sample_controls(
    dataset: &RelationDataset,
    target: &BiasedRelation,
    n: usize,
    seed: u64,
    keep: impl Fn(&BiasedRelation) -> bool,
) -> Result<ControlSample> {
    let pool: Vec<(String, &BiasPrompt)> = dataset
        .relations
        .iter()
        .filter(|r| keep(r))
        .flat_map(|r| dataset.prompts_of(&r.id))
        .collect();
    if pool.is_empty() {
        return Err(Error::NoControlAvailable(target.category.code().into()));
    }
    let take = n.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), take);
    Ok(ControlSample {
        prompts: picked
            .into_iter()
            .map(|i| (pool[i].0.clone(), pool[i].1.clone()))
            .collect(),
        shortfall: take < n,
    })
}
