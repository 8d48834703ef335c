//! End-to-end runs: dataset, trace, select, erase, stats, eval-tasks and
//! report, each writing its artifacts and a manifest entry with content
//! hashes. A stage whose inputs and settings are unchanged since the last
//! run in the same output directory is reused instead of recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::{self, hash_json, read_json, read_jsonl, sha256_file, write_csv, write_json, write_jsonl, Meta};
use crate::attribution::{attribute_all, maps_from_records, sparse_records, AttrRecord, AttributionConfig, AttributionMap, IgPath, Method};
use crate::downstream::{aggregate_rq3, eval_under_suppression, finetune_head, load_tasks, suppression_sets, EvalRecord, FinetuneParams, Rq3Summary, Variant};
use crate::error::{Error, Result};
use crate::intervention::{run_rq2, ControlPooling, ErasureConfig, ErasureResult, Intervention, Rq2Report};
use crate::model::{LanguageModel, OverrideScope};
use crate::reference::PaperReference;
use crate::relation::{load_dataset, parse_prompt_id, summarize, RelationDataset};
use crate::report::{emit_report, rq1_summary, ReportInputs, Rq1Summary};
use crate::selection::{select_relation, NeuronSet, SelectionConfig, SelectionMode};
use crate::stats::{rq2_stats, Rq2Stats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Threshold,
    Topk,
}

/// Flat run configuration. Relative paths in a config file are taken
/// relative to the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub relations: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Enforce exactly ten prompts per relation.
    pub strict: bool,

    pub ig_steps: usize,
    pub ig_path: IgPath,
    pub selection_mode: ModeName,
    pub t: f64,
    pub k: usize,
    pub share: f64,
    pub adaptive: bool,
    /// Attribution entries below this fraction of a prompt's maximum are not
    /// written. Must not exceed `t`; ignored in top-k mode, which writes
    /// every entry.
    pub write_fraction: f64,

    pub ctrl_n: usize,
    pub ctrl_pooling: ControlPooling,
    pub scope: OverrideScope,

    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Suppress per relation instead of per category union.
    pub per_relation: bool,
    pub variants: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sel = SelectionConfig::default();
        let er = ErasureConfig::default();
        let ft = FinetuneParams::default();
        RunConfig {
            seed: 0,
            checkpoint: None,
            relations: None,
            prompts: None,
            tasks: None,
            out_dir: None,
            strict: true,
            ig_steps: AttributionConfig::default().steps,
            ig_path: IgPath::default(),
            selection_mode: ModeName::Threshold,
            t: match sel.mode {
                SelectionMode::RelativeThreshold(t) => t,
                SelectionMode::TopK(_) => 0.2,
            },
            k: 20,
            share: sel.share,
            adaptive: sel.adaptive,
            write_fraction: 0.05,
            ctrl_n: er.ctrl_n,
            ctrl_pooling: er.pooling,
            scope: er.scope,
            finetune_steps: ft.steps,
            finetune_lr: ft.learning_rate,
            per_relation: false,
            variants: vec![Variant::Raw, Variant::FineTuned],
        }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Parses `value` as a TOML literal, falling back to a plain string so
/// `--set out_dir=runs/a` works unquoted.
fn toml_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err("config", e.message().to_string()))
    }

    /// Loads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.paths_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| config_err("config", e.to_string()))?;
        artifacts::write_text(path, &text)
    }

    /// Applies `key=value` overrides. Path values are used as given.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut table = toml::Table::try_from(&self).map_err(|e| config_err("config", e.to_string()))?;
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_err(s, "override must look like key=value"))?;
            table.insert(k.trim().to_string(), toml_value(v.trim()));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err("override", e.message().to_string()))
    }

    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 5] {
        [
            &mut self.checkpoint,
            &mut self.relations,
            &mut self.prompts,
            &mut self.tasks,
            &mut self.out_dir,
        ]
    }

    /// Hash of every setting except the paths, so the same experiment run
    /// from another directory hashes the same.
    pub fn settings_hash(&self) -> String {
        let mut c = self.clone();
        for p in c.paths_mut() {
            *p = None;
        }
        hash_json(&c)
    }

    pub fn attribution(&self, method: Method) -> AttributionConfig {
        AttributionConfig {
            steps: self.ig_steps,
            method,
            path: self.ig_path,
        }
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            mode: match self.selection_mode {
                ModeName::Threshold => SelectionMode::RelativeThreshold(self.t),
                ModeName::Topk => SelectionMode::TopK(self.k),
            },
            share: self.share,
            adaptive: self.adaptive,
        }
    }

    pub fn erasure(&self) -> ErasureConfig {
        ErasureConfig {
            ctrl_n: self.ctrl_n,
            seed: self.seed,
            pooling: self.ctrl_pooling,
            scope: self.scope,
        }
    }

    pub fn finetune(&self, variant: Variant) -> FinetuneParams {
        FinetuneParams {
            steps: self.finetune_steps,
            learning_rate: self.finetune_lr,
            freeze_encoder: variant == Variant::Raw,
            ..FinetuneParams::default()
        }
    }

    /// Fraction used when writing attribution files.
    pub fn effective_write_fraction(&self) -> f64 {
        match self.selection_mode {
            ModeName::Threshold => self.write_fraction,
            ModeName::Topk => f64::NEG_INFINITY,
        }
    }

    /// Checks settings and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        let need_file = |field: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                None => Err(config_err(field, "required")),
                Some(p) if !p.exists() => Err(config_err(field, format!("{} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        need_file("checkpoint", &self.checkpoint)?;
        need_file("relations", &self.relations)?;
        need_file("prompts", &self.prompts)?;
        need_file("tasks", &self.tasks)?;
        if self.out_dir.is_none() {
            return Err(config_err("out_dir", "required"));
        }
        self.attribution(Method::IntegratedGradients)
            .validate()
            .map_err(|e| config_err("ig_steps", e.to_string()))?;
        self.selection().validate().map_err(|e| config_err("selection", e.to_string()))?;
        if self.selection_mode == ModeName::Threshold && !(self.write_fraction >= 0.0 && self.write_fraction <= self.t) {
            return Err(config_err("write_fraction", format!("must lie in [0, t = {}]", self.t)));
        }
        if self.ctrl_n == 0 {
            return Err(config_err("ctrl_n", "must be >= 1"));
        }
        if self.variants.is_empty() {
            return Err(config_err("variants", "need at least one of raw, fine_tuned"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    /// Hash of the stage settings and input contents.
    pub key: String,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Stages reused from an earlier run.
    pub cached: Vec<String>,
}

pub const STAGES: [&str; 7] = ["dataset", "trace", "select", "erase", "stats", "eval-tasks", "report"];

pub mod files {
    pub const DATASET_CSV: &str = "dataset_summary.csv";
    pub const DATASET_JSONL: &str = "dataset_summary.jsonl";
    pub const ATTR_IG: &str = "attr_ig.jsonl";
    pub const ATTR_BASELINE: &str = "attr_baseline.jsonl";
    pub const SETS_IG: &str = "sets_ig.jsonl";
    pub const SETS_BASELINE: &str = "sets_baseline.jsonl";
    pub const RQ1: &str = "rq1.json";
    pub const RQ1_CSV: &str = "rq1.csv";
    pub const ERASURE: &str = "erasure.jsonl";
    pub const ERASURE_CSV: &str = "erasure_summary.csv";
    pub const ERASURE_JSONL: &str = "erasure_summary.jsonl";
    pub const STATS: &str = "stats.json";
    pub const RQ3: &str = "rq3.jsonl";
    pub const RQ3_SUMMARY: &str = "rq3_summary.json";
    pub const RQ3_CSV: &str = "rq3_summary.csv";
    pub const REPORT: &str = "report.md";
    pub const PAPER_REF: &str = "paper_reference.json";
    pub const MANIFEST: &str = "manifest.json";
}

/// Writes sparse attribution records for `maps`.
pub fn write_attr(path: &Path, meta: &Meta, maps: &[AttributionMap], fraction: f64) -> Result<()> {
    let recs: Vec<AttrRecord> = maps.iter().flat_map(|m| sparse_records(m, fraction)).collect();
    write_jsonl(path, meta, &recs)
}

/// Per-relation neuron sets from attribution maps, in dataset order.
/// Relations without maps get an empty set.
pub fn select_all(dataset: &RelationDataset, maps: &[AttributionMap], cfg: &SelectionConfig) -> Result<Vec<NeuronSet>> {
    let by_id: BTreeMap<&str, &AttributionMap> = maps.iter().map(|m| (m.prompt_id.as_str(), m)).collect();
    dataset
        .relations()
        .iter()
        .map(|r| {
            let ms: Vec<&AttributionMap> = dataset
                .prompts_of(&r.id)
                .iter()
                .filter_map(|(id, _)| by_id.get(id.as_str()).copied())
                .collect();
            select_relation(&r.id, &ms, cfg)
        })
        .collect()
}

/// Per-relation sets straight from sparse attribution records, for when no
/// dataset is at hand. Prompts are grouped by the relation part of their id
/// and relations come in first-appearance order.
pub fn select_from_records(records: &[AttrRecord], cfg: &SelectionConfig) -> Result<Vec<NeuronSet>> {
    let n_layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let width = records.iter().map(|r| r.index + 1).max().unwrap_or(0);
    let maps = maps_from_records(records, n_layers, width)?;
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&AttributionMap>> = BTreeMap::new();
    for m in &maps {
        let rel = parse_prompt_id(&m.prompt_id).map_or(m.prompt_id.as_str(), |(r, _)| r);
        groups
            .entry(rel)
            .or_insert_with(|| {
                order.push(rel);
                Vec::new()
            })
            .push(m);
    }
    order.iter().map(|r| select_relation(r, &groups[r], cfg)).collect()
}

/// Relation id to inner intersection, for relations where it is defined.
pub fn inner_map(sets: &[NeuronSet]) -> BTreeMap<String, f64> {
    sets.iter()
        .filter_map(|s| s.inner_intersection().map(|i| (s.relation_id.clone(), i)))
        .collect()
}

/// Reads the inputs of a report from whichever artifacts exist in `dir`.
pub fn report_inputs_from_dir(dir: &Path, meta: Option<Meta>) -> Result<ReportInputs> {
    let p = |f: &str| dir.join(f);
    let rq1 = if p(files::RQ1).exists() {
        Some(read_json::<Rq1Summary>(&p(files::RQ1))?.1)
    } else {
        None
    };
    let rq2 = if p(files::ERASURE).exists() {
        Some(Rq2Report::from_results(read_jsonl::<ErasureResult>(&p(files::ERASURE))?.1))
    } else {
        None
    };
    let stats = if p(files::STATS).exists() {
        Some(read_json::<Rq2Stats>(&p(files::STATS))?.1)
    } else {
        None
    };
    let rq3 = if p(files::RQ3).exists() {
        Some(aggregate_rq3(&read_jsonl::<EvalRecord>(&p(files::RQ3))?.1))
    } else {
        None
    };
    Ok(ReportInputs {
        meta,
        rq1,
        rq2,
        stats,
        rq3,
    })
}

pub fn rq3_csv(s: &Rq3Summary) -> String {
    let mut out = String::from("task,variant,acc_delta_mean,acc_delta_worst,f1_delta_mean,ppl_delta_mean\n");
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for r in &s.per_task {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.key,
            serde_json::to_value(r.variant).expect("serializable").as_str().unwrap_or_default(),
            r.accuracy.mean,
            r.accuracy.worst,
            opt(r.macro_f1.map(|d| d.mean)),
            opt(r.perplexity.map(|d| d.mean))
        ));
    }
    out
}

pub fn rq1_csv(s: &Rq1Summary) -> String {
    let mut out = String::from("set,avg_ig_bn,avg_base_bn,ig_inner,ig_inter,base_inner,base_inter,empty_ig_sets\n");
    for r in &s.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.label,
            r.ig.avg_neurons,
            r.baseline.avg_neurons,
            r.ig.inner_intersection,
            r.ig.inter_intersection,
            r.baseline.inner_intersection,
            r.baseline.inter_intersection,
            r.ig.empty_sets
        ));
    }
    out
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    config_hash: String,
    previous: BTreeMap<String, StageEntry>,
    force: bool,
    entries: Vec<StageEntry>,
    cached: Vec<String>,
    hashes: BTreeMap<PathBuf, String>,
}

impl Runner<'_> {
    fn meta(&self, kind: &str) -> Meta {
        Meta::new(kind, &self.config_hash, self.cfg.seed)
    }

    fn hash(&mut self, path: &Path) -> Result<String> {
        if let Some(h) = self.hashes.get(path) {
            return Ok(h.clone());
        }
        let h = if path.is_dir() {
            let mut names: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(path, e)))
                .collect::<Result<_>>()?;
            names.sort();
            let mut parts = Vec::new();
            for n in names.iter().filter(|n| n.is_file()) {
                let name = n.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                parts.push((name, sha256_file(n)?));
            }
            hash_json(&parts)
        } else {
            sha256_file(path)?
        };
        self.hashes.insert(path.to_path_buf(), h.clone());
        Ok(h)
    }

    /// Runs `body` unless an earlier run left identical outputs for the same
    /// key. `inputs` are hashed into the key; `outputs` are relative to the
    /// output directory.
    fn stage<S: Serialize>(
        &mut self,
        name: &str,
        settings: &S,
        inputs: &[&Path],
        outputs: &[&str],
        body: impl FnOnce(&Self) -> Result<()>,
    ) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        let mut input_hashes = Vec::new();
        for p in inputs {
            input_hashes.push(self.hash(p).map_err(wrap)?);
        }
        let key = hash_json(&(name, artifacts::VERSION, settings, &input_hashes));
        let reusable = !self.force
            && self.previous.get(name).is_some_and(|prev| {
                prev.key == key
                    && prev.artifacts.len() == outputs.len()
                    && prev.artifacts.iter().all(|a| {
                        sha256_file(&self.out.join(&a.path)).is_ok_and(|h| h == a.sha256)
                    })
            });
        if reusable {
            log::info!("{name}: unchanged, reusing outputs");
            self.cached.push(name.to_string());
        } else {
            log::info!("{name}: running");
            body(self).map_err(wrap)?;
        }
        let mut artifacts = Vec::new();
        for o in outputs {
            let p = self.out.join(o);
            self.hashes.remove(&p);
            artifacts.push(ArtifactEntry {
                path: o.to_string(),
                sha256: self.hash(&p).map_err(wrap)?,
            });
        }
        self.entries.push(StageEntry {
            stage: name.to_string(),
            key,
            artifacts,
        });
        Ok(())
    }
}

/// Runs all seven stages. `force` recomputes every stage.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let path = |p: &Option<PathBuf>| p.clone().expect("validated");
    let (ckpt, rel, pro, tasks_dir, out) = (
        path(&cfg.checkpoint),
        path(&cfg.relations),
        path(&cfg.prompts),
        path(&cfg.tasks),
        path(&cfg.out_dir),
    );
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest_path = out.join(files::MANIFEST);
    let previous = Manifest::load(&manifest_path)
        .map(|m| m.stages.into_iter().map(|s| (s.stage.clone(), s)).collect())
        .unwrap_or_default();
    let mut r = Runner {
        cfg,
        out: out.clone(),
        config_hash: cfg.settings_hash(),
        previous,
        force,
        entries: Vec::new(),
        cached: Vec::new(),
        hashes: BTreeMap::new(),
    };
    let o = |f: &str| out.join(f);
    let (rel, pro) = (rel.as_path(), pro.as_path());

    let load_ds = || load_dataset(rel, pro, cfg.strict);
    let load_lm = || LanguageModel::load(&ckpt);
    let load_sets = |f: &str| -> Result<Vec<NeuronSet>> { Ok(read_jsonl(&o(f))?.1) };

    r.stage(
        "dataset",
        &cfg.strict,
        &[rel, pro],
        &[files::DATASET_CSV, files::DATASET_JSONL],
        |r| {
            let s = summarize(&load_ds()?);
            write_csv(&o(files::DATASET_CSV), &r.meta("dataset_summary"), &s.to_csv())?;
            let rows: Vec<_> = s.rows.iter().chain(std::iter::once(&s.total)).collect();
            write_jsonl(&o(files::DATASET_JSONL), &r.meta("dataset_summary"), &rows)
        },
    )?;

    let trace_settings = (cfg.ig_steps, cfg.ig_path, cfg.effective_write_fraction().to_string());
    r.stage(
        "trace",
        &trace_settings,
        &[&ckpt, rel, pro],
        &[files::ATTR_IG, files::ATTR_BASELINE],
        |r| {
            let ds = load_ds()?;
            let lm = load_lm()?;
            let clozes = ds
                .identified_prompts()
                .into_iter()
                .map(|(id, p)| lm.cloze(id, p))
                .collect::<Result<Vec<_>>>()?;
            let frac = cfg.effective_write_fraction();
            for (method, file) in [
                (Method::IntegratedGradients, files::ATTR_IG),
                (Method::ActivationBaseline, files::ATTR_BASELINE),
            ] {
                let maps = attribute_all(&lm.encoder, &clozes, &cfg.attribution(method))?;
                write_attr(&o(file), &r.meta("attribution"), &maps, frac)?;
            }
            Ok(())
        },
    )?;

    r.stage(
        "select",
        &cfg.selection(),
        &[&o(files::ATTR_IG), &o(files::ATTR_BASELINE), rel, pro, &ckpt],
        &[files::SETS_IG, files::SETS_BASELINE, files::RQ1, files::RQ1_CSV],
        |r| {
            let ds = load_ds()?;
            let lm = load_lm()?;
            let (n_layers, width) = (lm.encoder.config.n_layers, lm.encoder.config.d_ff);
            let mut both = Vec::new();
            for (attr, file) in [(files::ATTR_IG, files::SETS_IG), (files::ATTR_BASELINE, files::SETS_BASELINE)] {
                let recs: Vec<AttrRecord> = read_jsonl(&o(attr))?.1;
                let maps = maps_from_records(&recs, n_layers, width)?;
                let sets = select_all(&ds, &maps, &cfg.selection())?;
                write_jsonl(&o(file), &r.meta("neuron_sets"), &sets)?;
                both.push(sets);
            }
            let s = rq1_summary(&ds, &both[0], &both[1]);
            write_json(&o(files::RQ1), &r.meta("rq1_summary"), &s)?;
            write_csv(&o(files::RQ1_CSV), &r.meta("rq1_summary"), &rq1_csv(&s))
        },
    )?;

    r.stage(
        "erase",
        &cfg.erasure(),
        &[&ckpt, rel, pro, &o(files::SETS_IG)],
        &[files::ERASURE, files::ERASURE_CSV, files::ERASURE_JSONL],
        |r| {
            let rep = run_rq2(&load_lm()?, &load_ds()?, &load_sets(files::SETS_IG)?, Intervention::Suppress, &cfg.erasure())?;
            let meta = r.meta("erasure");
            write_jsonl(&o(files::ERASURE), &meta, &rep.results)?;
            write_csv(&o(files::ERASURE_CSV), &meta, &rep.summary_csv())?;
            let rows: Vec<_> = rep.by_category.iter().chain(std::iter::once(&rep.overall)).collect();
            write_jsonl(&o(files::ERASURE_JSONL), &meta, &rows)
        },
    )?;

    r.stage(
        "stats",
        &(),
        &[&o(files::ERASURE), &o(files::SETS_IG)],
        &[files::STATS],
        |r| {
            let results: Vec<ErasureResult> = read_jsonl(&o(files::ERASURE))?.1;
            let inner = inner_map(&load_sets(files::SETS_IG)?);
            write_json(&o(files::STATS), &r.meta("rq2_stats"), &rq2_stats(&results, Some(&inner))?)
        },
    )?;

    let eval_settings = (cfg.seed, cfg.finetune(Variant::FineTuned), cfg.per_relation, &cfg.variants);
    r.stage(
        "eval-tasks",
        &eval_settings,
        &[&ckpt, &tasks_dir, rel, pro, &o(files::SETS_IG)],
        &[files::RQ3, files::RQ3_SUMMARY, files::RQ3_CSV],
        |r| {
            let lm = load_lm()?;
            let conds = suppression_sets(&load_ds()?, &load_sets(files::SETS_IG)?, cfg.per_relation);
            let mut records = Vec::new();
            for task in load_tasks(&tasks_dir)? {
                for &v in &cfg.variants {
                    let (model, _) = finetune_head(&lm, &task, &cfg.finetune(v), cfg.seed)?;
                    records.extend(eval_under_suppression(&model, &task, &conds)?);
                }
            }
            let meta = r.meta("rq3");
            write_jsonl(&o(files::RQ3), &meta, &records)?;
            let s = aggregate_rq3(&records);
            write_json(&o(files::RQ3_SUMMARY), &meta, &s)?;
            write_csv(&o(files::RQ3_CSV), &meta, &rq3_csv(&s))
        },
    )?;

    r.stage(
        "report",
        &(),
        &[&o(files::RQ1), &o(files::ERASURE), &o(files::STATS), &o(files::RQ3)],
        &[files::REPORT, files::PAPER_REF],
        |r| {
            let reference = PaperReference::shipped();
            let inputs = report_inputs_from_dir(&out, Some(r.meta("report")))?;
            artifacts::write_text(&o(files::REPORT), &emit_report(&inputs, &reference))?;
            write_json(&o(files::PAPER_REF), &r.meta("paper_reference"), &reference)
        },
    )?;

    let manifest = Manifest {
        tool: artifacts::TOOL.into(),
        version: artifacts::VERSION.into(),
        config_hash: r.config_hash.clone(),
        seed: cfg.seed,
        stages: r.entries,
    };
    artifacts::write_text(&manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(PipelineOutcome {
        manifest,
        manifest_path,
        cached: r.cached,
    })
}
