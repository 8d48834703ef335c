use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bias_tracer::artifacts::{self, hash_json, read_json, read_jsonl, write_json, write_jsonl, Meta};
use bias_tracer::attribution::{attribute_all, AttrRecord, AttributionConfig, IgPath, Method};
use bias_tracer::downstream::{
    aggregate_rq3, eval_under_suppression, finetune_head, load_tasks, suppression_sets, synthetic_tasks, EvalRecord,
    FinetuneParams, TaskSuiteSpec, Variant,
};
use bias_tracer::fixture::{prepare_fixture, FixtureSpec};
use bias_tracer::intervention::{run_rq2, ControlPooling, ErasureConfig, ErasureResult, Intervention, Rq2Report};
use bias_tracer::model::synth::{generate_synthetic_corpus, SynthSpec};
use bias_tracer::model::train::{cloze_recall, train_mlm, Hyperparams, TrainingCorpus};
use bias_tracer::model::{LanguageModel, ModelConfig, OverrideScope};
use bias_tracer::pipeline::{inner_map, rq3_csv, run_pipeline, select_from_records, write_attr, RunConfig};
use bias_tracer::reference::PaperReference;
use bias_tracer::relation::{load_dataset, summarize, RelationDataset};
use bias_tracer::report::{emit_report, ReportInputs, Rq1Summary};
use bias_tracer::selection::{NeuronSet, SelectionConfig, SelectionMode};
use bias_tracer::stats::{rq2_stats, Rq2Stats};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::*;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Dataset(DatasetCmd::Validate(a)) => {
            let ds = load(&a)?;
            println!(
                "ok: {} relations, {} prompts",
                ds.relations().len(),
                ds.prompts().len()
            );
            Ok(())
        }
        Command::Dataset(DatasetCmd::Summary { data, format }) => {
            let s = summarize(&load(&data)?);
            match format {
                Format::Csv => print!("{}", s.to_csv()),
                Format::Jsonl => {
                    for r in s.rows.iter().chain(std::iter::once(&s.total)) {
                        println!("{}", serde_json::to_string(r)?);
                    }
                }
            }
            Ok(())
        }
        Command::Corpus(c) => corpus(c),
        Command::TrainToy(a) => train_toy(&a),
        Command::Trace(a) => trace(&a),
        Command::Select(a) => select(&a),
        Command::Erase(a) => {
            let iv = match a.amplify {
                Some(factor) => Intervention::Amplify { factor },
                None => Intervention::Suppress,
            };
            intervene(&a.common, iv)
        }
        Command::Amplify(a) => intervene(&a.common, Intervention::Amplify { factor: a.factor }),
        Command::Stats(a) => stats(&a),
        Command::EvalTasks(a) => eval_tasks(&a),
        Command::Report(a) => report(&a),
        Command::Pipeline(a) => pipeline(&a),
    }
}

fn load(a: &DatasetArgs) -> Result<RelationDataset> {
    Ok(load_dataset(&a.relations, &a.prompts, !a.lenient)?)
}

fn load_lm(path: &Path) -> Result<LanguageModel> {
    LanguageModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Meta for single-command outputs: the config hash covers the command's
/// settings, not its paths.
fn meta<S: Serialize>(kind: &str, settings: &S, seed: u64) -> Meta {
    Meta::new(kind, &hash_json(settings), seed)
}

fn corpus(c: CorpusCmd) -> Result<()> {
    match c {
        CorpusCmd::Synth {
            relations,
            paraphrases,
            seed,
            out_dir,
        } => {
            let synth = generate_synthetic_corpus(&SynthSpec {
                relations,
                paraphrases,
                seed,
                ..SynthSpec::default()
            })?;
            fs::create_dir_all(&out_dir).with_context(|| out_dir.display().to_string())?;
            synth
                .dataset
                .save(&out_dir.join("relations.jsonl"), &out_dir.join("prompts.jsonl"))?;
            let corpus = out_dir.join("corpus.txt");
            fs::write(&corpus, synth.corpus.to_text()).with_context(|| corpus.display().to_string())?;
            println!(
                "wrote {} relations, {} prompts to {}",
                synth.dataset.relations().len(),
                synth.dataset.prompts().len(),
                out_dir.display()
            );
        }
        CorpusCmd::Tasks { ckpt, seed, out_dir } => {
            let lm = load_lm(&ckpt)?;
            let tasks = synthetic_tasks(
                &lm,
                &TaskSuiteSpec {
                    seed,
                    ..TaskSuiteSpec::default()
                },
            )?;
            fs::create_dir_all(&out_dir).with_context(|| out_dir.display().to_string())?;
            for t in &tasks {
                t.save(&out_dir.join(format!("{}.json", t.id)))?;
            }
            println!("wrote {} tasks to {}", tasks.len(), out_dir.display());
        }
        CorpusCmd::Fixture { seed, out_dir } => {
            let mut spec = FixtureSpec::default();
            spec.synth.seed = seed;
            spec.train.seed = seed;
            spec.tasks.seed = seed;
            let f = prepare_fixture(&out_dir, &spec)?;
            println!("recall {:.3}; config {}", f.recall, f.config.display());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelShape {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    max_len: usize,
    seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let t = ModelConfig::toy(0);
        ModelShape {
            n_layers: t.n_layers,
            d_model: t.d_model,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            max_len: t.max_len,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainToyConfig {
    model: ModelShape,
    train: Hyperparams,
}

fn train_toy(a: &TrainToyArgs) -> Result<()> {
    let cfg: TrainToyConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainToyConfig::default(),
    };
    let text = fs::read_to_string(&a.corpus).with_context(|| a.corpus.display().to_string())?;
    let corpus = TrainingCorpus::parse(&text);
    let vocab = corpus.vocab()?;
    let m = cfg.model;
    let config = ModelConfig {
        n_layers: m.n_layers,
        d_model: m.d_model,
        n_heads: m.n_heads,
        d_ff: m.d_ff,
        vocab_size: vocab.len(),
        max_len: m.max_len,
        seed: m.seed,
    };
    let (encoder, rep) = train_mlm(&corpus, &vocab, config, &cfg.train)?;
    let recall = cloze_recall(&encoder, &corpus, &vocab)?;
    LanguageModel { encoder, vocab }.save(&a.out)?;
    println!(
        "trained {} steps, final loss {:.4}, cloze recall {:.3}; wrote {}",
        rep.steps,
        rep.final_loss,
        recall,
        a.out.display()
    );
    Ok(())
}

fn trace(a: &TraceArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let lm = load_lm(&a.ckpt)?;
    let cfg = AttributionConfig {
        steps: a.steps,
        method: match a.method {
            MethodArg::Ig => Method::IntegratedGradients,
            MethodArg::Baseline => Method::ActivationBaseline,
        },
        path: match a.ig_path {
            IgPathArg::PerLayer => IgPath::PerLayer,
            IgPathArg::Joint => IgPath::Joint,
        },
    };
    cfg.validate()?;
    let fraction = if a.dense { f64::NEG_INFINITY } else { a.write_fraction };
    if !(a.dense || (0.0..=1.0).contains(&fraction)) {
        bail!("--write-fraction must be in [0, 1]");
    }
    let clozes = ds
        .identified_prompts()
        .into_iter()
        .map(|(id, p)| lm.cloze(id, p))
        .collect::<bias_tracer::Result<Vec<_>>>()?;
    let maps = attribute_all(&lm.encoder, &clozes, &cfg)?;
    let m = meta("attribution", &(cfg, fraction.to_string()), 0);
    write_attr(&a.out, &m, &maps, fraction)?;
    println!("traced {} prompts; wrote {}", maps.len(), a.out.display());
    Ok(())
}

fn select(a: &SelectArgs) -> Result<()> {
    let cfg = SelectionConfig {
        mode: match a.mode {
            ModeArg::Threshold => SelectionMode::RelativeThreshold(a.t),
            ModeArg::Topk => SelectionMode::TopK(a.k),
        },
        share: a.share,
        adaptive: a.adaptive.unwrap_or(SelectionConfig::default().adaptive),
    };
    cfg.validate()?;
    let (src, records): (_, Vec<AttrRecord>) = read_jsonl(&a.attr)?;
    let sets = select_from_records(&records, &cfg)?;
    let seed = src.map_or(0, |m| m.seed);
    write_jsonl(&a.out, &meta("neuron_sets", &cfg, seed), &sets)?;
    let empty = sets.iter().filter(|s| s.is_empty()).count();
    println!("{} relations ({empty} empty); wrote {}", sets.len(), a.out.display());
    Ok(())
}

fn intervene(a: &InterventionArgs, iv: Intervention) -> Result<()> {
    if let Intervention::Amplify { factor } = iv {
        if !(factor >= 1.0) {
            bail!("amplification factor must be >= 1, got {factor}");
        }
    }
    let cfg = ErasureConfig {
        ctrl_n: a.ctrl_n,
        seed: a.seed,
        pooling: match a.pooling {
            PoolingArg::Matched => ControlPooling::Matched,
            PoolingArg::Pooled => ControlPooling::Pooled,
        },
        scope: match a.scope {
            ScopeArg::Mask => OverrideScope::MaskPosition,
            ScopeArg::All => OverrideScope::AllPositions,
        },
    };
    let ds = load(&a.data)?;
    let lm = load_lm(&a.ckpt)?;
    let sets: Vec<NeuronSet> = read_jsonl(&a.sets)?.1;
    let rep = run_rq2(&lm, &ds, &sets, iv, &cfg)?;
    write_jsonl(&a.out, &meta("erasure", &(cfg, iv), a.seed), &rep.results)?;
    print!("{}", rep.summary_csv());
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let (src, results): (_, Vec<ErasureResult>) = read_jsonl(&a.erasure)?;
    let inner = match &a.sets {
        Some(p) => Some(inner_map(&read_jsonl::<NeuronSet>(p)?.1)),
        None => None,
    };
    let s = rq2_stats(&results, inner.as_ref())?;
    match &a.out {
        Some(p) => {
            let seed = src.map_or(0, |m| m.seed);
            write_json(p, &meta("rq2_stats", &(), seed), &s)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&s)?),
    }
    Ok(())
}

fn eval_tasks(a: &EvalTasksArgs) -> Result<()> {
    if a.variants.is_empty() {
        bail!("--variants needs at least one of raw, fine-tuned");
    }
    let lm = load_lm(&a.ckpt)?;
    let ds = load(&a.data)?;
    let sets: Vec<NeuronSet> = read_jsonl(&a.sets)?.1;
    let conds = suppression_sets(&ds, &sets, a.per_relation);
    let variants: Vec<Variant> = a
        .variants
        .iter()
        .map(|v| match v {
            VariantArg::Raw => Variant::Raw,
            VariantArg::FineTuned => Variant::FineTuned,
        })
        .collect();
    let fp = |v: Variant| FinetuneParams {
        steps: a.finetune_steps,
        learning_rate: a.finetune_lr,
        freeze_encoder: v == Variant::Raw,
        ..FinetuneParams::default()
    };
    let mut records = Vec::new();
    for task in load_tasks(&a.tasks)? {
        for &v in &variants {
            let (model, _) = finetune_head(&lm, &task, &fp(v), a.seed)?;
            records.extend(eval_under_suppression(&model, &task, &conds)?);
        }
    }
    let settings = json!({
        "finetune": fp(Variant::FineTuned),
        "per_relation": a.per_relation,
        "variants": variants,
    });
    let m = meta("rq3", &settings, a.seed);
    write_jsonl(&a.out, &m, &records)?;
    print!("{}", rq3_csv(&aggregate_rq3(&records)));
    Ok(())
}

/// Reads a wrapped `{meta, data}` file, or a bare value.
fn read_any_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(Option<Meta>, T)> {
    if let Ok((m, d)) = read_json::<T>(path) {
        return Ok((Some(m), d));
    }
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let d = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((None, d))
}

fn report(a: &ReportArgs) -> Result<()> {
    if [&a.rq1, &a.rq2, &a.stats, &a.rq3].iter().all(|p| p.is_none()) {
        bail!("report needs at least one of --rq1, --rq2, --stats, --rq3");
    }
    let mut metas: Vec<Meta> = Vec::new();
    let rq1 = match &a.rq1 {
        Some(p) => {
            let (m, d) = read_any_json::<Rq1Summary>(p)?;
            metas.extend(m);
            Some(d)
        }
        None => None,
    };
    let rq2 = match &a.rq2 {
        Some(p) => {
            let (m, d) = read_jsonl::<ErasureResult>(p)?;
            metas.extend(m);
            Some(Rq2Report::from_results(d))
        }
        None => None,
    };
    let stats = match &a.stats {
        Some(p) => {
            let (m, d) = read_any_json::<Rq2Stats>(p)?;
            metas.extend(m);
            Some(d)
        }
        None => None,
    };
    let rq3 = match &a.rq3 {
        Some(p) => {
            let (m, d) = read_jsonl::<EvalRecord>(p)?;
            metas.extend(m);
            Some(aggregate_rq3(&d))
        }
        None => None,
    };
    let reference = match &a.paper_ref {
        Some(p) => read_any_json::<PaperReference>(p)?.1,
        None => PaperReference::shipped(),
    };
    let meta = metas
        .first()
        .map(|m| Meta::new("report", &m.config_hash, m.seed));
    let inputs = ReportInputs {
        meta,
        rq1,
        rq2,
        stats,
        rq3,
    };
    artifacts::write_text(&a.out, &emit_report(&inputs, &reference))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn pipeline(a: &PipelineArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?.with_overrides(&a.sets)?;
    let outcome = run_pipeline(&cfg, a.force)?;
    for s in &outcome.manifest.stages {
        let tag = if outcome.cached.contains(&s.stage) { " (cached)" } else { "" };
        println!("{}{tag}: {} artifacts", s.stage, s.artifacts.len());
    }
    println!("manifest {}", outcome.manifest_path.display());
    Ok(())
}

