//! The desk-scale fixture: a synthetic relation corpus, a toy encoder that
//! memorizes it, synthetic downstream tasks and a run config wiring them up.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::downstream::{synthetic_tasks, TaskSuiteSpec};
use crate::error::{Error, Result};
use crate::model::synth::{generate_synthetic_corpus, SynthSpec};
use crate::model::train::{cloze_recall, train_mlm, Hyperparams};
use crate::model::{LanguageModel, ModelConfig};
use crate::pipeline::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub synth: SynthSpec,
    pub train: Hyperparams,
    pub tasks: TaskSuiteSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub relations: PathBuf,
    pub prompts: PathBuf,
    pub corpus: PathBuf,
    pub tasks: PathBuf,
    /// Share of training clozes the trained model fills correctly.
    pub recall: f64,
}

/// Writes the fixture into `dir`. The config (`run.toml`) uses paths
/// relative to `dir` and sends outputs to `dir/out`.
pub fn prepare_fixture(dir: &Path, spec: &FixtureSpec) -> Result<Fixture> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let synth = generate_synthetic_corpus(&spec.synth)?;
    let f = Fixture {
        dir: dir.to_path_buf(),
        config: dir.join("run.toml"),
        checkpoint: dir.join("toy.ckpt"),
        relations: dir.join("relations.jsonl"),
        prompts: dir.join("prompts.jsonl"),
        corpus: dir.join("corpus.txt"),
        tasks: dir.join("tasks"),
        recall: 0.0,
    };
    synth.dataset.save(&f.relations, &f.prompts)?;
    fs::write(&f.corpus, synth.corpus.to_text()).map_err(|e| Error::io(&f.corpus, e))?;

    let vocab = synth.corpus.vocab()?;
    let (encoder, _) = train_mlm(&synth.corpus, &vocab, ModelConfig::toy(vocab.len()), &spec.train)?;
    let recall = cloze_recall(&encoder, &synth.corpus, &vocab)?;
    let lm = LanguageModel { encoder, vocab };
    lm.save(&f.checkpoint)?;

    fs::create_dir_all(&f.tasks).map_err(|e| Error::io(&f.tasks, e))?;
    for t in synthetic_tasks(&lm, &spec.tasks)? {
        t.save(&f.tasks.join(format!("{}.json", t.id)))?;
    }

    let cfg = RunConfig {
        seed: spec.synth.seed,
        checkpoint: Some("toy.ckpt".into()),
        relations: Some("relations.jsonl".into()),
        prompts: Some("prompts.jsonl".into()),
        tasks: Some("tasks".into()),
        out_dir: Some("out".into()),
        ..RunConfig::default()
    };
    cfg.save(&f.config)?;
    Ok(Fixture { recall, ..f })
}
