//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit when any
//! fails. Builds the memorization fixture once and runs the `pipeline`
//! command on it twice.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use bias_tracer::artifacts::{read_json, read_jsonl, sha256_file};
use bias_tracer::attribution::{completeness_sweep, Cloze};
use bias_tracer::downstream::{eval_under_suppression, finetune_head, load_tasks, EvalRecord, SuppressionSet};
use bias_tracer::fixture::{prepare_fixture, Fixture, FixtureSpec};
use bias_tracer::intervention::{masked_perplexity, run_rq2, ErasureResult, Intervention};
use bias_tracer::model::vocab::MASK_ID;
use bias_tracer::model::{
    Encoder, LanguageModel, ModelConfig, NeuronId, NeuronOverride, OverrideScope, OverrideSpec, TokenSequence,
};
use bias_tracer::pipeline::{Manifest, RunConfig};
use bias_tracer::reference::PaperReference;
use bias_tracer::relation::{load_dataset, summarize, BiasCategory, BiasPrompt, BiasedRelation, RelationDataset};
use bias_tracer::report::Rq1Summary;
use bias_tracer::selection::{inner_intersection, inter_intersection, NeuronIdSet, NeuronSet};
use bias_tracer::stats::{cliffs_delta, spearman, wilcoxon_signed_rank, PairedSample, Rq2Stats};
use bias_tracer::Variant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut lines: Vec<(usize, Outcome)> = Vec::new();

    lines.push((1, gradients()));

    let t = Instant::now();
    let fixture = prepare_fixture(&tmp.path().join("fx"), &FixtureSpec::default()).expect("fixture builds");
    let setup = t.elapsed().as_secs_f64();
    let runs = [run_cli_pipeline(&fixture, "out_a"), run_cli_pipeline(&fixture, "out_b")];

    match &runs[0] {
        Ok((out, secs)) => {
            lines.push((3, tracing(out, *secs)));
            let c4 = erasure(&fixture, out);
            let c4_ok = c4.0;
            lines.push((4, c4));
            lines.push((7, downstream(&fixture, out, c4_ok)));
        }
        Err(e) => {
            for c in [3, 4, 7] {
                lines.push((c, (false, format!("pipeline failed: {e}"))));
            }
        }
    }
    lines.push((5, statistics()));
    lines.push((6, intersections()));
    lines.push((8, dataset_layer(tmp.path())));
    lines.push((9, determinism(&runs, setup)));
    lines.push((2, completeness(&fixture)));

    lines.sort_by_key(|(c, _)| *c);
    let mut ok = true;
    for (c, (pass, detail)) in &lines {
        ok &= pass;
        println!("criterion {c} {}: {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run_cli_pipeline(f: &Fixture, out: &str) -> Result<(PathBuf, f64), String> {
    let out_dir = f.dir.join(out);
    let t = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_bias-tracer"))
        .args(["pipeline", "--config"])
        .arg(&f.config)
        .arg("--set")
        .arg(format!("out_dir={}", toml_string(&out_dir)))
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).trim().to_string());
    }
    Ok((out_dir, t.elapsed().as_secs_f64()))
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

// 1. Reverse-mode neuron gradients against central differences.
fn gradients() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 12,
        max_len: 8,
        seed: 11,
    };
    let mut enc = Encoder::new(cfg).unwrap();
    // Sharper than the training init, so the probability is far from flat.
    for v in enc.params.tensors_mut() {
        v.iter_mut().for_each(|x| *x *= 30.0);
    }
    for b in &mut enc.params.blocks {
        for n in [&mut b.ln_attn, &mut b.ln_ffn] {
            n.gamma.iter_mut().for_each(|g| *g = 1.0);
            n.beta.iter_mut().for_each(|g| *g = 0.0);
        }
    }
    let seq = TokenSequence {
        tokens: vec![4, 9, MASK_ID, 6, 3, 10],
        mask_position: Some(2),
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for target in [5, 8] {
        let probe = enc.probe(&seq, target, &NeuronOverride::default(), true).unwrap();
        let grads = probe.grads.clone().unwrap();
        for l in 0..2 {
            for i in 0..16 {
                let n = NeuronId::new(l, i);
                let w = probe.trace.get(n);
                let at = |v: f64| {
                    let mut o = NeuronOverride::new(OverrideScope::MaskPosition);
                    o.insert(n, OverrideSpec::SetTo(v)).unwrap();
                    enc.mask_token_prob(&seq, target, &o).unwrap()
                };
                let eps = 1e-4;
                let fd = (at(w + eps) - at(w - eps)) / (2.0 * eps);
                let g = grads[l][i];
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-8));
                checked += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (
        worst <= 1e-4 && secs < 10.0,
        format!("{checked} neuron gradients, worst relative error {worst:.2e} (limit 1e-4), {secs:.2} s (limit 10 s)"),
    )
}

// 2. Single-neuron IG converges to the suppression gap.
fn completeness(f: &Fixture) -> Outcome {
    let t = Instant::now();
    let lm = LanguageModel::load(&f.checkpoint).unwrap();
    let ds = load_dataset(&f.relations, &f.prompts, true).unwrap();
    // First prompt of each of the first 20 relations.
    let clozes: Vec<Cloze> = ds
        .relations()
        .iter()
        .take(20)
        .map(|r| {
            let (id, p) = ds.prompts_of(&r.id).into_iter().next().unwrap();
            lm.cloze(id, p).unwrap()
        })
        .collect();
    let cfg = lm.encoder.config;
    let (mut worst, mut over, mut non_monotone, mut n) = (0.0f64, 0, 0, 0);
    for c in &clozes {
        for l in 0..cfg.n_layers {
            for i in 0..cfg.d_ff {
                let r = completeness_sweep(&lm.encoder, c, NeuronId::new(l, i), &[300, 200, 5]).unwrap();
                worst = worst.max(r[0].abs_error);
                over += usize::from(r[0].abs_error > 1e-3);
                non_monotone += usize::from(r[1].abs_error > r[2].abs_error + 1e-12);
                n += 1;
            }
        }
    }
    (
        over == 0 && non_monotone == 0,
        format!(
            "{n} (prompt, neuron) pairs over {} prompts: worst m=300 error {worst:.2e} (limit 1e-3), \
             {over} over the limit, {non_monotone} with m=200 error above m=5 error; {:.0} s",
            clozes.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

// 3. IG sets are smaller and overlap less than baseline sets.
fn tracing(out: &Path, pipeline_secs: f64) -> Outcome {
    let (_, s): (_, Rq1Summary) = read_json(&out.join("rq1.json")).unwrap();
    let all = s.rows.iter().find(|r| r.label == "all").expect("overall row");
    let (ig, b) = (&all.ig, &all.baseline);
    let ok = ig.avg_neurons < b.avg_neurons
        && ig.inner_intersection < b.inner_intersection
        && ig.inter_intersection < b.inter_intersection
        && pipeline_secs < 600.0;
    (
        ok,
        format!(
            "{} relations; avg set size IG {:.2} vs baseline {:.2}; inner IG {:.2} vs {:.2}; inter IG {:.2} vs {:.2}; \
             whole pipeline including tracing {pipeline_secs:.0} s (limit 600 s)",
            ig.relations,
            ig.avg_neurons,
            b.avg_neurons,
            ig.inner_intersection,
            b.inner_intersection,
            ig.inter_intersection,
            b.inter_intersection
        ),
    )
}

// 4. Erasure is selective, significant, and a no-op for empty sets.
fn erasure(f: &Fixture, out: &Path) -> Outcome {
    let (_, results): (_, Vec<ErasureResult>) = read_jsonl(&out.join("erasure.jsonl")).unwrap();
    let (_, st): (_, Rq2Stats) = read_json(&out.join("stats.json")).unwrap();
    let good = results
        .iter()
        .filter(|r| r.ratio_target >= 1.5 && r.ratio_ctrl <= 1.2)
        .count();
    let share = good as f64 / results.len() as f64;
    let w = &st.wilcoxon;
    let delta = w.effect_size.unwrap_or(f64::NAN);
    // After-suppression perplexities are the larger group.
    let direction = w.statistic > w.statistic_alt.unwrap_or(f64::INFINITY);

    let lm = LanguageModel::load(&f.checkpoint).unwrap();
    let ds = load_dataset(&f.relations, &f.prompts, true).unwrap();
    let cfg = RunConfig::load(&f.config).unwrap();
    let empty: Vec<NeuronSet> = ds
        .relations()
        .iter()
        .map(|r| NeuronSet {
            relation_id: r.id.clone(),
            neurons: NeuronIdSet::new(),
            per_prompt_sets: Vec::new(),
            effective_share: 1.0,
            degenerate_prompts: 0,
        })
        .collect();
    let rep = run_rq2(&lm, &ds, &empty, Intervention::Suppress, &cfg.erasure()).unwrap();
    let unit = rep.results.iter().all(|r| r.ratio_target == 1.0 && r.ratio_ctrl == 1.0);
    // The same through an actual forward pass with an empty override.
    let none = NeuronOverride::default();
    let empty_o = NeuronOverride::uniform(&NeuronIdSet::new(), OverrideSpec::Zero, OverrideScope::MaskPosition).unwrap();
    let forward_unit = ds.relations().iter().all(|r| {
        let cl: Vec<Cloze> = ds
            .prompts_of(&r.id)
            .into_iter()
            .map(|(id, p)| lm.cloze(id, p).unwrap())
            .collect();
        let a = masked_perplexity(&lm.encoder, &cl, &none).unwrap();
        let b = masked_perplexity(&lm.encoder, &cl, &empty_o).unwrap();
        b / a == 1.0
    });

    let ok = share >= 0.8 && w.p_value < 0.01 && delta > 0.8 && direction && unit && forward_unit;
    (
        ok,
        format!(
            "{good}/{} relations with ratio_target >= 1.5 and ratio_ctrl <= 1.2 ({:.0}%, need 80%); \
             Wilcoxon W+ {} W- {} n {} p {:.2e} (need < 0.01); Cliff's delta after vs before {delta:.3} (need > 0.8); \
             empty sets give ratio 1.0: {}",
            results.len(),
            share * 100.0,
            w.statistic,
            w.statistic_alt.unwrap_or(f64::NAN),
            w.n,
            w.p_value,
            unit && forward_unit
        ),
    )
}

// 7. Suppressing category unions barely moves task accuracy.
fn downstream(f: &Fixture, out: &Path, erasure_ok: bool) -> Outcome {
    let (_, s): (_, bias_tracer::Rq3Summary) = read_json(&out.join("rq3_summary.json")).unwrap();
    let lm = LanguageModel::load(&f.checkpoint).unwrap();
    let cfg = RunConfig::load(&f.config).unwrap();
    let empty = [SuppressionSet {
        label: "empty".into(),
        neurons: NeuronIdSet::new(),
    }];
    let mut zero = true;
    let mut checked = 0;
    for task in load_tasks(&f.tasks).unwrap() {
        for v in [Variant::Raw, Variant::FineTuned] {
            let (model, _) = finetune_head(&lm, &task, &cfg.finetune(v), cfg.seed).unwrap();
            let recs: Vec<EvalRecord> = eval_under_suppression(&model, &task, &empty).unwrap();
            let d = recs[1].deltas.unwrap();
            zero &= d.accuracy.absolute == 0.0
                && d.macro_f1.is_none_or(|x| x.absolute == 0.0)
                && d.perplexity.is_none_or(|x| x.absolute == 0.0);
            checked += 1;
        }
    }
    let m = s.mean_accuracy_delta;
    (
        m >= -0.05 && erasure_ok && zero,
        format!(
            "mean accuracy delta {m:+.4} over {} (task, variant, category) conditions (need >= -0.05); \
             selectivity of criterion 4 on the same checkpoint: {}; empty set gives zero deltas on {checked} task models: {zero}",
            s.per_condition.iter().map(|_| 1).sum::<usize>(),
            if erasure_ok { "holds" } else { "does not hold" }
        ),
    )
}

// 5. Statistics against enumeration and pair-count oracles.
fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fails = Vec::new();

    // Exact Wilcoxon p against all 2^n sign assignments.
    let mut fixtures = 0;
    while fixtures < 200 {
        let n = rng.random_range(1..=12);
        // One decimal, so ties and zero differences occur.
        let before: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..5.0f64) * 10.0).round() / 10.0).collect();
        let after: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..5.0f64) * 10.0).round() / 10.0).collect();
        let d: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
        if d.is_empty() {
            continue;
        }
        fixtures += 1;
        let got = wilcoxon_signed_rank(&PairedSample::new(before, after).unwrap()).unwrap();
        let (w, p) = enumerate_wilcoxon(&d);
        if got.statistic != w || got.p_value != p {
            fails.push(format!("wilcoxon {d:?}: got W {} p {} want W {w} p {p}", got.statistic, got.p_value));
        }
    }

    // Cliff's delta against the pair count.
    for _ in 0..200 {
        let x: Vec<f64> = (0..rng.random_range(1..15)).map(|_| rng.random_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..rng.random_range(1..15)).map(|_| rng.random_range(0..6) as f64).collect();
        let (mut gt, mut lt) = (0i64, 0i64);
        for a in &x {
            for b in &y {
                gt += i64::from(a > b);
                lt += i64::from(a < b);
            }
        }
        let want = (gt - lt) as f64 / (x.len() * y.len()) as f64;
        let got = cliffs_delta(&x, &y).unwrap();
        if got != want {
            fails.push(format!("cliffs {x:?} {y:?}: {got} vs {want}"));
        }
    }

    // Spearman: closed form without ties, rank Pearson with ties.
    for k in 0..200 {
        let n = rng.random_range(3..20);
        let (x, y): (Vec<f64>, Vec<f64>) = if k % 2 == 0 {
            let mut x: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
            let mut y = x.clone();
            shuffle(&mut x, &mut rng);
            shuffle(&mut y, &mut rng);
            (x, y)
        } else {
            (
                (0..n).map(|_| rng.random_range(0..5) as f64).collect(),
                (0..n).map(|_| rng.random_range(0..5) as f64).collect(),
            )
        };
        let Ok(got) = spearman(&x, &y) else { continue };
        let (rx, ry) = (naive_ranks(&x), naive_ranks(&y));
        if k % 2 == 0 {
            let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
            let nf = n as f64;
            let want = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            if got.statistic != want {
                fails.push(format!("spearman closed form {x:?} {y:?}: {} vs {want}", got.statistic));
            }
        } else {
            let want = textbook_pearson(&rx, &ry);
            if (got.statistic - want).abs() > 1e-12 {
                fails.push(format!("spearman ties {x:?} {y:?}: {} vs {want}", got.statistic));
            }
        }
    }

    // Worked examples.
    let w5 = wilcoxon_signed_rank(&PairedSample::new(vec![0.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap();
    let worked = [
        (w5.statistic == 15.0 && w5.p_value == 0.0625, "W=15, p=0.0625"),
        (cliffs_delta(&[1.0, 3.0], &[2.0, 4.0]).unwrap() == -0.5, "delta=-0.5"),
        (spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap().statistic == 0.6, "rho=0.6"),
    ];
    for (ok, name) in worked {
        if !ok {
            fails.push(format!("worked example {name}"));
        }
    }
    (
        fails.is_empty(),
        if fails.is_empty() {
            "200 Wilcoxon fixtures (n <= 12) equal enumeration exactly; 200 Cliff's delta pair counts exact; \
             200 Spearman checks; worked examples W=15/p=0.0625, delta=-0.5, rho=0.6 exact"
                .to_string()
        } else {
            format!("{} mismatches, first: {}", fails.len(), fails[0])
        },
    )
}

fn shuffle(v: &mut [f64], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Average ranks by counting: rank = 1 + #smaller + (#equal - 1) / 2.
fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|u| *u < v).count() as f64;
            let eq = x.iter().filter(|u| *u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Positive-rank sum and two-sided p over every sign assignment.
fn enumerate_wilcoxon(d: &[f64]) -> (f64, f64) {
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = naive_ranks(&abs);
    let n = d.len();
    let w: f64 = ranks.iter().zip(d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let mean = ranks.iter().sum::<f64>() / 2.0;
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (s - mean).abs() >= (w - mean).abs() {
            hits += 1;
        }
    }
    (w, hits as f64 / (1u64 << n) as f64)
}

// 6. Intersection metrics against pairwise enumeration.
fn intersections() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for _ in 0..100 {
        let k = rng.random_range(2..9);
        let family: Vec<NeuronIdSet> = (0..k)
            .map(|_| {
                (0..rng.random_range(0..12))
                    .map(|_| NeuronId::new(rng.random_range(0..3), rng.random_range(0..8)))
                    .collect()
            })
            .collect();
        // Brute force over a membership table.
        let member = |s: &NeuronIdSet, l: usize, i: usize| s.contains(&NeuronId::new(l, i));
        let mut total = 0usize;
        let mut pairs = 0usize;
        for a in 0..k {
            for b in a + 1..k {
                for l in 0..3 {
                    for i in 0..8 {
                        total += usize::from(member(&family[a], l, i) && member(&family[b], l, i));
                    }
                }
                pairs += 1;
            }
        }
        let want = total as f64 / pairs as f64;
        let named: BTreeMap<String, NeuronIdSet> =
            family.iter().enumerate().map(|(j, s)| (format!("r{j}"), s.clone())).collect();
        if inner_intersection(&family).unwrap() != want || inter_intersection(&named).unwrap() != want {
            bad += 1;
        }
    }
    (bad == 0, format!("{} of 100 random set families differ from brute-force enumeration", bad))
}

// 8. Strict validation of a dataset with the published per-category shape.
fn dataset_layer(tmp: &Path) -> Outcome {
    let reference = PaperReference::shipped();
    let rows: Vec<_> = reference.dataset.iter().filter(|r| r.category != "Total").collect();
    let mut relations = Vec::new();
    let mut prompts = Vec::new();
    for row in &rows {
        let cat: BiasCategory = row.category.parse().unwrap();
        for i in 0..row.relations {
            let id = format!("{}-{i:03}", row.category);
            relations.push(BiasedRelation {
                id: id.clone(),
                category: cat,
                group: format!("group {}", i % row.groups),
                association: format!("trait {i}"),
                stereotype: format!("stereotype {}", i % row.stereotypes),
                source_sentence: None,
            });
            for k in 0..row.prompts / row.relations {
                prompts.push(BiasPrompt {
                    relation_id: id.clone(),
                    text: format!("variant {k}: [MASK] people are trait {i}"),
                    answer: format!("group {}", i % row.groups),
                });
            }
        }
    }
    let dir = tmp.join("table1");
    let (rp, pp) = (dir.join("relations.jsonl"), dir.join("prompts.jsonl"));
    fs::create_dir_all(&dir).unwrap();
    RelationDataset::new(relations, prompts, Default::default())
        .and_then(|d| d.save(&rp, &pp))
        .unwrap();
    let summary = match load_dataset(&rp, &pp, true) {
        Ok(ds) => summarize(&ds),
        Err(e) => return (false, format!("validator rejected the fixture: {e}")),
    };
    let matches = rows.iter().all(|r| {
        summary.row(r.category.parse().unwrap()).is_some_and(|s| {
            (s.relations, s.prompts, s.groups, s.stereotypes) == (r.relations, r.prompts, r.groups, r.stereotypes)
        })
    });
    let totals = (summary.total.relations, summary.total.prompts);
    let mut ok = matches && totals == (1018, 10180);
    let mut detail = format!(
        "strict validator accepts the published-shape fixture; per-category counts match on {} categories: {matches}; \
         totals {} / {}",
        rows.len(),
        totals.0,
        totals.1
    );
    match std::env::var_os("BIAS_TRACER_DATASET") {
        Some(d) => {
            let d = PathBuf::from(d);
            match load_dataset(&d.join("relations.jsonl"), &d.join("prompts.jsonl"), true) {
                Ok(ds) => {
                    let s = summarize(&ds);
                    ok &= (s.total.relations, s.total.prompts) == (1018, 10180);
                    detail += &format!(
                        "; released dataset totals {} / {}",
                        s.total.relations, s.total.prompts
                    );
                }
                Err(e) => {
                    ok = false;
                    detail += &format!("; released dataset failed to load: {e}");
                }
            }
        }
        None => detail += "; released dataset not present (set BIAS_TRACER_DATASET to check it)",
    }
    (ok, detail)
}

// 9. Two pipeline runs with the same seed give identical artifacts.
fn determinism(runs: &[Result<(PathBuf, f64), String>; 2], setup_secs: f64) -> Outcome {
    let (a, b) = match runs {
        [Ok(a), Ok(b)] => (a, b),
        _ => return (false, "a pipeline run failed".into()),
    };
    let ma = Manifest::load(&a.0.join("manifest.json")).unwrap();
    let mb = Manifest::load(&b.0.join("manifest.json")).unwrap();
    let mut files = BTreeSet::new();
    let mut differ = Vec::new();
    for s in &ma.stages {
        for art in &s.artifacts {
            files.insert(art.path.clone());
            let (x, y) = (a.0.join(&art.path), b.0.join(&art.path));
            if sha256_file(&x).ok() != sha256_file(&y).ok() {
                differ.push(art.path.clone());
            }
        }
    }
    let total = setup_secs + a.1;
    let ok = ma == mb && differ.is_empty() && ma.stages.len() == 7 && total < 1200.0;
    (
        ok,
        format!(
            "{} stages, {} artifacts; manifests equal: {}; differing files: {:?}; \
             fixture setup {setup_secs:.0} s + pipeline {:.0} s = {total:.0} s (limit 1200 s)",
            ma.stages.len(),
            files.len(),
            ma == mb,
            differ,
            a.1
        ),
    )
}
