//! Markdown report: measured tables in the published column layouts, each
//! followed by the published reference numbers. Sections render only for
//! the artifacts that are present.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifacts::Meta;
use crate::downstream::{DeltaRow, Rq3Summary, Variant};
use crate::intervention::{ErasureAggregate, Rq2Report};
use crate::reference::PaperReference;
use crate::relation::{BiasCategory, RelationDataset};
use crate::selection::{summarize_sets, NeuronSet, SelectionSummary};
use crate::stats::{Rq2Stats, TestResult};

const NOT_REPRODUCIBLE: &str = "not reproducible at desk scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rq1Row {
    /// `all` or a category code.
    pub label: String,
    pub ig: SelectionSummary,
    pub baseline: SelectionSummary,
}

/// Identification summary for both methods, overall then per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rq1Summary {
    pub rows: Vec<Rq1Row>,
}

pub fn rq1_summary(dataset: &RelationDataset, ig: &[NeuronSet], baseline: &[NeuronSet]) -> Rq1Summary {
    let mut rows = vec![Rq1Row {
        label: "all".into(),
        ig: summarize_sets(ig),
        baseline: summarize_sets(baseline),
    }];
    for c in BiasCategory::ALL {
        let ids: Vec<&str> = dataset
            .relations()
            .iter()
            .filter(|r| r.category == c)
            .map(|r| r.id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        let pick = |sets: &[NeuronSet]| -> Vec<NeuronSet> {
            sets.iter().filter(|s| ids.contains(&s.relation_id.as_str())).cloned().collect()
        };
        rows.push(Rq1Row {
            label: c.code().into(),
            ig: summarize_sets(&pick(ig)),
            baseline: summarize_sets(&pick(baseline)),
        });
    }
    Rq1Summary { rows }
}

/// Whatever stage outputs exist.
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub meta: Option<Meta>,
    pub rq1: Option<Rq1Summary>,
    pub rq2: Option<Rq2Report>,
    pub stats: Option<Rq2Stats>,
    pub rq3: Option<Rq3Summary>,
}

/// Signed number with a typographic minus, as the published tables print
/// it: at least two decimals, more when the value carries them.
fn signed(x: f64) -> String {
    let short = format!("{}", x.abs());
    let decimals = short.split_once('.').map_or(0, |(_, d)| d.len());
    let s = if decimals < 2 && x.abs() < 10.0 {
        format!("{:.2}", x.abs())
    } else {
        short
    };
    if x < 0.0 {
        format!("\u{2212}{s}")
    } else if x > 0.0 {
        format!("+{s}")
    } else {
        s
    }
}

fn minus(x: f64, decimals: usize) -> String {
    let s = format!("{:.*}", decimals, x.abs());
    if x < 0.0 {
        format!("\u{2212}{s}")
    } else {
        s
    }
}

fn p_text(p: f64) -> String {
    if p < 1e-4 {
        "< 0.0001".into()
    } else {
        format!("= {p:.4}")
    }
}

fn opt3(x: Option<f64>) -> String {
    x.map_or("\u{2014}".into(), |v| format!("{v:.3}"))
}

fn section_rq1(out: &mut String, rq1: &Rq1Summary, r: &PaperReference) {
    out.push_str("## Identification\n\n");
    out.push_str("| Set | Avg IG BN | Avg Base BN | IG Inner | IG Inter | Base Inner | Base Inter | Empty IG sets |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for row in &rq1.rows {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {} |",
            row.label,
            row.ig.avg_neurons,
            row.baseline.avg_neurons,
            row.ig.inner_intersection,
            row.ig.inter_intersection,
            row.baseline.inner_intersection,
            row.baseline.inter_intersection,
            row.ig.empty_sets
        );
    }
    let _ = writeln!(out, "\nReference ({NOT_REPRODUCIBLE}):\n");
    for t in &r.tracing {
        let _ = writeln!(
            out,
            "- {}: Avg IG BN {:.2}, Avg Base BN {:.2}, IG Inner {:.2}, IG Inter {:.2}, Base Inner {:.2}, Base Inter {:.2}",
            t.model, t.avg_ig_bn, t.avg_base_bn, t.ig_inner, t.ig_inter, t.base_inner, t.base_inter
        );
    }
    out.push('\n');
}

fn erasure_row(out: &mut String, a: &ErasureAggregate) {
    let _ = writeln!(
        out,
        "| {} | {} | {} | {:.2} | {:.3} | {:.3} | {:.3} |",
        a.category,
        a.relations,
        a.skipped,
        a.mean_n_suppressed,
        a.mean_ratio_target,
        a.mean_ratio_ctrl,
        a.mean_selectivity
    );
}

fn section_rq2(out: &mut String, rq2: &Rq2Report, r: &PaperReference) {
    out.push_str("## Erasure\n\n");
    out.push_str("| Category | Relations | Skipped | Avg #BN | PPL\u{2191} bias | PPL\u{2191} ctrl | Selectivity |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for a in &rq2.by_category {
        erasure_row(out, a);
    }
    erasure_row(out, &rq2.overall);
    let _ = writeln!(out, "\nReference ({NOT_REPRODUCIBLE}):\n");
    for e in &r.erasure {
        let _ = writeln!(
            out,
            "- {}: PPL bias {:.2}, ctrl {:.2} (Avg #BN {:.2})",
            e.model, e.ppl_ratio_bias, e.ppl_ratio_ctrl, e.avg_bn
        );
    }
    out.push('\n');
}

fn spearman_line(out: &mut String, name: &str, t: &Option<TestResult>) {
    match t {
        Some(t) => {
            let _ = writeln!(out, "- {name}: \u{3c1} = {:.3}, p {} (n = {})", t.statistic, p_text(t.p_value), t.n);
        }
        None => {
            let _ = writeln!(out, "- {name}: not computed");
        }
    }
}

fn section_stats(out: &mut String, s: &Rq2Stats, r: &PaperReference) {
    out.push_str("## Statistics\n\n");
    let w = &s.wilcoxon;
    let _ = writeln!(
        out,
        "- Wilcoxon signed-rank, target perplexity before vs after: W+ = {:.1}, W\u{2212} = {}, p {} (n = {}, {})",
        w.statistic,
        w.statistic_alt.map_or("\u{2014}".into(), |v| format!("{v:.1}")),
        p_text(w.p_value),
        w.n,
        w.method_note
    );
    let _ = writeln!(
        out,
        "- Cliff's \u{394} (after vs before): {}; paired dominance {:.3}",
        opt3(w.effect_size),
        s.cliffs_delta_paired
    );
    spearman_line(out, "Spearman, suppressed neurons vs bias ratio", &s.size_vs_ratio_target);
    spearman_line(out, "Spearman, inner intersection vs ctrl ratio", &s.inner_vs_ratio_ctrl);
    let _ = writeln!(out, "\nReference ({NOT_REPRODUCIBLE}):\n");
    for st in &r.statistics {
        let p = st.p_value.as_ref().map_or(String::new(), |p| {
            if p.starts_with('<') {
                format!(", p {p}")
            } else {
                format!(", p = {p}")
            }
        });
        let line = match st.name.as_str() {
            "wilcoxon_w" => format!("Wilcoxon W = {:.1}{p}", st.value),
            "cliffs_delta" => format!("Cliff's \u{394} = {}", minus(st.value, 3)),
            "spearman_size_vs_ratio_target" => {
                format!("Spearman, suppressed neurons vs bias ratio: \u{3c1} = {}{p}", minus(st.value, 3))
            }
            "spearman_inner_vs_ratio_ctrl" => {
                format!("Spearman, inner intersection vs ctrl ratio: \u{3c1} = {}{p}", minus(st.value, 3))
            }
            other => format!("{other}: {}{p}", st.value),
        };
        let _ = writeln!(out, "- {line}");
    }
    out.push('\n');
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Raw => "raw",
        Variant::FineTuned => "fine-tuned",
    }
}

fn delta_table(out: &mut String, first: &str, rows: &[DeltaRow]) {
    let _ = writeln!(
        out,
        "| {first} | Variant | Acc \u{394} mean | Acc \u{394} worst | F1 \u{394} mean | PPL \u{394} mean |"
    );
    out.push_str("|---|---|---|---|---|---|\n");
    for row in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.3} | {:.3} | {} | {} |",
            row.key,
            variant_name(row.variant),
            row.accuracy.mean,
            row.accuracy.worst,
            opt3(row.macro_f1.map(|d| d.mean)),
            opt3(row.perplexity.map(|d| d.mean))
        );
    }
}

fn section_rq3(out: &mut String, rq3: &Rq3Summary, r: &PaperReference) {
    out.push_str("## Downstream tasks\n\n");
    delta_table(out, "Task", &rq3.per_task);
    out.push('\n');
    delta_table(out, "Suppressed", &rq3.per_condition);
    if !rq3.raw_vs_finetuned.is_empty() {
        out.push_str("\n| Task | Raw Acc \u{394} | Fine-tuned Acc \u{394} |\n|---|---|---|\n");
        for c in &rq3.raw_vs_finetuned {
            let _ = writeln!(
                out,
                "| {} | {:.3} | {:.3} |",
                c.task_id, c.raw_accuracy_delta, c.finetuned_accuracy_delta
            );
        }
    }
    let _ = writeln!(out, "\nMean accuracy delta over all suppressed runs: {:.4}", rq3.mean_accuracy_delta);
    let _ = writeln!(out, "\nReference ({NOT_REPRODUCIBLE}):\n");
    for t in &r.tasks {
        let mut line = format!("- {}: Accuracy \u{394} {}", t.task, signed(t.accuracy_delta));
        if let Some(f) = t.macro_f1_delta {
            let _ = write!(line, ", Macro-F1 \u{394} {}", signed(f));
        }
        if let Some(p) = t.ppl_delta {
            let _ = write!(line, ", PPL \u{394} {}", signed(p));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push('\n');
}

/// Renders the report. Output depends only on the inputs.
pub fn emit_report(inputs: &ReportInputs, reference: &PaperReference) -> String {
    let mut out = String::new();
    if let Some(m) = &inputs.meta {
        let _ = writeln!(out, "<!-- {} -->", serde_json::to_string(m).expect("serializable"));
    }
    out.push_str("# Bias neuron report\n\n");
    if let Some(x) = &inputs.rq1 {
        section_rq1(&mut out, x, reference);
    }
    if let Some(x) = &inputs.rq2 {
        section_rq2(&mut out, x, reference);
    }
    if let Some(x) = &inputs.stats {
        section_stats(&mut out, x, reference);
    }
    if let Some(x) = &inputs.rq3 {
        section_rq3(&mut out, x, reference);
    }
    if inputs.rq1.is_none() && inputs.rq2.is_none() && inputs.stats.is_none() && inputs.rq3.is_none() {
        out.push_str("No stage outputs were given.\n");
    }
    out
}
