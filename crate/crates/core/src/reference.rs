//! Published reference numbers for the BERT-family runs, shipped so reports
//! can print them beside desk-scale measurements. None of them is expected
//! to be reproduced by the toy fixture.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub source: String,
    pub category: String,
    pub relations: usize,
    pub prompts: usize,
    pub groups: usize,
    pub stereotypes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracingRow {
    pub source: String,
    pub model: String,
    pub avg_ig_bn: f64,
    pub avg_base_bn: f64,
    pub ig_inner: f64,
    pub ig_inter: f64,
    pub base_inner: f64,
    pub base_inter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureRow {
    pub source: String,
    pub model: String,
    pub avg_bn: f64,
    pub ppl_ratio_bias: f64,
    pub ppl_ratio_ctrl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub source: String,
    pub task: String,
    pub accuracy_delta: f64,
    pub macro_f1_delta: Option<f64>,
    pub ppl_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub source: String,
    pub name: String,
    pub value: f64,
    /// As printed, since some are only bounds (`< 0.0001`).
    pub p_value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperReference {
    pub note: String,
    pub dataset: Vec<DatasetRow>,
    pub tracing: Vec<TracingRow>,
    pub erasure: Vec<ErasureRow>,
    pub statistics: Vec<StatRow>,
    pub tasks: Vec<TaskRow>,
}

impl PaperReference {
    pub fn shipped() -> Self {
        let ds = |c: &str, r, p, g, s| DatasetRow {
            source: format!("dataset counts, {c}"),
            category: c.into(),
            relations: r,
            prompts: p,
            groups: g,
            stereotypes: s,
        };
        let tr = |m: &str, a, b, c, d, e, f| TracingRow {
            source: format!("neuron sets, {m}"),
            model: m.into(),
            avg_ig_bn: a,
            avg_base_bn: b,
            ig_inner: c,
            ig_inter: d,
            base_inner: e,
            base_inter: f,
        };
        let er = |m: &str, n, b, c| ErasureRow {
            source: format!("erasure, {m}"),
            model: m.into(),
            avg_bn: n,
            ppl_ratio_bias: b,
            ppl_ratio_ctrl: c,
        };
        let tk = |t: &str, a, f, p| TaskRow {
            source: format!("downstream tasks, {t}"),
            task: t.into(),
            accuracy_delta: a,
            macro_f1_delta: f,
            ppl_delta: p,
        };
        let st = |n: &str, v, p: Option<&str>| StatRow {
            source: "RQ2 statistics".into(),
            name: n.into(),
            value: v,
            p_value: p.map(String::from),
        };
        PaperReference {
            note: "published BERT-family results; not reproducible at desk scale".into(),
            dataset: vec![
                ds("BR01", 65, 650, 29, 65),
                ds("BR02", 45, 450, 35, 45),
                ds("BR03", 102, 1020, 30, 100),
                ds("BR04", 126, 1260, 66, 115),
                ds("BR05", 50, 500, 27, 47),
                ds("BR06", 359, 3590, 76, 290),
                ds("BR07", 94, 940, 36, 84),
                ds("BR08", 65, 650, 22, 64),
                ds("BR09", 112, 1120, 36, 103),
                ds("Total", 1018, 10180, 357, 913),
            ],
            tracing: vec![
                tr("bert-base-cased", 2.49, 41.47, 1.49, 0.28, 28.70, 23.45),
                tr("bert-base-uncased", 2.05, 54.58, 1.28, 0.34, 38.54, 28.95),
                tr("bert-large-cased", 1.88, 88.41, 1.11, 0.28, 60.53, 36.76),
                tr("bert-large-uncased", 1.28, 5.42, 0.64, 0.08, 5.20, 5.00),
                tr("bert-large-cased --- IN", 3.80, 88.32, 1.96, 1.29, 61.00, 37.59),
                tr("bert-large-cased --- RQ", 2.00, 86.94, 1.26, 0.30, 59.31, 35.63),
                tr("bert-large-cased --- RT", 3.74, 88.46, 1.99, 1.26, 60.59, 36.88),
                tr("bert-large-cased --- SN", 4.92, 84.62, 2.34, 1.40, 55.74, 38.31),
                tr("bert-large-cased --- TB", 3.98, 92.87, 2.05, 1.27, 64.66, 39.19),
            ],
            erasure: vec![
                er("bert-base-cased", 18.44, 1.93, 1.30),
                er("bert-base-uncased", 15.22, 2.34, 2.03),
                er("bert-large-cased", 15.11, 1.71, 1.31),
                er("bert-large-uncased", 12.78, 1.75, 1.42),
                er("bert-large-cased --- IN", 19.78, 1.20, 0.90),
                er("bert-large-cased --- RC", 15.67, 1.88, 1.47),
                er("bert-large-cased --- RT", 19.44, 1.13, 0.83),
                er("bert-large-cased --- SN", 20.00, 0.97, 0.69),
                er("bert-large-cased --- TB", 19.11, 1.21, 0.88),
            ],
            statistics: vec![
                st("wilcoxon_w", 3321.0, Some("< 0.0001")),
                st("cliffs_delta", 1.000, None),
                st("spearman_size_vs_ratio_target", -0.026, Some("0.818")),
                st("spearman_inner_vs_ratio_ctrl", -0.538, Some("< 0.0001")),
            ],
            tasks: vec![
                tk("Incivility", -0.06, Some(-0.01), None),
                tk("Tone bearing", -0.20, Some(-0.08), None),
                tk("Requirement type", 0.04, Some(-0.002), None),
                tk("Sentiment", -0.23, Some(-0.28), None),
                tk("Requirement completion", 0.03, None, Some(-15.6)),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_total_row_sums() {
        let r = PaperReference::shipped();
        let (rows, total) = r.dataset.split_at(9);
        let total = &total[0];
        assert_eq!(rows.iter().map(|d| d.relations).sum::<usize>(), total.relations);
        assert_eq!(rows.iter().map(|d| d.prompts).sum::<usize>(), total.prompts);
        assert_eq!(rows.iter().map(|d| d.groups).sum::<usize>(), total.groups);
        assert_eq!(rows.iter().map(|d| d.stereotypes).sum::<usize>(), total.stereotypes);
        assert!(rows.iter().all(|d| d.prompts == 10 * d.relations));
    }

    #[test]
    fn json_round_trip() {
        let r = PaperReference::shipped();
        let back: PaperReference = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
