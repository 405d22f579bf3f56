//! Plain-text result table and key=value metric files.

use super::eval::EvalReport;
use crate::config::KvConfig;

pub const TABLE_COLUMNS: [&str; 9] = [
    "Split", "Backbone", "FPN dim", "Attribute", "Language", "Yes/No", "Num", "Others", "Score",
];
pub const METRIC_COLUMNS: [&str; 4] = ["Yes/No", "Num", "Others", "Score"];

/// One row: the setting that produced a model and its scores. `None`
/// settings print as `-` (e.g. for ensembles).
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub split: String,
    pub backbone: String,
    pub fpn_dim: Option<usize>,
    pub attribute: Option<bool>,
    pub language: Option<String>,
    pub report: EvalReport,
}

impl TableRow {
    pub fn cells(&self) -> Vec<String> {
        let metric = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let r = &self.report;
        vec![
            self.split.clone(),
            self.backbone.clone(),
            self.fpn_dim.map_or_else(|| "-".into(), |d| d.to_string()),
            match self.attribute {
                Some(true) => "yes".into(),
                Some(false) => "no".into(),
                None => "-".into(),
            },
            self.language.clone().unwrap_or_else(|| "-".into()),
            metric(r.yes_no),
            metric(r.number),
            metric(r.other),
            metric(r.overall),
        ]
    }
}

/// `|`-separated table with a header rule, columns padded to width.
pub fn render_table(rows: &[TableRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(TableRow::cells).collect();
    let mut widths: Vec<usize> = TABLE_COLUMNS.iter().map(|c| c.chars().count()).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!(" {c:<w$} "))
            .collect();
        format!("|{}|\n", parts.join("|"))
    };
    let header: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut out = line(&header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w + 2)).collect();
    out.push_str(&format!("|{}|\n", rule.join("|")));
    for r in &body {
        out.push_str(&line(r));
    }
    out
}

/// Metrics as `key = value`; absent buckets are written as `absent`.
pub fn report_kv(report: &EvalReport) -> KvConfig {
    let mut kv = KvConfig::default();
    let put = |kv: &mut KvConfig, k: &str, v: Option<f64>| match v {
        Some(x) => kv.set(k, format!("{x:.6}")),
        None => kv.set(k, "absent"),
    };
    put(&mut kv, "yes_no", report.yes_no);
    put(&mut kv, "num", report.number);
    put(&mut kv, "others", report.other);
    put(&mut kv, "score", report.overall);
    kv.set("count_yes_no", report.counts[0]);
    kv.set("count_num", report.counts[1]);
    kv.set("count_others", report.counts[2]);
    kv.set("count_total", report.total());
    kv
}
