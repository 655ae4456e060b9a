//! Run reports and the comparison tables built from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{AblationTable, FinetuneHistory, Metrics};
use crate::nn::Genotype;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to rerun a command and compare its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub command: String,
    /// Row label in comparison tables.
    pub method: String,
    /// Exact configuration the command ran with.
    pub config: serde_json::Value,
    pub seed: u64,
    pub genotype: Option<Genotype>,
    pub param_count: Option<usize>,
    pub num_classes: Option<usize>,
    pub metrics: Option<Metrics>,
    pub finetune_history: Option<FinetuneHistory>,
    pub ablation: Option<AblationTable>,
    pub wall_seconds: f64,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, method: &str, config: serde_json::Value, seed: u64) -> Self {
        RunReport {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            method: method.to_string(),
            config,
            seed,
            genotype: None,
            param_count: None,
            num_classes: None,
            metrics: None,
            finetune_history: None,
            ablation: None,
            wall_seconds: 0.0,
            notes: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// The ablation table for ablation runs, a one-row comparison table
    /// otherwise.
    pub fn to_markdown(&self) -> String {
        match &self.ablation {
            Some(table) => table.to_markdown(),
            None => comparison_table(std::slice::from_ref(self)).expect("a single report cannot conflict"),
        }
    }
}

/// Parameter count in millions with two decimals: 810000 → "0.81".
pub fn format_params_millions(count: usize) -> String {
    format!("{:.2}", count as f64 / 1e6)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Method, parameter count (millions), top-1 error and accuracy (percent),
/// one row per report. Reports evaluated on different class counts cannot
/// share a table.
pub fn comparison_table(reports: &[RunReport]) -> Result<String> {
    let classes: Vec<usize> = reports.iter().filter_map(|r| r.num_classes).collect();
    if let Some(&first) = classes.first() {
        if let Some(&other) = classes.iter().find(|&&c| c != first) {
            return Err(Error::Parameter(format!(
                "reports disagree on the class count ({first} vs {other})"
            )));
        }
    }
    let mut out = String::from("| Method | # Params (M) | Error (%) | Accuracy (%) |\n|---|---|---|---|\n");
    for r in reports {
        let params = r.param_count.map_or_else(|| "-".to_string(), format_params_millions);
        let m = r.metrics.as_ref();
        out.push_str(&format!(
            "| {} | {params} | {} | {} |\n",
            r.method,
            cell(m.map(|m| m.top1_error)),
            cell(m.map(|m| m.accuracy))
        ));
    }
    Ok(out)
}

/// The comparison table as CSV with the same columns.
pub fn comparison_csv(reports: &[RunReport]) -> Result<String> {
    comparison_table(reports)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["method", "params_millions", "top1_error", "accuracy"]).map_err(io)?;
    for r in reports {
        let m = r.metrics.as_ref();
        w.write_record([
            r.method.clone(),
            r.param_count.map_or_else(String::new, format_params_millions),
            m.map_or_else(String::new, |m| format!("{:.2}", m.top1_error)),
            m.map_or_else(String::new, |m| format!("{:.2}", m.accuracy)),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, classes: usize, params: usize, error: f64) -> RunReport {
        let mut r = RunReport::new("finetune", method, serde_json::json!({}), 0);
        r.num_classes = Some(classes);
        r.param_count = Some(params);
        let truth: Vec<usize> = (0..100).map(|i| i % classes).collect();
        let wrong = (error.round() as usize).min(100);
        let pred: Vec<usize> = truth.iter().enumerate().map(|(i, &t)| if i < wrong { (t + 1) % classes } else { t }).collect();
        r.metrics = Some(Metrics::from_predictions(&pred, &truth, classes, params).unwrap());
        r
    }

    #[test]
    fn params_render_in_millions() {
        assert_eq!(format_params_millions(810_000), "0.81");
        assert_eq!(format_params_millions(3_349_000), "3.35");
        assert_eq!(format_params_millions(4_999), "0.00");
        assert_eq!(format_params_millions(17_530), "0.02");
    }

    #[test]
    fn single_report_gives_one_row() {
        let md = comparison_table(&[report("FL + Logit adj.", 10, 810_000, 11.0)]).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "| FL + Logit adj. | 0.81 | 11.00 | 89.00 |");
    }

    #[test]
    fn conflicting_class_counts_are_rejected() {
        let reports = [report("a", 10, 1, 0.0), report("b", 2, 1, 0.0)];
        assert!(matches!(comparison_table(&reports), Err(Error::Parameter(_))));
        assert!(comparison_csv(&reports).is_err());
    }

    #[test]
    fn csv_and_json_round_trip() {
        let r = report("CE", 4, 1_234_567, 25.0);
        let csv = comparison_csv(std::slice::from_ref(&r)).unwrap();
        assert_eq!(csv, "method,params_millions,top1_error,accuracy\nCE,1.23,25.00,75.00\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        r.save(&path).unwrap();
        assert_eq!(RunReport::load(&path).unwrap(), r);
    }
}
