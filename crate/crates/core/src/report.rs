//! Report documents and their json / csv / markdown renderings.
//!
//! Tables print accuracies with three decimals; json keeps full precision
//! and round-trips losslessly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::continual::{EpochStats, EvalMatrix};
use crate::gradcheck::GradCheckResult;
use crate::inference::{EvalRecord, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Md,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "md" => Ok(Format::Md),
            other => Err(format!("unknown format '{other}' (json, csv, md)")),
        }
    }
}

/// Where a configuration value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Fixed by the reproduced experiment (architecture, epochs, 0.8 gate).
    Paper,
    /// A default chosen here because the experiment leaves it open.
    Assumed,
    /// Set explicitly on the command line.
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub name: String,
    pub value: serde_json::Value,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Results {
    Eval {
        train_stats: Vec<EpochStats>,
        records: Vec<EvalRecord>,
    },
    Continual {
        matrix: EvalMatrix,
    },
    NoiseProbe {
        n_noise: usize,
        noise_abstention: f64,
        test_abstention: Option<f64>,
    },
    GradCheck {
        n_models: usize,
        dims: Vec<usize>,
        result: GradCheckResult,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub command: String,
    pub config: Vec<ConfigEntry>,
    pub results: Results,
    /// Wall-clock seconds per phase. The only field that varies between identical runs.
    pub timings: Vec<(String, f64)>,
}

fn acc(v: f64) -> String {
    format!("{v:.3}")
}

fn mode_title(mode: Mode) -> &'static str {
    match mode {
        Mode::Forced => "Forced prediction",
        Mode::Unforced => "Skipping allowed",
    }
}

/// Render an [`EvalMatrix`] as a triangular markdown table per mode, a
/// long-form csv, or a lossless json dump.
pub fn render_table(matrix: &EvalMatrix, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(matrix).expect("matrix serializes"),
        Format::Csv => matrix_csv(matrix),
        Format::Md => matrix_md(matrix),
    }
}

fn matrix_csv(matrix: &EvalMatrix) -> String {
    let mut out = String::from("stage,task,mode,n_total,n_skipped,accuracy\n");
    for row in &matrix.rows {
        for mode in [Mode::Forced, Mode::Unforced] {
            for (j, r) in row.records(mode).iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    row.stage,
                    j + 1,
                    mode.name(),
                    r.n_total,
                    r.n_skipped,
                    acc(r.accuracy)
                );
            }
        }
    }
    out
}

fn triangular_md(
    out: &mut String,
    matrix: &EvalMatrix,
    title: &str,
    cell: impl Fn(&EvalRecord) -> String,
    mode: Mode,
) {
    let n = matrix.rows.len();
    let _ = writeln!(out, "### {title}\n");
    out.push_str("| Trained through |");
    for j in 1..=n {
        let _ = write!(out, " Task {j} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(n));
    out.push('\n');
    for row in &matrix.rows {
        let _ = write!(out, "| Task {} |", row.stage);
        let recs = row.records(mode);
        for j in 0..n {
            match recs.get(j) {
                Some(r) => {
                    let _ = write!(out, " {} |", cell(r));
                }
                None => out.push_str("  |"),
            }
        }
        out.push('\n');
    }
    out.push('\n');
}

fn matrix_md(matrix: &EvalMatrix) -> String {
    let mut out = String::new();
    let m = &matrix.meta;
    let _ = writeln!(
        out,
        "## Continual run: {} ({} epoch(s) per task)\n",
        m.variant.name(),
        m.epochs_per_task
    );
    triangular_md(
        &mut out,
        matrix,
        mode_title(Mode::Forced),
        |r| acc(r.accuracy),
        Mode::Forced,
    );
    triangular_md(
        &mut out,
        matrix,
        mode_title(Mode::Unforced),
        |r| acc(r.accuracy),
        Mode::Unforced,
    );
    triangular_md(
        &mut out,
        matrix,
        "Skipped (skipping allowed)",
        |r| format!("{}/{}", r.n_skipped, r.n_total),
        Mode::Unforced,
    );
    out
}

fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("mode,n_total,n_skipped,n_correct,accuracy\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.mode.name(),
            r.n_total,
            r.n_skipped,
            r.n_correct,
            acc(r.accuracy)
        );
    }
    out
}

fn records_md(records: &[EvalRecord]) -> String {
    let mut out = String::from("| Mode | Skipped | Accuracy |\n|---|---|---|\n");
    for r in records {
        let _ = writeln!(
            out,
            "| {} | {}/{} | {} |",
            mode_title(r.mode),
            r.n_skipped,
            r.n_total,
            acc(r.accuracy)
        );
    }
    out
}

fn value_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn source_text(s: Source) -> &'static str {
    match s {
        Source::Paper => "paper",
        Source::Assumed => "assumed",
        Source::User => "user",
    }
}

impl Report {
    /// JSON with the timings removed; identical for identical runs.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings");
        }
        serde_json::to_string_pretty(&v).expect("report serializes")
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => serde_json::to_string_pretty(self).expect("report serializes") + "\n",
            Format::Csv => self.render_csv(),
            Format::Md => self.render_md(),
        }
    }

    fn render_csv(&self) -> String {
        let mut out = format!("# run_id={}\n# command={}\n", self.run_id, self.command);
        for e in &self.config {
            let _ = writeln!(
                out,
                "# {}={} ({})",
                e.name,
                value_text(&e.value),
                source_text(e.source)
            );
        }
        out.push_str(&match &self.results {
            Results::Eval { records, .. } => records_csv(records),
            Results::Continual { matrix } => matrix_csv(matrix),
            Results::NoiseProbe {
                n_noise,
                noise_abstention,
                test_abstention,
            } => format!(
                "n_noise,noise_abstention,test_abstention\n{},{},{}\n",
                n_noise,
                acc(*noise_abstention),
                test_abstention.map(acc).unwrap_or_default()
            ),
            Results::GradCheck {
                n_models, result, ..
            } => format!(
                "n_models,n_checked,max_rel_error,max_abs_error\n{},{},{:e},{:e}\n",
                n_models, result.n_checked, result.max_rel_error, result.max_abs_error
            ),
        });
        out
    }

    fn render_md(&self) -> String {
        let mut out = format!("# Run {} (`{}`)\n\n", self.run_id, self.command);
        out.push_str("| Setting | Value | Source |\n|---|---|---|\n");
        for e in &self.config {
            let _ = writeln!(
                out,
                "| {} | {} | {} |",
                e.name,
                value_text(&e.value),
                source_text(e.source)
            );
        }
        out.push('\n');
        match &self.results {
            Results::Eval { records, .. } => out.push_str(&records_md(records)),
            Results::Continual { matrix } => out.push_str(&matrix_md(matrix)),
            Results::NoiseProbe {
                n_noise,
                noise_abstention,
                test_abstention,
            } => {
                let _ = writeln!(out, "| Input | Abstention |\n|---|---|");
                let _ = writeln!(
                    out,
                    "| {} uniform-noise images | {} |",
                    n_noise,
                    acc(*noise_abstention)
                );
                if let Some(t) = test_abstention {
                    let _ = writeln!(out, "| test set | {} |", acc(*t));
                }
            }
            Results::GradCheck {
                n_models,
                dims,
                result,
            } => {
                let _ = writeln!(
                    out,
                    "{} random {:?} models, {} derivatives checked, max relative error {:e}, max absolute error {:e}",
                    n_models, dims, result.n_checked, result.max_rel_error, result.max_abs_error
                );
            }
        }
        out.push_str("\n| Phase | Seconds |\n|---|---|\n");
        for (phase, secs) in &self.timings {
            let _ = writeln!(out, "| {phase} | {secs:.2} |");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continual::{EvalConfig, MatrixMeta, StageRow, TrainConfig};
    use crate::model::Variant;

    fn rec(mode: Mode, acc: f64, skipped: usize) -> EvalRecord {
        EvalRecord {
            mode,
            n_total: 100,
            n_skipped: skipped,
            n_correct: ((100 - skipped) as f64 * acc).round() as usize,
            accuracy: acc,
        }
    }

    pub(crate) fn matrix(stages: usize) -> EvalMatrix {
        EvalMatrix {
            meta: MatrixMeta {
                variant: Variant::LearnableActivation,
                dims: vec![784, 400, 10],
                model_seed: 1,
                epochs_per_task: 1,
                train: TrainConfig::default(),
                eval: EvalConfig::default(),
            },
            rows: (1..=stages)
                .map(|k| StageRow {
                    stage: k,
                    train_stats: vec![],
                    forced: (0..k)
                        .map(|j| rec(Mode::Forced, 0.8491 + j as f64 * 0.01, 0))
                        .collect(),
                    unforced: (0..k).map(|j| rec(Mode::Unforced, 0.9, j)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn three_decimals() {
        assert_eq!(acc(0.8491), "0.849");
        assert!(render_table(&matrix(1), Format::Md).contains("| Task 1 | 0.849 |"));
    }

    #[test]
    fn single_stage_md_has_one_cell_per_table() {
        let md = render_table(&matrix(1), Format::Md);
        let data_rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| Task 1 |")).collect();
        assert_eq!(data_rows.len(), 3);
        for row in data_rows {
            assert_eq!(row.matches('|').count(), 3, "{row}");
        }
    }

    #[test]
    fn csv_has_thirty_rows_for_five_stages() {
        let csv = render_table(&matrix(5), Format::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stage,task,mode,n_total,n_skipped,accuracy");
        assert_eq!(lines.len() - 1, 30);
        assert_eq!(lines[1], "1,1,forced,100,0,0.849");
    }

    #[test]
    fn md_is_triangular() {
        let md = render_table(&matrix(3), Format::Md);
        let row2 = md.lines().find(|l| l.starts_with("| Task 2 |")).unwrap();
        assert_eq!(row2, "| Task 2 | 0.849 | 0.859 |  |");
    }

    #[test]
    fn json_round_trip() {
        let m = matrix(5);
        let back: EvalMatrix = serde_json::from_str(&render_table(&m, Format::Json)).unwrap();
        assert_eq!(back, m);
    }
}
