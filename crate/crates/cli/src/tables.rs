//! Result tables in aligned text and tab-separated forms.

use std::fmt::Write as _;

use metabci_core::benchmark::median;
use metabci_core::train::{FoldResult, Strategy};
use serde::{Deserialize, Serialize};

/// One strategy on one task, aggregated over held-out subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub task: String,
    pub strategy: Strategy,
    pub folds: usize,
    /// Mean over folds, all windows.
    pub accuracy: f64,
    /// Mean over folds that accepted at least one window.
    pub accepted_accuracy: Option<f64>,
    pub acceptance_rate: f64,
    pub median_epochs_to_target: Option<f64>,
}

impl Row {
    pub fn from_folds(task: &str, strategy: Strategy, folds: &[FoldResult]) -> Self {
        let n = folds.len().max(1) as f64;
        let accepted: Vec<f64> = folds.iter().filter_map(|f| f.filtered.accepted_accuracy).collect();
        let epochs: Vec<f64> = folds.iter().filter_map(|f| f.epochs_to_target.map(|e| e as f64)).collect();
        Self {
            task: task.into(),
            strategy,
            folds: folds.len(),
            accuracy: folds.iter().map(|f| f.accuracy).sum::<f64>() / n,
            accepted_accuracy: (!accepted.is_empty()).then(|| accepted.iter().sum::<f64>() / accepted.len() as f64),
            acceptance_rate: folds.iter().map(|f| f.filtered.acceptance_rate).sum::<f64>() / n,
            median_epochs_to_target: median(&epochs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn header(&self) -> String {
        format!(
            "# {} {} | schema {} | config sha256 {} | seed {}\n",
            self.tool, self.version, self.schema_version, self.config_sha256, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub provenance: Provenance,
    pub tasks: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub rows: Vec<Row>,
}

/// Column name and cell formatter.
type Column<'a> = (&'a str, &'a dyn Fn(&Row) -> String);

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

impl Results {
    fn row(&self, task: &str, s: Strategy) -> Option<&Row> {
        self.rows.iter().find(|r| r.task == task && r.strategy == s)
    }

    fn grid(&self, title: &str, cells: &[Column<'_>]) -> String {
        let mut head = vec!["strategy".to_string()];
        for t in &self.tasks {
            for (name, _) in cells {
                head.push(if cells.len() == 1 { t.clone() } else { format!("{t} {name}") });
            }
        }
        let mut body: Vec<Vec<String>> = Vec::new();
        for &s in &self.strategies {
            let mut line = vec![s.to_string()];
            for t in &self.tasks {
                for (_, f) in cells {
                    line.push(self.row(t, s).map_or_else(|| "-".into(), f));
                }
            }
            body.push(line);
        }
        let widths: Vec<usize> = (0..head.len())
            .map(|i| body.iter().map(|l| l[i].len()).chain([head[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = self.provenance.header();
        out.push_str(title);
        out.push('\n');
        for line in std::iter::once(&head).chain(body.iter()) {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// Accuracy of each strategy per task, with the convergence column.
    pub fn table1_text(&self) -> String {
        self.grid(
            "Table I. Leave-one-subject-out test accuracy (%) and median epochs to target",
            &[
                ("acc", &|r: &Row| pct(Some(r.accuracy))),
                ("epochs", &|r: &Row| opt(r.median_epochs_to_target)),
            ],
        )
    }

    /// Accuracy before and after confidence filtering.
    pub fn table2_text(&self) -> String {
        self.grid(
            "Table II. Accuracy (%) after online filtering with the training-accuracy threshold",
            &[
                ("all", &|r: &Row| pct(Some(r.accuracy))),
                ("accepted", &|r: &Row| pct(r.accepted_accuracy)),
                ("rate", &|r: &Row| pct(Some(r.acceptance_rate))),
            ],
        )
    }

    pub fn table1_tsv(&self) -> String {
        let mut out = self.provenance.header();
        out.push_str("task\tstrategy\tfolds\taccuracy\tmedian_epochs_to_target\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{}",
                r.task,
                r.strategy,
                r.folds,
                r.accuracy,
                r.median_epochs_to_target.map_or_else(|| "NA".into(), |v| v.to_string())
            );
        }
        out
    }

    pub fn table2_tsv(&self) -> String {
        let mut out = self.provenance.header();
        out.push_str("task\tstrategy\taccuracy\taccepted_accuracy\tacceptance_rate\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{}\t{:.6}",
                r.task,
                r.strategy,
                r.accuracy,
                r.accepted_accuracy.map_or_else(|| "NA".into(), |v| format!("{v:.6}")),
                r.acceptance_rate
            );
        }
        out
    }
}
