use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metamorphic::{MrId, MrStatus, MrVerdict, SigmaMaxReport};

use super::{KillMatrix, BASELINE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "text" | "text-table" | "table" => Ok(Self::Text),
            other => Err(Error::Argument(format!("unknown report format `{other}`"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Text => "txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrSummary {
    pub mr: MrId,
    pub mutants: usize,
    pub killed: usize,
    pub passed: usize,
    pub inconclusive: usize,
}

/// Kill counts over the mutant rows (the baseline row is excluded).
///
/// A mutant counts as killed when any relation kills it, as inconclusive
/// when none kills it and at least one could not decide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_mr: Vec<MrSummary>,
    pub mutants: usize,
    pub killed: usize,
    pub inconclusive: usize,
    pub survived: usize,
}

impl Summary {
    /// Killed fraction of all mutants; zero for an empty matrix.
    pub fn kill_rate(&self) -> f64 {
        if self.mutants == 0 {
            0.0
        } else {
            self.killed as f64 / self.mutants as f64
        }
    }

    /// Kill rate in whole percent.
    pub fn kill_percent(&self) -> u32 {
        (100.0 * self.kill_rate()).round() as u32
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "killed {}/{} mutants ({}%), {} inconclusive, {} survived",
            self.killed,
            self.mutants,
            self.kill_percent(),
            self.inconclusive,
            self.survived
        )?;
        for m in &self.per_mr {
            writeln!(
                f,
                "  {}: killed {}/{}, {} inconclusive",
                m.mr, m.killed, m.mutants, m.inconclusive
            )?;
        }
        Ok(())
    }
}

pub fn summarize(matrix: &KillMatrix) -> Summary {
    summarize_many(std::slice::from_ref(matrix))
}

/// Pools the mutant rows of several matrices into one summary.
pub fn summarize_many(matrices: &[KillMatrix]) -> Summary {
    let mut per_mr: Vec<MrSummary> = Vec::new();
    let mut s = Summary {
        per_mr: Vec::new(),
        mutants: 0,
        killed: 0,
        inconclusive: 0,
        survived: 0,
    };
    for matrix in matrices {
        for row in matrix.rows.iter().filter(|r| r.mutant != BASELINE) {
            s.mutants += 1;
            let statuses: Vec<MrStatus> = row.cells.iter().map(|c| c.verdict.status).collect();
            if statuses.contains(&MrStatus::Killed) {
                s.killed += 1;
            } else if statuses.contains(&MrStatus::Inconclusive) {
                s.inconclusive += 1;
            } else {
                s.survived += 1;
            }
            for cell in &row.cells {
                let idx = match per_mr.iter().position(|m| m.mr == cell.mr) {
                    Some(i) => i,
                    None => {
                        per_mr.push(MrSummary {
                            mr: cell.mr,
                            mutants: 0,
                            killed: 0,
                            passed: 0,
                            inconclusive: 0,
                        });
                        per_mr.len() - 1
                    }
                };
                let m = &mut per_mr[idx];
                m.mutants += 1;
                match cell.verdict.status {
                    MrStatus::Killed => m.killed += 1,
                    MrStatus::Pass => m.passed += 1,
                    MrStatus::Inconclusive => m.inconclusive += 1,
                }
            }
        }
    }
    per_mr.sort_by_key(|m| m.mr);
    s.per_mr = per_mr;
    s
}

fn format_evidence(v: f64) -> String {
    if v.is_infinite() {
        "∞".into()
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

fn table_cell(v: &MrVerdict) -> String {
    match v.status {
        MrStatus::Pass => String::new(),
        MrStatus::Inconclusive => "?".into(),
        MrStatus::Killed if v.sigma.is_some() => format!("✓ ({})", format_evidence(v.evidence)),
        MrStatus::Killed => "✓".into(),
    }
}

/// Checkmark grid: one row per subject, one column per relation; training
/// relations show `sigma_max` in brackets beside a kill, `?` marks an
/// inconclusive cell.
pub fn render_text(matrix: &KillMatrix) -> String {
    let mut header = vec![matrix.subject.clone()];
    header.extend(matrix.relations.iter().map(|r| r.to_string()));
    let mut grid = vec![header];
    for row in &matrix.rows {
        let mut line = vec![row.mutant.clone()];
        for mr in &matrix.relations {
            line.push(
                row.cells
                    .iter()
                    .find(|c| c.mr == *mr)
                    .map(|c| table_cell(&c.verdict))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        grid.push(line);
    }
    let cols = grid[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        }
    }
    out
}

fn csv_number(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        v.to_string()
    }
}

/// Header plus one line per matrix row; cells read `status:evidence`.
pub fn render_csv(matrix: &KillMatrix) -> String {
    let mut out = String::from("mutant");
    for r in &matrix.relations {
        let _ = write!(out, ",{r}");
    }
    out.push('\n');
    for row in &matrix.rows {
        out.push_str(&row.mutant);
        for mr in &matrix.relations {
            let cell = match row.cells.iter().find(|c| c.mr == *mr) {
                Some(c) => {
                    let status = match c.verdict.status {
                        MrStatus::Pass => "pass",
                        MrStatus::Killed => "killed",
                        MrStatus::Inconclusive => "inconclusive",
                    };
                    if c.verdict.status == MrStatus::Inconclusive {
                        status.to_string()
                    } else {
                        format!("{status}:{}", csv_number(c.verdict.evidence))
                    }
                }
                None => String::new(),
            };
            let _ = write!(out, ",{cell}");
        }
        out.push('\n');
    }
    out
}

/// Writes the matrix to `path` in the given format.
pub fn emit_report(
    matrix: &KillMatrix,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => matrix.to_json()?,
        ReportFormat::Csv => render_csv(matrix),
        ReportFormat::Text => render_text(matrix),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One `step,test_loss,test_accuracy` CSV per variant of a training
/// relation, named `<subject>_<mr>_seed<seed>_<variant>.csv`.
pub fn emit_loss_curves(
    subject: &str,
    mr: MrId,
    seed: u64,
    report: &SigmaMaxReport,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if report.traces.is_empty() {
        return Err(Error::Argument(format!("{mr} report carries no traces")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for t in &report.traces {
        let name = format!(
            "{}_{}_seed{}_{}.csv",
            file_safe(subject),
            mr,
            seed,
            file_safe(&t.variant)
        );
        let path = dir.join(name);
        let mut text = String::from("step,test_loss,test_accuracy\n");
        for p in &t.trace {
            let _ = writeln!(
                text,
                "{},{},{}",
                p.step,
                csv_number(p.test_loss),
                csv_number(p.test_accuracy)
            );
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loss curves of every training-relation cell of the matrix.
pub fn emit_matrix_loss_curves(matrix: &KillMatrix, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for row in &matrix.rows {
        let subject = format!("{}_{}", matrix.subject, row.mutant);
        for cell in &row.cells {
            for s in &cell.seeds {
                if let Some(report) = &s.verdict.sigma {
                    if !report.traces.is_empty() {
                        paths.extend(emit_loss_curves(&subject, cell.mr, s.seed, report, &dir)?);
                    }
                }
            }
        }
    }
    Ok(paths)
}
