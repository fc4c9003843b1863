use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videodata::{ForgeryKind, PerturbationKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Model variant, e.g. `naco` or `scratch`.
    pub variant: String,
    /// What the row evaluates: a held-out kind, a data fraction, a loss setting.
    pub name: String,
    pub auc: f64,
    pub acc: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessColumn {
    pub kind: PerturbationKind,
    /// Schedule parameter per severity.
    pub parameters: [f64; 5],
    pub auc: [f64; 5],
    pub mean_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub variant: String,
    pub clean_auc: f64,
    pub columns: Vec<RobustnessColumn>,
    /// Mean of the column means.
    pub mean_perturbed_auc: f64,
    /// `mean_perturbed_auc − clean_auc`.
    pub average_drop: f64,
}

impl RobustnessTable {
    pub fn new(variant: &str, clean_auc: f64, columns: Vec<RobustnessColumn>) -> Self {
        let mean_perturbed_auc = columns.iter().map(|c| c.mean_auc).sum::<f64>() / columns.len().max(1) as f64;
        Self {
            variant: variant.to_string(),
            clean_auc,
            columns,
            mean_perturbed_auc,
            average_drop: mean_perturbed_auc - clean_auc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    /// Per-variant means over `rows`.
    pub averages: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub robustness: Vec<RobustnessTable>,
    /// Per-variant rank correlation between a row setting and AUC.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub spearman: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(protocol: &str, seed: u64, config: serde_json::Value, rows: Vec<ReportRow>) -> Self {
        let averages = average_rows(&rows);
        Self { protocol: protocol.to_string(), seed, config, rows, averages, robustness: Vec::new(), spearman: BTreeMap::new() }
    }

    pub fn row(&self, variant: &str, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == variant && r.name == name)
    }

    pub fn average(&self, variant: &str) -> Option<&ReportRow> {
        self.averages.iter().find(|r| r.variant == variant)
    }

    /// Recomputes every stored aggregate and checks ranges.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("report `{}`: {m}", self.protocol)));
        for r in self.rows.iter().chain(&self.averages) {
            if !(0.0..=1.0).contains(&r.auc) || !(0.0..=1.0).contains(&r.acc) {
                return bad(format!("row {}/{} out of range", r.variant, r.name));
            }
        }
        for (a, b) in average_rows(&self.rows).iter().zip(&self.averages) {
            if a.variant != b.variant || (a.auc - b.auc).abs() > tol || (a.acc - b.acc).abs() > tol {
                return bad(format!("average for `{}` does not match its rows", b.variant));
            }
        }
        for t in &self.robustness {
            for c in &t.columns {
                let mean = c.auc.iter().sum::<f64>() / 5.0;
                if (mean - c.mean_auc).abs() > tol {
                    return bad(format!("{} column mean is inconsistent", c.kind.name()));
                }
            }
            let again = RobustnessTable::new(&t.variant, t.clean_auc, t.columns.clone());
            if (again.average_drop - t.average_drop).abs() > tol || (again.mean_perturbed_auc - t.mean_perturbed_auc).abs() > tol {
                return bad(format!("average drop for `{}` is inconsistent", t.variant));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn average_rows(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    variants
        .into_iter()
        .map(|v| {
            let group: Vec<&ReportRow> = rows.iter().filter(|r| r.variant == v).collect();
            let k = group.len() as f64;
            ReportRow {
                variant: v.to_string(),
                name: "average".into(),
                auc: group.iter().map(|r| r.auc).sum::<f64>() / k,
                acc: group.iter().map(|r| r.acc).sum::<f64>() / k,
                settings: BTreeMap::new(),
            }
        })
        .collect()
}

pub fn kind_row(variant: &str, kind: ForgeryKind, auc: f64, acc: f64) -> ReportRow {
    ReportRow { variant: variant.into(), name: kind.name().into(), auc, acc, settings: BTreeMap::new() }
}
