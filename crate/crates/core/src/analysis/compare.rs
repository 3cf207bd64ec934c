use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ProbeReport;
use crate::error::{Error, Result};
use crate::model::{ReprKind, Side};
use crate::probing::LayerRef;

const BUNDLED_REFERENCE: &str = include_str!("../../data/reference.toml");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEntry {
    pub key: String,
    pub table: String,
    pub description: String,
    /// Printed form of the published number.
    pub value: String,
}

/// Published numbers for side-by-side display. Never used for pass/fail.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaperReference {
    #[serde(rename = "entry", default)]
    pub entries: Vec<ReferenceEntry>,
}

impl PaperReference {
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED_REFERENCE).expect("bundled reference file is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let r: PaperReference = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<reference>".into(),
            line: 0,
            msg: e.to_string(),
        })?;
        for e in &r.entries {
            if e.value.parse::<f64>().is_err() {
                return Err(Error::Data(format!("reference {} has non-numeric value {:?}", e.key, e.value)));
            }
        }
        Ok(r)
    }

    pub fn get(&self, key: &str) -> Option<&ReferenceEntry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

/// Row descriptor of a comparison table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub repr: ReprKind,
    pub side: Side,
    pub layer: LayerRef,
    pub attention: bool,
    pub target: String,
    pub task: String,
    /// Key into the reference file.
    #[serde(default)]
    pub reference: Option<String>,
}

/// One (variant, seed) run and the artifacts its numbers come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    /// Key of the run's report.
    pub report: String,
    /// Key of the model (and its training log) the run probed.
    pub model: String,
    pub bleu: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }

    pub fn display(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Probe accuracy in percent.
    pub accuracy: MeanStd,
    /// Accuracy on tokens outside the MT vocabulary, in percent.
    pub unseen_accuracy: Option<MeanStd>,
    pub bleu: Option<MeanStd>,
    /// Mean accuracy minus the baseline's, in points.
    pub delta: Option<f64>,
    pub reference: Option<ReferenceEntry>,
    /// Report keys behind the row.
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub baseline: Option<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Aggregates runs per variant (in order of first appearance) over seeds.
pub fn compare_experiments(
    title: &str,
    records: &[RunRecord],
    reports: &BTreeMap<String, ProbeReport>,
    baseline: Option<&str>,
    reference: &PaperReference,
) -> Result<ComparisonTable> {
    let mut groups: Vec<(Variant, Vec<&RunRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(v, _)| v.name == r.variant.name) {
            Some((v, runs)) => {
                if *v != r.variant {
                    return Err(Error::Manifest(format!("variant {} is described twice differently", v.name)));
                }
                runs.push(r);
            }
            None => groups.push((r.variant.clone(), vec![r])),
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (variant, runs) in groups {
        let mut acc = Vec::new();
        let mut unseen = Vec::new();
        let mut bleu = Vec::new();
        for r in &runs {
            let rep = reports
                .get(&r.report)
                .ok_or_else(|| Error::Manifest(format!("variant {} refers to missing report {}", variant.name, r.report)))?;
            acc.push(100.0 * rep.accuracy());
            if let Some(u) = rep.unseen.accuracy() {
                unseen.push(100.0 * u);
            }
            if let Some(b) = r.bleu {
                bleu.push(b);
            }
        }
        let reference = match &variant.reference {
            Some(k) => Some(
                reference
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Manifest(format!("variant {} refers to unknown reference {k}", variant.name)))?,
            ),
            None => None,
        };
        rows.push(ComparisonRow {
            seeds: runs.iter().map(|r| r.seed).collect(),
            accuracy: MeanStd::of(&acc).expect("at least one run"),
            unseen_accuracy: (unseen.len() == runs.len()).then(|| MeanStd::of(&unseen)).flatten(),
            bleu: (bleu.len() == runs.len()).then(|| MeanStd::of(&bleu)).flatten(),
            delta: None,
            reference,
            sources: runs.iter().map(|r| r.report.clone()).collect(),
            variant,
        });
    }
    if let Some(b) = baseline {
        let base = rows
            .iter()
            .find(|r| r.variant.name == b)
            .ok_or_else(|| Error::Manifest(format!("baseline {b} is not among the variants")))?
            .accuracy
            .mean;
        for r in &mut rows {
            r.delta = Some(r.accuracy.mean - base);
        }
    }
    Ok(ComparisonTable {
        title: title.to_string(),
        baseline: baseline.map(str::to_string),
        rows,
    })
}

fn fmt2(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.2}"))
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant",
            "repr",
            "side",
            "layer",
            "attention",
            "target",
            "task",
            "seeds",
            "accuracy",
            "accuracy_std",
            "unseen_accuracy",
            "unseen_std",
            "bleu",
            "bleu_std",
            "delta",
            "reference",
            "reference_table",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            let v = &r.variant;
            w.write_record([
                v.name.clone(),
                v.repr.name().to_string(),
                v.side.name().to_string(),
                v.layer.to_string(),
                v.attention.to_string(),
                v.target.clone(),
                v.task.clone(),
                r.seeds.len().to_string(),
                fmt2(Some(r.accuracy.mean)),
                fmt2(Some(r.accuracy.std)),
                fmt2(r.unseen_accuracy.map(|m| m.mean)),
                fmt2(r.unseen_accuracy.map(|m| m.std)),
                fmt2(r.bleu.map(|m| m.mean)),
                fmt2(r.bleu.map(|m| m.std)),
                fmt2(r.delta),
                r.reference.as_ref().map_or(String::new(), |e| e.value.clone()),
                r.reference.as_ref().map_or(String::new(), |e| e.table.clone()),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let mut cells = vec![[
            "variant".to_string(),
            "accuracy".into(),
            "unseen".into(),
            "BLEU".into(),
            "delta".into(),
            "reference".into(),
        ]];
        let ms = |m: &Option<MeanStd>| m.as_ref().map_or("-".to_string(), MeanStd::display);
        for r in &self.rows {
            cells.push([
                r.variant.name.clone(),
                r.accuracy.display(),
                ms(&r.unseen_accuracy),
                ms(&r.bleu),
                r.delta.map_or("-".into(), |d| format!("{d:+.2}")),
                r.reference
                    .as_ref()
                    .map_or("-".into(), |e| format!("{} ({})", e.value, e.table)),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = format!("{}\n", self.title);
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}
