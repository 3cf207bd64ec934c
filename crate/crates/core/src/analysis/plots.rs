//! Tidy `series,x,y` CSV series behind the usual probing plots. Rendering
//! is left to external tools. Numbers are printed in shortest round-trip
//! form so they parse back to the report values exactly.

use std::path::{Path, PathBuf};

use super::{ComparisonTable, Count, ProbeReport, TagDelta};
use crate::corpus::write_file;
use crate::error::Result;

fn tidy<I: IntoIterator<Item = (String, String, String)>>(rows: I) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "x", "y"]).expect("in-memory write");
    for (s, x, y) in rows {
        w.write_record([s, x, y]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn acc(c: &Count) -> String {
    c.accuracy().map_or(String::new(), |a| a.to_string())
}

/// Accuracy per frequency bin; one row per bin and series, empty `y` for
/// bins without rows.
pub fn frequency_curve_csv(reports: &[(&str, &ProbeReport)]) -> String {
    tidy(reports.iter().flat_map(|(name, r)| {
        r.bins
            .iter()
            .map(move |b| (name.to_string(), b.label.clone(), acc(&b.count)))
    }))
}

pub fn seen_unseen_csv(reports: &[(&str, &ProbeReport)]) -> String {
    tidy(reports.iter().flat_map(|(name, r)| {
        [("all", &r.overall), ("seen", &r.seen), ("unseen", &r.unseen)]
            .into_iter()
            .map(move |(x, c)| (name.to_string(), x.to_string(), acc(c)))
    }))
}

/// One row per (gold, predicted) cell: series is the gold tag, x the
/// predicted tag, y the count.
pub fn confusion_csv(report: &ProbeReport) -> String {
    tidy(report.confusion.iter().enumerate().flat_map(|(g, row)| {
        row.iter()
            .enumerate()
            .map(move |(p, n)| (report.labels[g].clone(), report.labels[p].clone(), n.to_string()))
    }))
}

/// Bubble data: series is the tag, x its training frequency, y the delta.
pub fn tag_bubble_csv(deltas: &[TagDelta]) -> String {
    tidy(
        deltas
            .iter()
            .map(|d| (d.tag.clone(), d.train_frequency.to_string(), d.delta.to_string())),
    )
}

/// Mean accuracy per layer, grouped by representation, side and task.
pub fn layer_curve_csv(table: &ComparisonTable) -> String {
    tidy(table.rows.iter().map(|r| {
        let v = &r.variant;
        (
            format!("{}-{}-{}", v.repr.name(), v.side.name(), v.task),
            v.layer.to_string(),
            r.accuracy.mean.to_string(),
        )
    }))
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes frequency, seen/unseen and per-report confusion series (plus
/// bubble data when `deltas` is given) into `dir`.
pub fn export_report_plots(
    reports: &[(&str, &ProbeReport)],
    deltas: Option<&[TagDelta]>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        (dir.join("frequency.csv"), frequency_curve_csv(reports)),
        (dir.join("seen_unseen.csv"), seen_unseen_csv(reports)),
    ];
    for (name, r) in reports {
        files.push((dir.join(format!("confusion-{}.csv", file_stem(name))), confusion_csv(r)));
    }
    if let Some(d) = deltas {
        files.push((dir.join("tag_delta.csv"), tag_bubble_csv(d)));
    }
    write_all(files)
}

/// Writes the table itself and its layer curve into `dir`.
pub fn export_table_plots(table: &ComparisonTable, dir: &Path) -> Result<Vec<PathBuf>> {
    write_all(vec![
        (dir.join("table.csv"), table.to_csv()),
        (dir.join("layers.csv"), layer_curve_csv(table)),
    ])
}

fn write_all(files: Vec<(PathBuf, String)>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(files.len());
    for (p, body) in files {
        write_file(&p, body.as_bytes())?;
        out.push(p);
    }
    Ok(out)
}
