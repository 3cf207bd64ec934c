//! Probe evaluation reports, per-tag comparisons, cross-experiment tables
//! and plot data.

mod compare;
mod plots;

pub use compare::{
    compare_experiments, MeanStd, PaperReference, ReferenceEntry, RunRecord, Variant, ComparisonRow,
    ComparisonTable,
};
pub use plots::{
    confusion_csv, export_report_plots, export_table_plots, frequency_curve_csv, layer_curve_csv, seen_unseen_csv,
    tag_bubble_csv,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probing::{predict_tags, FeatureRow, FeatureSet, Probe};

pub const REPORT_VERSION: u32 = 1;

/// Inclusive range of training frequencies; `hi == None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyBin {
    pub lo: u64,
    pub hi: Option<u64>,
}

impl FrequencyBin {
    pub fn contains(&self, f: u64) -> bool {
        f >= self.lo && self.hi.is_none_or(|h| f <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            None => format!(">{}", self.lo.saturating_sub(1)),
            Some(h) if h == self.lo => h.to_string(),
            Some(h) => format!("{}-{h}", self.lo),
        }
    }
}

/// A ladder of bins covering every frequency exactly once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyBins(Vec<FrequencyBin>);

impl Default for FrequencyBins {
    fn default() -> Self {
        "0,1-5,6-10,11-20,21-50,51-100,101-500,501-1000,>1000"
            .parse()
            .expect("default ladder is well formed")
    }
}

impl FrequencyBins {
    pub fn new(bins: Vec<FrequencyBin>) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(format!("frequency bins: {m}")));
        if bins.is_empty() {
            return bad("no bins".into());
        }
        let mut next = 0u64;
        for (i, b) in bins.iter().enumerate() {
            if b.lo != next {
                return bad(format!("bin {} starts at {}, expected {next}", b.label(), b.lo));
            }
            match b.hi {
                Some(h) if h < b.lo => return bad(format!("bin {}-{h} is empty", b.lo)),
                Some(h) => next = h + 1,
                None if i + 1 != bins.len() => return bad("only the last bin may be unbounded".into()),
                None => {}
            }
        }
        if bins.last().and_then(|b| b.hi).is_some() {
            return bad("the last bin must be unbounded".into());
        }
        Ok(FrequencyBins(bins))
    }

    pub fn bins(&self) -> &[FrequencyBin] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index(&self, frequency: u64) -> usize {
        self.0
            .iter()
            .position(|b| b.contains(frequency))
            .expect("bins cover all frequencies")
    }
}

/// Parses comma-separated bins such as `0,1-5,6-10,>10`.
impl FromStr for FrequencyBins {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |p: &str| Error::Config(format!("frequency bins: cannot parse {p:?}"));
        let num = |p: &str, t: &str| t.trim().parse::<u64>().map_err(|_| bad(p));
        let mut bins = Vec::new();
        for part in s.split(',').map(str::trim) {
            let bin = if let Some(rest) = part.strip_prefix('>') {
                FrequencyBin {
                    lo: num(part, rest)? + 1,
                    hi: None,
                }
            } else if let Some((a, b)) = part.split_once('-') {
                FrequencyBin {
                    lo: num(part, a)?,
                    hi: Some(num(part, b)?),
                }
            } else {
                let v = num(part, part)?;
                FrequencyBin { lo: v, hi: Some(v) }
            };
            bins.push(bin);
        }
        FrequencyBins::new(bins)
    }
}

impl fmt::Display for FrequencyBins {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.0.iter().map(FrequencyBin::label).collect();
        f.write_str(&labels.join(","))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Count {
    pub correct: u64,
    pub total: u64,
}

impl Count {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, ok: bool) {
        self.correct += ok as u64;
        self.total += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub label: String,
    pub bin: FrequencyBin,
    pub count: Count,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagStat {
    pub tag: String,
    pub count: Count,
    /// Rows with this tag in the probe's training set.
    pub train_frequency: u64,
}

/// Token metadata needed for the breakdowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub frequency: u64,
    pub seen: bool,
}

impl From<&FeatureRow> for TokenMeta {
    fn from(r: &FeatureRow) -> Self {
        TokenMeta {
            frequency: r.frequency,
            seen: r.seen,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Count rows whose gold tag never occurred in probe training as errors
    /// instead of leaving them out.
    pub include_unseen_tags: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub version: u32,
    /// Rows in the accuracy denominator.
    pub n_rows: usize,
    /// Rows left out because their gold tag is outside the probe tagset.
    pub excluded_rows: usize,
    pub overall: Count,
    pub seen: Count,
    pub unseen: Count,
    pub bins: Vec<BinStat>,
    pub per_tag: Vec<TagStat>,
    /// Axis labels of `confusion`: the probe tagset, followed by any
    /// included out-of-tagset gold tags.
    pub labels: Vec<String>,
    /// `confusion[gold][predicted]` row counts.
    pub confusion: Vec<Vec<u64>>,
    #[serde(default)]
    pub manifest: Option<serde_json::Value>,
}

/// Builds a report from aligned gold tags, predicted probe-tag ids and
/// token metadata. `tag_frequency` maps tags to probe training counts.
pub fn build_report(
    tagset: &[String],
    gold: &[String],
    predicted: &[u32],
    meta: &[TokenMeta],
    tag_frequency: &BTreeMap<String, u64>,
    bins: &FrequencyBins,
    opts: &ReportOptions,
) -> Result<ProbeReport> {
    if gold.len() != predicted.len() || gold.len() != meta.len() {
        return Err(Error::Data(format!(
            "{} gold tags, {} predictions and {} metadata rows",
            gold.len(),
            predicted.len(),
            meta.len()
        )));
    }
    if let Some(p) = predicted.iter().find(|&&p| p as usize >= tagset.len()) {
        return Err(Error::Data(format!("prediction {p} outside tagset of size {}", tagset.len())));
    }
    let mut labels = tagset.to_vec();
    let mut index: BTreeMap<&str, usize> = tagset.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    if index.len() != tagset.len() {
        return Err(Error::Data("duplicate tags in tagset".into()));
    }
    let extra: BTreeSet<&str> = gold.iter().map(String::as_str).filter(|t| !index.contains_key(t)).collect();
    if opts.include_unseen_tags {
        for t in extra {
            index.insert(t, labels.len());
            labels.push(t.to_string());
        }
    }
    let k = labels.len();
    let mut confusion = vec![vec![0u64; k]; k];
    let mut bin_counts = vec![Count::default(); bins.len()];
    let (mut overall, mut seen, mut unseen) = (Count::default(), Count::default(), Count::default());
    let mut excluded = 0;
    for ((g, &p), m) in gold.iter().zip(predicted).zip(meta) {
        let Some(&gi) = index.get(g.as_str()) else {
            excluded += 1;
            continue;
        };
        let ok = gi == p as usize;
        confusion[gi][p as usize] += 1;
        overall.add(ok);
        if m.seen { &mut seen } else { &mut unseen }.add(ok);
        bin_counts[bins.index(m.frequency)].add(ok);
    }
    let per_tag = labels
        .iter()
        .enumerate()
        .map(|(i, t)| TagStat {
            tag: t.clone(),
            count: Count {
                correct: confusion[i][i],
                total: confusion[i].iter().sum(),
            },
            train_frequency: tag_frequency.get(t).copied().unwrap_or(0),
        })
        .collect();
    Ok(ProbeReport {
        version: REPORT_VERSION,
        n_rows: overall.total as usize,
        excluded_rows: excluded,
        overall,
        seen,
        unseen,
        bins: bins
            .bins()
            .iter()
            .zip(bin_counts)
            .map(|(b, count)| BinStat {
                label: b.label(),
                bin: *b,
                count,
            })
            .collect(),
        per_tag,
        labels,
        confusion,
        manifest: None,
    })
}

/// Tag counts of a feature set, used as per-tag training frequencies.
pub fn tag_frequency(fs: &FeatureSet) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for i in 0..fs.len() {
        *m.entry(fs.tag(i).to_string()).or_insert(0) += 1;
    }
    m
}

/// Runs `probe` over `eval` and builds its report.
pub fn evaluate_probe(
    probe: &Probe,
    eval: &FeatureSet,
    tag_frequency: &BTreeMap<String, u64>,
    bins: &FrequencyBins,
    opts: &ReportOptions,
) -> Result<ProbeReport> {
    let predicted = predict_tags(probe, eval)?;
    let gold: Vec<String> = (0..eval.len()).map(|i| eval.tag(i).to_string()).collect();
    let meta: Vec<TokenMeta> = eval.rows.iter().map(TokenMeta::from).collect();
    build_report(&probe.tagset, &gold, &predicted, &meta, tag_frequency, bins, opts)
}

impl ProbeReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ProbeReport = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<report>".into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if r.version != REPORT_VERSION {
            return Err(Error::Data(format!("unsupported report version {}", r.version)));
        }
        Ok(r)
    }

    /// Short human-readable summary.
    pub fn to_text(&self) -> String {
        let pct = |c: &Count| c.accuracy().map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        let mut s = format!(
            "rows {} (excluded {})\naccuracy {}  seen {} ({})  unseen {} ({})\n\nfrequency  rows  accuracy\n",
            self.n_rows,
            self.excluded_rows,
            pct(&self.overall),
            pct(&self.seen),
            self.seen.total,
            pct(&self.unseen),
            self.unseen.total
        );
        for b in &self.bins {
            s.push_str(&format!("{:<10} {:>5}  {}\n", b.label, b.count.total, pct(&b.count)));
        }
        s.push_str("\ntag  rows  train  accuracy\n");
        for t in &self.per_tag {
            s.push_str(&format!(
                "{}  {}  {}  {}\n",
                t.tag,
                t.count.total,
                t.train_frequency,
                pct(&t.count)
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagDelta {
    pub tag: String,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// `accuracy_b - accuracy_a`.
    pub delta: f64,
    pub train_frequency: u64,
}

/// Signed per-tag accuracy differences `b - a`. Tags without evaluation
/// rows are skipped.
pub fn per_tag_delta(a: &ProbeReport, b: &ProbeReport) -> Result<Vec<TagDelta>> {
    if a.labels != b.labels {
        return Err(Error::Comparison("reports use different tagsets".into()));
    }
    if a.n_rows != b.n_rows {
        return Err(Error::Comparison(format!(
            "reports cover {} and {} rows",
            a.n_rows, b.n_rows
        )));
    }
    Ok(a
        .per_tag
        .iter()
        .zip(&b.per_tag)
        .filter_map(|(ta, tb)| {
            let (x, y) = (ta.count.accuracy()?, tb.count.accuracy()?);
            Some(TagDelta {
                tag: ta.tag.clone(),
                accuracy_a: x,
                accuracy_b: y,
                delta: y - x,
                train_frequency: ta.train_frequency,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests;
