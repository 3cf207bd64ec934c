use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::cache::{sha256_hex, ArtifactCache};
use super::data::{load_study_data, ProbeSplit, StudyData, SELF_TARGET};
use super::{ExperimentManifest, ResolvedVariant};
use crate::analysis::{
    compare_experiments, evaluate_probe, export_report_plots, export_table_plots, per_tag_delta, tag_bubble_csv,
    tag_frequency, ComparisonTable, PaperReference, ProbeReport, ReportOptions, RunRecord,
};
use crate::corpus::{intersect_corpora, write_file, ParallelCorpus, Sentence, TaggedCorpus};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset, Seq2Seq};
use crate::probing::{extract_features, shift_labels_next_word, train_probe, FeatureSet, Probe};
use crate::training::{evaluate_bleu, train_nmt, TrainConfig};

#[derive(Clone, Debug, Default)]
pub struct StudyOptions {
    /// Study outputs go to `<out_dir>/<study>`.
    pub out_dir: PathBuf,
    /// Shared artifact cache; defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seeds: Option<Vec<u64>>,
}

/// Work done versus work reused during one study run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub models_trained: usize,
    pub models_cached: usize,
    pub training_steps: u64,
    pub features_extracted: usize,
    pub features_cached: usize,
    pub probes_trained: usize,
    pub probes_cached: usize,
    pub reports_built: usize,
    pub reports_cached: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub target: String,
    pub test_bleu: f64,
    /// Unknown-word tokens in the greedy test translations.
    pub test_unk: usize,
    pub best_epoch: usize,
    pub steps: u64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

#[derive(Clone, Debug)]
pub struct StudyResult {
    /// The manifest as run, after preset and seed overrides.
    pub manifest: ExperimentManifest,
    pub table: ComparisonTable,
    pub records: Vec<RunRecord>,
    pub reports: BTreeMap<String, ProbeReport>,
    pub models: BTreeMap<String, ModelSummary>,
    pub counters: RunCounters,
    pub out_dir: PathBuf,
}

impl StudyResult {
    fn record(&self, variant: &str, seed: u64) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.variant.name == variant && r.seed == seed)
    }

    pub fn report(&self, variant: &str, seed: u64) -> Option<&ProbeReport> {
        self.reports.get(&self.record(variant, seed)?.report)
    }

    pub fn model(&self, variant: &str, seed: u64) -> Option<&ModelSummary> {
        self.models.get(&self.record(variant, seed)?.model)
    }
}

fn digest<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("plain data"))
}

fn stage(name: &str, variant: &str, seed: u64) -> impl FnOnce(Error) -> Error {
    let (stage, variant) = (name.to_string(), format!("{variant}/seed{seed}"));
    move |e| Error::Stage {
        stage,
        variant,
        source: Box::new(e),
    }
}

/// Corpora a variant trains, is tested and probed on.
struct VariantData<'a> {
    train: &'a ParallelCorpus,
    dev: &'a ParallelCorpus,
    test: ParallelCorpus,
    /// Encoder probing reads the first, decoder probing both.
    probe: [(TaggedCorpus, Option<Vec<Sentence>>); 3],
}

struct Runner<'a> {
    manifest: &'a ExperimentManifest,
    cache: ArtifactCache,
    data: StudyData,
    /// Training corpus per target after any intersection.
    train: BTreeMap<String, ParallelCorpus>,
    base_target: String,
    models: HashMap<String, Rc<Seq2Seq<f32>>>,
    counters: RunCounters,
}

#[derive(Serialize)]
struct ModelKeyInput<'a> {
    train: &'a str,
    dev: &'a str,
    model: &'a ModelConfig,
    training: &'a TrainConfig,
}

impl<'a> Runner<'a> {
    fn variant_data(&self, v: &ResolvedVariant) -> Result<VariantData<'_>> {
        let base = if v.autoencoder() { &self.base_target } else { &v.target };
        let t = self.data.target(base)?;
        let train = &self.train[base];
        let probe = ProbeSplit::ALL.map(|s| -> Result<(TaggedCorpus, Option<Vec<Sentence>>)> {
            let i = s as usize;
            let src = &self.data.source_probe[i];
            if v.row.side == crate::model::Side::Encoder {
                return Ok((src.map_tags(|g| v.task.label(g)), None));
            }
            if v.autoencoder() {
                let sources = src.sentences.iter().map(|s| s.tokens.clone()).collect();
                return Ok((src.map_tags(|g| v.task.label(g)), Some(sources)));
            }
            let dp = t
                .decoder_probe
                .as_ref()
                .ok_or_else(|| Error::Manifest(format!("target {base} has no target-side tagged data")))?;
            Ok((dp[i].tagged.map_tags(|g| v.task.label(g)), Some(dp[i].sources.clone())))
        });
        let [a, b, c] = probe;
        Ok(VariantData {
            train,
            dev: &t.dev,
            test: if v.autoencoder() { t.test.as_autoencoder() } else { t.test.clone() },
            probe: [a?, b?, c?],
        })
    }

    fn ensure_model(&mut self, v: &ResolvedVariant, seed: u64) -> Result<(String, ModelSummary)> {
        let mut mc = v.model.clone();
        mc.seed = seed;
        let tc = self.manifest.train_config(seed, v.autoencoder())?;
        let vd = self.variant_data(v)?;
        let (train_digest, dev_digest) = (digest(vd.train), digest(vd.dev));
        let key = ArtifactCache::key(
            "model",
            &ModelKeyInput {
                train: &train_digest,
                dev: &dev_digest,
                model: &mc,
                training: &tc,
            },
        );
        let names = ["model.ckpt", "train_log.jsonl", "summary.json"];
        if self.cache.has("model", &key, &names) {
            let bytes = self.cache.require("model", &key, "summary.json")?;
            let summary: ModelSummary = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Integrity(format!("model summary {key}: {e}")))?;
            self.counters.models_cached += 1;
            return Ok((key, summary));
        }
        log::info!("training {} seed {seed} ({})", v.row.name, v.target);
        let test = vd.test.clone();
        let (model, log) = train_nmt(vd.train, vd.dev, &mc, &tc)?;
        let sources: Vec<Sentence> = test.sources().cloned().collect();
        let refs: Vec<Sentence> = test.targets().cloned().collect();
        let hyps = model.translate_all(&sources, tc.max_decode_len)?;
        let test_unk = hyps.iter().map(|h| h.unk_count).sum();
        let hyps: Vec<Sentence> = hyps.into_iter().map(|h| h.tokens).collect();
        let summary = ModelSummary {
            target: v.target.clone(),
            test_bleu: evaluate_bleu(&hyps, &refs, true)?,
            test_unk,
            best_epoch: log.best_epoch,
            steps: log.steps,
            src_vocab: model.src_vocab.len(),
            tgt_vocab: model.tgt_vocab.len(),
        };
        self.cache.put_inputs(
            "model",
            &key,
            &serde_json::json!({"train": train_digest, "dev": dev_digest, "model": mc, "training": tc}),
        )?;
        self.cache.put("model", &key, "model.ckpt", &model.to_bytes()?)?;
        self.cache.put("model", &key, "train_log.jsonl", log.to_jsonl().as_bytes())?;
        let mut body = serde_json::to_string_pretty(&summary).expect("plain data");
        body.push('\n');
        self.cache.put("model", &key, "summary.json", body.as_bytes())?;
        self.counters.models_trained += 1;
        self.counters.training_steps += log.steps;
        self.models.insert(key.clone(), Rc::new(model));
        Ok((key, summary))
    }

    fn model(&mut self, key: &str) -> Result<Rc<Seq2Seq<f32>>> {
        if let Some(m) = self.models.get(key) {
            return Ok(m.clone());
        }
        let m = Rc::new(Seq2Seq::from_bytes(&self.cache.require("model", key, "model.ckpt")?)?);
        self.models.insert(key.to_string(), m.clone());
        Ok(m)
    }

    fn ensure_features(&mut self, v: &ResolvedVariant, model_key: &str, split: ProbeSplit) -> Result<(String, FeatureSet)> {
        let vd = self.variant_data(v)?;
        let (tagged, sources) = &vd.probe[split as usize];
        let inputs = serde_json::json!({
            "model": model_key,
            "spec": v.extraction,
            "task": v.task,
            "split": split.name(),
            "tagged": digest(tagged),
            "sources": sources.as_ref().map(digest),
        });
        let key = ArtifactCache::key("features", &inputs);
        let origin = self.cache.entry_dir("features", &key).join("features.bin");
        if self.cache.has("features", &key, &["features.bin", "features.meta.tsv"]) {
            let bytes = self.cache.require("features", &key, "features.bin")?;
            let meta = self.cache.require("features", &key, "features.meta.tsv")?;
            let meta = String::from_utf8(meta).map_err(|_| Error::Integrity(format!("{key}: metadata is not UTF-8")))?;
            self.counters.features_cached += 1;
            return Ok((key, FeatureSet::from_parts(&bytes, &meta, &origin)?));
        }
        let (tagged, sources) = (tagged.clone(), sources.clone());
        let model = self.model(model_key)?;
        let mut spec = v.extraction.clone();
        spec.next_word = false;
        let mut fs = extract_features(model.as_ref(), &spec, &tagged, sources.as_deref())?;
        if v.task.next_word() {
            fs = shift_labels_next_word(&fs);
        }
        fs.spec.checkpoint = Some(model_key.to_string());
        self.cache.put_inputs("features", &key, &inputs)?;
        self.cache.put("features", &key, "features.bin", &fs.to_bytes())?;
        self.cache.put("features", &key, "features.meta.tsv", fs.meta_tsv().as_bytes())?;
        self.counters.features_extracted += 1;
        Ok((key, fs))
    }

    fn run_variant(&mut self, v: &ResolvedVariant, seed: u64) -> Result<(RunRecord, ProbeReport, ModelSummary)> {
        let name = v.row.name.as_str();
        let (model_key, summary) = self.ensure_model(v, seed).map_err(stage("train", name, seed))?;
        let mut feats = Vec::with_capacity(3);
        for split in ProbeSplit::ALL {
            feats.push(
                self.ensure_features(v, &model_key, split)
                    .map_err(stage("extract", name, seed))?,
            );
        }
        let [(train_key, train_fs), (dev_key, dev_fs), (test_key, test_fs)]: [(String, FeatureSet); 3] =
            feats.try_into().expect("three splits");
        let pc = self.manifest.probe_config(seed);
        let probe_inputs = serde_json::json!({"train": train_key, "dev": dev_key, "probe": pc});
        let probe_key = ArtifactCache::key("probe", &probe_inputs);
        let probe = if self.cache.has("probe", &probe_key, &["probe.ckpt"]) {
            self.counters.probes_cached += 1;
            Probe::from_bytes(&self.cache.require("probe", &probe_key, "probe.ckpt")?).map_err(stage("probe", name, seed))?
        } else {
            log::info!("probing {name} seed {seed}");
            let (probe, curve) = train_probe(&train_fs, &dev_fs, &pc).map_err(stage("probe", name, seed))?;
            self.cache.put_inputs("probe", &probe_key, &probe_inputs)?;
            let curve_json = serde_json::to_string_pretty(&curve).expect("plain data");
            self.cache.put("probe", &probe_key, "curve.json", curve_json.as_bytes())?;
            self.cache.put("probe", &probe_key, "probe.ckpt", &probe.to_bytes()?)?;
            self.counters.probes_trained += 1;
            probe
        };
        let bins = self.manifest.frequency_bins()?;
        let opts = ReportOptions {
            include_unseen_tags: self.manifest.include_unseen_tags,
        };
        let report_inputs = serde_json::json!({"probe": probe_key, "test": test_key, "bins": bins, "options": opts});
        let report_key = ArtifactCache::key("report", &report_inputs);
        let report = match self.cache.get("report", &report_key, "report.json")? {
            Some(bytes) => {
                self.counters.reports_cached += 1;
                let text = String::from_utf8(bytes).map_err(|_| Error::Integrity(format!("report {report_key} is not UTF-8")))?;
                ProbeReport::from_json(&text)?
            }
            None => {
                let mut r = evaluate_probe(&probe, &test_fs, &tag_frequency(&train_fs), &bins, &opts)
                    .map_err(stage("report", name, seed))?;
                r.manifest = Some(serde_json::json!({
                    "study": self.manifest.study,
                    "variant": v.row,
                    "seed": seed,
                    "preset": self.manifest.preset,
                    "model": model_key,
                    "probe": probe_key,
                    "features": test_key,
                }));
                self.cache.put_inputs("report", &report_key, &report_inputs)?;
                self.cache.put("report", &report_key, "report.json", r.to_json().as_bytes())?;
                self.counters.reports_built += 1;
                r
            }
        };
        let record = RunRecord {
            variant: v.row.clone(),
            seed,
            report: report_key,
            model: model_key,
            bleu: Some(summary.test_bleu),
        };
        Ok((record, report, summary))
    }
}

/// Restricts the targets' training corpora to their common source
/// sentences and checks that the source sides came out identical.
fn intersect_targets(data: &StudyData, targets: &[String]) -> Result<BTreeMap<String, ParallelCorpus>> {
    let corpora: Vec<ParallelCorpus> = targets
        .iter()
        .map(|t| data.target(t).map(|d| d.train.clone()))
        .collect::<Result<_>>()?;
    let out = if corpora.len() >= 2 {
        let inter = intersect_corpora(&corpora)?;
        if let Some(w) = inter.warning {
            return Err(Error::Data(w));
        }
        inter.corpora
    } else {
        corpora
    };
    let sources: BTreeSet<String> = out
        .iter()
        .map(|c| digest(&c.sources().collect::<Vec<_>>()))
        .collect();
    if sources.len() > 1 {
        return Err(Error::Integrity("intersected corpora differ on the source side".into()));
    }
    Ok(targets.iter().cloned().zip(out).collect())
}

/// Runs every variant for every seed, reusing cached artifacts, and writes
/// the table, per-run reports and plot data to `<out_dir>/<study>`.
pub fn run_study(manifest: &ExperimentManifest, opts: &StudyOptions) -> Result<StudyResult> {
    let mut m = manifest.clone();
    if let Some(p) = opts.preset {
        m.preset = p;
    }
    if let Some(s) = &opts.seeds {
        m.seeds = s.clone();
    }
    m.validate()?;
    let variants = m.resolve()?;
    let mut real: Vec<String> = Vec::new();
    for v in &variants {
        if !v.autoencoder() && !real.contains(&v.target) {
            real.push(v.target.clone());
        }
    }
    let base_target = real.first().cloned().unwrap_or_else(|| m.target.clone());
    if base_target == SELF_TARGET {
        return Err(Error::Manifest("an autoencoder needs a translation target to take sources from".into()));
    }
    if !real.contains(&base_target) {
        real.push(base_target.clone());
    }
    let data = load_study_data(&m.corpus, &real)?;
    let train = if m.intersect {
        intersect_targets(&data, &real)?
    } else {
        real.iter()
            .map(|t| data.target(t).map(|d| (t.clone(), d.train.clone())))
            .collect::<Result<_>>()?
    };
    let out_dir = opts.out_dir.join(&m.study);
    let cache_dir = opts.cache_dir.clone().unwrap_or_else(|| opts.out_dir.join("cache"));
    let mut runner = Runner {
        manifest: &m,
        cache: ArtifactCache::new(cache_dir),
        data,
        train,
        base_target,
        models: HashMap::new(),
        counters: RunCounters::default(),
    };
    let mut records = Vec::new();
    let mut reports = BTreeMap::new();
    let mut models = BTreeMap::new();
    for &seed in &m.seeds {
        for v in &variants {
            let (rec, rep, summary) = runner.run_variant(v, seed)?;
            models.insert(rec.model.clone(), summary);
            reports.insert(rec.report.clone(), rep);
            records.push(rec);
        }
    }
    let counters = runner.counters.clone();
    let table = compare_experiments(&m.study, &records, &reports, m.baseline.as_deref(), &PaperReference::bundled())?;
    let result = StudyResult {
        manifest: m,
        table,
        records,
        reports,
        models,
        counters,
        out_dir,
    };
    write_outputs(&result)?;
    Ok(result)
}

fn write_outputs(r: &StudyResult) -> Result<()> {
    let dir = &r.out_dir;
    let text = |name: &str, body: &str| write_file(&dir.join(name), body.as_bytes());
    text("manifest.toml", &r.manifest.to_toml())?;
    text("table.csv", &r.table.to_csv())?;
    text("table.txt", &r.table.to_text())?;
    text(
        "table.json",
        &(serde_json::to_string_pretty(&r.table).expect("plain data") + "\n"),
    )?;
    let records: String = r
        .records
        .iter()
        .map(|x| serde_json::to_string(x).expect("plain data") + "\n")
        .collect();
    text("runs.jsonl", &records)?;
    text(
        "models.json",
        &(serde_json::to_string_pretty(&r.models).expect("plain data") + "\n"),
    )?;
    text(
        "counters.json",
        &(serde_json::to_string_pretty(&r.counters).expect("plain data") + "\n"),
    )?;
    for rec in &r.records {
        text(
            &format!("reports/{}-seed{}.json", rec.variant.name, rec.seed),
            &r.reports[&rec.report].to_json(),
        )?;
    }
    let plots = dir.join("plots");
    export_table_plots(&r.table, &plots)?;
    if let Some(&seed) = r.manifest.seeds.first() {
        let named: Vec<(&str, &ProbeReport)> = r
            .table
            .rows
            .iter()
            .filter_map(|row| Some((row.variant.name.as_str(), r.report(&row.variant.name, seed)?)))
            .collect();
        export_report_plots(&named, None, &plots)?;
        if let Some(base) = r.manifest.baseline.as_deref().and_then(|b| r.report(b, seed)) {
            for (name, rep) in &named {
                if Some(*name) == r.manifest.baseline.as_deref() {
                    continue;
                }
                if let Ok(d) = per_tag_delta(base, rep) {
                    write_file(&plots.join(format!("tag_delta-{name}.csv")), tag_bubble_csv(&d).as_bytes())?;
                }
            }
        }
    }
    Ok(())
}
