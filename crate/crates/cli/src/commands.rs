use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use nmtprobe::analysis::{evaluate_probe, export_report_plots, tag_frequency, FrequencyBins, ReportOptions};
use nmtprobe::corpus::{
    load_parallel, load_sentences, load_tagged, write_file, write_sentences, ParallelCorpus, Sentence,
    SyntheticLanguage, SyntheticLanguageSpec,
};
use nmtprobe::experiments::{builtin_manifests, find_manifest, merge_overrides, run_study, StudyOptions};
use nmtprobe::model::{ModelConfig, ReprKind, Seq2Seq, Side};
use nmtprobe::probing::{extract_features, shift_labels_next_word, train_probe, ExtractionSpec, FeatureSet, LayerRef, Probe, ProbeConfig};
use nmtprobe::training::{evaluate_bleu, train_nmt, TrainConfig};
use nmtprobe::{Error, Result};

use crate::{write_run_echo, GlobalConfig, Numeric};

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn emit<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("plain data"));
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Repr {
    Word,
    Char,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub src: PathBuf,
    /// Target side; omit with --autoencoder.
    #[arg(long, required_unless_present = "autoencoder")]
    pub tgt: Option<PathBuf>,
    #[arg(long)]
    pub dev_src: PathBuf,
    #[arg(long, required_unless_present = "autoencoder")]
    pub dev_tgt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "word")]
    pub repr: Repr,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, value_enum, default_value = "on")]
    pub attention: Switch,
    /// Train to reconstruct the source.
    #[arg(long)]
    pub autoencoder: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Longest sentence kept from the training files.
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    /// TOML file overriding model and training fields (`[model]`, `[train]`).
    #[arg(long)]
    pub overrides: Option<PathBuf>,
    /// Checkpoint path; the log and run echo are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_pairs(src: &Path, tgt: Option<&Path>, max_len: usize) -> Result<ParallelCorpus> {
    let loaded = match tgt {
        Some(t) => load_parallel(src, t, max_len)?,
        None => load_parallel(src, src, max_len)?,
    };
    if loaded.dropped_long + loaded.dropped_empty > 0 {
        log::warn!(
            "{}: dropped {} long and {} empty pairs",
            src.display(),
            loaded.dropped_long,
            loaded.dropped_empty
        );
    }
    Ok(loaded.corpus)
}

pub fn train(global: &GlobalConfig, a: TrainArgs) -> Result<()> {
    if global.numeric() == Numeric::Check64 {
        return Err(Error::Config("training runs in 32-bit; check64 applies to translate and extract".into()));
    }
    let preset = global.preset();
    let repr = match a.repr {
        Repr::Word => ReprKind::Word,
        Repr::Char => ReprKind::CharCnn,
    };
    let mut mc = ModelConfig::preset(preset, repr);
    let mut tc = TrainConfig::preset(preset);
    if let Some(p) = &a.overrides {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        if let Some(key) = table.keys().find(|k| *k != "model" && *k != "train") {
            return Err(Error::Config(format!("{}: unknown section {key:?}", p.display())));
        }
        let section = |name: &str| match table.get(name) {
            Some(toml::Value::Table(t)) => Ok(t.clone()),
            None => Ok(toml::Table::new()),
            Some(_) => Err(Error::Config(format!("{}: [{name}] must be a table", p.display()))),
        };
        mc = merge_overrides(&mc, &section("model")?)?;
        tc = merge_overrides(&tc, &section("train")?)?;
    }
    if let Some(l) = a.layers {
        mc.n_layers = l;
    }
    mc.attention = a.attention == Switch::On;
    mc.seed = global.seed();
    tc.seed = global.seed();
    tc.autoencoder = a.autoencoder;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    mc.validate()?;
    tc.validate()?;
    let tgt = if a.autoencoder { None } else { a.tgt.as_deref() };
    let dev_tgt = if a.autoencoder { None } else { a.dev_tgt.as_deref() };
    let train = load_pairs(&a.src, tgt, a.max_len)?;
    let dev = load_pairs(&a.dev_src, dev_tgt, a.max_len)?;
    log::info!("training on {} pairs, {} dev pairs", train.len(), dev.len());
    let (model, train_log) = train_nmt(&train, &dev, &mc, &tc)?;
    for e in &train_log.epochs {
        emit(e);
    }
    model.save(&a.out)?;
    write_file(&sibling(&a.out, ".log.jsonl"), train_log.to_jsonl().as_bytes())?;
    write_run_echo(
        &sibling(&a.out, ".run.json"),
        global,
        json!({
            "train": {
                "src": a.src, "tgt": tgt, "dev_src": a.dev_src, "dev_tgt": dev_tgt, "max_len": a.max_len,
                "out": a.out,
            },
            "model": mc,
            "training": tc,
            "best_epoch": train_log.best_epoch,
        }),
    )
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    /// References; when given, corpus BLEU is printed.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub max_len: usize,
    /// Strict BLEU without add-one smoothing of higher orders.
    #[arg(long)]
    pub no_smoothing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn decode(model: &Seq2Seq<f32>, numeric: Numeric, sources: &[Sentence], max_len: usize) -> Result<Vec<(Sentence, usize)>> {
    let out = match numeric {
        Numeric::Train32 => model.translate_all(sources, max_len)?,
        Numeric::Check64 => model.cast::<f64>().translate_all(sources, max_len)?,
    };
    Ok(out.into_iter().map(|t| (t.tokens, t.unk_count)).collect())
}

pub fn translate(global: &GlobalConfig, a: TranslateArgs) -> Result<()> {
    let model = Seq2Seq::<f32>::load(&a.model)?;
    let sources = load_sentences(&a.src)?;
    let hyps = decode(&model, global.numeric(), &sources, a.max_len)?;
    let unk: usize = hyps.iter().map(|h| h.1).sum();
    let hyps: Vec<Sentence> = hyps.into_iter().map(|h| h.0).collect();
    write_sentences(&a.out, &hyps)?;
    let bleu = match &a.reference {
        Some(r) => Some(evaluate_bleu(&hyps, &load_sentences(r)?, !a.no_smoothing)?),
        None => None,
    };
    let summary = json!({"sentences": hyps.len(), "unk": unk, "bleu": bleu});
    emit(&summary);
    write_run_echo(
        &sibling(&a.out, ".run.json"),
        global,
        json!({"translate": {"model": a.model, "src": a.src, "ref": a.reference, "max_len": a.max_len,
            "smoothing": !a.no_smoothing, "out": a.out}, "result": summary}),
    )
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SideArg {
    Encoder,
    Decoder,
}

fn parse_layer(s: &str) -> std::result::Result<LayerRef, String> {
    s.parse::<LayerRef>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Tagged sentences (`token<TAB>tag`, blank line between sentences).
    #[arg(long)]
    pub tagged: PathBuf,
    #[arg(long, value_enum, default_value = "encoder")]
    pub side: SideArg,
    /// `top`, a layer index, or `pre-softmax` (decoder only).
    #[arg(long, default_value = "top", value_parser = parse_layer)]
    pub layer: LayerRef,
    /// Source sentences the tagged targets translate; decoder side only.
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// Reduce tags to their part of speech.
    #[arg(long)]
    pub pos: bool,
    /// Label each token with the tag of the next token.
    #[arg(long)]
    pub next_word: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn extract(global: &GlobalConfig, a: ExtractArgs) -> Result<()> {
    let model = Seq2Seq::<f32>::load(&a.model)?;
    let mut tagged = load_tagged(&a.tagged)?;
    if a.pos {
        tagged = tagged.map_tags(nmtprobe::corpus::pos_of);
    }
    let sources = a.sources.as_deref().map(load_sentences).transpose()?;
    let spec = ExtractionSpec {
        side: match a.side {
            SideArg::Encoder => Side::Encoder,
            SideArg::Decoder => Side::Decoder,
        },
        layer: a.layer,
        checkpoint: Some(a.model.display().to_string()),
        next_word: false,
    };
    let mut fs = match global.numeric() {
        Numeric::Train32 => extract_features(&model, &spec, &tagged, sources.as_deref())?,
        Numeric::Check64 => extract_features(&model.cast::<f64>(), &spec, &tagged, sources.as_deref())?,
    };
    if a.next_word {
        fs = shift_labels_next_word(&fs);
    }
    fs.write(&a.out)?;
    emit(&json!({"rows": fs.len(), "dim": fs.dim, "tags": fs.tagset.len()}));
    write_run_echo(
        &sibling(&a.out, ".run.json"),
        global,
        json!({"extract": {"model": a.model, "tagged": a.tagged, "sources": a.sources, "pos": a.pos,
            "out": a.out}, "spec": fs.spec}),
    )
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn probe(global: &GlobalConfig, a: ProbeArgs) -> Result<()> {
    let d = ProbeConfig::default();
    let cfg = ProbeConfig {
        dropout: a.dropout.unwrap_or(d.dropout),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        patience: a.patience.unwrap_or(d.patience),
        max_epochs: a.epochs.unwrap_or(d.max_epochs),
        seed: global.seed(),
    };
    let train = FeatureSet::read(&a.train)?;
    let dev = FeatureSet::read(&a.dev)?;
    let (probe, curve) = train_probe(&train, &dev, &cfg)?;
    for e in &curve.epochs {
        emit(e);
    }
    probe.save(&a.out)?;
    let curve_json = serde_json::to_string_pretty(&curve).expect("plain data") + "\n";
    write_file(&sibling(&a.out, ".curve.json"), curve_json.as_bytes())?;
    write_run_echo(
        &sibling(&a.out, ".run.json"),
        global,
        json!({"probe": {"train": a.train, "dev": a.dev, "out": a.out}, "config": cfg, "best_epoch": curve.best_epoch}),
    )
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Features to evaluate on.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    /// Probe training features, for per-tag training frequencies.
    #[arg(long)]
    pub train_features: Option<PathBuf>,
    /// Frequency bin ladder, e.g. `0,1-5,6-100,>100`.
    #[arg(long)]
    pub bins: Option<String>,
    /// Count rows whose tag the probe never saw as errors.
    #[arg(long)]
    pub include_unseen_tags: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn report(global: &GlobalConfig, a: ReportArgs) -> Result<()> {
    let probe = Probe::load(&a.probe)?;
    let eval = FeatureSet::read(&a.features)?;
    let freq = match &a.train_features {
        Some(p) => tag_frequency(&FeatureSet::read(p)?),
        None => BTreeMap::new(),
    };
    let bins: FrequencyBins = a.bins.as_deref().map_or(Ok(FrequencyBins::default()), str::parse)?;
    let opts = ReportOptions {
        include_unseen_tags: a.include_unseen_tags,
    };
    let mut r = evaluate_probe(&probe, &eval, &freq, &bins, &opts)?;
    r.manifest = Some(json!({"features": a.features, "probe": a.probe, "spec": eval.spec, "seed": global.seed()}));
    write_file(&a.out.join("report.json"), r.to_json().as_bytes())?;
    write_file(&a.out.join("report.txt"), r.to_text().as_bytes())?;
    export_report_plots(&[("report", &r)], None, &a.out.join("plots"))?;
    emit(&json!({"rows": r.n_rows, "accuracy": r.accuracy()}));
    write_run_echo(
        &a.out.join("run.json"),
        global,
        json!({"report": {"features": a.features, "probe": a.probe, "train_features": a.train_features,
            "bins": bins.to_string(), "include_unseen_tags": a.include_unseen_tags}}),
    )
}

#[derive(Subcommand, Debug)]
pub enum StudyCommand {
    /// Run a built-in study by name, or a manifest file.
    Run(StudyRunArgs),
    /// List the built-in studies.
    List,
}

#[derive(Args, Debug)]
pub struct StudyRunArgs {
    pub study: String,
    /// `N` runs seeds 1..=N; a comma list names the seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output directory [default: the output root].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Artifact cache [default: `<out>/cache`].
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("--seeds: expected a count or a comma list, got {s:?}"));
    if s.contains(',') {
        return s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = s.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    Ok((1..=n).collect())
}

pub fn study(global: &GlobalConfig, c: StudyCommand) -> Result<()> {
    let a = match c {
        StudyCommand::List => {
            for m in builtin_manifests() {
                println!("{:<16} {}", m.study, m.description);
            }
            return Ok(());
        }
        StudyCommand::Run(a) => a,
    };
    let manifest = find_manifest(&a.study)?;
    let opts = StudyOptions {
        out_dir: a.out.clone().unwrap_or_else(|| global.out_root()),
        cache_dir: a.cache.clone(),
        preset: global.preset.map(Into::into),
        seeds: a.seeds.as_deref().map(parse_seeds).transpose()?,
    };
    let result = run_study(&manifest, &opts)?;
    print!("{}", result.table.to_text());
    emit(&result.counters);
    write_run_echo(
        &result.out_dir.join("run.json"),
        global,
        json!({"study": {"name": a.study, "seeds": result.manifest.seeds, "out": opts.out_dir, "cache": opts.cache_dir},
            "counters": result.counters}),
    )
}

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    /// Language spec (TOML); defaults to the built-in desk language.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory [default: `<out-root>/synthetic`].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gen_synthetic(global: &GlobalConfig, a: GenSyntheticArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticLanguageSpec::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SyntheticLanguageSpec::default(),
    };
    if let Some(s) = global.seed {
        spec.seed = s;
    }
    let out = a.out.unwrap_or_else(|| global.out_root().join("synthetic"));
    let data = SyntheticLanguage::new(&spec)?.generate_all()?;
    data.write(&out)?;
    let sizes: BTreeMap<&str, usize> = data.splits.iter().map(|(k, v)| (k.name(), v.len())).collect();
    emit(&json!({"test_unseen_rate": data.test_unseen_rate, "sentences": sizes}));
    write_run_echo(&out.join("run.json"), global, json!({"gen_synthetic": {"spec": spec, "out": out}}))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_a_count_or_a_list() {
        assert_eq!(parse_seeds("3").unwrap(), [1, 2, 3]);
        assert_eq!(parse_seeds("4, 9").unwrap(), [4, 9]);
        for bad in ["0", "x", "1,,2", "-1"] {
            assert_eq!(parse_seeds(bad).unwrap_err().category(), "config", "{bad}");
        }
    }

    #[test]
    fn sibling_appends_to_the_file_name() {
        assert_eq!(sibling(Path::new("a/m.ckpt"), ".run.json"), Path::new("a/m.ckpt.run.json"));
    }
}
