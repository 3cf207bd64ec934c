use super::*;
use crate::analysis::ProbeReport;

const TINY_CORPUS: &str = r#"
[corpus]
kind = "synthetic"

[corpus.language]
noun_stems = 30
adj_stems = 10
verb_stems = 10
min_unseen_rate = 0.0
train_sentences = 120
dev_sentences = 20
probe_train_sentences = 40
probe_dev_sentences = 20
test_sentences = 30

[train]
epochs = 1
batch_size = 16

[probe]
max_epochs = 3
"#;

fn tiny(head: &str, variants: &str) -> ExperimentManifest {
    let text = format!("{head}\nseeds = [7]\n{variants}\n{TINY_CORPUS}");
    ExperimentManifest::from_toml(&text).unwrap()
}

const SMALL_MODEL: &str = "model = { d_embed = 8, d_hidden = 8 }";

fn word_vs_char() -> ExperimentManifest {
    tiny(
        "study = \"tiny\"\ntask = \"pos\"\nbaseline = \"word\"",
        &format!(
            "[[variants]]\nname = \"word\"\n{SMALL_MODEL}\n\n[[variants]]\nname = \"dec\"\nside = \"decoder\"\nlayer = 1\n{SMALL_MODEL}\n\n[[variants]]\nname = \"low\"\nlayer = 1\n{SMALL_MODEL}\n"
        ),
    )
}

#[test]
fn builtins_cover_every_study() {
    let all = builtin_manifests();
    assert_eq!(all.len(), 6);
    let names: BTreeSet<&str> = all.iter().map(|m| m.study.as_str()).collect();
    assert_eq!(
        names,
        BTreeSet::from(["word-vs-char", "layers", "target-language", "attention", "char-decoder", "next-word"])
    );
    for m in &all {
        assert!(m.variants.len() >= 2, "{}", m.study);
        assert_eq!(m.preset, Preset::Desk);
        assert_eq!(m.seeds, vec![1, 2, 3]);
        assert_eq!(ExperimentManifest::from_toml(&m.to_toml()).unwrap(), *m);
        assert_eq!(find_manifest(&m.study).unwrap(), *m);
    }
}

#[test]
fn layer_sweep_resolves_each_layer() {
    let m = builtin_manifest("layers").unwrap();
    let layers: Vec<String> = m.resolve().unwrap().iter().map(|v| v.row.layer.to_string()).collect();
    assert_eq!(layers, ["0", "1", "2"]);
}

#[test]
fn next_word_variant_shifts_labels() {
    let m = builtin_manifest("next-word").unwrap();
    let r = m.resolve().unwrap();
    assert!(!r[0].extraction.next_word);
    assert!(r[1].extraction.next_word);
    assert_eq!(r[1].task, Task::NextWordPos);
    assert_eq!(r[1].row.side, Side::Decoder);
}

#[test]
fn autoencoder_variant_targets_self() {
    let m = builtin_manifest("target-language").unwrap();
    let r = m.resolve().unwrap();
    assert_eq!(r.iter().filter(|v| v.autoencoder()).count(), 1);
    assert!(m.train_config(3, true).unwrap().autoencoder);
}

#[test]
fn task_labels() {
    assert_eq!(Task::Morph.label("NOUN.PL.ACC"), "NOUN.PL.ACC");
    assert_eq!(Task::Pos.label("NOUN.PL.ACC"), "NOUN");
    for t in [Task::Pos, Task::Morph, Task::NextWordPos] {
        assert_eq!(t.name().parse::<Task>().unwrap(), t);
    }
    assert_eq!("lemma".parse::<Task>().unwrap_err().category(), "config");
}

#[test]
fn overrides_merge_nested_tables() {
    let base = ModelConfig::preset(Preset::Desk, ReprKind::CharCnn);
    let o: toml::Table = toml::from_str("n_layers = 3\nchar = { kernel_width = 5 }").unwrap();
    let m = merge_overrides(&base, &o).unwrap();
    assert_eq!(m.n_layers, 3);
    assert_eq!(m.char.as_ref().unwrap().kernel_width, 5);
    assert_eq!(m.char.as_ref().unwrap().n_feature_maps, base.char.as_ref().unwrap().n_feature_maps);
    let bad: toml::Table = toml::from_str("layers = 3").unwrap();
    assert_eq!(merge_overrides(&base, &bad).unwrap_err().category(), "config");
}

fn manifest_error(text: &str) -> String {
    let e = ExperimentManifest::from_toml(text).unwrap_err();
    assert!(matches!(e.category(), "manifest" | "config"), "{e}");
    e.to_string()
}

#[test]
fn invalid_manifests_are_rejected() {
    let v = "[[variants]]\nname = \"a\"\n[[variants]]\nname = \"b\"\n";
    let ok = format!("study = \"s\"\ntask = \"pos\"\n{v}");
    ExperimentManifest::from_toml(&ok).unwrap();
    assert!(manifest_error(&format!("study = \"s\"\ntask = \"pos\"\ncolour = 1\n{v}")).contains("colour"));
    assert!(manifest_error(&format!("study = \"s\"\ntask = \"pos\"\nbaseline = \"c\"\n{v}")).contains("baseline"));
    assert!(manifest_error(&format!("study = \"s\"\ntask = \"pos\"\nseeds = []\n{v}")).contains("seeds"));
    assert!(manifest_error(&format!("study = \"s\"\ntask = \"pos\"\nseeds = [1, 1]\n{v}")).contains("seed"));
    assert!(manifest_error("study = \"s\"\ntask = \"pos\"\n[[variants]]\nname = \"a\"\n[[variants]]\nname = \"a\"\n")
        .contains("duplicate"));
    assert!(manifest_error("study = \"s\"\ntask = \"pos\"\n[[variants]]\nname = \"a b\"\n").contains("name"));
    assert!(manifest_error("study = \"s\"\ntask = \"pos\"\nvariants = []\n").contains("no variants"));
    let targets = "study = \"s\"\ntask = \"pos\"\n[[variants]]\nname = \"a\"\n[[variants]]\nname = \"b\"\ntarget = \"fusional\"\n";
    assert!(manifest_error(targets).contains("intersect"));
    ExperimentManifest::from_toml(&targets.replace("task = \"pos\"", "task = \"pos\"\nintersect = true")).unwrap();
    manifest_error("study = \"s\"\ntask = \"pos\"\n[[variants]]\nname = \"a\"\nmodel = { attention = false }\n");
    manifest_error("study = \"s\"\ntask = \"pos\"\n[[variants]]\nname = \"a\"\nmodel = { width = 3 }\n");
    manifest_error("study = \"s\"\ntask = \"pos\"\n[[variants]]\nname = \"a\"\nlayer = 5\n");
    manifest_error(&format!("study = \"s\"\ntask = \"pos\"\nbins = \"1-5\"\n{v}"));
    manifest_error(&format!("study = \"s\"\ntask = \"pos\"\n[train]\nseed = 4\n{v}"));
    manifest_error(&format!("study = \"s\"\ntask = \"pos\"\n[train]\nepochs = 0\n{v}"));
    manifest_error(&format!("study = \"s\"\ntask = \"tags\"\n{v}"));
    assert_eq!(find_manifest("no-such-study").unwrap_err().category(), "manifest");
}

#[test]
fn study_runs_then_reuses_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let opts = StudyOptions {
        out_dir: dir.path().to_path_buf(),
        ..StudyOptions::default()
    };
    let m = word_vs_char();
    let first = run_study(&m, &opts).unwrap();
    let c = &first.counters;
    // Both variants probe the same model.
    assert_eq!((c.models_trained, c.models_cached), (1, 2));
    assert!(c.training_steps > 0);
    assert_eq!((c.features_extracted, c.probes_trained, c.reports_built), (9, 3, 3));
    assert_eq!(first.table.rows.len(), 3);
    assert_eq!(first.table.baseline.as_deref(), Some("word"));
    let out = dir.path().join("tiny");
    for f in ["manifest.toml", "table.csv", "table.txt", "table.json", "runs.jsonl", "models.json", "counters.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = std::fs::read_to_string(out.join("reports/word-seed7.json")).unwrap();
    let report = ProbeReport::from_json(&report).unwrap();
    assert_eq!(report.manifest.as_ref().unwrap()["study"], "tiny");
    assert_eq!(&report, first.report("word", 7).unwrap());
    assert!(first.model("dec", 7).unwrap().test_bleu >= 0.0);
    assert!(out.join("plots/frequency.csv").is_file());
    // Deltas need a shared tagset; decoder rows are tagged on the target side.
    assert!(out.join("plots/tag_delta-low.csv").is_file());
    assert!(!out.join("plots/tag_delta-dec.csv").exists());
    let csv = std::fs::read_to_string(out.join("table.csv")).unwrap();

    let second = run_study(&m, &opts).unwrap();
    let c = &second.counters;
    assert_eq!(c.training_steps, 0);
    assert_eq!((c.models_trained, c.models_cached), (0, 3));
    assert_eq!((c.features_extracted, c.probes_trained, c.reports_built), (0, 0, 0));
    assert_eq!(c.reports_cached, 3);
    assert_eq!(std::fs::read_to_string(out.join("table.csv")).unwrap(), csv);
    assert_eq!(second.reports, first.reports);

    // A new seed only trains what is missing.
    let third = run_study(
        &m,
        &StudyOptions {
            seeds: Some(vec![7, 8]),
            ..opts.clone()
        },
    )
    .unwrap();
    assert_eq!((third.counters.models_trained, third.counters.models_cached), (1, 5));
    assert_eq!(third.table.rows[0].seeds, [7, 8]);
}

#[test]
fn corrupted_cache_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let opts = StudyOptions {
        out_dir: dir.path().to_path_buf(),
        ..StudyOptions::default()
    };
    let m = word_vs_char();
    let r = run_study(&m, &opts).unwrap();
    let key = &r.records[0].model;
    let ckpt = dir.path().join("cache/model").join(key).join("summary.json");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let e = run_study(&m, &opts).unwrap_err();
    assert_eq!(e.category(), "integrity");
    assert!(e.to_string().contains("word/seed7"), "{e}");
}

#[test]
fn target_sweep_trains_on_identical_sources() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny(
        "study = \"targets\"\ntask = \"morph\"\nintersect = true",
        &format!(
            "[[variants]]\nname = \"analytic\"\n{SMALL_MODEL}\n\n[[variants]]\nname = \"fusional\"\ntarget = \"fusional\"\n{SMALL_MODEL}\n\n[[variants]]\nname = \"ae\"\ntarget = \"self\"\n{SMALL_MODEL}\n"
        ),
    );
    let r = run_study(
        &m,
        &StudyOptions {
            out_dir: dir.path().to_path_buf(),
            ..StudyOptions::default()
        },
    )
    .unwrap();
    assert_eq!(r.counters.models_trained, 3);
    assert_eq!(r.model("ae", 7).unwrap().target, "self");
    assert_eq!(r.model("fusional", 7).unwrap().target, "fusional");
    // The autoencoder reads and writes the source vocabulary.
    let ae = r.model("ae", 7).unwrap();
    assert_eq!(ae.src_vocab, ae.tgt_vocab);
    assert_eq!(r.model("analytic", 7).unwrap().src_vocab, ae.src_vocab);
}

#[test]
fn missing_target_tags_fail_decoder_variants() {
    let m = tiny(
        "study = \"s\"\ntask = \"pos\"",
        "[[variants]]\nname = \"a\"\ntarget = \"english\"\n",
    );
    let dir = tempfile::tempdir().unwrap();
    let e = run_study(
        &m,
        &StudyOptions {
            out_dir: dir.path().to_path_buf(),
            ..StudyOptions::default()
        },
    )
    .unwrap_err();
    assert_eq!(e.category(), "manifest");
}

#[test]
fn written_synthetic_corpus_loads_as_files() {
    let m = word_vs_char();
    let CorpusRef::Synthetic { language } = &m.corpus else {
        unreachable!()
    };
    let dir = tempfile::tempdir().unwrap();
    crate::corpus::SyntheticLanguage::new(language)
        .unwrap()
        .generate_all()
        .unwrap()
        .write(dir.path())
        .unwrap();
    let targets = vec!["analytic".to_string(), "fusional".to_string()];
    let files = CorpusRef::Files {
        dir: dir.path().to_path_buf(),
        source: "syn".into(),
        max_len: 1000,
    };
    let a = load_study_data(&m.corpus, &targets).unwrap();
    let b = load_study_data(&files, &targets).unwrap();
    assert_eq!(a.source_lang, b.source_lang);
    for i in 0..3 {
        assert_eq!(a.source_probe[i].sentences, b.source_probe[i].sentences);
    }
    for t in &targets {
        let (x, y) = (a.target(t).unwrap(), b.target(t).unwrap());
        assert_eq!((&x.train, &x.dev, &x.test), (&y.train, &y.dev, &y.test));
        let (dx, dy) = (x.decoder_probe.as_ref().unwrap(), y.decoder_probe.as_ref().unwrap());
        for i in 0..3 {
            assert_eq!(dx[i].sources, dy[i].sources);
            assert_eq!(dx[i].tagged.sentences, dy[i].tagged.sentences);
        }
    }
    assert_eq!(load_study_data(&files, &["german".into()]).unwrap_err().category(), "io");
}
