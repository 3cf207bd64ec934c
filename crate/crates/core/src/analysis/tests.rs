use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::model::{ReprKind, Side};
use crate::probing::LayerRef;

fn tags(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn meta(freq: u64, seen: bool) -> TokenMeta {
    TokenMeta { frequency: freq, seen }
}

fn report(tagset: &[&str], rows: &[(&str, u32, u64, bool)], opts: &ReportOptions) -> ProbeReport {
    let gold: Vec<String> = rows.iter().map(|r| r.0.to_string()).collect();
    let pred: Vec<u32> = rows.iter().map(|r| r.1).collect();
    let m: Vec<TokenMeta> = rows.iter().map(|r| meta(r.2, r.3)).collect();
    let mut freq = BTreeMap::new();
    freq.insert("A".to_string(), 10);
    build_report(&tags(tagset), &gold, &pred, &m, &freq, &FrequencyBins::default(), opts).unwrap()
}

#[test]
fn default_bins_and_parsing() {
    let b = FrequencyBins::default();
    assert_eq!(b.to_string(), "0,1-5,6-10,11-20,21-50,51-100,101-500,501-1000,>1000");
    assert_eq!(b.len(), 9);
    for (f, i) in [(0, 0), (1, 1), (5, 1), (6, 2), (20, 3), (21, 4), (100, 5), (500, 6), (1000, 7), (1001, 8), (u64::MAX, 8)] {
        assert_eq!(b.index(f), i, "frequency {f}");
    }
    let custom: FrequencyBins = "0-2, 3, >3".parse().unwrap();
    assert_eq!(custom.to_string(), "0-2,3,>3");
    for bad in ["1-5,>5", "0,2-5,>5", "0,1-5", ">0,1", "0,x", "0,5-1,>5"] {
        assert_eq!(bad.parse::<FrequencyBins>().unwrap_err().category(), "config", "{bad}");
    }
}

#[test]
fn all_correct_gives_diagonal_matrix() {
    let rows = [("A", 0, 0, false), ("B", 1, 3, true), ("B", 1, 2000, true), ("C", 2, 7, true)];
    let r = report(&["A", "B", "C"], &rows, &ReportOptions::default());
    assert_eq!(r.accuracy(), 1.0);
    assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
}

#[test]
fn inverted_predictions_give_anti_diagonal_matrix() {
    let rows = [("A", 1, 1, true), ("B", 0, 1, true), ("A", 1, 0, false)];
    let r = report(&["A", "B"], &rows, &ReportOptions::default());
    assert_eq!(r.accuracy(), 0.0);
    assert_eq!(r.confusion, vec![vec![0, 2], vec![1, 0]]);
}

// gold, predicted id (A=0 B=1 C=2), training frequency, seen
const FIXTURE: [(&str, u32, u64, bool); 20] = [
    ("A", 0, 0, false),
    ("A", 0, 3, true),
    ("A", 1, 0, false),
    ("A", 0, 7, true),
    ("B", 1, 12, true),
    ("B", 0, 0, false),
    ("B", 1, 30, true),
    ("B", 1, 75, true),
    ("C", 2, 200, true),
    ("C", 1, 0, false),
    ("C", 2, 700, true),
    ("C", 2, 1500, true),
    ("A", 2, 2, true),
    ("B", 1, 2, true),
    ("C", 0, 9, true),
    ("A", 0, 60, true),
    ("B", 2, 0, false),
    ("C", 2, 15, true),
    ("A", 0, 45, true),
    ("D", 0, 1, true),
];

#[test]
fn twenty_row_fixture_matches_hand_counts() {
    let r = report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default());
    assert_eq!(r.n_rows, 19);
    assert_eq!(r.excluded_rows, 1);
    assert_eq!(r.confusion, vec![vec![5, 1, 1], vec![1, 4, 1], vec![1, 1, 4]]);
    assert_eq!((r.overall.correct, r.overall.total), (13, 19));
    assert_eq!((r.seen.correct, r.seen.total), (12, 14));
    assert_eq!((r.unseen.correct, r.unseen.total), (1, 5));
    let bins: Vec<(u64, u64)> = r.bins.iter().map(|b| (b.count.correct, b.count.total)).collect();
    assert_eq!(bins, vec![(1, 5), (2, 3), (1, 2), (2, 2), (2, 2), (2, 2), (1, 1), (1, 1), (1, 1)]);
    let per_tag: Vec<(&str, u64, u64, u64)> = r
        .per_tag
        .iter()
        .map(|t| (t.tag.as_str(), t.count.correct, t.count.total, t.train_frequency))
        .collect();
    assert_eq!(per_tag, vec![("A", 5, 7, 10), ("B", 4, 6, 0), ("C", 4, 6, 0)]);

    let inc = report(&["A", "B", "C"], &FIXTURE, &ReportOptions { include_unseen_tags: true });
    assert_eq!(inc.labels, tags(&["A", "B", "C", "D"]));
    assert_eq!((inc.overall.correct, inc.overall.total, inc.excluded_rows), (13, 20, 0));
    assert_eq!(inc.confusion[3], vec![1, 0, 0, 0]);
    assert_eq!(inc.bins[1].count.total, 4);
}

#[test]
fn report_input_errors() {
    let t = tags(&["A"]);
    let f = BTreeMap::new();
    let b = FrequencyBins::default();
    let o = ReportOptions::default();
    let e = build_report(&t, &tags(&["A", "A"]), &[0], &[meta(0, true); 2], &f, &b, &o).unwrap_err();
    assert_eq!(e.category(), "data");
    let e = build_report(&t, &tags(&["A"]), &[3], &[meta(0, true)], &f, &b, &o).unwrap_err();
    assert_eq!(e.category(), "data");
}

#[test]
fn json_round_trip_is_byte_identical() {
    let mut r = report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default());
    r.manifest = Some(serde_json::json!({"variant": "word", "seed": 1}));
    let s = r.to_json();
    let back = ProbeReport::from_json(&s).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.to_json(), s);
    assert_eq!(report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default()).to_json(), report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default()).to_json());
    assert!(r.to_text().contains("accuracy 68.42"));
}

#[test]
fn identical_reports_have_zero_deltas() {
    let r = report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default());
    let d = per_tag_delta(&r, &r).unwrap();
    assert_eq!(d.len(), 3);
    assert!(d.iter().all(|x| x.delta == 0.0));
}

#[test]
fn perfect_against_chance_gives_complement() {
    let a = report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default());
    let perfect: Vec<(&str, u32, u64, bool)> = FIXTURE
        .iter()
        .map(|&(g, _, f, s)| (g, ["A", "B", "C"].iter().position(|&t| t == g).unwrap_or(0) as u32, f, s))
        .collect();
    let b = report(&["A", "B", "C"], &perfect, &ReportOptions::default());
    assert_eq!(b.accuracy(), 1.0);
    for d in per_tag_delta(&a, &b).unwrap() {
        let at = a.per_tag.iter().find(|t| t.tag == d.tag).unwrap();
        assert_eq!(d.delta, 1.0 - at.count.accuracy().unwrap());
    }
}

#[test]
fn deltas_match_recount_from_raw_rows() {
    let a = report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default());
    let shifted: Vec<(&str, u32, u64, bool)> = FIXTURE.iter().map(|&(g, p, f, s)| (g, (p + 1) % 3, f, s)).collect();
    let b = report(&["A", "B", "C"], &shifted, &ReportOptions::default());
    let recount = |rows: &[(&str, u32, u64, bool)], tag: &str, id: u32| {
        let hits = rows.iter().filter(|r| r.0 == tag && r.1 == id).count() as f64;
        hits / rows.iter().filter(|r| r.0 == tag).count() as f64
    };
    for (i, d) in per_tag_delta(&a, &b).unwrap().iter().enumerate() {
        let expect = recount(&shifted, &d.tag, i as u32) - recount(&FIXTURE, &d.tag, i as u32);
        assert!((d.delta - expect).abs() < 1e-15, "{}", d.tag);
    }
}

#[test]
fn delta_rejects_mismatched_reports() {
    let a = report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default());
    let b = report(&["A", "B"], &[("A", 0, 1, true)], &ReportOptions::default());
    assert_eq!(per_tag_delta(&a, &b).unwrap_err().category(), "comparison");
    let c = report(&["A", "B", "C"], &FIXTURE[..10], &ReportOptions::default());
    assert_eq!(per_tag_delta(&a, &c).unwrap_err().category(), "comparison");
}

fn variant(name: &str, reference: Option<&str>) -> Variant {
    Variant {
        name: name.into(),
        repr: if name.starts_with("char") { ReprKind::CharCnn } else { ReprKind::Word },
        side: Side::Encoder,
        layer: LayerRef::Top,
        attention: true,
        target: "analytic".into(),
        task: "pos".into(),
        reference: reference.map(Into::into),
    }
}

fn fixed_report(correct: u64, total: u64) -> ProbeReport {
    let rows: Vec<(&str, u32, u64, bool)> = (0..total).map(|i| ("A", (i >= correct) as u32, 0, false)).collect();
    report(&["A", "B"], &rows, &ReportOptions::default())
}

fn two_run_fixture() -> (Vec<RunRecord>, BTreeMap<String, ProbeReport>) {
    let mut reports = BTreeMap::new();
    reports.insert("w1".to_string(), fixed_report(6, 8));
    reports.insert("w2".to_string(), fixed_report(7, 8));
    reports.insert("c1".to_string(), fixed_report(8, 8));
    reports.insert("c2".to_string(), fixed_report(7, 8));
    let rec = |v: &Variant, seed, rep: &str, bleu| RunRecord {
        variant: v.clone(),
        seed,
        report: rep.into(),
        model: format!("model-{rep}"),
        bleu,
    };
    let w = variant("word", Some("encoder-word-pos"));
    let c = variant("char", Some("encoder-char-pos"));
    let records = vec![
        rec(&w, 1, "w1", Some(10.0)),
        rec(&c, 1, "c1", Some(12.0)),
        rec(&w, 2, "w2", Some(11.0)),
        rec(&c, 2, "c2", None),
    ];
    (records, reports)
}

#[test]
fn comparison_aggregates_seeds() {
    let (records, reports) = two_run_fixture();
    let t = compare_experiments("word vs char", &records, &reports, Some("word"), &PaperReference::bundled()).unwrap();
    assert_eq!(t.rows.len(), 2);
    let w = t.row("word").unwrap();
    assert_eq!(w.seeds, vec![1, 2]);
    assert!((w.accuracy.mean - 81.25).abs() < 1e-12);
    // sample stdev of 75 and 87.5
    assert!((w.accuracy.std - 12.5 / 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(w.bleu.unwrap().mean, 10.5);
    assert_eq!(w.delta, Some(0.0));
    assert_eq!(w.sources, vec!["w1".to_string(), "w2".to_string()]);
    assert_eq!(w.unseen_accuracy.unwrap().mean, w.accuracy.mean);
    let c = t.row("char").unwrap();
    assert!((c.delta.unwrap() - (93.75 - 81.25)).abs() < 1e-12);
    assert!(c.bleu.is_none(), "one seed lacks BLEU");
    assert_eq!(c.reference.as_ref().unwrap().value, "95.35");
    let text = t.to_text();
    assert!(text.contains("89.62 (Table 2)") && text.contains("95.35 (Table 2)"));
    assert!(text.contains("81.25 ± 8.84"));
}

#[test]
fn comparison_errors_on_dangling_references() {
    let (mut records, reports) = two_run_fixture();
    let r = PaperReference::bundled();
    let e = compare_experiments("t", &records, &reports, Some("nope"), &r).unwrap_err();
    assert_eq!(e.category(), "manifest");
    records[0].report = "missing".into();
    let e = compare_experiments("t", &records, &reports, None, &r).unwrap_err();
    assert_eq!(e.category(), "manifest");
    let (mut records, _) = two_run_fixture();
    records[0].variant.reference = Some("no-such-entry".into());
    records[2].variant.reference = Some("no-such-entry".into());
    assert_eq!(compare_experiments("t", &records, &reports, None, &r).unwrap_err().category(), "manifest");
    let (mut records, _) = two_run_fixture();
    records[2].variant.attention = false;
    assert_eq!(compare_experiments("t", &records, &reports, None, &r).unwrap_err().category(), "manifest");
}

#[test]
fn bundled_reference_keeps_printed_values() {
    let r = PaperReference::bundled();
    let v = |k: &str| r.get(k).unwrap().value.as_str();
    assert_eq!((v("encoder-word-pos"), v("encoder-char-pos")), ("89.62", "95.35"));
    assert_eq!((v("no-attention-encoder-pos"), v("no-attention-decoder-pos")), ("74.10", "85.54"));
    assert_eq!(v("decoder-char-pos"), "91.11");
    assert!(PaperReference::from_toml("[[entry]]\nkey='k'\ntable='t'\ndescription='d'\nvalue='x'").is_err());
}

#[test]
fn plot_series_shapes_and_values() {
    let a = report(&["A", "B", "C"], &FIXTURE, &ReportOptions::default());
    let b = report(&["A", "B", "C"], &FIXTURE[..12], &ReportOptions::default());
    let named = [("word", &a), ("char", &b)];
    let freq = frequency_curve_csv(&named);
    let lines: Vec<&str> = freq.lines().collect();
    assert_eq!(lines[0], "series,x,y");
    assert_eq!(lines.len() - 1, a.bins.len() * 2);
    for (line, bin) in lines[1..].iter().zip(&a.bins) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1], bin.label);
        assert_eq!(f[2].parse::<f64>().unwrap(), bin.count.accuracy().unwrap());
    }
    assert_eq!(confusion_csv(&a).lines().count() - 1, a.labels.len().pow(2));
    let su = seen_unseen_csv(&named);
    assert!(su.contains(&format!("word,unseen,{}", a.unseen.accuracy().unwrap())));
    let d = per_tag_delta(&a, &a).unwrap();
    assert_eq!(tag_bubble_csv(&d).lines().nth(1), Some("A,10,0"));

    let dir = tempfile::tempdir().unwrap();
    let files = export_report_plots(&named, Some(&d), dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), freq);
}

#[test]
fn layer_curve_follows_table_rows() {
    let (records, reports) = two_run_fixture();
    let mut t = compare_experiments("t", &records, &reports, None, &PaperReference::bundled()).unwrap();
    t.rows[1].variant.layer = LayerRef::Index(1);
    let csv = layer_curve_csv(&t);
    assert_eq!(csv, "series,x,y\nword-encoder-pos,top,81.25\nchar-encoder-pos,1,93.75\n");
}

fn arb_rows() -> impl Strategy<Value = Vec<(u32, u32, u64, bool)>> {
    prop::collection::vec((0u32..5, 0u32..4, 0u64..3000, any::<bool>()), 1..200)
}

proptest! {
    #[test]
    fn report_invariants(rows in arb_rows(), include in any::<bool>()) {
        let tagset = tags(&["T0", "T1", "T2", "T3"]);
        let gold: Vec<String> = rows.iter().map(|r| format!("T{}", r.0)).collect();
        let pred: Vec<u32> = rows.iter().map(|r| r.1).collect();
        let m: Vec<TokenMeta> = rows.iter().map(|r| meta(r.2, r.3)).collect();
        let opts = ReportOptions { include_unseen_tags: include };
        let r = build_report(&tagset, &gold, &pred, &m, &BTreeMap::new(), &FrequencyBins::default(), &opts).unwrap();
        let trace: u64 = (0..r.labels.len()).map(|i| r.confusion[i][i]).sum();
        let total: u64 = r.confusion.iter().flatten().sum();
        prop_assert_eq!(r.n_rows as u64, total);
        prop_assert_eq!(r.n_rows + r.excluded_rows, rows.len());
        if total > 0 {
            prop_assert_eq!(r.accuracy(), trace as f64 / total as f64);
            let weighted: f64 = r.bins.iter().filter_map(|b| Some(b.count.accuracy()? * b.count.total as f64)).sum::<f64>() / total as f64;
            prop_assert!((weighted - r.accuracy()).abs() < 1e-12);
        }
        for (i, t) in r.per_tag.iter().enumerate() {
            prop_assert_eq!(t.count.total, r.confusion[i].iter().sum::<u64>());
        }
        prop_assert_eq!(r.seen.total + r.unseen.total, r.overall.total);
        prop_assert_eq!(r.seen.correct + r.unseen.correct, r.overall.correct);
    }
}
