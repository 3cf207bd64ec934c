//! Fixture shared by the golden-file test and the acceptance run.

use std::collections::BTreeMap;

use nmtprobe::analysis::{
    build_report, compare_experiments, ComparisonTable, FrequencyBins, PaperReference, ReportOptions, RunRecord,
    TokenMeta, Variant,
};
use nmtprobe::model::{ReprKind, Side};
use nmtprobe::probing::LayerRef;

pub const GOLDEN_CSV: &str = include_str!("../golden/comparison.csv");

fn variant(name: &str, repr: ReprKind, reference: &str) -> Variant {
    Variant {
        name: name.into(),
        repr,
        side: Side::Encoder,
        layer: LayerRef::Top,
        attention: true,
        target: "analytic".into(),
        task: "pos".into(),
        reference: Some(reference.into()),
    }
}

/// Two variants over two seeds. Word: 3/4 then 4/4 correct, with the one
/// unseen token wrong then right. Char: 4/4 on both seeds.
pub fn golden_table() -> ComparisonTable {
    let tagset = vec!["A".to_string(), "B".to_string()];
    let gold: Vec<String> = ["A", "A", "B", "B"].iter().map(|s| s.to_string()).collect();
    let meta: Vec<TokenMeta> = [(3, true), (0, false), (10, true), (200, true)]
        .iter()
        .map(|&(frequency, seen)| TokenMeta { frequency, seen })
        .collect();
    let freq = BTreeMap::from([("A".to_string(), 2), ("B".to_string(), 2)]);
    let runs = [
        ("word", ReprKind::Word, "encoder-word-pos", 1, [0, 1, 1, 1], 10.0),
        ("word", ReprKind::Word, "encoder-word-pos", 2, [0, 0, 1, 1], 12.0),
        ("char", ReprKind::CharCnn, "encoder-char-pos", 1, [0, 0, 1, 1], 9.0),
        ("char", ReprKind::CharCnn, "encoder-char-pos", 2, [0, 0, 1, 1], 9.5),
    ];
    let mut records = Vec::new();
    let mut reports = BTreeMap::new();
    for (name, repr, reference, seed, predicted, bleu) in runs {
        let report = build_report(
            &tagset,
            &gold,
            &predicted,
            &meta,
            &freq,
            &FrequencyBins::default(),
            &ReportOptions::default(),
        )
        .unwrap();
        let key = format!("{name}-{seed}");
        reports.insert(key.clone(), report);
        records.push(RunRecord {
            variant: variant(name, repr, reference),
            seed,
            report: key,
            model: format!("model-{name}-{seed}"),
            bleu: Some(bleu),
        });
    }
    compare_experiments("golden", &records, &reports, Some("word"), &PaperReference::bundled()).unwrap()
}
