mod common;

#[test]
fn comparison_csv_matches_golden_file() {
    let csv = common::golden_table().to_csv();
    assert_eq!(csv, common::GOLDEN_CSV);
}

#[test]
fn golden_numbers_follow_from_the_fixture() {
    let t = common::golden_table();
    let word = t.row("word").unwrap();
    // accuracies 75 and 100: mean 87.5, sample stdev 12.5 * sqrt(2)
    assert_eq!(word.accuracy.mean, 87.5);
    assert!((word.accuracy.std - 12.5 * 2f64.sqrt()).abs() < 1e-12);
    // unseen token wrong then right
    let unseen = word.unseen_accuracy.unwrap();
    assert_eq!((unseen.mean, unseen.n), (50.0, 2));
    assert_eq!(word.bleu.unwrap().mean, 11.0);
    let char = t.row("char").unwrap();
    assert_eq!((char.accuracy.mean, char.accuracy.std), (100.0, 0.0));
    assert_eq!(char.delta, Some(12.5));
    assert_eq!(word.delta, Some(0.0));
    let lines: Vec<&str> = common::GOLDEN_CSV.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",87.50,17.68,50.00,70.71,11.00,1.41,0.00,89.62,"));
    assert!(lines[2].contains(",100.00,0.00,100.00,0.00,9.25,0.35,12.50,95.35,"));
}
