use mre_core::corpus::{gen_synthetic, read_records, window_truncate, write_records, SyntheticSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_corpora_survive_a_file_round_trip(
        paragraphs in 0usize..12,
        mentions in 2usize..6,
        labels in 1usize..=12,
        seed in any::<u64>(),
    ) {
        let spec = SyntheticSpec { paragraphs, mentions, labels, seed, ..Default::default() };
        let records = gen_synthetic(&spec).unwrap();
        prop_assert_eq!(records.len(), paragraphs);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        write_records(&records, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        prop_assert_eq!(&read_records(&path).unwrap(), &records);

        write_records(&gen_synthetic(&spec).unwrap(), &path).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncated_paragraphs_stay_valid(seed in any::<u64>(), radius in 0usize..8) {
        let spec = SyntheticSpec { paragraphs: 5, mentions: 4, min_words: 14, seed, ..Default::default() };
        for p in gen_synthetic(&spec).unwrap() {
            let t = window_truncate(&p, radius).unwrap();
            prop_assert!(t.validate().is_ok());
            prop_assert!(t.len() <= p.len());
            prop_assert!(!t.relations.is_empty());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.txt");
            write_records(std::slice::from_ref(&t), &path).unwrap();
            prop_assert_eq!(read_records(&path).unwrap(), vec![t]);
        }
    }
}

#[test]
fn missing_file_names_the_path() {
    let err = read_records("/nonexistent/corpus.txt").unwrap_err().to_string();
    assert!(err.contains("/nonexistent/corpus.txt"), "{err}");
}
