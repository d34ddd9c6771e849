use std::path::PathBuf;

use ezdit_core::filter::{
    filter_threshold, load_manifest, score_manifest, CaptionRecord, CaptionSource, FileScorer, MockScorer,
};
use ezdit_core::parallel::Exec;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn ids(records: &[CaptionRecord]) -> Vec<&str> {
    records.iter().map(|r| r.id.as_str()).collect()
}

#[test]
fn fixture_kept_sets_are_exact() {
    let records = load_manifest(fixture("captions10.jsonl")).unwrap();
    let scorer = FileScorer::load(fixture("scores10.json")).unwrap();
    let scored = score_manifest(&records, &scorer, Exec::Parallel).unwrap();
    let expected: [(f64, &[&str]); 3] = [
        (0.35, &["clip-01", "clip-02", "clip-03", "clip-04", "clip-05", "clip-06", "clip-10"]),
        (0.40, &["clip-01", "clip-02", "clip-03", "clip-04", "clip-10"]),
        (0.45, &["clip-01", "clip-02", "clip-10"]),
    ];
    for (tau, want) in expected {
        let (kept, dropped) = filter_threshold(&scored, tau).unwrap();
        assert_eq!(ids(&kept), want, "tau={tau}");
        assert_eq!(kept.len() + dropped.len(), 10);
    }
}

fn manifest(seed: u64, n: usize) -> Vec<CaptionRecord> {
    let sources = [
        CaptionSource::AutoAcd,
        CaptionSource::AsQwenCaps,
        CaptionSource::AsSlGpt4Caps,
        CaptionSource::Human,
    ];
    (0..n)
        .map(|i| CaptionRecord {
            id: format!("m{seed}-{i}"),
            caption: format!("caption {} of manifest {seed}", i * 7 + 3),
            source: sources[i % 4],
            score: None,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kept_sets_nest_as_threshold_rises(seed in any::<u64>(), n in 0usize..60) {
        let scored = score_manifest(&manifest(seed, n), &MockScorer, Exec::Sequential).unwrap();
        let kept: Vec<Vec<String>> = [0.35, 0.40, 0.45]
            .iter()
            .map(|&t| filter_threshold(&scored, t).unwrap().0.into_iter().map(|r| r.id).collect())
            .collect();
        for w in kept.windows(2) {
            prop_assert!(w[1].iter().all(|id| w[0].contains(id)));
        }
    }

    #[test]
    fn filtering_commutes_with_permutation(seed in any::<u64>(), n in 1usize..40, tau in -1.0f64..=1.0) {
        let records = manifest(seed, n);
        // Deterministic shuffle: reverse then rotate.
        let mut perm: Vec<usize> = (0..n).rev().collect();
        perm.rotate_left((seed % n as u64) as usize);
        let shuffled: Vec<CaptionRecord> = perm.iter().map(|&i| records[i].clone()).collect();

        let (kept, dropped) = filter_threshold(&score_manifest(&records, &MockScorer, Exec::Parallel).unwrap(), tau).unwrap();
        let (kept_s, dropped_s) =
            filter_threshold(&score_manifest(&shuffled, &MockScorer, Exec::Parallel).unwrap(), tau).unwrap();
        prop_assert_eq!(kept.len() + dropped.len(), n);
        let reorder = |rs: &[CaptionRecord]| -> Vec<String> {
            perm.iter().map(|&i| &records[i].id).filter(|id| rs.iter().any(|r| &r.id == *id)).cloned().collect()
        };
        let (want_kept, want_dropped) = (reorder(&kept), reorder(&dropped));
        prop_assert_eq!(ids(&kept_s), want_kept.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(ids(&dropped_s), want_dropped.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
