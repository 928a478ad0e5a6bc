mod common;

use proptest::prelude::*;
use remind_core::analysis::report::{build_report, ReportOptions};
use remind_core::analysis::{classify_regime, cosine_similarity, SimilarityRegime};
use remind_core::backends::mock::HashEmbedder;
use remind_core::domain::{EmbeddingVector, ReviewScores, RunRecord};
use remind_core::persistence::reference_runs;

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 8).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn cosine_is_symmetric_bounded_and_scale_invariant(a in vector(), b in vector(), k in 0.01f64..100.0) {
        let u = EmbeddingVector::new(a.clone()).unwrap();
        let v = EmbeddingVector::new(b).unwrap();
        let uv = cosine_similarity(&u, &v).unwrap();
        prop_assert_eq!(uv, cosine_similarity(&v, &u).unwrap());
        prop_assert!((-1.0..=1.0).contains(&uv));
        let scaled = EmbeddingVector::new(a.iter().map(|x| x * k).collect()).unwrap();
        prop_assert!((cosine_similarity(&scaled, &v).unwrap() - uv).abs() < 1e-9);
        prop_assert_eq!(cosine_similarity(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn regimes_partition_the_unit_interval(s in 0.0f64..=1.0) {
        let regime = classify_regime(s).unwrap();
        let expected = if s < 0.4 {
            SimilarityRegime::Low
        } else if s <= 0.7 {
            SimilarityRegime::Intermediate
        } else {
            SimilarityRegime::High
        };
        prop_assert_eq!(regime, expected);
    }

    #[test]
    fn regime_counts_cover_every_similarity(sims in prop::collection::vec(prop::option::of(0.0f64..1.0), 0..40)) {
        let base = reference_runs()[0].clone();
        let records: Vec<RunRecord> = sims
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = base.clone();
                r.config.run_id = i as u64 + 1;
                r.similarity = *s;
                r.review = Some(ReviewScores::new(3, 3, 3).unwrap());
                r
            })
            .collect();
        let bundle = build_report(&records, None, &ReportOptions::default());
        let counts = bundle.table("regime_counts").unwrap();
        let total: usize = counts
            .rows
            .iter()
            .filter(|row| row[0] == "all")
            .map(|row| row[3].parse::<usize>().unwrap())
            .sum();
        prop_assert_eq!(total, sims.iter().flatten().count());
        prop_assert_eq!(bundle.table("similarity").unwrap().rows.len(), sims.iter().flatten().count());
    }
}

#[test]
fn fixture_report_has_consistent_tables() {
    let records = reference_runs();
    let embedder = HashEmbedder::new(64);
    let bundle = build_report(&records, Some(&embedder), &ReportOptions::default());
    let sims = bundle.table("similarity").unwrap();
    assert_eq!(sims.rows.len(), records.len());
    for name in [
        "similarity", "similarity_summary", "wake_wake_control", "scatter", "regime_counts", "spearman", "mann_whitney",
        "high_quality",
    ] {
        let table = bundle.table(name).unwrap_or_else(|| panic!("missing {name}"));
        let csv = table.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), table.header.join(","));
    }

    let dir = tempfile::tempdir().unwrap();
    bundle.write_to(dir.path()).unwrap();
    let written = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(written, 8);
}
