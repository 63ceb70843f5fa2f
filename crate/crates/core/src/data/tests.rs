use std::io::Cursor;

use super::*;

fn parse(text: &str) -> Result<ParseOutcome> {
    parse_interactions(Cursor::new(text), 0)
}

fn rec(u: &str, i: &str, t: u64) -> InteractionRecord {
    InteractionRecord {
        user: u.into(),
        item: i.into(),
        timestamp: t,
    }
}

#[test]
fn parse_examples() {
    assert!(parse("").unwrap().records.is_empty());
    assert_eq!(parse("u1\ti9\t100").unwrap().records, vec![rec("u1", "i9", 100)]);
    match parse("u1\ti9") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn parse_skips_comments_and_names_lines() {
    let text = "# header\nu1\ti1\t5\r\n\nu2\ti2\t-3\nu3\t\t1\n";
    match parse(text) {
        Err(Error::Parse { line, message }) => {
            assert_eq!(line, 4);
            assert!(message.contains("-3"));
        }
        other => panic!("{other:?}"),
    }
    let out = parse_interactions(Cursor::new(text), 2).unwrap();
    assert_eq!(out.records, vec![rec("u1", "i1", 5)]);
    assert_eq!(out.malformed.iter().map(|m| m.line).collect::<Vec<_>>(), vec![4, 5]);
    assert!(matches!(
        parse_interactions(Cursor::new(text), 1),
        Err(Error::Parse { line: 5, .. })
    ));
}

#[test]
fn sequences_are_chronological_and_stable() {
    let records = vec![
        rec("a", "x", 30),
        rec("a", "y", 10),
        rec("b", "x", 1),
        rec("a", "z", 20),
        rec("a", "w", 10),
        rec("b", "y", 2),
    ];
    let c = build_sequences(&records, 3);
    assert_eq!(c.sequences.len(), 1);
    let names: Vec<&str> = c.sequences[0].items.iter().map(|&i| c.items.id(i).unwrap()).collect();
    // y and w tie at t=10; file order wins.
    assert_eq!(names, vec!["y", "w", "z", "x"]);
    assert_eq!(c.timestamps[0], vec![10, 10, 20, 30]);
    assert_eq!(c.users.ids(), ["a"]);
    assert_eq!(build_sequences(&records, 2).sequences.len(), 2);
}

#[test]
fn write_parse_build_round_trips() {
    let records = vec![
        rec("b", "q", 9),
        rec("a", "p", 4),
        rec("b", "p", 3),
        rec("a", "r", 1),
        rec("b", "s", 3),
        rec("a", "q", 2),
    ];
    let c = build_sequences(&records, 3);
    let mut buf = Vec::new();
    write_interactions(&c.records(), &mut buf).unwrap();
    let again = build_sequences(&parse(std::str::from_utf8(&buf).unwrap()).unwrap().records, 3);
    assert_eq!(again, c);
}

#[test]
fn split_examples() {
    let seqs: Vec<UserSequence> = (0..10).map(|u| UserSequence::new(u, vec![0, 1, 2])).collect();
    let c = Corpus::from_indexed(seqs, 10, 3);
    let s = split(&c, 7).unwrap();
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
    assert_eq!(split(&c, 7).unwrap(), s);
    let mut users: Vec<usize> = s.parts().iter().flat_map(|p| p.iter().map(|q| q.user)).collect();
    users.sort_unstable();
    assert_eq!(users, (0..10).collect::<Vec<_>>());
    let short = Corpus::from_indexed(c.sequences[..9].to_vec(), 10, 3);
    assert!(matches!(split(&short, 0), Err(Error::Data(_))));
}

#[test]
fn split_sizes_are_80_10_10() {
    for n in 10..500 {
        let (a, b, c) = split_sizes(n);
        assert_eq!(a + b + c, n);
        assert!((a as f64 - 0.8 * n as f64).abs() <= 1.0);
        assert!((b as f64 - 0.1 * n as f64).abs() <= 1.0);
        assert!((c as f64 - 0.1 * n as f64).abs() <= 1.0);
    }
}

#[test]
fn dataset_directory_round_trips() {
    let seqs = synth_hierarchical(40, 30, 2.0, (3, 6), 1).unwrap();
    let corpus = Corpus::from_indexed(seqs, 40, 30);
    let s = split(&corpus, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    s.save(dir.path(), &corpus).unwrap();
    let loaded = DatasetSplit::load(dir.path()).unwrap();
    let names = |d: &DatasetSplit| -> Vec<Vec<(String, Vec<String>)>> {
        d.parts()
            .iter()
            .map(|p| {
                p.iter()
                    .map(|q| {
                        (
                            d.users.id(q.user).unwrap().to_string(),
                            q.items.iter().map(|&i| d.items.id(i).unwrap().to_string()).collect(),
                        )
                    })
                    .collect()
            })
            .collect()
    };
    assert_eq!(names(&loaded), names(&s));
    assert!(loaded.global_graph().unwrap().edge_count() > 0);

    let dup = dir.path().join(SPLIT_FILES[2]);
    let first = s.users.id(s.train[0].user).unwrap();
    std::fs::write(&dup, format!("{first}\n")).unwrap();
    assert!(matches!(DatasetSplit::load(dir.path()), Err(Error::Data(_))));
}

#[test]
fn synthetic_sequences_respect_config() {
    let seqs = synth_hierarchical(200, 50, 2.0, (3, 8), 4).unwrap();
    assert_eq!(seqs.len(), 200);
    for s in &seqs {
        assert!((3..=8).contains(&s.len()));
        let mut it = s.items.clone();
        it.sort_unstable();
        it.dedup();
        assert_eq!(it.len(), s.len(), "repeat inside a sequence");
        assert!(s.items.iter().all(|&i| i < 50));
    }
    assert_eq!(synth_hierarchical(200, 50, 2.0, (3, 8), 4).unwrap(), seqs);
    assert!(synth_hierarchical(10, 10, 1.0, (3, 8), 4).is_err());
    assert!(synth_hierarchical(10, 10, 2.0, (5, 3), 4).is_err());
    // Longer than the catalog: capped.
    let s = synth_hierarchical(3, 4, 2.0, (6, 6), 0).unwrap();
    assert!(s.iter().all(|q| q.len() == 4));
}

#[test]
fn large_exponent_concentrates_on_item_zero() {
    let mut cfg = SynthConfig::hierarchical(300, 100, 400.0, 1, 1, 2);
    cfg.affinity = 0.0;
    assert!(synthesize(&cfg).unwrap().iter().all(|s| s.items == vec![0]));
    // With cluster affinity each user lands on a cluster head, item 0 most often.
    let seqs = synth_hierarchical(300, 100, 400.0, (1, 1), 2).unwrap();
    assert!(seqs.iter().all(|s| s.items[0] < 10));
    let f = frequencies(&seqs, 100);
    assert!((1..100).all(|i| f[0] > f[i]));
    // Underflowed weights still give distinct items.
    let seqs = synth_hierarchical(5, 100, 400.0, (4, 4), 2).unwrap();
    assert!(seqs.iter().all(|s| s.items.len() == 4));
}

#[test]
fn sorted_frequencies_are_long_tailed() {
    let seqs = synth_hierarchical(2000, 1000, 2.0, (5, 15), 11).unwrap();
    let mut f = frequencies(&seqs, 1000);
    f.sort_unstable_by(|a, b| b.cmp(a));
    assert!(f.windows(2).all(|w| w[0] >= w[1]));
    let total: usize = f.iter().sum();
    let top: usize = f[..10].iter().sum();
    assert!(top as f64 >= 0.2 * total as f64, "top 1% share {}", top as f64 / total as f64);
}

#[test]
fn tail_exponent_matches_request() {
    let m = 10_000;
    for s in [1.5, 2.0, 2.5] {
        let seqs = synth_hierarchical(5000, m, s, (5, 15), 21).unwrap();
        let f = frequencies(&seqs, m);
        let obs: Vec<(usize, f64)> = f.iter().enumerate().map(|(i, &c)| (i + 1, c as f64)).collect();
        let fit = fit_power_law(&obs, m / 100, m).unwrap();
        assert!((fit - s).abs() <= 0.3, "requested {s}, fitted {fit}");
    }
}

#[test]
fn power_law_fit_recovers_exact_counts() {
    let obs: Vec<(usize, f64)> = (1..=500).map(|r| (r, 1e9 * (r as f64).powf(-1.7))).collect();
    assert!((fit_power_law(&obs, 5, 500).unwrap() - 1.7).abs() < 1e-9);
}

#[test]
fn separable_users_stay_in_cluster() {
    let seqs = synthesize(&SynthConfig::separable(50, 20, 2, 4, 8, 0)).unwrap();
    for s in &seqs {
        let c = s.items[0] % 2;
        assert!(s.items.iter().all(|&i| i % 2 == c));
    }
}
