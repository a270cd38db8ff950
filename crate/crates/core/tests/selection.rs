//! Statistical behaviour of persona theme selection.

use std::collections::BTreeMap;

use thematica::coding::CodeKind;
use thematica::gateway::{HeuristicEstimator, ModelProfile};
use thematica::persona;
use thematica::themes::{Theme, ThemeMember, ThemeSet};

fn sets(per_kind: usize) -> BTreeMap<CodeKind, ThemeSet> {
    CodeKind::ALL
        .iter()
        .map(|&kind| {
            let themes = (0..per_kind)
                .map(|i| Theme {
                    theme_id: format!("{}-t{i:02}", kind.tag()),
                    kind,
                    name: format!("Theme {i}"),
                    description: "Short.".into(),
                    member_code_ids: vec![format!("c{i}")],
                    part_index: None,
                    part_count: None,
                    members: vec![ThemeMember {
                        code_id: format!("c{i}"),
                        name: "Code".into(),
                        description: "Desc.".into(),
                        quotes: vec!["A quote.".into()],
                    }],
                })
                .collect();
            (
                kind,
                ThemeSet {
                    kind,
                    themes,
                    requested_count: per_kind,
                },
            )
        })
        .collect()
}

#[test]
fn pairs_are_drawn_uniformly() {
    let sets = sets(4);
    let est = HeuristicEstimator::default();
    let profile = ModelProfile::default();
    let mut tally: BTreeMap<(String, String), usize> = BTreeMap::new();
    const DRAWS: usize = 10_000;
    for seed in 0..DRAWS as u64 {
        let sel = persona::sample_selection(&sets, seed, &profile, &est, 1).unwrap();
        *tally.entry(sel.picks[&CodeKind::Goal].clone()).or_default() += 1;
    }
    assert_eq!(tally.len(), 6);
    let expected = DRAWS as f64 / 6.0;
    for (pair, n) in tally {
        let dev = (n as f64 - expected).abs() / expected;
        assert!(dev <= 0.15, "{pair:?} drawn {n} times");
    }
}

#[test]
fn same_seed_same_selection() {
    let sets = sets(9);
    let est = HeuristicEstimator::default();
    let profile = ModelProfile::default();
    let a = persona::sample_selection(&sets, 99, &profile, &est, 25).unwrap();
    let b = persona::sample_selection(&sets, 99, &profile, &est, 25).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.picks.len(), 4);
    assert!(a.picks.values().all(|(x, y)| x < y));
}
