use dualtta::data::{gen_spurious_dataset, make_stream, ScenarioKind, Split, SpuriousDatasetConfig, StreamScenario};

/// Predicts the label from which color channel is brighter, ignoring shape.
fn color_probe_accuracy(split: &Split) -> f64 {
    let plane = 28 * 28;
    let hits = (0..split.len())
        .filter(|&i| {
            let img = split.example(i).image;
            let c0: f64 = img[..plane].iter().sum();
            let c1: f64 = img[plane..2 * plane].iter().sum();
            let attr = usize::from(c1 > c0);
            attr == split.labels[i]
        })
        .count();
    hits as f64 / split.len() as f64
}

#[test]
fn color_cue_flips_between_source_and_target() {
    let d = gen_spurious_dataset(&SpuriousDatasetConfig::default()).unwrap();
    let val = color_probe_accuracy(&d.source_val);
    let test = color_probe_accuracy(&d.target_test);
    assert!(val > 0.8, "{val}");
    assert!(test < 0.3, "{test}");
}

#[test]
fn every_group_is_populated_in_every_split() {
    let d = gen_spurious_dataset(&SpuriousDatasetConfig::default()).unwrap();
    for split in [&d.source_train, &d.source_val, &d.target_test] {
        let mut counts = [0usize; 4];
        for &g in &split.groups {
            counts[g] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }
}

#[test]
fn all_scenarios_partition_the_test_split() {
    let d = gen_spurious_dataset(&SpuriousDatasetConfig {
        n_test: 333,
        ..Default::default()
    })
    .unwrap();
    for kind in [ScenarioKind::Mild, ScenarioKind::ImbalancedLabel, ScenarioKind::MixedShift] {
        let stream = make_stream(&d.target_test, &StreamScenario::of_kind(kind), 2).unwrap();
        let mut seen: Vec<usize> = stream.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..333).collect::<Vec<_>>(), "{kind}");
        assert!(stream.iter().all(|b| b.labels.len() >= 2));
    }
}
