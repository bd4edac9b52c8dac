mod common;

use std::collections::BTreeMap;

use rand::Rng;
use transvw::discovery::{
    extract_visual_words, load_dataset, nearest_in, persist_dataset, purity, replay, train_feature_extractor,
    word_distances, DiscoveryConfig, VisualWordDataset,
};
use transvw::phantom::{generate_cohort, PhantomCohort, PhantomConfig};

fn pipeline(patients: usize, words: usize, instances: usize) -> (PhantomCohort, VisualWordDataset) {
    let cohort = generate_cohort(&PhantomConfig::default(), patients).unwrap();
    let config = DiscoveryConfig {
        words,
        instances,
        ..DiscoveryConfig::default()
    };
    let extractor = train_feature_extractor(&cohort, &config.crop, &config.extractor, config.seed).unwrap();
    let dataset = extract_visual_words(&extractor, &cohort, &config).unwrap();
    (cohort, dataset)
}

#[test]
fn knn_equals_exhaustive_scans_on_50_latent_sets() {
    let mut rng = common::rng(41);
    for set in 0..50 {
        let n = rng.random_range(2..40);
        let dim = rng.random_range(1..12);
        let coarse = set % 4 == 0;
        let mut latents: Vec<(usize, Vec<f32>)> = (0..n)
            .map(|i| {
                let z = (0..dim)
                    .map(|_| {
                        if coarse {
                            rng.random_range(0..3) as f32
                        } else {
                            rng.random::<f32>()
                        }
                    })
                    .collect();
                (i * 3 + 7, z)
            })
            .collect();
        latents.reverse();
        for _ in 0..5 {
            let reference = latents[rng.random_range(0..n)].0;
            let k = rng.random_range(1..=n);
            assert_eq!(
                nearest_in(&latents, reference, k).unwrap(),
                common::knn_by_scans(&latents, reference, k),
                "set {set}"
            );
        }
        assert!(nearest_in(&latents, latents[0].0, n + 1).is_err());
        assert!(nearest_in(&latents, 1, 1).is_err());
    }
}

#[test]
fn datasets_are_exactly_balanced_and_replay_bit_exactly() {
    for (c, k) in [(3, 4), (5, 6), (7, 2)] {
        let (cohort, ds) = pipeline(12, c, k);
        assert_eq!(ds.instances.len(), c * k);
        assert_eq!(ds.label_histogram(), vec![k; c]);
        for (i, inst) in ds.instances.iter().enumerate() {
            assert_eq!(inst.label, i / k);
        }
        let mut split: Vec<usize> = ds.train().iter().chain(ds.validation()).copied().collect();
        split.sort();
        assert_eq!(split, (0..c * k).collect::<Vec<_>>());
        for w in &ds.manifest.words {
            assert_eq!(w.neighbors.len(), k);
            assert_eq!(w.neighbors[0], w.reference);
        }
        let again = replay(&cohort, &ds.manifest).unwrap();
        assert_eq!(again, ds);
        let dir = tempfile::tempdir().unwrap();
        persist_dataset(&ds, dir.path(), &BTreeMap::new()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds);
        for (a, b) in loaded.instances.iter().zip(&ds.instances) {
            assert!(a
                .patch
                .data()
                .iter()
                .zip(b.patch.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn tampered_patch_fails_to_load() {
    let (_, ds) = pipeline(8, 2, 3);
    let dir = tempfile::tempdir().unwrap();
    persist_dataset(&ds, dir.path(), &BTreeMap::new()).unwrap();
    let f = dir.path().join(&ds.manifest.words[0].instances[0].file);
    let mut bytes = std::fs::read(&f).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&f, bytes).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap_err().exit_code(), 4);
}

#[test]
fn default_phantoms_yield_pure_and_separated_words() {
    let (cohort, ds) = pipeline(48, 10, 20);
    let p = purity(&ds, &cohort).unwrap();
    let (within, cross) = word_distances(&ds);
    assert!(p >= 0.95, "purity {p}");
    assert!(cross >= 1.2 * within, "cross {cross} within {within}");
}
