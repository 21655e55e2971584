use std::collections::BTreeSet;

use hoigen::bench::{
    generate, generate_with_summary, holdout_split, object_verb_mutual_information, GeneratorConfig,
    HoldoutStrategy,
};
use hoigen::io::{DatasetBundle, Split};
use hoigen::ocimmune::{build_similarity, synthesize_epoch, ObjectSample, PartnerPool, Synthesizer, SynthesizerSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        max_train_per_composition: 30,
        val_per_composition: 2,
        unlabeled_per_composition: 3,
        test_per_composition: 4,
        seed,
        ..GeneratorConfig::default()
    }
}

/// Compositions that occur in the given split, read from labels for labeled
/// splits and from ground truth for the test split.
fn compositions_in(bundle: &DatasetBundle, split: Split) -> BTreeSet<usize> {
    let vocab = &bundle.vocabulary;
    let mut out = BTreeSet::new();
    if split == Split::Test {
        out.extend(bundle.gt.iter().map(|g| g.composition));
        return out;
    }
    for i in bundle.indices(split) {
        let r = &bundle.records[i];
        if let Some(labels) = &r.verb_labels {
            for (v, &on) in labels.iter().enumerate() {
                if on {
                    if let Some(c) = vocab.lookup(v, r.object_category) {
                        out.insert(c);
                    }
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_data_always_validates(
        seed in 0u64..1000,
        rho in 0.0f64..=1.0,
        unseen in prop_oneof![Just(0.0), Just(0.1), Just(0.25)],
        n_verbs in 2usize..6,
        n_objects in 2usize..7,
    ) {
        let cfg = GeneratorConfig { spurious_strength: rho, unseen_fraction: unseen, n_verbs, n_objects, ..small(seed) };
        let bundle = generate(&cfg).unwrap();
        prop_assert!(bundle.validate().is_ok());
        prop_assert_eq!(bundle.splits.len(), bundle.records.len());
        for (r, &s) in bundle.records.iter().zip(&bundle.splits) {
            prop_assert_eq!(r.verb_labels.is_some(), s != Split::Unlabeled);
        }
        let vocab = &bundle.vocabulary;
        let seen_train = compositions_in(&bundle, Split::Train);
        let seen_val = compositions_in(&bundle, Split::Val);
        for c in 0..vocab.n_compositions() {
            if vocab.is_unseen(c) {
                prop_assert!(!seen_train.contains(&c) && !seen_val.contains(&c), "unseen {} leaked", c);
            }
        }
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..1000) {
        let a = generate(&small(seed)).unwrap();
        let b = generate(&small(seed)).unwrap();
        prop_assert!(a == b);
    }
}

#[test]
fn mutual_information_rises_with_spurious_strength() {
    for seed in 0..3 {
        let mi: Vec<f64> = [0.0, 0.3, 0.6, 0.9]
            .iter()
            .map(|&rho| {
                let cfg = GeneratorConfig { spurious_strength: rho, seed, ..GeneratorConfig::default() };
                object_verb_mutual_information(&generate(&cfg).unwrap(), Split::Train)
            })
            .collect();
        assert!(mi.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {mi:?}");
    }
}

#[test]
fn unseen_fraction_counts_exactly() {
    // Two verbs and five objects at full density give ten compositions.
    let cfg = GeneratorConfig {
        n_verbs: 2,
        n_objects: 5,
        composition_density: 1.0,
        unseen_fraction: 0.2,
        ..small(11)
    };
    let bundle = generate(&cfg).unwrap();
    let vocab = &bundle.vocabulary;
    assert_eq!(vocab.n_compositions(), 10);
    let unseen: Vec<usize> = (0..10).filter(|&c| vocab.is_unseen(c)).collect();
    assert_eq!(unseen.len(), 2);
    let train = compositions_in(&bundle, Split::Train);
    let val = compositions_in(&bundle, Split::Val);
    let test = compositions_in(&bundle, Split::Test);
    for c in unseen {
        assert!(!train.contains(&c) && !val.contains(&c));
        assert!(test.contains(&c));
    }
}

#[test]
fn holdout_keeps_every_verb_trainable() {
    for seed in 0..20 {
        let (bundle, summary) = generate_with_summary(&small(seed)).unwrap();
        let vocab = &bundle.vocabulary;
        for strategy in [HoldoutStrategy::NonRareFirst, HoldoutStrategy::RareFirst, HoldoutStrategy::Random] {
            let mask = holdout_split(vocab, &summary.planned_train_counts, 0.4, strategy, seed).unwrap();
            let k = (0.4 * vocab.n_compositions() as f64).round() as usize;
            assert_eq!(mask.iter().filter(|&&m| m).count(), k);
            // Keeping one composition per verb is possible exactly when k <= n - |V|.
            if k + vocab.n_verbs() > vocab.n_compositions() {
                continue;
            }
            for v in 0..vocab.n_verbs() {
                let comps: Vec<usize> = vocab.objects_for_verb(v).iter().filter_map(|&o| vocab.lookup(v, o)).collect();
                {
                    assert!(comps.iter().any(|&c| !mask[c]), "seed {seed} verb {v} lost all seen compositions");
                }
            }
        }
    }
}

#[test]
fn duplication_only_keeps_original_labels() {
    let bundle = generate(&small(4)).unwrap();
    let samples: Vec<ObjectSample> = bundle
        .indices(Split::Train)
        .into_iter()
        .map(|i| {
            let r = &bundle.records[i];
            ObjectSample {
                feature: r.features["object"].clone(),
                category: r.object_category,
                labels: r.label_vector().unwrap(),
            }
        })
        .collect();
    let table = build_similarity(&bundle.vocabulary);
    let pool = PartnerPool::new(&samples, &table).unwrap();
    let dim = samples[0].feature.len();
    let synth = Synthesizer::new(&SynthesizerSpec { feature_dim: dim, hidden: vec![4], seed: 1 }).unwrap();
    let (features, labels) = synthesize_epoch(&pool, &synth, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(labels.len(), samples.len());
    for ((f, y), s) in features.iter().zip(&labels).zip(&samples) {
        assert_eq!(y, &s.labels);
        assert_eq!(f, &synth.synthesize(&s.feature, &s.feature).unwrap());
    }
}
