//! Edit-distance metrics against recursive and recompute oracles.

use anticipate::evalkit::{aued, damerau_levenshtein, edit_distance_at_z, evaluate, Field, PredictionSet, Target};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod oracles;
use oracles::{all_sequences, dl_recursive, ed_at_z_oracle};

const FIELDS: [(Field, u8); 3] = [(Field::Verb, 0), (Field::Noun, 1), (Field::Action, 2)];

#[test]
fn dp_equals_recursion_on_all_short_pairs() {
    let seqs = all_sequences(3, 4);
    assert_eq!(seqs.len(), 1 + 3 + 9 + 27 + 81);
    for a in &seqs {
        for b in &seqs {
            assert_eq!(damerau_levenshtein(a, b), dl_recursive(a, b), "{a:?} {b:?}");
        }
    }
}

fn random_set(rng: &mut ChaCha8Rng, id: usize) -> (PredictionSet, Target) {
    let z = rng.random_range(1..=20);
    let k = rng.random_range(1..=5);
    // small vocabularies so matches and transpositions actually occur
    let (nv, nn) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let seq = |rng: &mut ChaCha8Rng| -> Vec<(u32, u32)> {
        (0..z).map(|_| (rng.random_range(0..nv), rng.random_range(0..nn))).collect()
    };
    let gt = seq(rng);
    let candidates = (0..k).map(|_| seq(rng)).collect();
    (
        PredictionSet { example_id: id.to_string(), candidates },
        Target { example_id: id.to_string(), actions: gt },
    )
}

#[test]
fn min_over_k_and_prefix_normalisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for id in 0..1000 {
        let (p, t) = random_set(&mut rng, id);
        let z_max = t.actions.len();
        for (field, code) in FIELDS {
            let mut total = 0.0;
            for z in 1..=z_max {
                let got = edit_distance_at_z(&p.candidates, &t.actions, z, field).unwrap();
                let want = ed_at_z_oracle(&p.candidates, &t.actions, z, code);
                assert_eq!(got, want, "set {id} z {z} {field:?}");
                total += want;
            }
            let a = aued(&p.candidates, &t.actions, z_max, field).unwrap();
            assert!((a - total / z_max as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn report_curve_is_the_mean_of_per_example_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for id in 0..50 {
        let (mut p, mut t) = random_set(&mut rng, id);
        // fixed horizon of 6
        t.actions.resize(6, (0, 0));
        for c in &mut p.candidates {
            c.resize(6, (1, 1));
        }
        preds.push(p);
        targets.push(t);
    }
    let r = evaluate(&preds, &targets, 4, 4).unwrap();
    for (z, step) in r.per_step.iter().enumerate() {
        let want: f64 = preds
            .iter()
            .zip(&targets)
            .map(|(p, t)| ed_at_z_oracle(&p.candidates, &t.actions, z + 1, 1))
            .sum::<f64>()
            / 50.0;
        assert!((step.noun_ed - want).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn dl_metric_properties(a in prop::collection::vec(0u8..4, 0..9), b in prop::collection::vec(0u8..4, 0..9)) {
        let d = damerau_levenshtein(&a, &b);
        prop_assert_eq!(d, damerau_levenshtein(&b, &a));
        prop_assert_eq!(d == 0, a == b);
        prop_assert!(d <= a.len().max(b.len()));
    }

    #[test]
    fn adding_candidates_never_hurts(
        gt in prop::collection::vec((0u32..3, 0u32..3), 1..8),
        extra in prop::collection::vec((0u32..3, 0u32..3), 8),
        seed in 0u64..1000,
    ) {
        let z = gt.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first: Vec<_> = (0..z).map(|_| (rng.random_range(0..3), rng.random_range(0..3))).collect();
        let one = vec![first.clone()];
        let two = vec![first, extra[..z].to_vec()];
        for (field, _) in FIELDS {
            prop_assert!(
                edit_distance_at_z(&two, &gt, z, field).unwrap()
                    <= edit_distance_at_z(&one, &gt, z, field).unwrap()
            );
        }
        // a step matches jointly only if both parts match
        let action = edit_distance_at_z(&one, &gt, z, Field::Action).unwrap();
        prop_assert!(action >= edit_distance_at_z(&one, &gt, z, Field::Verb).unwrap());
        prop_assert!(action >= edit_distance_at_z(&one, &gt, z, Field::Noun).unwrap());
    }

    /// Extending the horizon by one step adds between zero and one edit to the best candidate.
    #[test]
    fn unnormalised_prefix_distance_grows_by_at_most_one(
        gt in prop::collection::vec((0u32..3, 0u32..3), 1..10),
        pool in prop::collection::vec((0u32..3, 0u32..3), 30),
        k in 1usize..4,
    ) {
        let z_max = gt.len();
        let candidates: Vec<Vec<_>> = pool.chunks(10).take(k).map(|c| c[..z_max].to_vec()).collect();
        for (field, _) in FIELDS {
            let mut prev = 0.0;
            for z in 1..=z_max {
                let raw = z as f64 * edit_distance_at_z(&candidates, &gt, z, field).unwrap();
                prop_assert!(raw >= prev - 1e-12 && raw <= prev + 1.0 + 1e-12, "z={} {} -> {}", z, prev, raw);
                prev = raw;
            }
        }
    }
}
