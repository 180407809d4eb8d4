//! Cross-module properties of the allocators on random bundles.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lamp_core::model_io::{Layer, ModelBundle};
use lamp_core::random::{self, BundleShape};
use lamp_core::{allocate, make_schedule, survival_report, MaskBundle, Scheme, SparsityBudget};

fn random_bundle(seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random::bundle(
        &mut rng,
        BundleShape { min_layers: 2, max_layers: 6, max_total: 1500, min_dim: 2 },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_scheme_spends_the_budget_exactly(seed in any::<u64>(), frac in 0.05f64..=1.0) {
        let bundle = random_bundle(seed);
        let total = bundle.prunable_total();
        let budget = SparsityBudget::from_survival(frac, total).unwrap();
        for scheme in [Scheme::Lamp, Scheme::Global, Scheme::Uniform, Scheme::Erk] {
            let (alloc, mask) = allocate(scheme, &bundle, None, budget).unwrap();
            let report = survival_report(&bundle, &mask).unwrap();
            prop_assert_eq!(alloc.prunable_kept(), budget.kappa);
            prop_assert_eq!(report.total.kept, budget.kappa);
            for (l, m) in alloc.layers.iter().zip(&mask.layers) {
                prop_assert_eq!(l.kept, m.survivors());
            }
        }
    }

    #[test]
    fn lamp_mask_ignores_power_of_two_rescaling(seed in any::<u64>(), layer in 0usize..6, shift in -20i32..20, frac in 0.01f64..1.0) {
        let bundle = random_bundle(seed);
        let layer = layer % bundle.len();
        let c = 2f32.powi(shift);
        let scaled = ModelBundle::new(
            bundle
                .layers()
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let w = if i == layer { l.weights.iter().map(|&v| v * c).collect() } else { l.weights.clone() };
                    Layer::new(l.spec.name.clone(), l.spec.kind, l.spec.shape.clone(), l.spec.prunable, w)
                })
                .collect(),
        )
        .unwrap();
        // Scaling by 2^k can push subnormals out of range, so only compare
        // layers whose values stay exact.
        prop_assume!(bundle.layer(layer).weights.iter().all(|&v| {
            let s = v * c;
            s / c == v && (v == 0.0) == (s == 0.0)
        }));
        let budget = SparsityBudget::from_survival(frac, bundle.prunable_total()).unwrap();
        let (_, a) = allocate(Scheme::Lamp, &bundle, None, budget).unwrap();
        let (_, b) = allocate(Scheme::Lamp, &scaled, None, budget).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn chained_rounds_follow_the_schedule() {
    let bundle = random_bundle(3);
    let total = bundle.prunable_total();
    let schedule = make_schedule(10, 0.2).unwrap();
    for scheme in Scheme::ALL {
        let mut mask = MaskBundle::all_ones(&bundle);
        for (t, &target) in schedule.rounds.iter().enumerate() {
            let budget = SparsityBudget::from_survival(target, total).unwrap();
            let (_, next) = allocate(scheme, &bundle, Some(&mask), budget).unwrap();
            for (old, new) in mask.layers.iter().zip(&next.layers) {
                // Pruned weights never come back.
                assert!(new.bits.iter().zip(old.bits.iter()).all(|(n, o)| !*n || *o));
            }
            let kept = survival_report(&bundle, &next).unwrap().total.kept as f64;
            assert!((kept - 0.8f64.powi(t as i32 + 1) * total as f64).abs() <= 1.0);
            mask = next;
        }
    }
}
