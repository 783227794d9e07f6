use std::collections::HashMap;

use acam::kg::{InteractionLog, KnowledgeGraph};
use acam::synth::{generate, relation_order, World, WorldSpec, GROUND_TRUTH_FILE, INTERACTIONS_FILE, TRIPLES_FILE};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pure_preference_stays_on_the_seed_value() {
    let spec = WorldSpec {
        users: 1,
        items: 1000,
        m: 1,
        values_per_attribute: 2,
        history_min: 1,
        history_max: 100,
        rho: 1.0,
        ..WorldSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let world = World::new(&spec, &mut rng).unwrap();
    let on_a: Vec<usize> = (0..spec.items).filter(|&i| world.item_values[i][0] == 0).collect();
    let (mut same, mut total) = (0usize, 0usize);
    // 100 users x 100 draws
    for _ in 0..100 {
        let seeds: Vec<usize> = on_a.choose_multiple(&mut rng, 3).copied().collect();
        let history = world.draw_history(&world.user_latent(&seeds), 100, &mut rng);
        same += history.iter().filter(|&&i| world.item_values[i][0] == 0).count();
        total += history.len();
    }
    assert_eq!(total, 10_000);
    let share = same as f64 / total as f64;
    assert!(share >= 0.95, "share on seed value {share}");
}

#[test]
fn same_seed_writes_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = WorldSpec { users: 30, items: 60, seed: 5, ..WorldSpec::default() };
    generate(&spec).unwrap().write(a.path()).unwrap();
    generate(&spec).unwrap().write(b.path()).unwrap();
    for f in [INTERACTIONS_FILE, TRIPLES_FILE, GROUND_TRUTH_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let other = generate(&WorldSpec { seed: 6, ..spec }).unwrap();
    assert_ne!(other.interactions_tsv, generate(&spec).unwrap().interactions_tsv);
}

#[test]
fn default_world_is_heavy_tailed() {
    for seed in 0..4 {
        let spec = WorldSpec { seed, ..WorldSpec::default() };
        let g = generate(&spec).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0;
        for line in g.interactions_tsv.lines().skip(1) {
            *counts.entry(line.split('\t').nth(1).unwrap()).or_default() += 1;
            total += 1;
        }
        let mut c: Vec<usize> = counts.into_values().collect();
        c.sort_unstable_by(|x, y| y.cmp(x));
        let top: usize = c.iter().take(spec.items / 10).sum();
        let share = top as f64 / total as f64;
        assert!(share > 0.4, "seed {seed}: top decile share {share}");
    }
}

#[test]
fn ground_truth_matches_triples() {
    let spec = WorldSpec { users: 10, items: 40, m: 3, values_per_attribute: 4, history_max: 20, ..WorldSpec::default() };
    let g = generate(&spec).unwrap();
    let gt = &g.ground_truth;
    // 3 attribute pairs, 4 values each
    assert_eq!(gt.planted_pairs.len(), 12);
    assert!(gt.planted_pairs.iter().all(|p| p.a.1 == p.b.1 && p.a.0 < p.b.0));
    assert_eq!(g.triples_tsv.lines().count(), 40 * 3);
    assert_eq!(gt.user_taste_seeds.len(), 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_files_load_back(
        users in 1usize..15,
        items in 5usize..40,
        m in 1usize..4,
        k in 1usize..5,
        rho in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hmax = rng.gen_range(1..=items);
        let spec = WorldSpec {
            users,
            items,
            m,
            values_per_attribute: k,
            history_min: rng.gen_range(1..=hmax),
            history_max: hmax,
            rho,
            taste_seeds: rng.gen_range(1..=items.min(3)),
            seed,
            ..WorldSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let g = generate(&spec).unwrap();
        g.write(dir.path()).unwrap();

        let log = InteractionLog::load(dir.path().join(INTERACTIONS_FILE)).unwrap();
        let rows = g.interactions_tsv.lines().count() - 1;
        prop_assert_eq!(log.interactions.len(), rows);
        prop_assert_eq!(log.users.len(), users);
        prop_assert!(log.items.len() <= items);

        let kg = KnowledgeGraph::load(dir.path().join(TRIPLES_FILE), m, Some(&relation_order(m))).unwrap();
        prop_assert_eq!(kg.triples.len(), items * m);
        for (name, vals) in g.ground_truth.item_values.iter().enumerate().map(|(i, v)| (format!("i{i}"), v)) {
            let e = kg.entities.id(&name).unwrap();
            for (a, &j) in vals.iter().enumerate() {
                let tail = kg.attributes.values(e, a + 1);
                prop_assert_eq!(tail.len(), 1);
                let want = format!("attr{}_v{}", a + 1, j);
                prop_assert_eq!(kg.entities.name(tail[0]), want.as_str());
            }
        }
    }
}
