mod common;

use acam::diff::gradcheck::{self, Tolerance};
use acam::diff::{Tape, Tensor};
use acam::kg::{KnowledgeGraph, Vocab};
use acam::model::{Catalog, Forward, Hyperparams, ModelParams, UserHistory};
use acam::train::{joint_loss, LabeledPair};
use common::{random_history, tiny_world, Oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn catalog_from(text: &str, m: usize, items: &[&str]) -> (KnowledgeGraph, Catalog) {
    let mut kg = KnowledgeGraph::parse(text, Path::new("mem"), m, None).unwrap();
    let mut vocab = Vocab::new();
    items.iter().for_each(|i| {
        vocab.get_or_insert(i);
    });
    let item_entity = kg.link_items(&vocab);
    let attributes = kg.attributes.clone();
    (kg, Catalog { item_entity, attributes })
}

fn small_hyper(m: usize, d: usize) -> Hyperparams {
    Hyperparams {
        d,
        d_k: d,
        d_v: d,
        m,
        l: 3,
        mlp_hidden: [4, 2],
        ..Hyperparams::default()
    }
}

#[test]
fn multi_valued_attribute_is_averaged() {
    let (kg, cat) = catalog_from("i\tr\te1\ni\tr\te2\n", 1, &["i"]);
    let mut p = ModelParams::zeros(small_hyper(1, 2), kg.entities.len()).unwrap();
    let ent = p.store.get_mut(p.ids.entities);
    let (e1, e2) = (kg.entities.id("e1").unwrap(), kg.entities.id("e2").unwrap());
    ent.row_slice_mut(e1).copy_from_slice(&[2.0, 0.0]);
    ent.row_slice_mut(e2).copy_from_slice(&[0.0, 2.0]);
    let mut tape = Tape::new(&p.store);
    let mut fwd = Forward::new(&mut tape, &p, &cat);
    let rep = fwd.item_representation(0).unwrap();
    assert_eq!(tape.value(rep).row_slice(1), &[1.0, 1.0]);
}

#[test]
fn empty_slots_use_unknown_embeddings() {
    let (kg, cat) = catalog_from("", 3, &["lonely"]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = ModelParams::init(small_hyper(3, 4), kg.entities.len(), &mut rng).unwrap();
    let mut tape = Tape::new(&p.store);
    let mut fwd = Forward::new(&mut tape, &p, &cat);
    let rep = fwd.item_representation(0).unwrap();
    let unknown = p.store.get(p.ids.unknown);
    for slot in 1..=3 {
        assert_eq!(tape.value(rep).row_slice(slot), unknown.row_slice(slot - 1));
    }
}

#[test]
fn default_width_item_matrix_is_five_by_512() {
    let (kg, cat) = catalog_from("m\tactor\ta\nm\tdirector\tb\nm\twriter\tc\nm\tgenre\tg\n", 4, &["m"]);
    let p = ModelParams::zeros(Hyperparams::default(), kg.entities.len()).unwrap();
    let mut tape = Tape::new(&p.store);
    let mut fwd = Forward::new(&mut tape, &p, &cat);
    let rep = fwd.item_representation(0).unwrap();
    assert_eq!(tape.value(rep).shape(), &[5, 512]);
}

#[test]
fn unknown_item_is_an_error() {
    let w = tiny_world(1, Hyperparams::tiny());
    let mut tape = Tape::new(&w.params.store);
    let mut fwd = Forward::new(&mut tape, &w.params, &w.catalog);
    assert!(fwd.item_representation(999).is_err());
}

#[test]
fn single_item_history_is_one_weighted_term() {
    let w = tiny_world(2, small_hyper(2, 4));
    let o = Oracle { p: &w.params, catalog: &w.catalog };
    let hist = UserHistory::from_chronological(&[3], 3);
    let mut tape = Tape::new(&w.params.store);
    let mut fwd = Forward::new(&mut tape, &w.params, &w.catalog);
    let cand = fwd.item_representation(1).unwrap();
    let eu = fwd.user_representation(&hist, cand).unwrap();
    let a3 = o.item_rep(3);
    let a1 = o.item_rep(1);
    for i in 0..3 {
        let mut x = a3[i].clone();
        x.extend_from_slice(&a1[i]);
        let wgt = o.ffn(&x);
        let expected: Vec<f64> = a3[i].iter().map(|v| wgt * v).collect();
        assert!(close(tape.value(eu).row_slice(i), &expected, 1e-12));
    }
}

#[test]
fn unit_attention_weights_give_sum_pooling() {
    let mut w = tiny_world(3, small_hyper(2, 4));
    let (w2, b2) = (w.params.ids.ffn_w2, w.params.ids.ffn_b2);
    w.params.store.get_mut(w2).data_mut().fill(0.0);
    w.params.store.get_mut(b2).data_mut()[0] = 1.0;
    let o = Oracle { p: &w.params, catalog: &w.catalog };
    let hist = UserHistory::from_chronological(&[0, 2, 5], 3);
    let mut tape = Tape::new(&w.params.store);
    let mut fwd = Forward::new(&mut tape, &w.params, &w.catalog);
    let cand = fwd.item_representation(4).unwrap();
    let eu = fwd.user_representation(&hist, cand).unwrap();
    let reps: Vec<_> = [0, 2, 5].iter().map(|&i| o.item_rep(i)).collect();
    for i in 0..3 {
        let expected: Vec<f64> = (0..4).map(|c| reps.iter().map(|r| r[i][c]).sum()).collect();
        assert!(close(tape.value(eu).row_slice(i), &expected, 1e-12));
    }
}

#[test]
fn padding_is_excluded_and_empty_history_rejected() {
    let w = tiny_world(5, small_hyper(2, 4));
    let padded = UserHistory::from_chronological(&[1], 3);
    assert_eq!(padded.slots(), &[Some(1), None, None]);
    let o = Oracle { p: &w.params, catalog: &w.catalog };
    let mut tape = Tape::new(&w.params.store);
    let mut fwd = Forward::new(&mut tape, &w.params, &w.catalog);
    let cand = fwd.item_representation(0).unwrap();
    let eu = fwd.user_representation(&padded, cand).unwrap();
    let expected = o.user_rep(&padded, &o.item_rep(0));
    assert!(close(tape.value(eu).data(), &flat(&expected), 1e-12));
    let empty = UserHistory::from_chronological(&[], 3);
    let mut fwd = Forward::new(&mut tape, &w.params, &w.catalog);
    assert!(fwd.user_representation(&empty, cand).is_err());
}

#[test]
fn history_pooling_matches_loop_oracle() {
    for seed in 0..20 {
        for softmax in [false, true] {
            let hyper = Hyperparams {
                attention_softmax: softmax,
                ..small_hyper(2, 4)
            };
            let mut w = tiny_world(100 + seed, hyper);
            let hist = random_history(&mut w.rng, 6, 3);
            let cand_item = w.rng.gen_range(0..6);
            let o = Oracle { p: &w.params, catalog: &w.catalog };
            let mut tape = Tape::new(&w.params.store);
            let mut fwd = Forward::new(&mut tape, &w.params, &w.catalog);
            let cand = fwd.item_representation(cand_item).unwrap();
            let eu = fwd.user_representation(&hist, cand).unwrap();
            let expected = o.user_rep(&hist, &o.item_rep(cand_item));
            assert!(close(tape.value(eu).data(), &flat(&expected), 1e-12), "seed {seed}");
        }
    }
}

fn const_matrix(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn zero_inputs_give_uniform_attention() {
    let p = ModelParams::zeros(small_hyper(2, 3), 1).unwrap();
    let cat = Catalog {
        item_entity: vec![0],
        attributes: acam::kg::AttributeTable::new(2),
    };
    let mut tape = Tape::new(&p.store);
    let eu = tape.constant(Tensor::zeros(3, 3));
    let ev = tape.constant(Tensor::zeros(3, 3));
    let mut fwd = Forward::new(&mut tape, &p, &cat);
    let co = fwd.coattention(eu, ev).unwrap();
    assert!(tape.value(co.affinity).data().iter().all(|&s| s == 0.0));
    // keys are tanh(0) = 0, so every pooled row is zero as well
    assert!(tape.value(co.user).data().iter().all(|&x| x == 0.0));
    assert!(tape.value(co.item).data().iter().all(|&x| x == 0.0));
}

#[test]
fn hand_set_two_attribute_case_matches_oracle() {
    // M = 1, d = d_K = d_V = 2, identity transforms, no tying
    let hyper = Hyperparams {
        tie_kv: false,
        ..small_hyper(1, 2)
    };
    let mut p = ModelParams::zeros(hyper, 1).unwrap();
    for id in [p.ids.key_u_w, p.ids.key_v_w, p.ids.value_u_w, p.ids.value_v_w] {
        let t = p.store.get_mut(id);
        t.set(0, 0, 1.0);
        t.set(1, 1, 1.0);
    }
    p.store.get_mut(p.ids.value_u_b).data_mut().copy_from_slice(&[0.1, -0.2]);
    let cat = Catalog {
        item_entity: vec![0],
        attributes: acam::kg::AttributeTable::new(1),
    };
    let eu = vec![vec![0.5, -1.0], vec![1.5, 0.25]];
    let ev = vec![vec![-0.75, 0.5], vec![1.0, 1.0]];
    let mut tape = Tape::new(&p.store);
    let (u, v) = (tape.constant(const_matrix(&eu)), tape.constant(const_matrix(&ev)));
    let mut fwd = Forward::new(&mut tape, &p, &cat);
    let co = fwd.coattention(u, v).unwrap();

    // hand computation
    let k = |e: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { e.iter().map(|r| r.iter().map(|x| x.tanh()).collect()).collect() };
    let (ku, kv) = (k(&eu), k(&ev));
    let vu: Vec<Vec<f64>> = eu.iter().map(|r| vec![(r[0] + 0.1).tanh(), (r[1] - 0.2).tanh()]).collect();
    let s = |i: usize, j: usize| ku[i][0] * kv[j][0] + ku[i][1] * kv[j][1];
    let mut ru = [0.0; 2];
    let mut rv = [0.0; 2];
    for j in 0..2 {
        let z = s(0, j).exp() + s(1, j).exp();
        for i in 0..2 {
            for c in 0..2 {
                ru[c] += s(i, j).exp() / z * vu[i][c];
            }
        }
    }
    for i in 0..2 {
        let z = s(i, 0).exp() + s(i, 1).exp();
        for j in 0..2 {
            for c in 0..2 {
                rv[c] += s(i, j).exp() / z * kv[j][c];
            }
        }
    }
    assert!(close(tape.value(co.user).data(), &ru, 1e-12));
    assert!(close(tape.value(co.item).data(), &rv, 1e-12));
    let smat = [s(0, 0), s(0, 1), s(1, 0), s(1, 1)];
    assert!(close(tape.value(co.affinity).data(), &smat, 1e-12));
}

#[test]
fn coattention_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = tiny_world(8, small_hyper(3, 4));
    let rand_mat = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..4).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let (eu, ev) = (rand_mat(&mut rng), rand_mat(&mut rng));
    let perm = [2usize, 0, 3, 1];
    let permute = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { perm.iter().map(|&i| m[i].clone()).collect() };
    let mut tape = Tape::new(&w.params.store);
    let (u, v) = (tape.constant(const_matrix(&eu)), tape.constant(const_matrix(&ev)));
    let (pu, pv) = (tape.constant(const_matrix(&permute(&eu))), tape.constant(const_matrix(&permute(&ev))));
    let mut fwd = Forward::new(&mut tape, &w.params, &w.catalog);
    let a = fwd.coattention(u, v).unwrap();
    let b = fwd.coattention(pu, pv).unwrap();
    let (sa, sb) = (tape.value(a.affinity).clone(), tape.value(b.affinity).clone());
    for i in 0..4 {
        for j in 0..4 {
            assert!((sb.get(i, j) - sa.get(perm[i], perm[j])).abs() < 1e-12);
        }
    }
    assert!(close(tape.value(a.user).data(), tape.value(b.user).data(), 1e-12));
    assert!(close(tape.value(a.item).data(), tape.value(b.item).data(), 1e-12));
}

#[test]
fn zero_parameters_predict_one_half() {
    let w = tiny_world(9, Hyperparams::tiny());
    let p = ModelParams::zeros(Hyperparams::tiny(), w.params.entities()).unwrap();
    let hist = UserHistory::from_chronological(&[0, 1], 2);
    assert_eq!(p.predict(&w.catalog, &hist, 3).unwrap(), 0.5);
}

#[test]
fn predictions_match_straight_line_oracle_and_are_pure() {
    for seed in 0..30 {
        for tie_kv in [true, false] {
            let hyper = Hyperparams {
                tie_kv,
                d_v: if tie_kv { 4 } else { 3 },
                d_k: if tie_kv { 4 } else { 5 },
                ..Hyperparams::tiny()
            };
            let mut w = tiny_world(200 + seed, hyper);
            let hist = random_history(&mut w.rng, 6, 2);
            let item = w.rng.gen_range(0..6);
            let o = Oracle { p: &w.params, catalog: &w.catalog };
            let y = w.params.predict(&w.catalog, &hist, item).unwrap();
            assert!(y > 0.0 && y < 1.0);
            assert!((y - o.predict(&hist, item)).abs() < 1e-10, "seed {seed}");
            assert_eq!(y.to_bits(), w.params.predict(&w.catalog, &hist, item).unwrap().to_bits());
        }
    }
}

#[test]
fn user_representation_depends_on_candidate() {
    let w = tiny_world(10, small_hyper(2, 4));
    let hist = UserHistory::from_chronological(&[0, 1, 2], 3);
    let mut tape = Tape::new(&w.params.store);
    let mut fwd = Forward::new(&mut tape, &w.params, &w.catalog);
    let c3 = fwd.item_representation(3).unwrap();
    let c4 = fwd.item_representation(4).unwrap();
    let u3 = fwd.user_representation(&hist, c3).unwrap();
    let u4 = fwd.user_representation(&hist, c4).unwrap();
    assert_ne!(tape.value(u3), tape.value(u4));
}

#[test]
fn coattention_switch_changes_predictions() {
    let w = tiny_world(11, small_hyper(2, 4));
    let mut off = w.params.clone();
    off.hyper.coattention = false;
    let hist = UserHistory::from_chronological(&[0, 1, 2], 3);
    let on = w.params.predict(&w.catalog, &hist, 5).unwrap();
    let ablated = off.predict(&w.catalog, &hist, 5).unwrap();
    assert!((on - ablated).abs() > 1e-9);
}

#[test]
fn tied_values_alias_key_parameters() {
    let w = tiny_world(12, Hyperparams::tiny());
    let ids = w.params.ids;
    assert_eq!(ids.value_u_w, ids.key_u_w);
    assert_eq!(ids.value_v_b, ids.key_v_b);
    let untied = tiny_world(12, Hyperparams { tie_kv: false, ..Hyperparams::tiny() });
    assert_ne!(untied.params.ids.value_u_w, untied.params.ids.key_u_w);
    assert!(w.params.store.find("coattention.value_u.w").is_none());
}

#[test]
fn hyperparameter_violations_are_listed_together() {
    let h = Hyperparams {
        d: 0,
        l: 0,
        lambda1: -1.0,
        d_k: 7,
        ..Hyperparams::tiny()
    };
    let v = h.violations();
    assert_eq!(v.len(), 4, "{v:?}");
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        for tie_kv in [true, false] {
            let hyper = Hyperparams {
                tie_kv,
                lambda1: 0.5,
                lambda2: 0.01,
                ..Hyperparams::tiny()
            };
            let mut w = tiny_world(300 + seed, hyper);
            let pairs: Vec<LabeledPair> = (0..4)
                .map(|k| LabeledPair {
                    user: 0,
                    item: w.rng.gen_range(0..6),
                    label: (k % 2) as f64,
                    history: random_history(&mut w.rng, 6, 2),
                })
                .collect();
            let triples = w.kg.triples.clone();
            let loss_of = |store: &acam::diff::ParamStore| -> acam::Result<f64> {
                let p = ModelParams::from_store(w.params.hyper.clone(), store.clone())?;
                let mut tape = Tape::new(&p.store);
                let t = joint_loss(&mut tape, &p, &w.catalog, &pairs, &triples)?;
                Ok(tape.value(t.total).item())
            };
            let mut tape = Tape::new(&w.params.store);
            let t = joint_loss(&mut tape, &w.params, &w.catalog, &pairs, &triples).unwrap();
            let grads = tape.backward(t.total).unwrap();
            let report = gradcheck::check(&w.params.store, &grads, Tolerance::default(), loss_of).unwrap();
            for r in report {
                assert!(r.passed(), "seed {seed} tie {tie_kv}: {} worst rel {:e}", r.name, r.worst_relative);
            }
        }
    }
}
