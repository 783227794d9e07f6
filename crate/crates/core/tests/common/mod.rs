//! Test-only oracles: plain nested-loop versions of the forward pass that
//! read raw parameter tensors and share no code with the tape.

#![allow(dead_code)]

use std::path::Path;

use acam::diff::Tensor;
use acam::kg::KnowledgeGraph;
use acam::model::{Catalog, Hyperparams, ModelParams, UserHistory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub struct Oracle<'a> {
    pub p: &'a ModelParams,
    pub catalog: &'a Catalog,
}

fn affine_tanh(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|k| {
            let mut s = b[k];
            for q in 0..x.len() {
                s += x[q] * w[q][k];
            }
            s.tanh()
        })
        .collect()
}

impl<'a> Oracle<'a> {
    fn t(&self, id: acam::diff::ParamId) -> Mat {
        rows(self.p.store.get(id))
    }

    pub fn item_rep(&self, item: usize) -> Mat {
        let ent = self.t(self.p.ids.entities);
        let unknown = self.t(self.p.ids.unknown);
        let e = self.catalog.item_entity[item];
        let mut out = vec![ent[e].clone()];
        for slot in 1..=self.p.hyper.m {
            let vals = self.catalog.attributes.values(e, slot);
            if vals.is_empty() {
                out.push(unknown[slot - 1].clone());
            } else {
                let mut acc = vec![0.0; self.p.hyper.d];
                for &v in vals {
                    for c in 0..acc.len() {
                        acc[c] += ent[v][c];
                    }
                }
                for a in acc.iter_mut() {
                    *a /= vals.len() as f64;
                }
                out.push(acc);
            }
        }
        out
    }

    pub fn ffn(&self, x: &[f64]) -> f64 {
        let ids = &self.p.ids;
        let h = affine_tanh(x, &self.t(ids.ffn_w1), &self.t(ids.ffn_b1)[0]);
        let w2 = self.t(ids.ffn_w2);
        let mut s = self.t(ids.ffn_b2)[0][0];
        for k in 0..h.len() {
            s += h[k] * w2[k][0];
        }
        s
    }

    pub fn user_rep(&self, history: &UserHistory, cand: &Mat) -> Mat {
        let hist: Vec<Mat> = history.valid().map(|i| self.item_rep(i)).collect();
        let m1 = self.p.hyper.m + 1;
        let d = self.p.hyper.d;
        let mut out = vec![vec![0.0; d]; m1];
        for i in 0..m1 {
            let mut weights: Vec<f64> = hist
                .iter()
                .map(|rep| {
                    let mut x = rep[i].clone();
                    x.extend_from_slice(&cand[i]);
                    self.ffn(&x)
                })
                .collect();
            if self.p.hyper.attention_softmax {
                let z: f64 = weights.iter().map(|w| w.exp()).sum();
                weights.iter_mut().for_each(|w| *w = w.exp() / z);
            }
            for (j, rep) in hist.iter().enumerate() {
                for c in 0..d {
                    out[i][c] += weights[j] * rep[i][c];
                }
            }
        }
        out
    }

    /// Returns `(r_u, r_v, S)`.
    pub fn coattention(&self, eu: &Mat, ev: &Mat) -> (Vec<f64>, Vec<f64>, Mat) {
        let ids = &self.p.ids;
        let h = &self.p.hyper;
        let tr = |e: &Mat, w, b| -> Mat {
            let (w, b) = (self.t(w), self.t(b));
            e.iter().map(|row| affine_tanh(row, &w, &b[0])).collect()
        };
        let ku = tr(eu, ids.key_u_w, ids.key_u_b);
        let kv = tr(ev, ids.key_v_w, ids.key_v_b);
        let vu = tr(eu, ids.value_u_w, ids.value_u_b);
        let vv = tr(ev, ids.value_v_w, ids.value_v_b);
        let n = h.m + 1;
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for c in 0..ku[i].len() {
                    s[i][j] += ku[i][c] * kv[j][c];
                }
            }
        }
        let dv = vu[0].len();
        let mut ru = vec![0.0; dv];
        let mut rv = vec![0.0; dv];
        for j in 0..n {
            // column j of S, normalized over i
            let z: f64 = (0..n).map(|i| if h.coattention { s[i][j].exp() } else { 1.0 }).sum();
            for i in 0..n {
                let a = if h.coattention { s[i][j].exp() } else { 1.0 } / z;
                for c in 0..dv {
                    ru[c] += a * vu[i][c];
                }
            }
        }
        for i in 0..n {
            let z: f64 = (0..n).map(|j| if h.coattention { s[i][j].exp() } else { 1.0 }).sum();
            for j in 0..n {
                let a = if h.coattention { s[i][j].exp() } else { 1.0 } / z;
                for c in 0..dv {
                    rv[c] += a * vv[j][c];
                }
            }
        }
        (ru, rv, s)
    }

    pub fn predict(&self, history: &UserHistory, item: usize) -> f64 {
        let ev = self.item_rep(item);
        let eu = self.user_rep(history, &ev);
        let (ru, rv, _) = self.coattention(&eu, &ev);
        let mean = |e: &Mat| -> Vec<f64> {
            (0..e[0].len()).map(|c| e.iter().map(|r| r[c]).sum::<f64>() / e.len() as f64).collect()
        };
        let mut x = ru;
        x.extend(rv);
        x.extend(mean(&eu));
        x.extend(mean(&ev));
        let ids = &self.p.ids;
        for k in 0..3 {
            let w = self.t(ids.mlp_w[k]);
            let b = self.t(ids.mlp_b[k]);
            let mut y = b[0].clone();
            for (q, xv) in x.iter().enumerate() {
                for c in 0..y.len() {
                    y[c] += xv * w[q][c];
                }
            }
            if k < 2 {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        1.0 / (1.0 + (-x[0]).exp())
    }
}

/// transH energy with explicit loops.
pub fn transh_oracle(h: &[f64], t: &[f64], w: &[f64], d: &[f64]) -> f64 {
    let mut wh = 0.0;
    let mut wt = 0.0;
    for k in 0..w.len() {
        wh += w[k] * h[k];
        wt += w[k] * t[k];
    }
    let mut e = 0.0;
    for k in 0..w.len() {
        let r = (h[k] - wh * w[k]) + d[k] - (t[k] - wt * w[k]);
        e += r * r;
    }
    e
}

pub fn bce_oracle(p: f64, y: f64) -> f64 {
    let c = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
}

/// A random catalog of `items` items over `values` attribute entities, some
/// slots empty and some multi-valued, parsed through the triple loader.
pub fn random_catalog(rng: &mut ChaCha8Rng, m: usize, items: usize, values: usize) -> (KnowledgeGraph, Catalog) {
    let mut text = String::new();
    for i in 0..items {
        for slot in 1..=m {
            for _ in 0..rng.gen_range(0..=2) {
                text.push_str(&format!("item{i}\tr{slot}\tval{}\n", rng.gen_range(0..values)));
            }
        }
    }
    let order: Vec<String> = (1..=m).map(|s| format!("r{s}")).collect();
    let mut kg = KnowledgeGraph::parse(&text, Path::new("mem"), m, Some(&order)).unwrap();
    let mut vocab = acam::kg::Vocab::new();
    for i in 0..items {
        vocab.get_or_insert(&format!("item{i}"));
    }
    let item_entity = kg.link_items(&vocab);
    let catalog = Catalog {
        item_entity,
        attributes: kg.attributes.clone(),
    };
    (kg, catalog)
}

/// Random parameters with every tensor (biases included) perturbed.
pub fn random_params(rng: &mut ChaCha8Rng, hyper: Hyperparams, entities: usize) -> ModelParams {
    let mut p = ModelParams::init(hyper, entities, rng).unwrap();
    let ids: Vec<_> = p.store.ids().collect();
    for id in ids {
        for x in p.store.get_mut(id).data_mut() {
            *x += rng.gen_range(-0.5..0.5);
        }
    }
    p.renormalize_normals();
    p
}

pub fn random_history(rng: &mut ChaCha8Rng, items: usize, l: usize) -> UserHistory {
    let len = rng.gen_range(1..=l);
    let chosen: Vec<usize> = (0..len).map(|_| rng.gen_range(0..items)).collect();
    UserHistory::from_chronological(&chosen, l)
}

pub struct TinyWorld {
    pub kg: KnowledgeGraph,
    pub catalog: Catalog,
    pub params: ModelParams,
    pub rng: ChaCha8Rng,
}

pub fn tiny_world(seed: u64, hyper: Hyperparams) -> TinyWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kg, catalog) = random_catalog(&mut rng, hyper.m, 6, 5);
    let params = random_params(&mut rng, hyper, kg.entities.len());
    TinyWorld { kg, catalog, params, rng }
}

/// A 100-triple KG: 40 items, two relations, 12 tail values.
pub fn hundred_triples(seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    let mut seen = std::collections::HashSet::new();
    while seen.len() < 100 {
        let fact = (rng.gen_range(0..40), rng.gen_range(1..=2), rng.gen_range(0..12));
        if seen.insert(fact) {
            text.push_str(&format!("item{}\tr{}\tval{}\n", fact.0, fact.1, fact.2));
        }
    }
    let kg = KnowledgeGraph::parse(&text, Path::new("mem"), 2, None).unwrap();
    assert_eq!(kg.triples.len(), 100);
    kg
}

/// Trains only the weighted transH term with Adam for `steps` full-batch
/// steps. Returns the mean energy before and after each step, and the worst
/// deviation of any ‖w_r‖ from 1 seen after a step.
pub fn kge_only_run(seed: u64, steps: usize) -> (Vec<f64>, f64) {
    use acam::diff::Tape;
    use acam::train::Adam;
    let kg = hundred_triples(seed);
    let hyper = Hyperparams {
        d: 8,
        d_k: 8,
        d_v: 8,
        lambda1: 1.0,
        lambda2: 0.0,
        ..Hyperparams::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(hyper, kg.entities.len(), &mut rng).unwrap();
    let mut adam = Adam::new(&p.store, 0.01);
    let mut energies = Vec::with_capacity(steps + 1);
    let mut worst = 0.0f64;
    for _ in 0..=steps {
        let grads = {
            let mut tape = Tape::new(&p.store);
            let e = p.transh().batch_loss(&mut tape, &kg.triples).unwrap();
            let loss = tape.scale(e, p.hyper.lambda1);
            energies.push(tape.value(e).item());
            tape.backward(loss).unwrap()
        };
        if energies.len() > steps {
            break;
        }
        adam.step(&mut p.store, &grads);
        p.renormalize_normals();
        let normals = p.store.get(p.ids.normals);
        for r in 0..normals.rows() {
            let n = normals.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            worst = worst.max((n - 1.0).abs());
        }
    }
    (energies, worst)
}
