//! Attribute-level co-attention scorer.
//!
//! Items are `(M+1) × d` matrices: the item's own entity embedding followed
//! by one averaged embedding per attribute slot. A user is pooled from the
//! representations of their recent items, conditioned on the candidate, and
//! both sides are then re-weighted through the affinity map between them.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg::{renormalize_rows, AttributeTable, TransH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Attribute slots per item.
    pub m: usize,
    /// History length.
    pub l: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Share key and value transforms (`K = V`, requires `d = d_k = d_v`).
    pub tie_kv: bool,
    /// Normalize the history pooling weights with a softmax over the history.
    pub attention_softmax: bool,
    /// When false, the affinity softmaxes are replaced by uniform weights.
    pub coattention: bool,
    pub mlp_hidden: [usize; 2],
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            d: 512,
            d_k: 512,
            d_v: 512,
            m: 4,
            l: 3,
            lambda1: 0.1,
            lambda2: 0.001,
            tie_kv: true,
            attention_softmax: false,
            coattention: true,
            mlp_hidden: [256, 128],
        }
    }
}

impl Hyperparams {
    /// Tiny configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 4,
            d_k: 4,
            d_v: 4,
            m: 2,
            l: 2,
            mlp_hidden: [4, 2],
            ..Self::default()
        }
    }

    /// Every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [("d", self.d), ("d_k", self.d_k), ("d_v", self.d_v), ("m", self.m), ("l", self.l)] {
            if v == 0 {
                out.push(format!("{name} must be >= 1"));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.tie_kv && (self.d_k != self.d || self.d_v != self.d) {
            out.push(format!(
                "tie_kv requires d = d_k = d_v, got {}/{}/{}",
                self.d, self.d_k, self.d_v
            ));
        }
        if self.mlp_hidden.contains(&0) {
            out.push("mlp hidden widths must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn mlp_input(&self) -> usize {
        2 * self.d_v + 2 * self.d
    }
}

/// Items known to the model: the entity behind each item id and the
/// attribute slots of every entity.
#[derive(Clone, Debug)]
pub struct Catalog {
    pub item_entity: Vec<usize>,
    pub attributes: AttributeTable,
}

impl Catalog {
    pub fn items(&self) -> usize {
        self.item_entity.len()
    }
}

/// The `L` most recent items of a user, newest first; `None` marks padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    slots: Vec<Option<usize>>,
}

impl UserHistory {
    /// Builds a history from items in chronological order, keeping the
    /// last `l`.
    pub fn from_chronological(items: &[usize], l: usize) -> Self {
        let mut slots: Vec<Option<usize>> = items.iter().rev().take(l).map(|&i| Some(i)).collect();
        slots.resize(l, None);
        Self { slots }
    }

    pub fn slots(&self) -> &[Option<usize>] {
        &self.slots
    }

    pub fn valid(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().flatten().copied()
    }

    pub fn valid_len(&self) -> usize {
        self.slots.iter().flatten().count()
    }
}

/// Parameter handles. With `tie_kv`, each value transform aliases its key
/// transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub entities: ParamId,
    pub normals: ParamId,
    pub translations: ParamId,
    pub unknown: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub key_u_w: ParamId,
    pub key_u_b: ParamId,
    pub value_u_w: ParamId,
    pub value_u_b: ParamId,
    pub key_v_w: ParamId,
    pub key_v_b: ParamId,
    pub value_v_w: ParamId,
    pub value_v_b: ParamId,
    pub mlp_w: [ParamId; 3],
    pub mlp_b: [ParamId; 3],
}

/// Trainable state: every tensor lives in `store`, which is exactly the set
/// the L2 penalty ranges over.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyperparams,
    pub store: ParamStore,
    pub ids: ParamIds,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Embedding,
    UnitRows,
    Weight,
    Bias,
}

fn shapes(h: &Hyperparams, entities: usize) -> Vec<(&'static str, usize, usize, Init)> {
    use Init::*;
    let mut v = vec![
        ("entity_embeddings", entities, h.d, Embedding),
        ("relation_normals", h.m, h.d, UnitRows),
        ("relation_translations", h.m, h.d, Embedding),
        ("unknown_value_embeddings", h.m, h.d, Embedding),
        ("attention_ffn.w1", 2 * h.d, h.d, Weight),
        ("attention_ffn.b1", 1, h.d, Bias),
        ("attention_ffn.w2", h.d, 1, Weight),
        ("attention_ffn.b2", 1, 1, Bias),
        ("coattention.key_u.w", h.d, h.d_k, Weight),
        ("coattention.key_u.b", 1, h.d_k, Bias),
        ("coattention.key_v.w", h.d, h.d_k, Weight),
        ("coattention.key_v.b", 1, h.d_k, Bias),
    ];
    if !h.tie_kv {
        v.extend([
            ("coattention.value_u.w", h.d, h.d_v, Weight),
            ("coattention.value_u.b", 1, h.d_v, Bias),
            ("coattention.value_v.w", h.d, h.d_v, Weight),
            ("coattention.value_v.b", 1, h.d_v, Bias),
        ]);
    }
    let widths = [h.mlp_input(), h.mlp_hidden[0], h.mlp_hidden[1], 1];
    const MLP: [(&str, &str); 3] = [("mlp.w1", "mlp.b1"), ("mlp.w2", "mlp.b2"), ("mlp.w3", "mlp.b3")];
    for (k, (w, b)) in MLP.iter().enumerate() {
        v.push((w, widths[k], widths[k + 1], Weight));
        v.push((b, 1, widths[k + 1], Bias));
    }
    v
}

impl ModelParams {
    /// All tensors zero except unit relation normals.
    pub fn zeros(hyper: Hyperparams, entities: usize) -> Result<Self> {
        hyper.validate()?;
        let mut store = ParamStore::new();
        for (name, r, c, _) in shapes(&hyper, entities) {
            store.insert(name, Tensor::zeros(r, c))?;
        }
        let mut out = Self::from_store(hyper, store)?;
        let normals = out.store.get_mut(out.ids.normals);
        for i in 0..normals.rows() {
            normals.set(i, 0, 1.0);
        }
        Ok(out)
    }

    /// Embeddings and translations ~ N(0, 0.1²), weights Glorot-uniform,
    /// biases zero, relation normals random unit vectors.
    pub fn init<R: Rng>(hyper: Hyperparams, entities: usize, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let small = Normal::new(0.0, 0.1).expect("valid std");
        let standard = Normal::new(0.0, 1.0).expect("valid std");
        let mut store = ParamStore::new();
        for (name, r, c, init) in shapes(&hyper, entities) {
            let data: Vec<f64> = match init {
                Init::Bias => vec![0.0; r * c],
                Init::Weight => {
                    let bound = (6.0 / (r + c) as f64).sqrt();
                    let u = Uniform::new_inclusive(-bound, bound);
                    (0..r * c).map(|_| u.sample(rng)).collect()
                }
                Init::Embedding => (0..r * c).map(|_| small.sample(rng)).collect(),
                Init::UnitRows => (0..r * c).map(|_| standard.sample(rng)).collect(),
            };
            let mut t = Tensor::matrix(r, c, data)?;
            if init == Init::UnitRows {
                renormalize_rows(&mut t);
            }
            store.insert(name, t)?;
        }
        Self::from_store(hyper, store)
    }

    /// Resolves parameter handles by name and checks every shape.
    pub fn from_store(hyper: Hyperparams, store: ParamStore) -> Result<Self> {
        hyper.validate()?;
        let entities = store
            .find("entity_embeddings")
            .map(|id| store.get(id).rows())
            .ok_or_else(|| Error::invalid("missing tensor entity_embeddings"))?;
        let expected = shapes(&hyper, entities);
        if store.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, r, c, _) in &expected {
            let id = store
                .find(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
            let t = store.get(id);
            if t.rows() != *r || t.cols() != *c {
                return Err(Error::shape("parameter", &[*r, *c], t.shape()));
            }
        }
        let id = |n: &str| store.find(n).expect("checked above");
        let (value_u_w, value_u_b, value_v_w, value_v_b) = if hyper.tie_kv {
            (id("coattention.key_u.w"), id("coattention.key_u.b"), id("coattention.key_v.w"), id("coattention.key_v.b"))
        } else {
            (id("coattention.value_u.w"), id("coattention.value_u.b"), id("coattention.value_v.w"), id("coattention.value_v.b"))
        };
        let ids = ParamIds {
            entities: id("entity_embeddings"),
            normals: id("relation_normals"),
            translations: id("relation_translations"),
            unknown: id("unknown_value_embeddings"),
            ffn_w1: id("attention_ffn.w1"),
            ffn_b1: id("attention_ffn.b1"),
            ffn_w2: id("attention_ffn.w2"),
            ffn_b2: id("attention_ffn.b2"),
            key_u_w: id("coattention.key_u.w"),
            key_u_b: id("coattention.key_u.b"),
            value_u_w,
            value_u_b,
            key_v_w: id("coattention.key_v.w"),
            key_v_b: id("coattention.key_v.b"),
            value_v_w,
            value_v_b,
            mlp_w: [id("mlp.w1"), id("mlp.w2"), id("mlp.w3")],
            mlp_b: [id("mlp.b1"), id("mlp.b2"), id("mlp.b3")],
        };
        Ok(Self { hyper, store, ids })
    }

    pub fn entities(&self) -> usize {
        self.store.get(self.ids.entities).rows()
    }

    pub fn transh(&self) -> TransH {
        TransH {
            entities: self.ids.entities,
            normals: self.ids.normals,
            translations: self.ids.translations,
        }
    }

    /// Restores `‖w_r‖ = 1` for every relation normal.
    pub fn renormalize_normals(&mut self) {
        renormalize_rows(self.store.get_mut(self.ids.normals));
    }

    /// Probability that the user behind `history` likes `item`.
    pub fn predict(&self, catalog: &Catalog, history: &UserHistory, item: usize) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let mut fwd = Forward::new(&mut tape, self, catalog);
        let f = fwd.features(history, item)?;
        let p = fwd.score(&[f])?;
        Ok(tape.value(p).item())
    }
}

/// Outputs of the co-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct CoAttention {
    pub user: Var,
    pub item: Var,
    pub affinity: Var,
}

/// One forward pass recorded on a tape. Item representations are cached for
/// the lifetime of the pass.
pub struct Forward<'t, 'p> {
    pub tape: &'t mut Tape<'p>,
    model: &'t ModelParams,
    catalog: &'t Catalog,
    items: HashMap<usize, Var>,
}

impl<'t, 'p> Forward<'t, 'p> {
    pub fn new(tape: &'t mut Tape<'p>, model: &'t ModelParams, catalog: &'t Catalog) -> Self {
        Self {
            tape,
            model,
            catalog,
            items: HashMap::new(),
        }
    }

    /// `(M+1) × d`: the item's entity embedding, then per attribute slot the
    /// mean of its value embeddings or the slot's unknown embedding.
    pub fn item_representation(&mut self, item: usize) -> Result<Var> {
        if let Some(&v) = self.items.get(&item) {
            return Ok(v);
        }
        let ids = &self.model.ids;
        let entity = *self.catalog.item_entity.get(item).ok_or_else(|| Error::Unknown {
            kind: "item",
            id: item.to_string(),
        })?;
        let m = self.model.hyper.m;
        let mut rows = Vec::with_capacity(m + 1);
        rows.push(vec![(ids.entities, entity)]);
        for slot in 1..=m {
            let values = self.catalog.attributes.values(entity, slot);
            if values.is_empty() {
                rows.push(vec![(ids.unknown, slot - 1)]);
            } else {
                rows.push(values.iter().map(|&e| (ids.entities, e)).collect());
            }
        }
        let v = self.tape.bag(rows)?;
        self.items.insert(item, v);
        Ok(v)
    }

    /// Candidate-conditioned pooling: row `i` is `Σ_j FFN(a_i^j ⊕ a_i^v) a_i^j`
    /// over the valid history items `j`.
    pub fn user_representation(&mut self, history: &UserHistory, candidate: Var) -> Result<Var> {
        let items: Vec<usize> = history.valid().collect();
        if items.is_empty() {
            return Err(Error::invalid("user history has no valid items"));
        }
        let width = self.model.hyper.m + 1;
        let mut reps = Vec::with_capacity(items.len());
        for &it in &items {
            reps.push(self.item_representation(it)?);
        }
        let tape = &mut *self.tape;
        let stacked = tape.vstack(&reps)?;
        let pairing: Vec<usize> = (0..items.len()).flat_map(|_| 0..width).collect();
        let cand = tape.select_rows(candidate, pairing)?;
        let x = tape.concat(&[stacked, cand])?;

        let ids = &self.model.ids;
        let (w1, b1, w2, b2) = (tape.param(ids.ffn_w1), tape.param(ids.ffn_b1), tape.param(ids.ffn_w2), tape.param(ids.ffn_b2));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.tanh(h);
        let w = tape.matmul(h, w2)?;
        let w = tape.add_row_bias(w, b2)?;

        let mut rows = Vec::with_capacity(width);
        for i in 0..width {
            let idx: Vec<usize> = (0..items.len()).map(|j| j * width + i).collect();
            let mut wi = tape.select_rows(w, idx.clone())?;
            if self.model.hyper.attention_softmax {
                wi = tape.softmax_cols(wi);
            }
            let vi = tape.select_rows(stacked, idx)?;
            rows.push(tape.weighted_sum(wi, vi)?);
        }
        tape.vstack(&rows)
    }

    fn transform(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.tape.param(w), self.tape.param(b));
        let y = self.tape.matmul(x, w)?;
        let y = self.tape.add_row_bias(y, b)?;
        Ok(self.tape.tanh(y))
    }

    /// Affinity `S = K^u K^vᵀ`; `U = softmax_col(S)ᵀ V^u`, `V = softmax_row(S) V^v`;
    /// each side sum-pooled over its rows.
    pub fn coattention(&mut self, user: Var, item: Var) -> Result<CoAttention> {
        let (eu, ev) = (self.tape.value(user), self.tape.value(item));
        let h = &self.model.hyper;
        if eu.rows() != h.m + 1 || eu.cols() != h.d || ev.rows() != h.m + 1 || ev.cols() != h.d {
            return Err(Error::shape("coattention", eu.shape(), ev.shape()));
        }
        let ids = self.model.ids;
        let key_u = self.transform(user, ids.key_u_w, ids.key_u_b)?;
        let key_v = self.transform(item, ids.key_v_w, ids.key_v_b)?;
        let (val_u, val_v) = if h.tie_kv {
            (key_u, key_v)
        } else {
            (
                self.transform(user, ids.value_u_w, ids.value_u_b)?,
                self.transform(item, ids.value_v_w, ids.value_v_b)?,
            )
        };
        let tape = &mut *self.tape;
        let kvt = tape.transpose(key_v);
        let affinity = tape.matmul(key_u, kvt)?;
        let (by_col, by_row) = if h.coattention {
            (tape.softmax_cols(affinity), tape.softmax_rows(affinity))
        } else {
            let n = h.m + 1;
            let uniform = tape.constant(Tensor::filled(n, n, 1.0 / n as f64));
            (uniform, uniform)
        };
        let by_col_t = tape.transpose(by_col);
        let u = tape.matmul(by_col_t, val_u)?;
        let v = tape.matmul(by_row, val_v)?;
        Ok(CoAttention {
            user: tape.sum_cols(u),
            item: tape.sum_cols(v),
            affinity,
        })
    }

    /// MLP input for one (user, candidate) pair: `r_u ⊕ r_v ⊕ mean(E_u) ⊕ mean(E_v)`.
    pub fn features(&mut self, history: &UserHistory, item: usize) -> Result<Var> {
        let ev = self.item_representation(item)?;
        let eu = self.user_representation(history, ev)?;
        let co = self.coattention(eu, ev)?;
        let mu = self.tape.avg_over_attributes(eu);
        let mv = self.tape.avg_over_attributes(ev);
        self.tape.concat(&[co.user, co.item, mu, mv])
    }

    /// Scores a batch of feature rows through relu → relu → sigmoid, `B × 1`.
    pub fn score(&mut self, features: &[Var]) -> Result<Var> {
        let ids = self.model.ids;
        let tape = &mut *self.tape;
        let mut x = tape.vstack(features)?;
        for k in 0..3 {
            let (w, b) = (tape.param(ids.mlp_w[k]), tape.param(ids.mlp_b[k]));
            x = tape.matmul(x, w)?;
            x = tape.add_row_bias(x, b)?;
            x = if k < 2 { tape.relu(x) } else { tape.sigmoid(x) };
        }
        Ok(x)
    }
}
