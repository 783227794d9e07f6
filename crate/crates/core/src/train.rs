//! Negative sampling, the joint BCE + transH + L2 objective, and Adam.

use std::collections::HashSet;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::Split;
use crate::kg::Triple;
use crate::model::{Catalog, Forward, Hyperparams, ModelParams, UserHistory};

/// Additive floor on interaction counts so unseen items stay sampleable.
pub const POPULARITY_FLOOR: f64 = 0.1;

/// Draws distinct items with probability proportional to
/// `count + POPULARITY_FLOOR`, skipping exclusions.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    weights: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl NegativeSampler {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        Self::from_counts_with_floor(counts, POPULARITY_FLOOR)
    }

    pub fn from_counts_with_floor(counts: &[usize], floor: f64) -> Result<Self> {
        let weights: Vec<f64> = counts.iter().map(|&c| c as f64 + floor).collect();
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::invalid(format!("popularity weights: {e}")))?;
        Ok(Self { weights, index })
    }

    pub fn items(&self) -> usize {
        self.weights.len()
    }

    /// Probability of each item being the first draw given `exclusions`.
    pub fn first_draw_probabilities(&self, exclusions: &HashSet<usize>) -> Vec<f64> {
        let total: f64 = (0..self.items())
            .filter(|i| !exclusions.contains(i))
            .map(|i| self.weights[i])
            .sum();
        (0..self.items())
            .map(|i| if exclusions.contains(&i) { 0.0 } else { self.weights[i] / total })
            .collect()
    }

    /// `k` distinct items outside `exclusions`, drawn without replacement.
    pub fn sample<R: Rng>(&self, k: usize, exclusions: &HashSet<usize>, rng: &mut R) -> Result<Vec<usize>> {
        let excluded = exclusions.iter().filter(|&&i| i < self.items()).count();
        let pool = self.items() - excluded;
        if pool < k {
            return Err(Error::invalid(format!(
                "cannot draw {k} negatives from a pool of {pool} items"
            )));
        }
        let mut chosen = Vec::with_capacity(k);
        // Rejection against the full distribution gives the same law as
        // renormalizing after every draw; fall back to the explicit form
        // when rejections pile up.
        let mut attempts = 0;
        while chosen.len() < k && attempts < 64 * (k + 1) {
            attempts += 1;
            let i = self.index.sample(rng);
            if !exclusions.contains(&i) && !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        while chosen.len() < k {
            let allowed: Vec<usize> = (0..self.items())
                .filter(|i| !exclusions.contains(i) && !chosen.contains(i))
                .collect();
            let w: Vec<f64> = allowed.iter().map(|&i| self.weights[i]).collect();
            let pick = WeightedIndex::new(&w)
                .map_err(|e| Error::invalid(format!("popularity weights: {e}")))?
                .sample(rng);
            chosen.push(allowed[pick]);
        }
        Ok(chosen)
    }
}

/// A `(user, item, label)` pair together with the history the user had
/// before the item.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub user: usize,
    pub item: usize,
    pub label: f64,
    pub history: UserHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub kge_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 10,
            negatives: 4,
            kge_batch: 256,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, v) in [("batch_size", self.batch_size), ("negatives", self.negatives), ("kge_batch", self.kge_batch)] {
            if v == 0 {
                out.push(format!("{name} must be >= 1"));
            }
        }
        out
    }
}

/// One epoch's stream: for every training positive after the first of each
/// user, the positive and `negatives` sampled items, all sharing the
/// history that preceded the positive. Shuffled.
pub fn epoch_pairs<R: Rng>(
    split: &Split,
    sampler: &NegativeSampler,
    history_len: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::new();
    for user in 0..split.users() {
        let items = &split.train[user];
        if items.len() < 2 {
            continue;
        }
        let exclusions = split.positives(user);
        for p in 1..items.len() {
            let history = UserHistory::from_chronological(&items[..p], history_len);
            out.push(LabeledPair {
                user,
                item: items[p],
                label: 1.0,
                history: history.clone(),
            });
            for item in sampler.sample(negatives, &exclusions, rng)? {
                out.push(LabeledPair {
                    user,
                    item,
                    label: 0.0,
                    history: history.clone(),
                });
            }
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Loss terms recorded on a tape. `kge` and `l2` are already weighted.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bce: Var,
    pub kge: Option<Var>,
    pub l2: Var,
}

/// Mean BCE over `pairs` + λ1 · mean transH energy over `triples` +
/// λ2 · Σ‖θ‖² over every parameter.
pub fn joint_loss(
    tape: &mut Tape,
    params: &ModelParams,
    catalog: &Catalog,
    pairs: &[LabeledPair],
    triples: &[Triple],
) -> Result<LossTerms> {
    if pairs.is_empty() {
        return Err(Error::invalid("joint loss: empty pair batch"));
    }
    let hyper = &params.hyper;
    let probs = {
        let mut fwd = Forward::new(tape, params, catalog);
        let mut feats = Vec::with_capacity(pairs.len());
        for p in pairs {
            feats.push(fwd.features(&p.history, p.item)?);
        }
        fwd.score(&feats)?
    };
    let bce = tape.bce_mean(probs, pairs.iter().map(|p| p.label).collect())?;
    let mut total = bce;

    let kge = if triples.is_empty() {
        None
    } else {
        let e = params.transh().batch_loss(tape, triples)?;
        let weighted = tape.scale(e, hyper.lambda1);
        total = tape.add(total, weighted)?;
        Some(weighted)
    };

    let mut squares = Vec::with_capacity(params.store.len());
    for id in params.store.ids() {
        let v = tape.param(id);
        squares.push(tape.sum_squares(v));
    }
    let all = tape.vstack(&squares)?;
    let norm = tape.sum(all);
    let l2 = tape.scale(norm, hyper.lambda2);
    total = tape.add(total, l2)?;
    Ok(LossTerms { total, bce, kge, l2 })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros_like(t)).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_bce: f64,
    pub loss_kge: f64,
    pub loss_l2: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_total,loss_bce,loss_kge,loss_l2,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.loss_total, self.loss_bce, self.loss_kge, self.loss_l2, self.seconds
        )
    }
}

/// Everything the trainer reads.
pub struct TrainData<'a> {
    pub split: &'a Split,
    pub catalog: &'a Catalog,
    pub triples: &'a [Triple],
    pub sampler: &'a NegativeSampler,
}

fn norms(store: &ParamStore) -> String {
    store
        .iter()
        .map(|(_, name, t)| format!("{name}={:.4e}", t.sum_squares().sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Mini-batch Adam over shuffled labeled pairs, each step paired with a
/// uniformly sampled triple batch; relation normals are renormalized after
/// every step. `on_epoch` sees the parameters after each epoch.
pub fn train<F>(
    data: &TrainData,
    mut params: ModelParams,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, Vec<EpochLog>)>
where
    F: FnMut(&ModelParams, &EpochLog) -> Result<()>,
{
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v.join("; ")));
    }
    let hyper: Hyperparams = params.hyper.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params.store, cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let pairs = epoch_pairs(data.split, data.sampler, hyper.l, cfg.negatives, &mut rng)?;
        if pairs.is_empty() {
            return Err(Error::invalid("training split has no usable positives"));
        }
        let (mut total, mut bce, mut kge, mut l2) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let triples: Vec<Triple> = if data.triples.is_empty() || hyper.lambda1 == 0.0 {
                Vec::new()
            } else {
                (0..cfg.kge_batch)
                    .map(|_| data.triples[rng.gen_range(0..data.triples.len())])
                    .collect()
            };
            let grads = {
                let mut tape = Tape::new(&params.store);
                let terms = joint_loss(&mut tape, &params, data.catalog, batch, &triples)?;
                let value = tape.value(terms.total).item();
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, batch {b}; parameter norms: {}",
                        norms(&params.store)
                    )));
                }
                total += value;
                bce += tape.value(terms.bce).item();
                kge += terms.kge.map_or(0.0, |k| tape.value(k).item());
                l2 += tape.value(terms.l2).item();
                tape.backward(terms.total)?
            };
            adam.step(&mut params.store, &grads);
            params.renormalize_normals();
            batches += 1;
        }
        let n = batches as f64;
        let entry = EpochLog {
            epoch,
            loss_total: total / n,
            loss_bce: bce / n,
            loss_kge: kge / n,
            loss_l2: l2 / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&params, &entry)?;
        log.push(entry);
    }
    Ok((params, log))
}
