//! Leave-latest-out split and ranking metrics over pooled candidate lists.
//!
//! Each evaluated user contributes one list: every held-out positive plus
//! `eval_negatives` sampled negatives per positive. HR@n is the fraction of
//! the top `n` that are positives (precision at n over the pooled list).

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::kg::InteractionLog;
use crate::model::{Catalog, Forward, ModelParams, UserHistory};
use crate::train::NegativeSampler;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_positives: usize,
    pub eval_negatives: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_positives: 10,
            eval_negatives: 4,
        }
    }
}

/// Per-user chronological item lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl Split {
    pub fn users(&self) -> usize {
        self.train.len()
    }

    /// Users with both a training history and held-out positives.
    pub fn evaluable(&self, user: usize) -> bool {
        !self.train[user].is_empty() && !self.test[user].is_empty()
    }

    /// Every known positive of `user`, train and test.
    pub fn positives(&self, user: usize) -> HashSet<usize> {
        self.train[user].iter().chain(&self.test[user]).copied().collect()
    }

    /// Interaction counts per item over the training lists.
    pub fn train_popularity(&self, items: usize) -> Vec<usize> {
        let mut counts = vec![0; items];
        for list in &self.train {
            for &i in list {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// The latest `test_positives` interactions of each user are held out.
/// Users with no more than that many interactions get neither list.
pub fn split(log: &InteractionLog, spec: &SplitSpec) -> Split {
    let n = log.users.len();
    let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); n];
    for r in &log.interactions {
        per_user[r.user].push((r.timestamp, r.item));
    }
    let mut train = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(n);
    for mut rows in per_user {
        // stable: equal timestamps keep input order
        rows.sort_by_key(|&(ts, _)| ts);
        if rows.len() <= spec.test_positives {
            train.push(Vec::new());
            test.push(Vec::new());
            continue;
        }
        let cut = rows.len() - spec.test_positives;
        train.push(rows[..cut].iter().map(|&(_, i)| i).collect());
        test.push(rows[cut..].iter().map(|&(_, i)| i).collect());
    }
    Split { train, test }
}

/// One user's candidates sorted by score, highest first; ties by item id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl RankedList {
    pub fn new(mut entries: Vec<(usize, f64, bool)>) -> Self {
        entries.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        Self {
            items: entries.iter().map(|e| e.0).collect(),
            scores: entries.iter().map(|e| e.1).collect(),
            labels: entries.iter().map(|e| e.2).collect(),
        }
    }

    /// A list that is already in rank order.
    pub fn from_labels(labels: Vec<bool>) -> Self {
        let n = labels.len();
        Self {
            items: (0..n).collect(),
            scores: (0..n).rev().map(|s| s as f64).collect(),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

fn check_cutoff(list: &RankedList, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("cutoff n must be >= 1"));
    }
    if n > list.len() {
        return Err(Error::invalid(format!(
            "cutoff {n} exceeds list length {}",
            list.len()
        )));
    }
    Ok(())
}

/// Fraction of the top `n` that are relevant.
pub fn hr_at_n(list: &RankedList, n: usize) -> Result<f64> {
    check_cutoff(list, n)?;
    let hits = list.labels[..n].iter().filter(|&&l| l).count();
    Ok(hits as f64 / n as f64)
}

/// DCG of the top `n` over the DCG of `min(n, P)` relevant items ranked first.
pub fn ndcg_at_n(list: &RankedList, n: usize) -> Result<f64> {
    check_cutoff(list, n)?;
    let gain = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = (0..n).filter(|&k| list.labels[k]).map(gain).sum();
    let ideal: f64 = (0..n.min(list.positives())).map(gain).sum();
    Ok(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

/// Reciprocal rank of the first relevant item, or 0 if there is none.
pub fn rr(list: &RankedList) -> f64 {
    list.labels
        .iter()
        .position(|&l| l)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Scores candidate items for one user.
pub trait Scorer: Sync {
    fn score(&self, user: usize, history: &UserHistory, items: &[usize]) -> Result<Vec<f64>>;
}

pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub catalog: &'a Catalog,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, _user: usize, history: &UserHistory, items: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params.store);
        let mut fwd = Forward::new(&mut tape, self.params, self.catalog);
        let mut feats = Vec::with_capacity(items.len());
        for &item in items {
            feats.push(fwd.features(history, item)?);
        }
        let p = fwd.score(&feats)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// Debug upper bound: scores 1 for held-out positives and 0 otherwise.
pub struct HeldOutScorer<'a> {
    pub split: &'a Split,
}

impl Scorer for HeldOutScorer<'_> {
    fn score(&self, user: usize, _history: &UserHistory, items: &[usize]) -> Result<Vec<f64>> {
        let held: HashSet<usize> = self.split.test[user].iter().copied().collect();
        Ok(items.iter().map(|i| if held.contains(i) { 1.0 } else { 0.0 }).collect())
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub spec: SplitSpec,
    pub n_values: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub history_len: usize,
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub n: Option<usize>,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl MetricTable {
    pub fn get(&self, metric: &str, n: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.n == n)
            .map(|r| r.value)
    }

    /// `metric,n,value,stderr` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,n,value,stderr\n");
        for r in &self.rows {
            let n = r.n.map(|n| n.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.metric, n, r.value, r.stderr));
        }
        s
    }
}

/// Per-user metric vector in a fixed order: HR@n for each n, nDCG@n for each
/// n, then RR.
fn list_metrics(list: &RankedList, n_values: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * n_values.len() + 1);
    for &n in n_values {
        out.push(hr_at_n(list, n)?);
    }
    for &n in n_values {
        out.push(ndcg_at_n(list, n)?);
    }
    out.push(rr(list));
    Ok(out)
}

/// Pools, scores and ranks candidates for every evaluable user, averaging
/// each metric over `repetitions` fresh negative draws and then over users.
pub fn evaluate<S: Scorer>(
    scorer: &S,
    split: &Split,
    sampler: &NegativeSampler,
    cfg: &EvalConfig,
) -> Result<MetricTable> {
    if cfg.n_values.is_empty() || cfg.repetitions == 0 {
        return Err(Error::invalid("evaluation needs cutoffs and at least one repetition"));
    }
    let users: Vec<usize> = (0..split.users()).filter(|&u| !split.test[u].is_empty()).collect();
    let per_user = |u: usize| -> Result<Option<Vec<f64>>> {
        if split.train[u].is_empty() {
            return Ok(None);
        }
        let history = UserHistory::from_chronological(&split.train[u], cfg.history_len);
        let exclusions = split.positives(u);
        let positives = &split.test[u];
        let mut acc = vec![0.0; 2 * cfg.n_values.len() + 1];
        for rep in 0..cfg.repetitions {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((u as u64) << 16) | rep as u64);
            let k = positives.len() * cfg.spec.eval_negatives;
            let negatives = sampler.sample(k, &exclusions, &mut rng)?;
            let candidates: Vec<usize> = positives.iter().chain(&negatives).copied().collect();
            let scores = scorer.score(u, &history, &candidates)?;
            let entries = candidates
                .iter()
                .zip(&scores)
                .enumerate()
                .map(|(k, (&item, &s))| (item, s, k < positives.len()))
                .collect();
            let m = list_metrics(&RankedList::new(entries), &cfg.n_values)?;
            acc.iter_mut().zip(m).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= cfg.repetitions as f64);
        Ok(Some(acc))
    };

    let results: Vec<Result<Option<Vec<f64>>>> = if cfg.threads == 1 {
        users.iter().map(|&u| per_user(u)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| users.par_iter().map(|&u| per_user(u)).collect())
    };

    let mut evaluated: Vec<Vec<f64>> = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(m) => evaluated.push(m),
            None => skipped += 1,
        }
    }
    if evaluated.is_empty() {
        return Err(Error::invalid("no user could be evaluated"));
    }
    let count = evaluated.len() as f64;
    let mut names: Vec<(String, Option<usize>)> = Vec::new();
    for &n in &cfg.n_values {
        names.push(("hr".into(), Some(n)));
    }
    for &n in &cfg.n_values {
        names.push(("ndcg".into(), Some(n)));
    }
    names.push(("rr".into(), None));
    let rows = names
        .into_iter()
        .enumerate()
        .map(|(k, (metric, n))| {
            let mean = evaluated.iter().map(|m| m[k]).sum::<f64>() / count;
            let var = if evaluated.len() > 1 {
                evaluated.iter().map(|m| (m[k] - mean).powi(2)).sum::<f64>() / (count - 1.0)
            } else {
                0.0
            };
            MetricRow {
                metric,
                n,
                value: mean,
                stderr: (var / count).sqrt(),
            }
        })
        .collect();
    Ok(MetricTable {
        rows,
        users_evaluated: evaluated.len(),
        users_skipped: skipped,
        repetitions: cfg.repetitions,
        seed: cfg.seed,
    })
}
