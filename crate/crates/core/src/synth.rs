//! Synthetic worlds with planted attribute correlations.
//!
//! Value `j` of every attribute is tied to topic `j`: its latent vector is
//! the topic direction plus a little noise, so same-index values of
//! different attributes point the same way. Items mostly draw all their
//! values from one topic. Users pick items by a softmax over latent dot
//! products (plus a Zipf popularity bias), mixed with uniform noise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 8;
const VALUE_NOISE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub users: usize,
    pub items: usize,
    /// Attributes per item.
    pub m: usize,
    pub values_per_attribute: usize,
    /// Interactions per user, drawn uniformly from this inclusive range.
    pub history_min: usize,
    pub history_max: usize,
    /// Fraction of draws that follow preferences; the rest are uniform.
    pub rho: f64,
    /// Probability that an item attribute takes its topic's value.
    pub coherence: f64,
    /// Multiplies the latent dot product before the softmax.
    pub sharpness: f64,
    /// Zipf exponent of the per-item popularity bias.
    pub popularity_skew: f64,
    pub taste_seeds: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            users: 200,
            items: 500,
            m: 2,
            values_per_attribute: 10,
            history_min: 15,
            history_max: 40,
            rho: 0.8,
            coherence: 0.8,
            sharpness: 1.0,
            popularity_skew: 1.2,
            taste_seeds: 3,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, n) in [
            ("users", self.users),
            ("items", self.items),
            ("m", self.m),
            ("values_per_attribute", self.values_per_attribute),
            ("history_min", self.history_min),
            ("taste_seeds", self.taste_seeds),
        ] {
            if n == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        }
        for (name, x) in [("rho", self.rho), ("coherence", self.coherence)] {
            if !(0.0..=1.0).contains(&x) {
                v.push(format!("{name} must lie in [0, 1], got {x}"));
            }
        }
        for (name, x) in [("sharpness", self.sharpness), ("popularity_skew", self.popularity_skew)] {
            if !(x.is_finite() && x >= 0.0) {
                v.push(format!("{name} must be finite and non-negative, got {x}"));
            }
        }
        if self.history_min > self.history_max {
            v.push(format!(
                "history_min ({}) exceeds history_max ({})",
                self.history_min, self.history_max
            ));
        }
        if self.history_max > self.items {
            v.push(format!(
                "history_max ({}) exceeds the item count ({})",
                self.history_max, self.items
            ));
        }
        if self.taste_seeds > self.items {
            v.push(format!("taste_seeds ({}) exceeds the item count ({})", self.taste_seeds, self.items));
        }
        // every value must be carried by at least one item
        if self.values_per_attribute > self.items {
            v.push(format!(
                "values_per_attribute ({}) exceeds the item count ({}); some values could never appear",
                self.values_per_attribute, self.items
            ));
        }
        v
    }
}

/// A correlated value pair `(attribute, value)` ~ `(attribute, value)`,
/// attributes 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: WorldSpec,
    pub latent_dim: usize,
    pub planted_pairs: Vec<PlantedPair>,
    /// Per item, its topic and its value index for each attribute.
    pub item_topics: Vec<usize>,
    pub item_values: Vec<Vec<usize>>,
    pub user_taste_seeds: Vec<Vec<usize>>,
}

/// The latent structure of a world, before any interactions are drawn.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    /// `[attribute][value]` latent vectors.
    pub value_latents: Vec<Vec<Vec<f64>>>,
    pub item_topics: Vec<usize>,
    pub item_values: Vec<Vec<usize>>,
    pub item_latents: Vec<Vec<f64>>,
    /// Log popularity bias per item.
    pub item_bias: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_of<'a>(vs: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut acc = vec![0.0; LATENT_DIM];
    let mut n = 0usize;
    for v in vs {
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

impl World {
    pub fn new(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<World> {
        let v = spec.violations();
        if !v.is_empty() {
            return Err(Error::Config(format!("infeasible world spec: {}", v.join("; "))));
        }
        let k = spec.values_per_attribute;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let topics: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..LATENT_DIM).map(|_| normal.sample(rng)).collect())
            .collect();
        let value_latents: Vec<Vec<Vec<f64>>> = (0..spec.m)
            .map(|_| {
                topics
                    .iter()
                    .map(|t| t.iter().map(|x| x + VALUE_NOISE * normal.sample(rng)).collect())
                    .collect()
            })
            .collect();

        let mut item_topics = Vec::with_capacity(spec.items);
        let mut item_values = Vec::with_capacity(spec.items);
        for i in 0..spec.items {
            // the first k items cover every value once
            let topic = if i < k { i } else { rng.gen_range(0..k) };
            let values = (0..spec.m)
                .map(|_| {
                    if i < k || rng.gen_bool(spec.coherence) {
                        topic
                    } else {
                        rng.gen_range(0..k)
                    }
                })
                .collect::<Vec<_>>();
            item_topics.push(topic);
            item_values.push(values);
        }
        let item_latents = item_values
            .iter()
            .map(|vals: &Vec<usize>| mean_of(vals.iter().enumerate().map(|(a, &j)| &value_latents[a][j])))
            .collect();

        let mut ranks: Vec<usize> = (0..spec.items).collect();
        ranks.shuffle(rng);
        let item_bias = ranks
            .iter()
            .map(|&r| -spec.popularity_skew * ((r + 1) as f64).ln())
            .collect();

        Ok(World {
            spec: spec.clone(),
            value_latents,
            item_topics,
            item_values,
            item_latents,
            item_bias,
        })
    }

    pub fn user_latent(&self, seeds: &[usize]) -> Vec<f64> {
        mean_of(seeds.iter().map(|&i| &self.item_latents[i]))
    }

    /// Probability of each still-available item being the next pick.
    pub fn choice_probabilities(&self, latent: &[f64], available: &[bool]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.spec.items)
            .map(|i| {
                if available[i] {
                    self.spec.sharpness * dot(latent, &self.item_latents[i]) + self.item_bias[i]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        let open = available.iter().filter(|&&a| a).count() as f64;
        let rho = self.spec.rho;
        exps.iter()
            .zip(available)
            .map(|(e, &a)| if a { rho * e / z + (1.0 - rho) / open } else { 0.0 })
            .collect()
    }

    /// `n` distinct items in draw order.
    pub fn draw_history(&self, latent: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut available = vec![true; self.spec.items];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n.min(self.spec.items) {
            let p = self.choice_probabilities(latent, &available);
            let mut u = rng.gen::<f64>() * p.iter().sum::<f64>();
            let mut pick = None;
            for (i, &w) in p.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            let pick = pick.expect("an available item remains");
            available[pick] = false;
            out.push(pick);
        }
        out
    }

    pub fn planted_pairs(&self) -> Vec<PlantedPair> {
        let mut out = Vec::new();
        for a in 1..=self.spec.m {
            for b in a + 1..=self.spec.m {
                for j in 0..self.spec.values_per_attribute {
                    out.push(PlantedPair { a: (a, j), b: (b, j) });
                }
            }
        }
        out
    }
}

/// A generated dataset, already rendered to file contents.
#[derive(Clone, Debug)]
pub struct Generated {
    pub interactions_tsv: String,
    pub triples_tsv: String,
    pub ground_truth: GroundTruth,
}

pub fn item_name(i: usize) -> String {
    format!("i{i}")
}

pub fn relation_name(a: usize) -> String {
    format!("attr{a}")
}

pub fn relation_order(m: usize) -> Vec<String> {
    (1..=m).map(relation_name).collect()
}

pub fn generate(spec: &WorldSpec) -> Result<Generated> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng)?;

    let mut triples = String::new();
    for (i, vals) in world.item_values.iter().enumerate() {
        for (a, &j) in vals.iter().enumerate() {
            triples.push_str(&format!("{}\t{}\tattr{}_v{}\n", item_name(i), relation_name(a + 1), a + 1, j));
        }
    }

    let mut interactions = String::from("user\titem\ttimestamp\n");
    let mut clock = 0u64;
    let mut seeds_out = Vec::with_capacity(spec.users);
    let all: Vec<usize> = (0..spec.items).collect();
    for u in 0..spec.users {
        let seeds: Vec<usize> = all.choose_multiple(&mut rng, spec.taste_seeds).copied().collect();
        let latent = world.user_latent(&seeds);
        let n = rng.gen_range(spec.history_min..=spec.history_max);
        for item in world.draw_history(&latent, n, &mut rng) {
            interactions.push_str(&format!("u{u}\t{}\t{clock}\n", item_name(item)));
            clock += 1;
        }
        seeds_out.push(seeds);
    }

    let ground_truth = GroundTruth {
        spec: spec.clone(),
        latent_dim: LATENT_DIM,
        planted_pairs: world.planted_pairs(),
        item_topics: world.item_topics.clone(),
        item_values: world.item_values.clone(),
        user_taste_seeds: seeds_out,
    };
    Ok(Generated {
        interactions_tsv: interactions,
        triples_tsv: triples,
        ground_truth,
    })
}

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

impl Generated {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&self.ground_truth)
            .map_err(|e| Error::invalid(format!("ground truth serialization: {e}")))?;
        for (name, body) in [
            (INTERACTIONS_FILE, &self.interactions_tsv),
            (TRIPLES_FILE, &self.triples_tsv),
            (GROUND_TRUTH_FILE, &json),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
