//! Glue between loaders, trainer and evaluator.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{self, EvalConfig, MetricTable, ModelScorer, Split, SplitSpec};
use crate::kg::{InteractionLog, KnowledgeGraph};
use crate::model::{Catalog, Hyperparams, ModelParams};
use crate::train::{self, EpochLog, NegativeSampler, TrainConfig, TrainData};

/// Everything derived from one interaction log and one triple file.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub log: InteractionLog,
    pub kg: KnowledgeGraph,
    pub catalog: Catalog,
    pub split: Split,
    /// Popularity counted over the training split only.
    pub sampler: NegativeSampler,
}

impl Dataset {
    pub fn load(
        interactions: &Path,
        triples: &Path,
        m: usize,
        relation_order: Option<&[String]>,
        spec: &SplitSpec,
    ) -> Result<Dataset> {
        let log = InteractionLog::load(interactions)?;
        let kg = KnowledgeGraph::load(triples, m, relation_order)?;
        Dataset::assemble(log, kg, spec)
    }

    pub fn from_text(
        interactions: &str,
        triples: &str,
        m: usize,
        relation_order: Option<&[String]>,
        spec: &SplitSpec,
    ) -> Result<Dataset> {
        let log = InteractionLog::parse(interactions, Path::new("<interactions>"))?;
        let kg = KnowledgeGraph::parse(triples, Path::new("<triples>"), m, relation_order)?;
        Dataset::assemble(log, kg, spec)
    }

    fn assemble(log: InteractionLog, mut kg: KnowledgeGraph, spec: &SplitSpec) -> Result<Dataset> {
        let item_entity = kg.link_items(&log.items);
        let catalog = Catalog {
            item_entity,
            attributes: kg.attributes.clone(),
        };
        let split = eval::split(&log, spec);
        let sampler = NegativeSampler::from_counts(&split.train_popularity(log.items.len()))?;
        Ok(Dataset {
            log,
            kg,
            catalog,
            split,
            sampler,
        })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            split: &self.split,
            catalog: &self.catalog,
            triples: &self.kg.triples,
            sampler: &self.sampler,
        }
    }

    /// Fresh parameters, seeded from the training seed.
    pub fn init_params(&self, hyper: Hyperparams, seed: u64) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(hyper, self.kg.entities.len(), &mut rng)
    }

    pub fn train<F>(&self, hyper: Hyperparams, cfg: &TrainConfig, on_epoch: F) -> Result<(ModelParams, Vec<EpochLog>)>
    where
        F: FnMut(&ModelParams, &EpochLog) -> Result<()>,
    {
        let params = self.init_params(hyper, cfg.seed)?;
        train::train(&self.train_data(), params, cfg, on_epoch)
    }

    pub fn evaluate(&self, params: &ModelParams, cfg: &EvalConfig) -> Result<MetricTable> {
        let scorer = ModelScorer {
            params,
            catalog: &self.catalog,
        };
        eval::evaluate(&scorer, &self.split, &self.sampler, cfg)
    }
}
