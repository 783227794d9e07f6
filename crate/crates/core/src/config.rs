//! Run configuration: a sectioned TOML file plus flag overrides.
//!
//! Every key is listed in [`KEYS`]; unknown sections or keys and bad values
//! are all collected and reported together.

use std::fs;
use std::path::{Path, PathBuf};

use toml::Value;

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, SplitSpec};
use crate::model::Hyperparams;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataPaths {
    pub interactions: PathBuf,
    pub triples: PathBuf,
    /// Attribute (relation) names in slot order.
    pub relations: Option<Vec<String>>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub n_values: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataPaths,
    pub hyper: Hyperparams,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataPaths {
                interactions: PathBuf::from("interactions.tsv"),
                triples: PathBuf::from("triples.tsv"),
                relations: None,
                out_dir: PathBuf::from("out"),
            },
            hyper: Hyperparams::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            eval: EvalSettings {
                n_values: vec![3, 5, 10],
                repetitions: 3,
                seed: 42,
            },
        }
    }
}

/// `(section, key, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data", "interactions", "user<TAB>item<TAB>timestamp file"),
    ("data", "triples", "head<TAB>relation<TAB>tail file"),
    ("data", "relations", "attribute names in slot order (list)"),
    ("data", "out_dir", "directory for checkpoints, logs and metrics"),
    ("model", "d", "embedding width"),
    ("model", "d_k", "co-attention key width"),
    ("model", "d_v", "co-attention value width"),
    ("model", "m", "attribute slots per item"),
    ("model", "l", "history length"),
    ("model", "tie_kv", "share key and value transforms"),
    ("model", "attention_softmax", "normalize history attention weights"),
    ("model", "coattention", "false replaces attention maps by uniform weights"),
    ("model", "mlp_hidden", "prediction MLP hidden widths (two values)"),
    ("loss", "lambda1", "weight of the transH term"),
    ("loss", "lambda2", "weight of the L2 penalty"),
    ("train", "learning_rate", "Adam step size"),
    ("train", "batch_size", "labeled pairs per step"),
    ("train", "epochs", "passes over the training pairs"),
    ("train", "negatives", "sampled negatives per positive"),
    ("train", "kge_batch", "triples sampled per step"),
    ("train", "seed", "training seed"),
    ("eval", "test_positives", "latest interactions held out per user"),
    ("eval", "eval_negatives", "negatives per held-out positive"),
    ("eval", "n_values", "cutoffs for HR@n and nDCG@n (list)"),
    ("eval", "repetitions", "negative redraws averaged per user"),
    ("eval", "seed", "evaluation seed"),
];

fn list<T: ToString>(xs: &[T]) -> String {
    let inner: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("[{}]", inner.join(", "))
}

fn as_usize(v: &Value) -> std::result::Result<usize, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        Value::Integer(i) => Err(format!("expected a non-negative integer, got {i}")),
        other => Err(format!("expected an integer, got {}", other.type_str())),
    }
}

fn as_f64(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {}", other.type_str())),
    }
}

fn as_bool(v: &Value) -> std::result::Result<bool, String> {
    v.as_bool().ok_or_else(|| format!("expected true or false, got {}", v.type_str()))
}

fn as_string(v: &Value) -> std::result::Result<String, String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("expected a string, got {}", v.type_str()))
}

fn as_usizes(v: &Value) -> std::result::Result<Vec<usize>, String> {
    v.as_array()
        .ok_or_else(|| format!("expected a list, got {}", v.type_str()))?
        .iter()
        .map(as_usize)
        .collect()
}

fn as_strings(v: &Value) -> std::result::Result<Vec<String>, String> {
    v.as_array()
        .ok_or_else(|| format!("expected a list, got {}", v.type_str()))?
        .iter()
        .map(as_string)
        .collect()
}

impl RunConfig {
    /// Current value of a key, rendered the way it would be written.
    pub fn show(&self, section: &str, key: &str) -> String {
        let h = &self.hyper;
        let t = &self.train;
        let path = |p: &Path| format!("\"{}\"", p.display());
        match (section, key) {
            ("data", "interactions") => path(&self.data.interactions),
            ("data", "triples") => path(&self.data.triples),
            ("data", "relations") => match &self.data.relations {
                Some(r) => list(&r.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>()),
                None => "(triple file order)".into(),
            },
            ("data", "out_dir") => path(&self.data.out_dir),
            ("model", "d") => h.d.to_string(),
            ("model", "d_k") => h.d_k.to_string(),
            ("model", "d_v") => h.d_v.to_string(),
            ("model", "m") => h.m.to_string(),
            ("model", "l") => h.l.to_string(),
            ("model", "tie_kv") => h.tie_kv.to_string(),
            ("model", "attention_softmax") => h.attention_softmax.to_string(),
            ("model", "coattention") => h.coattention.to_string(),
            ("model", "mlp_hidden") => list(&h.mlp_hidden),
            ("loss", "lambda1") => h.lambda1.to_string(),
            ("loss", "lambda2") => h.lambda2.to_string(),
            ("train", "learning_rate") => t.learning_rate.to_string(),
            ("train", "batch_size") => t.batch_size.to_string(),
            ("train", "epochs") => t.epochs.to_string(),
            ("train", "negatives") => t.negatives.to_string(),
            ("train", "kge_batch") => t.kge_batch.to_string(),
            ("train", "seed") => t.seed.to_string(),
            ("eval", "test_positives") => self.split.test_positives.to_string(),
            ("eval", "eval_negatives") => self.split.eval_negatives.to_string(),
            ("eval", "n_values") => list(&self.eval.n_values),
            ("eval", "repetitions") => self.eval.repetitions.to_string(),
            ("eval", "seed") => self.eval.seed.to_string(),
            _ => String::new(),
        }
    }

    /// Sets one key. Unknown keys and badly typed values are errors.
    pub fn set(&mut self, section: &str, key: &str, v: &Value) -> std::result::Result<(), String> {
        let h = &mut self.hyper;
        let t = &mut self.train;
        match (section, key) {
            ("data", "interactions") => self.data.interactions = as_string(v)?.into(),
            ("data", "triples") => self.data.triples = as_string(v)?.into(),
            ("data", "relations") => self.data.relations = Some(as_strings(v)?),
            ("data", "out_dir") => self.data.out_dir = as_string(v)?.into(),
            ("model", "d") => h.d = as_usize(v)?,
            ("model", "d_k") => h.d_k = as_usize(v)?,
            ("model", "d_v") => h.d_v = as_usize(v)?,
            ("model", "m") => h.m = as_usize(v)?,
            ("model", "l") => h.l = as_usize(v)?,
            ("model", "tie_kv") => h.tie_kv = as_bool(v)?,
            ("model", "attention_softmax") => h.attention_softmax = as_bool(v)?,
            ("model", "coattention") => h.coattention = as_bool(v)?,
            ("model", "mlp_hidden") => {
                let xs = as_usizes(v)?;
                h.mlp_hidden = xs
                    .try_into()
                    .map_err(|xs: Vec<usize>| format!("expected two widths, got {}", xs.len()))?;
            }
            ("loss", "lambda1") => h.lambda1 = as_f64(v)?,
            ("loss", "lambda2") => h.lambda2 = as_f64(v)?,
            ("train", "learning_rate") => t.learning_rate = as_f64(v)?,
            ("train", "batch_size") => t.batch_size = as_usize(v)?,
            ("train", "epochs") => t.epochs = as_usize(v)?,
            ("train", "negatives") => t.negatives = as_usize(v)?,
            ("train", "kge_batch") => t.kge_batch = as_usize(v)?,
            ("train", "seed") => t.seed = as_usize(v)? as u64,
            ("eval", "test_positives") => self.split.test_positives = as_usize(v)?,
            ("eval", "eval_negatives") => self.split.eval_negatives = as_usize(v)?,
            ("eval", "n_values") => self.eval.n_values = as_usizes(v)?,
            ("eval", "repetitions") => self.eval.repetitions = as_usize(v)?,
            ("eval", "seed") => self.eval.seed = as_usize(v)? as u64,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parses a config file body. Relative data paths are resolved against
    /// `base`. Every problem is reported in one error.
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        for (section, body) in &table {
            let Some(body) = body.as_table() else {
                problems.push(format!("{section}: expected a [{section}] section"));
                continue;
            };
            if !KEYS.iter().any(|(s, _, _)| s == section) {
                problems.push(format!("[{section}]: unknown section"));
                continue;
            }
            for (key, value) in body {
                if let Err(msg) = cfg.set(section, key, value) {
                    problems.push(format!("{section}.{key}: {msg}"));
                }
            }
        }
        for p in [&mut cfg.data.interactions, &mut cfg.data.triples, &mut cfg.data.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// Checks values that do not depend on files.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.hyper.violations().into_iter().map(|m| format!("model: {m}")).collect();
        v.extend(self.train.violations().into_iter().map(|m| format!("train: {m}")));
        if self.split.test_positives == 0 {
            v.push("eval.test_positives: must be at least 1".into());
        }
        if self.split.eval_negatives == 0 {
            v.push("eval.eval_negatives: must be at least 1".into());
        }
        if self.eval.n_values.is_empty() || self.eval.n_values.contains(&0) {
            v.push("eval.n_values: needs at least one cutoff, all >= 1".into());
        }
        if self.eval.repetitions == 0 {
            v.push("eval.repetitions: must be at least 1".into());
        }
        if let Some(r) = &self.data.relations {
            if r.len() > self.hyper.m {
                v.push(format!("data.relations: {} names but model.m = {}", r.len(), self.hyper.m));
            }
        }
        v
    }

    /// Problems with the data files, for commands that read them.
    pub fn missing_inputs(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (key, p) in [("data.interactions", &self.data.interactions), ("data.triples", &self.data.triples)] {
            if !p.is_file() {
                v.push(format!("{key}: file not found: {}", p.display()));
            }
        }
        v
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    pub fn eval_config(&self, threads: usize) -> EvalConfig {
        EvalConfig {
            spec: self.split,
            n_values: self.eval.n_values.clone(),
            repetitions: self.eval.repetitions,
            seed: self.eval.seed,
            history_len: self.hyper.l,
            threads,
        }
    }

    /// The key table with defaults, for `--help`.
    pub fn key_help() -> String {
        let d = RunConfig::default();
        let mut s = String::from("Config keys (default):\n");
        let mut last = "";
        for (section, key, desc) in KEYS {
            if *section != last {
                s.push_str(&format!("  [{section}]\n"));
                last = section;
            }
            s.push_str(&format!("    {key} = {}  # {desc}\n", d.show(section, key)));
        }
        s
    }
}
