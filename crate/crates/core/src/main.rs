use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use acam::checkpoint;
use acam::config::RunConfig;
use acam::diff::gradcheck::{self, Tolerance};
use acam::diff::Tape;
use acam::eval::{self, HeldOutScorer, MetricTable};
use acam::model::ModelParams;
use acam::pipeline::Dataset;
use acam::synth::{self, WorldSpec};
use acam::train::{joint_loss, LabeledPair, TrainConfig, LOG_HEADER};
use acam::Error;

#[derive(Parser)]
#[command(name = "acam", version, about = "Attribute co-attention recommender")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (interactions, triples, ground truth).
    Generate {
        /// World spec file (TOML, keys as listed below).
        spec: PathBuf,
        /// Output directory.
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes per-epoch and final checkpoints and train_log.csv.
    Train {
        config: PathBuf,
        #[command(flatten)]
        common: Overrides,
    },
    /// Evaluate a checkpoint; writes metrics.csv and metrics.json.
    Evaluate {
        config: PathBuf,
        /// Checkpoint to score with (not needed with --oracle-scorer).
        checkpoint: Option<PathBuf>,
        /// Debug mode: score held-out positives 1 and everything else 0.
        #[arg(long)]
        oracle_scorer: bool,
        #[command(flatten)]
        common: Overrides,
    },
    /// Finite-difference check of the full loss on a small random world.
    Gradcheck {
        config: PathBuf,
        /// Number of random worlds to check.
        #[arg(long, default_value_t = 3)]
        worlds: u64,
        #[command(flatten)]
        common: Overrides,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Sets both train.seed and eval.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda1: Option<f64>,
    /// Replace the co-attention maps by uniform weights.
    #[arg(long)]
    no_coattention: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Any config key, as section.key=value (TOML value syntax).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

/// Failure with an exit code: 2 for usage and configuration, 1 otherwise.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type Outcome = std::result::Result<(), Failure>;

fn read_config(path: &Path, o: &Overrides) -> std::result::Result<RunConfig, Failure> {
    if !path.is_file() {
        return Err(usage(format!("config not found: {}", path.display())));
    }
    let mut cfg = RunConfig::load(path)?;
    let mut problems = Vec::new();
    for s in &o.sets {
        let parsed = s.split_once('=').and_then(|(k, v)| k.split_once('.').map(|(sec, key)| (sec, key, v)));
        let Some((section, key, raw)) = parsed else {
            problems.push(format!("--set {s}: expected SECTION.KEY=VALUE"));
            continue;
        };
        // bare words are taken as strings
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .map(|mut t| t.remove("v").unwrap())
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        if let Err(m) = cfg.set(section, key, &value) {
            problems.push(format!("--set {section}.{key}: {m}"));
        }
    }
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(l1) = o.lambda1 {
        cfg.hyper.lambda1 = l1;
    }
    if o.no_coattention {
        cfg.hyper.coattention = false;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = &o.out_dir {
        cfg.data.out_dir = d.clone();
    }
    problems.extend(cfg.violations());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(usage(format!("invalid configuration:\n  {}", problems.join("\n  "))))
    }
}

fn load_dataset(cfg: &RunConfig) -> std::result::Result<Dataset, Failure> {
    let missing = cfg.missing_inputs();
    if !missing.is_empty() {
        return Err(usage(format!("invalid configuration:\n  {}", missing.join("\n  "))));
    }
    Ok(Dataset::load(
        &cfg.data.interactions,
        &cfg.data.triples,
        cfg.hyper.m,
        cfg.data.relations.as_deref(),
        &cfg.split,
    )?)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, body).map_err(|e| Error::io(path, e).into())
}

fn make_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn threads() -> std::result::Result<usize, Failure> {
    match std::env::var("ACAM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("ACAM_THREADS must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn cmd_generate(spec_path: &Path, out: &Path, seed: Option<u64>) -> Outcome {
    if !spec_path.is_file() {
        return Err(usage(format!("config not found: {}", spec_path.display())));
    }
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec: WorldSpec =
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let v = spec.violations();
    if !v.is_empty() {
        return Err(usage(format!("infeasible world spec:\n  {}", v.join("\n  "))));
    }
    let g = synth::generate(&spec)?;
    g.write(out)?;
    let lines = g.interactions_tsv.lines().count() - 1;
    eprintln!("wrote {lines} interactions for {} users to {}", spec.users, out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    let ds = load_dataset(cfg)?;
    let out = &cfg.data.out_dir;
    make_dir(out)?;
    let mut log = format!("{LOG_HEADER}\n");
    let (params, entries) = ds.train(cfg.hyper.clone(), &cfg.train, |p, e| {
        checkpoint::save(p, out.join(format!("checkpoint_epoch{}.acam", e.epoch)))?;
        eprintln!(
            "epoch {}: loss {:.6} (bce {:.6}, kge {:.6}, l2 {:.6}) {:.1}s",
            e.epoch, e.loss_total, e.loss_bce, e.loss_kge, e.loss_l2, e.seconds
        );
        Ok(())
    })?;
    for e in &entries {
        log.push_str(&e.csv_row());
        log.push('\n');
    }
    write(&out.join("train_log.csv"), log)?;
    checkpoint::save(&params, out.join("model.acam"))?;
    eprintln!("saved {}", out.join("model.acam").display());
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    scorer: &'a str,
    checkpoint: Option<String>,
    users_evaluated: usize,
    users_skipped: usize,
    repetitions: usize,
    seed: u64,
    metrics: std::collections::BTreeMap<String, f64>,
    table: &'a MetricTable,
}

fn cmd_evaluate(cfg: &RunConfig, ckpt: Option<&Path>, oracle: bool) -> Outcome {
    let ds = load_dataset(cfg)?;
    let ecfg = cfg.eval_config(threads()?);
    let table = if oracle {
        eval::evaluate(&HeldOutScorer { split: &ds.split }, &ds.split, &ds.sampler, &ecfg)?
    } else {
        let path = ckpt.ok_or_else(|| usage("evaluate needs a checkpoint unless --oracle-scorer is given"))?;
        let mut params = checkpoint::load(path)?;
        if params.entities() != ds.kg.entities.len() {
            return Err(usage(format!(
                "checkpoint has {} entities but the data has {}",
                params.entities(),
                ds.kg.entities.len()
            )));
        }
        // the ablation switch is an evaluation-time choice as well
        params.hyper.coattention &= cfg.hyper.coattention;
        ds.evaluate(&params, &ecfg)?
    };
    let out = &cfg.data.out_dir;
    make_dir(out)?;
    write(&out.join("metrics.csv"), table.to_csv())?;
    let metrics = table
        .rows
        .iter()
        .map(|r| {
            let key = match r.n {
                Some(n) => format!("{}@{n}", r.metric),
                None => r.metric.clone(),
            };
            (key, r.value)
        })
        .collect();
    let summary = Summary {
        scorer: if oracle { "held-out oracle" } else { "model" },
        checkpoint: ckpt.map(|p| p.display().to_string()),
        users_evaluated: table.users_evaluated,
        users_skipped: table.users_skipped,
        repetitions: table.repetitions,
        seed: table.seed,
        metrics,
        table: &table,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    write(&out.join("metrics.json"), json + "\n")?;
    print!("{}", table.to_csv());
    if table.users_skipped > 0 {
        eprintln!("skipped {} users with no training history", table.users_skipped);
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, worlds: u64) -> Outcome {
    let hyper = cfg.hyper.clone();
    if hyper.d * hyper.d_k > 4096 {
        eprintln!("note: d = {}, finite differences will be slow; use a tiny model section", hyper.d);
    }
    let mut failing = 0usize;
    let mut checked = 0usize;
    for w in 0..worlds {
        let seed = cfg.train.seed.wrapping_add(w);
        let spec = WorldSpec {
            users: 4,
            items: 8,
            m: hyper.m,
            values_per_attribute: 3,
            history_min: 3,
            history_max: 6,
            seed,
            ..WorldSpec::default()
        };
        let g = synth::generate(&spec)?;
        let split = acam::eval::SplitSpec { test_positives: 1, eval_negatives: 1 };
        let order = synth::relation_order(hyper.m);
        let ds = Dataset::from_text(&g.interactions_tsv, &g.triples_tsv, hyper.m, Some(&order), &split)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ds.init_params(hyper.clone(), seed)?;
        // move off the tidy initialization so every branch is exercised
        for id in params.store.ids().collect::<Vec<_>>() {
            for x in params.store.get_mut(id).data_mut() {
                *x += rng.gen_range(-0.5..0.5);
            }
        }
        params.renormalize_normals();
        let tc = TrainConfig { negatives: 1, ..cfg.train.clone() };
        let mut pairs: Vec<LabeledPair> = acam::train::epoch_pairs(&ds.split, &ds.sampler, hyper.l, tc.negatives, &mut rng)?;
        pairs.truncate(6);
        let triples: Vec<_> = (0..8).map(|_| ds.kg.triples[rng.gen_range(0..ds.kg.triples.len())]).collect();
        let loss = |store: &acam::diff::ParamStore| -> acam::Result<f64> {
            let p = ModelParams::from_store(hyper.clone(), store.clone())?;
            let mut tape = Tape::new(&p.store);
            let t = joint_loss(&mut tape, &p, &ds.catalog, &pairs, &triples)?;
            Ok(tape.value(t.total).item())
        };
        let mut tape = Tape::new(&params.store);
        let terms = joint_loss(&mut tape, &params, &ds.catalog, &pairs, &triples)?;
        let grads = tape.backward(terms.total)?;
        for r in gradcheck::check(&params.store, &grads, Tolerance::default(), loss)? {
            checked += 1;
            let status = if r.passed() { "ok" } else { "FAIL" };
            println!(
                "world {w} {status:4} {:32} {:6} elements, worst rel {:.2e}, worst abs {:.2e}",
                r.name, r.elements, r.worst_relative, r.worst_absolute
            );
            if !r.passed() {
                failing += 1;
            }
        }
    }
    if failing == 0 {
        println!("PASS: 0 failing tensors ({checked} checked)");
        Ok(())
    } else {
        println!("FAIL: {failing} failing tensors ({checked} checked)");
        Err(Failure { code: 1, msg: format!("{failing} tensors failed the gradient check") })
    }
}

fn world_keys() -> String {
    let body = toml::to_string(&WorldSpec::default()).unwrap_or_default();
    let mut s = String::from("Spec keys (default):\n");
    for line in body.lines() {
        s.push_str(&format!("    {line}\n"));
    }
    s
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::Generate { spec, out_dir, seed } => cmd_generate(&spec, &out_dir, seed),
        Cmd::Train { config, common } => cmd_train(&read_config(&config, &common)?),
        Cmd::Evaluate { config, checkpoint, oracle_scorer, common } => {
            cmd_evaluate(&read_config(&config, &common)?, checkpoint.as_deref(), oracle_scorer)
        }
        Cmd::Gradcheck { config, worlds, common } => cmd_gradcheck(&read_config(&config, &common)?, worlds),
    }
}

fn main() -> ExitCode {
    let keys = RunConfig::key_help();
    let command = Cli::command()
        .mut_subcommand("generate", |c| c.after_help(world_keys()))
        .mut_subcommand("train", |c| c.after_help(keys.clone()))
        .mut_subcommand("evaluate", |c| c.after_help(keys.clone()))
        .mut_subcommand("gradcheck", |c| c.after_help(keys.clone()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
