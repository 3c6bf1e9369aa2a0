//! `seqdenoise`: generate synthetic corpora, train and apply the denoisers,
//! and score their output.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use seqdenoise::alt::{metric_table, run_alt, AltConfig};
use seqdenoise::chmm::{denoise, sparsity_adjust, train_chmm, ChmmConfig, ChmmModel};
use seqdenoise::data::{argmax, load_corpus, save_corpus, save_embeddings, Corpus, Denoised, Split};
use seqdenoise::eval::{best_consensus_split, entity_f1, majority_vote_corpus, score_split, ScoreReport};
use seqdenoise::hmm::{train_hmm, HmmConfig, HmmParams};
use seqdenoise::refiner::{predict_refiner, train_refiner, RefinerConfig, RefinerModel};
use seqdenoise::synth::{generate, reference_config, SynthConfig};

#[derive(Parser)]
#[command(name = "seqdenoise", version, about = "Multi-source weak-supervision label denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArgs {
    /// Corpus file (line-delimited JSON).
    #[arg(long)]
    corpus: PathBuf,
    /// Binary embedding file aligned to the corpus by sentence id.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Longer sentences are split at entity-safe points.
    #[arg(long, default_value_t = 512)]
    max_len: usize,
}

#[derive(Args)]
struct Common {
    /// Run directory; receives config.json, metrics.json and outputs.
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with the model settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "SEQDENOISE_SEED")]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Hmm,
    Chmm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its embeddings.
    Synth {
        /// SynthConfig as JSON; the reference suite when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, env = "SEQDENOISE_SEED")]
        seed: Option<u64>,
    },
    /// Fit the constant-parameter HMM by Baum-Welch.
    TrainHmm {
        #[command(flatten)]
        data: CorpusArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Fit the embedding-conditioned HMM by generalized EM.
    TrainChmm {
        #[command(flatten)]
        data: CorpusArgs,
        #[command(flatten)]
        common: Common,
        /// Start from the settings tuned for the synthetic reference suite.
        #[arg(long)]
        reference: bool,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        /// Per-token state prior instead of transitions.
        #[arg(long)]
        iid: bool,
    },
    /// Fit the refiner to the soft labels stored in a denoised corpus.
    TrainRefiner {
        #[command(flatten)]
        data: CorpusArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Label a corpus with a trained refiner.
    PredictRefiner {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Alternate CHMM and refiner training.
    Alt {
        #[command(flatten)]
        data: CorpusArgs,
        #[command(flatten)]
        common: Common,
        /// Start from the settings tuned for the synthetic reference suite.
        #[arg(long)]
        reference: bool,
        #[arg(long)]
        max_loops: Option<usize>,
        #[arg(long)]
        macro_patience: Option<usize>,
    },
    /// Denoise a corpus with a trained HMM or CHMM.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = ModelKind::Chmm)]
        kind: ModelKind,
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Entity-level scores of predictions against gold labels.
    Eval {
        /// Corpus whose predicted labels are scored; its gold labels are
        /// used when it carries no predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Score only this split.
        #[arg(long)]
        split: Option<Split>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token-level majority vote over the sources.
    BaselineMv {
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, env = "SEQDENOISE_SEED")]
        seed: Option<u64>,
    },
    /// Upper bound keeping every gold span some source reports exactly.
    BaselineConsensus {
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// `error[kind]: message` on one line.
fn error_line(e: &anyhow::Error) -> String {
    let kind = e.downcast_ref::<seqdenoise::Error>().map_or("error", |e| e.kind());
    let msg = format!("{e:#}").replace('\n', " ");
    format!("error[{kind}]: {msg}")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out_dir, seed } => synth(config.as_deref(), &out_dir, seed),
        Command::TrainHmm { data, common, epochs, patience } => {
            let mut config: HmmConfig = base_config(&common, HmmConfig::default())?;
            override_with(&mut config.epochs, epochs);
            override_with(&mut config.patience, patience);
            override_with(&mut config.seed, common.seed);
            let corpus = read_corpus(&data)?;
            start_run(&common.out_dir, "train-hmm", &data, &config)?;
            let (params, log) = train_hmm(&corpus, &config)?;
            params.save(&common.out_dir.join("hmm.json"), &corpus)?;
            let output = hmm_outputs(&params, &corpus, config.sparsity_eps)?;
            let scores = write_denoised(&corpus, &output, &common.out_dir)?;
            write_json(&common.out_dir.join("metrics.json"), &json!({ "log": log, "scores": scores }))
        }
        Command::TrainChmm { data, common, reference, lr, epochs, pretrain_epochs, iid } => {
            let start = if reference { ChmmConfig::reference(0) } else { ChmmConfig::default() };
            let mut config: ChmmConfig = base_config(&common, start)?;
            override_with(&mut config.lr, lr);
            override_with(&mut config.epochs, epochs);
            override_with(&mut config.pretrain_epochs, pretrain_epochs);
            override_with(&mut config.seed, common.seed);
            config.iid |= iid;
            let corpus = read_corpus(&data)?;
            start_run(&common.out_dir, "train-chmm", &data, &config)?;
            let (model, log) = train_chmm(&corpus, &config, None)?;
            model.save(&common.out_dir.join("chmm.sdnet"))?;
            let scores = write_denoised(&corpus, &denoise(&model, &corpus)?, &common.out_dir)?;
            write_json(&common.out_dir.join("metrics.json"), &json!({ "log": log, "scores": scores }))
        }
        Command::TrainRefiner { data, common, lr, epochs, hidden } => {
            let mut config: RefinerConfig = base_config(&common, RefinerConfig::default())?;
            override_with(&mut config.lr, lr);
            override_with(&mut config.epochs, epochs);
            override_with(&mut config.hidden, hidden);
            override_with(&mut config.seed, common.seed);
            let corpus = read_corpus(&data)?;
            let soft = corpus
                .instances
                .iter()
                .map(|i| i.denoised.as_ref().map(|d| d.soft.clone()))
                .collect::<Option<Vec<_>>>()
                .context("every sentence needs soft labels to train the refiner")?;
            start_run(&common.out_dir, "train-refiner", &data, &config)?;
            let (model, log) = train_refiner(&corpus, &soft, &config, None)?;
            model.save(&common.out_dir.join("refiner.sdnet"))?;
            let scores = split_scores(&corpus, &soft_outputs(&predict_refiner(&model, &corpus)?, corpus.n_labels()))?;
            write_json(&common.out_dir.join("metrics.json"), &json!({ "log": log, "scores": scores }))
        }
        Command::PredictRefiner { model, data, out_dir } => {
            let corpus = read_corpus(&data)?;
            start_run(&out_dir, "predict-refiner", &data, &json!({ "model": model }))?;
            let model = RefinerModel::load(&model)?;
            if model.labels != corpus.labels {
                bail!(seqdenoise::Error::Validation("model and corpus label sets differ".into()));
            }
            let output = soft_outputs(&predict_refiner(&model, &corpus)?, corpus.n_labels());
            let scores = write_denoised(&corpus, &output, &out_dir)?;
            write_json(&out_dir.join("metrics.json"), &json!({ "scores": scores }))
        }
        Command::Alt { data, common, reference, max_loops, macro_patience } => {
            let seed = common.seed.unwrap_or(0);
            let start = if reference { AltConfig::reference(seed) } else { AltConfig::default() };
            let mut config: AltConfig = base_config(&common, start)?;
            override_with(&mut config.max_loops, max_loops);
            override_with(&mut config.macro_patience, macro_patience);
            if let Some(seed) = common.seed {
                config.chmm.seed = seed;
                config.refiner.seed = seed;
            }
            let corpus = read_corpus(&data)?;
            start_run(&common.out_dir, "alt", &data, &config)?;
            let state = run_alt(&corpus, &config, Some(&common.out_dir))?;
            let table = metric_table(&state);
            if let Some(best) = &table.best {
                eprintln!("best: loop {} {:?}, dev F1 {:.4}", best.loop_index, best.stage, best.dev_f1);
            }
            Ok(())
        }
        Command::Decode { model, kind, data, out_dir } => {
            let corpus = read_corpus(&data)?;
            start_run(&out_dir, "decode", &data, &json!({ "model": model }))?;
            let output = match kind {
                ModelKind::Chmm => {
                    let model = ChmmModel::load(&model)?;
                    check_model(model.labels.names(), &model.source_names, &corpus)?;
                    denoise(&model, &corpus)?
                }
                ModelKind::Hmm => {
                    let (params, labels, sources) = HmmParams::load(&model)?;
                    check_model(&labels, &sources, &corpus)?;
                    hmm_outputs(&params, &corpus, None)?
                }
            };
            let scores = write_denoised(&corpus, &output, &out_dir)?;
            write_json(&out_dir.join("metrics.json"), &json!({ "scores": scores }))
        }
        Command::Eval { pred, gold, split, out } => {
            let report = evaluate(&pred, &gold, split)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(path) = out {
                fs::write(path, text + "\n")?;
            }
            Ok(())
        }
        Command::BaselineMv { data, out_dir, seed } => {
            let seed = seed.unwrap_or(0);
            let corpus = read_corpus(&data)?;
            start_run(&out_dir, "baseline-mv", &data, &json!({ "seed": seed }))?;
            let l = corpus.n_labels();
            let output: Vec<Denoised> = majority_vote_corpus(&corpus, seed)
                .into_iter()
                .map(|hard| Denoised {
                    soft: hard.iter().flat_map(|&z| (0..l).map(move |j| f64::from(u8::from(j == z)))).collect(),
                    hard,
                })
                .collect();
            let scores = write_denoised(&corpus, &output, &out_dir)?;
            write_json(&out_dir.join("metrics.json"), &json!({ "scores": scores }))
        }
        Command::BaselineConsensus { data, out_dir } => {
            let corpus = read_corpus(&data)?;
            start_run(&out_dir, "baseline-consensus", &data, &json!({}))?;
            let mut scores = BTreeMap::new();
            for split in gold_splits(&corpus) {
                scores.insert(split.to_string(), best_consensus_split(&corpus, split)?);
            }
            println!("{}", serde_json::to_string_pretty(&scores)?);
            write_json(&out_dir.join("metrics.json"), &json!({ "scores": scores }))
        }
    }
}

fn synth(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let config = match config {
        Some(path) => {
            let mut c: SynthConfig = read_json(path)?;
            override_with(&mut c.seed, seed);
            c
        }
        None => reference_config(seed.unwrap_or(0)),
    };
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("config.json"), &json!({ "command": "synth", "config": config }))?;
    let corpus = generate(&config)?;
    save_corpus(&corpus, &out_dir.join("corpus.jsonl"))?;
    save_embeddings(&corpus, &out_dir.join("embeddings.emb"))?;
    // per-source quality over every sentence
    let gold: Vec<Vec<usize>> = corpus.instances.iter().filter_map(|i| i.sentence.gold.clone()).collect();
    let mut sources = BTreeMap::new();
    for (k, name) in corpus.source_names.iter().enumerate() {
        let pred: Vec<Vec<usize>> = corpus.instances.iter().map(|i| i.obs.hard_labels(k)).collect();
        sources.insert(name.clone(), entity_f1(&pred, &gold, &corpus.labels)?);
    }
    let counts: BTreeMap<String, usize> = [Split::Train, Split::Dev, Split::Test]
        .into_iter()
        .map(|s| (s.to_string(), corpus.split(s).count()))
        .collect();
    write_json(&out_dir.join("metrics.json"), &json!({ "sentences": counts, "sources": sources }))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| seqdenoise::Error::Config(format!("{}: {e}", path.display())).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn base_config<T: DeserializeOwned>(common: &Common, default: T) -> Result<T> {
    match &common.config {
        Some(path) => read_json(path),
        None => Ok(default),
    }
}

fn override_with<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_corpus(data: &CorpusArgs) -> Result<Corpus> {
    let corpus = load_corpus(&data.corpus, data.embeddings.as_deref())?;
    Ok(corpus.segment_long(data.max_len)?)
}

/// Creates the run directory and records the resolved configuration.
fn start_run<T: Serialize>(out_dir: &Path, command: &str, data: &CorpusArgs, config: &T) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let resolved = json!({
        "command": command,
        "corpus": data.corpus,
        "embeddings": data.embeddings,
        "max_len": data.max_len,
        "config": config,
    });
    write_json(&out_dir.join("config.json"), &resolved)
}

fn check_model(labels: &[String], sources: &[String], corpus: &Corpus) -> Result<()> {
    if labels != corpus.labels.names() {
        bail!(seqdenoise::Error::Validation("model and corpus label sets differ".into()));
    }
    if sources != corpus.source_names.as_slice() {
        bail!(seqdenoise::Error::Validation("model and corpus sources differ".into()));
    }
    Ok(())
}

/// Viterbi labels and marginals of a constant-parameter HMM.
fn hmm_outputs(params: &HmmParams, corpus: &Corpus, sparsity_eps: Option<f64>) -> Result<Vec<Denoised>> {
    corpus
        .instances
        .iter()
        .map(|inst| {
            let x = match sparsity_eps {
                Some(eps) => sparsity_adjust(&inst.obs, eps),
                None => inst.obs.clone(),
            };
            let (hard, soft) = params.denoise(&x)?;
            Ok(Denoised { hard, soft })
        })
        .collect()
}

fn soft_outputs(preds: &[Vec<f64>], l: usize) -> Vec<Denoised> {
    preds
        .iter()
        .map(|p| Denoised {
            hard: p.chunks(l).map(argmax).collect(),
            soft: p.clone(),
        })
        .collect()
}

fn gold_splits(corpus: &Corpus) -> Vec<Split> {
    [Split::Train, Split::Dev, Split::Test]
        .into_iter()
        .filter(|&s| corpus.split(s).next().is_some() && corpus.split(s).all(|i| i.sentence.gold.is_some()))
        .collect()
}

fn split_scores(corpus: &Corpus, output: &[Denoised]) -> Result<BTreeMap<String, ScoreReport>> {
    let hard: Vec<Vec<usize>> = output.iter().map(|d| d.hard.clone()).collect();
    let mut scores = BTreeMap::new();
    for split in gold_splits(corpus) {
        scores.insert(split.to_string(), score_split(corpus, split, &hard)?);
    }
    Ok(scores)
}

/// Writes `denoised.jsonl` and returns the per-split scores.
fn write_denoised(corpus: &Corpus, output: &[Denoised], out_dir: &Path) -> Result<BTreeMap<String, ScoreReport>> {
    let mut out = corpus.clone();
    for (inst, d) in out.instances.iter_mut().zip(output) {
        inst.denoised = Some(d.clone());
    }
    save_corpus(&out, &out_dir.join("denoised.jsonl"))?;
    split_scores(corpus, output)
}

fn evaluate(pred_path: &Path, gold_path: &Path, split: Option<Split>) -> Result<ScoreReport> {
    let pred = load_corpus(pred_path, None)?;
    let gold = load_corpus(gold_path, None)?;
    if pred.labels != gold.labels {
        bail!(seqdenoise::Error::Validation("prediction and gold label sets differ".into()));
    }
    let by_id: HashMap<&str, Vec<usize>> = pred
        .instances
        .iter()
        .filter_map(|i| {
            let labels = i.denoised.as_ref().map(|d| d.hard.clone()).or_else(|| i.sentence.gold.clone());
            labels.map(|l| (i.id(), l))
        })
        .collect();
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for inst in gold.instances.iter().filter(|i| split.is_none_or(|s| i.split == s)) {
        let Some(gold_labels) = &inst.sentence.gold else {
            bail!(seqdenoise::Error::Validation(format!("sentence {} has no gold labels", inst.id())));
        };
        let labels = by_id
            .get(inst.id())
            .with_context(|| format!("no prediction for sentence {}", inst.id()))?;
        p.push(labels.clone());
        g.push(gold_labels.clone());
    }
    Ok(entity_f1(&p, &g, &gold.labels)?)
}
