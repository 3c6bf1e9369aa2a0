//! Scores every aggregator on the synthetic reference suite.
//!
//! cargo run --release -p seqdenoise-core --example reference_bench -- [seed] [--alt]

use std::time::Instant;

use seqdenoise::alt::{run_alt, AltConfig};
use seqdenoise::chmm::{denoise, train_chmm, ChmmConfig};
use seqdenoise::data::{argmax, Split};
use seqdenoise::eval::{best_consensus_split, majority_vote_corpus, score_split};
use seqdenoise::hmm::{train_hmm, HmmConfig};
use seqdenoise::synth::reference_suite;

fn main() -> seqdenoise::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.iter().find_map(|a| a.parse().ok()).unwrap_or(0);
    let with_alt = args.iter().any(|a| a == "--alt");
    let corpus = match std::env::var("SYNTH_CONFIG") {
        Ok(path) => {
            let mut config: seqdenoise::synth::SynthConfig =
                serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
            config.seed = seed;
            seqdenoise::synth::generate(&config)?
        }
        Err(_) => reference_suite(seed)?,
    };
    let l = corpus.n_labels();
    let f1 = |pred: &[Vec<usize>]| {
        score_split(&corpus, Split::Test, pred).map(|r| {
            eprintln!("    p {:.1} r {:.1}", r.precision * 100.0, r.recall * 100.0);
            r.f1 * 100.0
        })
    };

    let mv = majority_vote_corpus(&corpus, seed);
    println!("mv         {:6.2}", f1(&mv)?);
    println!("consensus  {:6.2}", best_consensus_split(&corpus, Split::Test)?.f1 * 100.0);

    let started = Instant::now();
    let (hmm, _) = train_hmm(&corpus, &HmmConfig { seed, ..HmmConfig::default() })?;
    let hard: Vec<Vec<usize>> = corpus
        .instances
        .iter()
        .map(|i| hmm.posterior(&i.obs).map(|s| s.gamma.chunks(l).map(argmax).collect()))
        .collect::<seqdenoise::Result<_>>()?;
    println!("hmm        {:6.2}  ({:.1}s)", f1(&hard)?, started.elapsed().as_secs_f64());

    let (hmm_s, _) = train_hmm(&corpus, &HmmConfig { seed, sparsity_eps: Some(0.05), ..HmmConfig::default() })?;
    let hard: Vec<Vec<usize>> = corpus
        .instances
        .iter()
        .map(|i| hmm_s.posterior(&seqdenoise::chmm::sparsity_adjust(&i.obs, 0.05)).map(|s| s.gamma.chunks(l).map(argmax).collect()))
        .collect::<seqdenoise::Result<_>>()?;
    println!("hmm+sparse {:6.2}", f1(&hard)?);

    for iid in [false, true] {
        if args.iter().any(|a| a == "--alt-only") {
            break;
        }
        let started = Instant::now();
        let config = chmm_config(iid, seed);
        let (m, log) = train_chmm(&corpus, &config, None)?;
        let out = denoise(&m, &corpus)?;
        let hard: Vec<Vec<usize>> = out.iter().map(|d| d.soft.chunks(l).map(argmax).collect()).collect();
        let trace: Vec<String> = log.dev_trace().iter().map(|v| format!("{:.1}", v * 100.0)).collect();
        println!(
            "{}  {:6.2}  ({:.1}s, epoch {:?}, dev {})",
            if iid { "chmm-iid " } else { "chmm     " },
            f1(&hard)?,
            started.elapsed().as_secs_f64(),
            log.selected_epoch,
            trace.join(" ")
        );
    }

    if with_alt {
        let started = Instant::now();
        let mut config = AltConfig::reference(seed);
        config.chmm = chmm_config(false, seed);
        let state = run_alt(&corpus, &config, None)?;
        for row in &state.table {
            println!(
                "loop {:2} {:?}  dev {:6.2}  test {:6.2}",
                row.loop_index,
                row.stage,
                row.dev_f1.unwrap_or(0.0) * 100.0,
                row.test_f1.unwrap_or(0.0) * 100.0
            );
        }
        println!("alt best {:?} ({:.1}s)", state.best, started.elapsed().as_secs_f64());
    }
    Ok(())
}

fn chmm_config(iid: bool, seed: u64) -> ChmmConfig {
    let mut config = ChmmConfig { iid, ..ChmmConfig::reference(seed) };
    if let Ok(v) = std::env::var("CHMM_LR") {
        config.lr = v.parse().unwrap();
    }
    if std::env::var("CHMM_HIDDEN").is_ok() {
        config.hidden = true;
    }
    if let Ok(v) = std::env::var("CHMM_EPOCHS") {
        config.epochs = v.parse().unwrap();
        config.patience = config.epochs;
    }
    if let Ok(v) = std::env::var("CHMM_BATCH") {
        config.batch_size = v.parse().unwrap();
    }
    config
}
