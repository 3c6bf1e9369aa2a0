//! Alternate training: the CHMM denoises, a refiner learns from its soft
//! labels, the refiner's predictions become an extra source, and the two
//! retrain on each other's output for a few loops.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chmm::{denoise, train_chmm, ChmmConfig, ChmmModel, TrainingLog};
use crate::data::{argmax, save_corpus, Corpus, Denoised, Split};
use crate::error::{Error, Result};
use crate::eval::score_split;
use crate::refiner::{attach_refiner_source, predict_refiner, train_refiner, RefinerConfig, RefinerModel};

/// Outcome of one [`EarlyStopper::observe`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Fires once the score has failed to strictly improve for `patience`
/// consecutive evaluations. Patience 0 stops after the first evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
    pub evaluations: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
            evaluations: 0,
        }
    }

    /// A stopper whose best score is already `score`.
    pub fn with_best(patience: usize, score: f64) -> Self {
        Self {
            best: Some(score),
            ..Self::new(patience)
        }
    }

    pub fn observe(&mut self, score: f64) -> StopDecision {
        self.evaluations += 1;
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }
}

/// The 1-based epoch the stopper would select from `trace`: the earliest
/// maximum among the epochs it lets run.
pub fn micro_early_stop(trace: &[f64], patience: usize) -> Result<usize> {
    if trace.is_empty() {
        return Err(Error::validation("empty metric trace"));
    }
    let mut stopper = EarlyStopper::new(patience);
    let mut selected = 1;
    for (n, &score) in trace.iter().enumerate() {
        let d = stopper.observe(score);
        if d.improved {
            selected = n + 1;
        }
        if d.stop {
            break;
        }
    }
    Ok(selected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AltConfig {
    pub chmm: ChmmConfig,
    pub refiner: RefinerConfig,
    pub max_loops: usize,
    pub macro_patience: usize,
    /// Continue the CHMM from the previous loop instead of re-initializing.
    pub chmm_warm_start: bool,
}

impl Default for AltConfig {
    fn default() -> Self {
        Self {
            chmm: ChmmConfig::default(),
            refiner: RefinerConfig::default(),
            max_loops: 10,
            macro_patience: 5,
            chmm_warm_start: false,
        }
    }
}

impl AltConfig {
    /// Settings for the synthetic reference suite.
    pub fn reference(seed: u64) -> Self {
        Self {
            chmm: ChmmConfig::reference(seed),
            refiner: RefinerConfig { seed, ..RefinerConfig::default() },
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Chmm,
    Refiner,
}

/// One row of the metric table. Loop 0 is phase I.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub loop_index: usize,
    pub stage: Stage,
    pub n_sources: usize,
    pub selected_epoch: Option<usize>,
    pub dev_f1: Option<f64>,
    pub test_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestModel {
    pub loop_index: usize,
    pub stage: Stage,
    pub dev_f1: f64,
    pub test_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AltState {
    pub loop_index: usize,
    pub chmm: ChmmModel,
    pub refiner: RefinerModel,
    /// Observations with the refiner as the last source.
    pub corpus: Corpus,
    pub best: Option<BestModel>,
    /// Denoised output of the best model.
    pub best_output: Vec<Denoised>,
    pub table: Vec<LoopRecord>,
    pub logs: Vec<(usize, Stage, TrainingLog)>,
    pub stopper: EarlyStopper,
    /// Loops run in phase II.
    pub loops_run: usize,
}

/// Corpus-level metric table and selection written by [`write_metrics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<LoopRecord>,
    pub best: Option<BestModel>,
    pub loops_run: usize,
}

fn split_f1(corpus: &Corpus, split: Split, hard: &[Vec<usize>]) -> Result<Option<f64>> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() || idx.iter().any(|&n| corpus.instances[n].sentence.gold.is_none()) {
        return Ok(None);
    }
    Ok(Some(score_split(corpus, split, hard)?.f1))
}

/// Marginal-argmax labels of soft outputs.
fn soft_argmax(soft: &[f64], l: usize) -> Vec<usize> {
    soft.chunks(l).map(argmax).collect()
}

fn record(state_table: &mut Vec<LoopRecord>, corpus: &Corpus, loop_index: usize, stage: Stage, log: &TrainingLog, hard: &[Vec<usize>]) -> Result<LoopRecord> {
    let row = LoopRecord {
        loop_index,
        stage,
        n_sources: corpus.n_sources(),
        selected_epoch: log.selected_epoch,
        dev_f1: split_f1(corpus, Split::Dev, hard)?,
        test_f1: split_f1(corpus, Split::Test, hard)?,
    };
    state_table.push(row.clone());
    Ok(row)
}

fn consider(best: &mut Option<BestModel>, output: &mut Vec<Denoised>, row: &LoopRecord, candidate: Vec<Denoised>) {
    let Some(dev) = row.dev_f1 else {
        if best.is_none() {
            *output = candidate;
        }
        return;
    };
    if best.as_ref().is_none_or(|b| dev > b.dev_f1) {
        *best = Some(BestModel {
            loop_index: row.loop_index,
            stage: row.stage,
            dev_f1: dev,
            test_f1: row.test_f1,
        });
        *output = candidate;
    }
}

/// CHMM output with marginal-argmax labels, the decoding the dev metric uses.
fn marginal_output(denoised: Vec<Denoised>, l: usize) -> Vec<Denoised> {
    denoised
        .into_iter()
        .map(|d| Denoised {
            hard: soft_argmax(&d.soft, l),
            soft: d.soft,
        })
        .collect()
}

fn refiner_output(preds: &[Vec<f64>], l: usize) -> Vec<Denoised> {
    preds
        .iter()
        .map(|p| Denoised {
            hard: soft_argmax(p, l),
            soft: p.clone(),
        })
        .collect()
}

fn loop_dir(run_dir: Option<&Path>, loop_index: usize) -> Result<Option<PathBuf>> {
    match run_dir {
        None => Ok(None),
        Some(dir) => {
            let d = dir.join(format!("loop-{loop_index:02}"));
            std::fs::create_dir_all(&d)?;
            Ok(Some(d))
        }
    }
}

/// CHMM on the original sources, refiner on its soft labels, refiner
/// predictions appended as a new source.
pub fn run_phase1(corpus: &Corpus, config: &AltConfig, run_dir: Option<&Path>) -> Result<AltState> {
    corpus.require_embeddings()?;
    let l = corpus.n_labels();
    let (chmm, chmm_log) = train_chmm(corpus, &config.chmm, None)?;
    let denoised = denoise(&chmm, corpus)?;
    let mut table = Vec::new();
    let mut best = None;
    let mut best_output = Vec::new();
    let denoised = marginal_output(denoised, l);
    let chmm_hard: Vec<Vec<usize>> = denoised.iter().map(|d| d.hard.clone()).collect();
    let row = record(&mut table, corpus, 0, Stage::Chmm, &chmm_log, &chmm_hard)?;
    let soft: Vec<Vec<f64>> = denoised.iter().map(|d| d.soft.clone()).collect();
    consider(&mut best, &mut best_output, &row, denoised);

    let (refiner, refiner_log) = train_refiner(corpus, &soft, &config.refiner, None)?;
    let preds = predict_refiner(&refiner, corpus)?;
    let out = refiner_output(&preds, l);
    let hard: Vec<Vec<usize>> = out.iter().map(|d| d.hard.clone()).collect();
    let row = record(&mut table, corpus, 0, Stage::Refiner, &refiner_log, &hard)?;
    consider(&mut best, &mut best_output, &row, out);

    let mut augmented = corpus.clone();
    attach_refiner_source(&mut augmented, &preds)?;
    if let Some(dir) = loop_dir(run_dir, 0)? {
        chmm.save(&dir.join("chmm.sdnet"))?;
        refiner.save(&dir.join("refiner.sdnet"))?;
    }
    let stopper = match &best {
        Some(b) => EarlyStopper::with_best(config.macro_patience, b.dev_f1),
        None => EarlyStopper::new(config.macro_patience),
    };
    Ok(AltState {
        loop_index: 0,
        chmm,
        refiner,
        corpus: augmented,
        best,
        best_output,
        table,
        logs: vec![(0, Stage::Chmm, chmm_log), (0, Stage::Refiner, refiner_log)],
        stopper,
        loops_run: 0,
    })
}

/// Runs `step(1)`, `step(2)`, ... until `stopper` fires or `max_loops`
/// steps have run; each step returns the loop's best dev score. Returns the
/// number of steps run.
pub fn drive_loops<F>(stopper: &mut EarlyStopper, max_loops: usize, mut step: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut run = 0;
    for loop_index in 1..=max_loops {
        let score = step(loop_index)?;
        run = loop_index;
        if stopper.observe(score).stop {
            break;
        }
    }
    Ok(run)
}

/// Phase-II loops until the macro stopper fires or `max_loops` is reached.
pub fn run_phase2(mut state: AltState, config: &AltConfig, run_dir: Option<&Path>) -> Result<AltState> {
    let l = state.corpus.n_labels();
    let refiner_config = config.refiner.phase_two();
    let mut stopper = state.stopper.clone();
    let loops = drive_loops(&mut stopper, config.max_loops, |loop_index| {
        let chmm_config = ChmmConfig {
            seed: config.chmm.seed.wrapping_add(loop_index as u64),
            ..config.chmm.clone()
        };
        let warm = config.chmm_warm_start.then_some(&state.chmm);
        let (chmm, chmm_log) = train_chmm(&state.corpus, &chmm_config, warm)?;
        let denoised = marginal_output(denoise(&chmm, &state.corpus)?, l);
        let chmm_hard: Vec<Vec<usize>> = denoised.iter().map(|d| d.hard.clone()).collect();
        let chmm_row = record(&mut state.table, &state.corpus, loop_index, Stage::Chmm, &chmm_log, &chmm_hard)?;
        let soft: Vec<Vec<f64>> = denoised.iter().map(|d| d.soft.clone()).collect();
        consider(&mut state.best, &mut state.best_output, &chmm_row, denoised);

        let (refiner, refiner_log) = train_refiner(&state.corpus, &soft, &refiner_config, Some(&state.refiner))?;
        let preds = predict_refiner(&refiner, &state.corpus)?;
        let out = refiner_output(&preds, l);
        let hard: Vec<Vec<usize>> = out.iter().map(|d| d.hard.clone()).collect();
        let ref_row = record(&mut state.table, &state.corpus, loop_index, Stage::Refiner, &refiner_log, &hard)?;
        consider(&mut state.best, &mut state.best_output, &ref_row, out);
        attach_refiner_source(&mut state.corpus, &preds)?;

        if let Some(dir) = loop_dir(run_dir, loop_index)? {
            chmm.save(&dir.join("chmm.sdnet"))?;
            refiner.save(&dir.join("refiner.sdnet"))?;
        }
        state.chmm = chmm;
        state.refiner = refiner;
        state.loop_index = loop_index;
        state.logs.push((loop_index, Stage::Chmm, chmm_log));
        state.logs.push((loop_index, Stage::Refiner, refiner_log));
        // -inf when there is no dev gold to score against
        Ok([chmm_row.dev_f1, ref_row.dev_f1].into_iter().flatten().fold(f64::NEG_INFINITY, f64::max))
    })?;
    state.stopper = stopper;
    state.loops_run = loops;
    Ok(state)
}

pub fn metric_table(state: &AltState) -> MetricTable {
    MetricTable {
        rows: state.table.clone(),
        best: state.best.clone(),
        loops_run: state.loops_run,
    }
}

pub fn write_metrics(state: &AltState, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&metric_table(state))? + "\n")?;
    Ok(())
}

/// Both phases; with a run directory, per-loop checkpoints, the metric
/// table and the best model's denoised corpus are written there.
pub fn run_alt(corpus: &Corpus, config: &AltConfig, run_dir: Option<&Path>) -> Result<AltState> {
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let state = run_phase1(corpus, config, run_dir)?;
    let state = run_phase2(state, config, run_dir)?;
    if let Some(dir) = run_dir {
        write_metrics(&state, &dir.join("metrics.json"))?;
        let mut out = corpus.clone();
        for (inst, d) in out.instances.iter_mut().zip(&state.best_output) {
            inst.denoised = Some(d.clone());
        }
        save_corpus(&out, &dir.join("denoised.jsonl"))?;
    }
    Ok(state)
}
