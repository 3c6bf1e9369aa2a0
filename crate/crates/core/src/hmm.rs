//! Vanilla multi-source HMM: one transition table and one emission table
//! shared by every token, trained by Baum-Welch with closed-form updates.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alt::EarlyStopper;
use crate::chmm::{sparsity_adjust, EpochRecord, TrainingLog};
use crate::data::{Corpus, Instance, Split, WeakObservationTensor};
use crate::error::{Error, Result};
use crate::eval::{majority_vote, score_split};
use crate::kernels::{initial_pi, marginal_decode, posterior_stats, viterbi, PosteriorStats, TokenConditionedParams, DEFAULT_PI_EPS};

/// Smallest probability any row entry may take.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub n_labels: usize,
    pub n_sources: usize,
    pub pi: Vec<f64>,
    /// `[i][j]`
    pub trans: Vec<f64>,
    /// `[i][j][k]`
    pub emit: Vec<f64>,
}

impl HmmParams {
    pub fn new(n_labels: usize, n_sources: usize, pi_eps: f64, trans: Vec<f64>, emit: Vec<f64>) -> Result<Self> {
        if trans.len() != n_labels * n_labels || emit.len() != n_labels * n_labels * n_sources {
            return Err(Error::dim("HMM tables have the wrong size"));
        }
        Ok(Self {
            n_labels,
            n_sources,
            pi: initial_pi(n_labels, pi_eps),
            trans,
            emit,
        })
    }

    /// The same tables repeated over `len` tokens.
    pub fn token_params(&self, len: usize) -> Result<TokenConditionedParams> {
        TokenConditionedParams::tiled(self.pi.clone(), &self.trans, &self.emit, self.n_sources, len)
    }

    pub fn posterior(&self, x: &WeakObservationTensor) -> Result<PosteriorStats> {
        posterior_stats(&self.token_params(x.len())?, x)
    }

    /// Viterbi path and smoothed marginals.
    pub fn denoise(&self, x: &WeakObservationTensor) -> Result<(Vec<usize>, Vec<f64>)> {
        let params = self.token_params(x.len())?;
        let hard = viterbi(&params, x)?;
        let stats = posterior_stats(&params, x)?;
        Ok((hard, stats.gamma))
    }

    pub fn save(&self, path: &Path, corpus: &Corpus) -> Result<()> {
        let file = HmmFile {
            format: "seqdenoise-hmm-v1".into(),
            labels: corpus.labels.names().to_vec(),
            sources: corpus.source_names.clone(),
            params: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>, Vec<String>)> {
        let file: HmmFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let p = &file.params;
        if p.trans.len() != p.n_labels * p.n_labels
            || p.emit.len() != p.n_labels * p.n_labels * p.n_sources
            || p.pi.len() != p.n_labels
            || file.labels.len() != p.n_labels
            || file.sources.len() != p.n_sources
        {
            return Err(Error::load(path.display().to_string(), "HMM tables have the wrong size"));
        }
        Ok((file.params, file.labels, file.sources))
    }
}

#[derive(Serialize, Deserialize)]
struct HmmFile {
    format: String,
    labels: Vec<String>,
    sources: Vec<String>,
    params: HmmParams,
}

fn normalize_rows(values: &mut [f64], row_len: usize) {
    for row in values.chunks_mut(row_len) {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Floors a probability row at [`PROB_FLOOR`] and renormalizes it.
fn floor_row(row: &mut [f64]) {
    for v in row.iter_mut() {
        *v = v.max(PROB_FLOOR);
    }
    let s: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Target statistics from majority-voted pseudo labels: add-one smoothed
/// transition counts (including the start-to-first-token step) and
/// add-one smoothed counts of source `k` emitting `j` when the vote is `i`.
/// Returns `(trans [i][j], emit [i][j][k])`.
pub fn init_statistics<'a, I>(instances: I, n_labels: usize, n_sources: usize, seed: u64) -> (Vec<f64>, Vec<f64>)
where
    I: IntoIterator<Item = &'a Instance>,
{
    let (l, kk) = (n_labels, n_sources);
    let mut trans = vec![1.0; l * l];
    let mut emit = vec![1.0; l * l * kk];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for inst in instances {
        let votes = majority_vote(&inst.obs, &mut rng);
        let mut prev = crate::labelspace::OUTSIDE;
        for (t, &z) in votes.iter().enumerate() {
            trans[prev * l + z] += 1.0;
            prev = z;
            for k in 0..kk {
                for (j, &p) in inst.obs.row(t, k).iter().enumerate() {
                    emit[(z * l + j) * kk + k] += p;
                }
            }
        }
    }
    normalize_rows(&mut trans, l);
    // rows over j for each (i, k)
    for i in 0..l {
        for k in 0..kk {
            let s: f64 = (0..l).map(|j| emit[(i * l + j) * kk + k]).sum();
            for j in 0..l {
                emit[(i * l + j) * kk + k] /= s;
            }
        }
    }
    (trans, emit)
}

/// Rows left at their previous value because no posterior mass reached them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MStepReport {
    pub kept_trans_rows: Vec<usize>,
    pub kept_emit_rows: Vec<usize>,
}

/// Closed-form M-step pooled over a batch:
/// `trans[i][j] = sum xi[i][j] / sum xi[i][.]` over every transition
/// (the start step included) and
/// `emit[i][j][k] = sum gamma[i] x[j][k] / sum gamma[i]`.
/// The start distribution stays fixed on `O`.
pub fn hmm_m_step(
    stats: &[PosteriorStats],
    xs: &[&WeakObservationTensor],
    prev: &HmmParams,
) -> Result<(HmmParams, MStepReport)> {
    let (l, kk) = (prev.n_labels, prev.n_sources);
    if stats.len() != xs.len() {
        return Err(Error::dim("statistics and observations differ in count"));
    }
    let mut trans_num = vec![0.0; l * l];
    let mut emit_num = vec![0.0; l * l * kk];
    let mut occupancy = vec![0.0; l];
    for (st, x) in stats.iter().zip(xs) {
        if st.len != x.len() || x.n_sources() != kk || x.n_labels() != l {
            return Err(Error::dim("statistics do not match observations"));
        }
        for slice in st.xi.chunks_exact(l * l) {
            for (acc, v) in trans_num.iter_mut().zip(slice) {
                *acc += v;
            }
        }
        for t in 0..st.len {
            let g = st.gamma_at(t);
            let xt = x.token(t);
            for i in 0..l {
                occupancy[i] += g[i];
                for j in 0..l {
                    for k in 0..kk {
                        emit_num[(i * l + j) * kk + k] += g[i] * xt[k * l + j];
                    }
                }
            }
        }
    }
    let mut report = MStepReport::default();
    let mut trans = prev.trans.clone();
    for i in 0..l {
        let row = &trans_num[i * l..(i + 1) * l];
        let denom: f64 = row.iter().sum();
        if denom > f64::MIN_POSITIVE {
            let out = &mut trans[i * l..(i + 1) * l];
            for (o, v) in out.iter_mut().zip(row) {
                *o = v / denom;
            }
            floor_row(out);
        } else {
            report.kept_trans_rows.push(i);
        }
    }
    let mut emit = prev.emit.clone();
    for i in 0..l {
        if occupancy[i] <= f64::MIN_POSITIVE {
            report.kept_emit_rows.push(i);
            continue;
        }
        for k in 0..kk {
            let mut row: Vec<f64> = (0..l).map(|j| emit_num[(i * l + j) * kk + k] / occupancy[i]).collect();
            floor_row(&mut row);
            for (j, v) in row.into_iter().enumerate() {
                emit[(i * l + j) * kk + k] = v;
            }
        }
    }
    Ok((
        HmmParams {
            n_labels: l,
            n_sources: kk,
            pi: prev.pi.clone(),
            trans,
            emit,
        },
        report,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmConfig {
    pub epochs: usize,
    pub patience: usize,
    pub pi_eps: f64,
    /// Applies the sparsity adjustment to observations when set.
    pub sparsity_eps: Option<f64>,
    pub seed: u64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            patience: 5,
            pi_eps: DEFAULT_PI_EPS,
            sparsity_eps: None,
            seed: 0,
        }
    }
}

fn prepared_obs(inst: &Instance, config: &HmmConfig) -> WeakObservationTensor {
    match config.sparsity_eps {
        Some(eps) => sparsity_adjust(&inst.obs, eps),
        None => inst.obs.clone(),
    }
}

/// Marginal-decoded labels for every instance of the corpus.
pub fn decode_corpus(params: &HmmParams, corpus: &Corpus, config: &HmmConfig) -> Result<Vec<Vec<usize>>> {
    corpus
        .instances
        .iter()
        .map(|inst| Ok(marginal_decode(&params.posterior(&prepared_obs(inst, config))?).0))
        .collect()
}

fn dev_f1(params: &HmmParams, corpus: &Corpus, config: &HmmConfig) -> Result<(Option<f64>, f64)> {
    let l = params.n_labels;
    let mut worst = crate::chmm::rows_error(&params.trans, l);
    for i in 0..l {
        for k in 0..params.n_sources {
            let s: f64 = (0..l).map(|j| params.emit[(i * l + j) * params.n_sources + k]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    let mut pred = vec![Vec::new(); corpus.instances.len()];
    for (n, inst) in corpus.instances.iter().enumerate() {
        if inst.split == Split::Dev {
            let stats = params.posterior(&prepared_obs(inst, config))?;
            worst = worst.max(crate::chmm::rows_error(&stats.gamma, l));
            pred[n] = marginal_decode(&stats).0;
        }
    }
    let has_dev_gold = corpus.split(Split::Dev).next().is_some()
        && corpus.split(Split::Dev).all(|i| i.sentence.gold.is_some());
    if !has_dev_gold {
        return Ok((None, worst));
    }
    Ok((Some(score_split(corpus, Split::Dev, &pred)?.f1), worst))
}

/// Baum-Welch on the training split, initialized from [`init_statistics`],
/// keeping the best-dev-F1 iterate.
pub fn train_hmm(corpus: &Corpus, config: &HmmConfig) -> Result<(HmmParams, TrainingLog)> {
    let train: Vec<&Instance> = corpus.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let (l, kk) = (corpus.n_labels(), corpus.n_sources());
    let xs: Vec<WeakObservationTensor> = train.iter().map(|i| prepared_obs(i, config)).collect();
    let prepared: Vec<Instance> = train
        .iter()
        .zip(&xs)
        .map(|(i, x)| Instance {
            obs: x.clone(),
            ..(*i).clone()
        })
        .collect();
    let (trans, emit) = init_statistics(&prepared, l, kk, config.seed);
    let mut params = HmmParams::new(l, kk, config.pi_eps, trans, emit)?;
    let mut log = TrainingLog::default();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = params.clone();
    let x_refs: Vec<&WeakObservationTensor> = xs.iter().collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let stats: Vec<PosteriorStats> = xs.iter().map(|x| params.posterior(x)).collect::<Result<_>>()?;
        let evidence: f64 = stats.iter().map(|s| s.log_evidence).sum();
        let (next, report) = hmm_m_step(&stats, &x_refs, &params)?;
        if !report.kept_trans_rows.is_empty() || !report.kept_emit_rows.is_empty() {
            log.notes.push(format!(
                "epoch {epoch}: unvisited states kept previous rows (transition {:?}, emission {:?})",
                report.kept_trans_rows, report.kept_emit_rows
            ));
        }
        params = next;
        let (f1, max_row_error) = dev_f1(&params, corpus, config)?;
        log.epochs.push(EpochRecord {
            epoch,
            objective: evidence,
            dev_f1: f1,
            max_row_error,
            seconds: started.elapsed().as_secs_f64(),
        });
        match f1 {
            Some(score) => {
                let decision = stopper.observe(score);
                if decision.improved {
                    best = params.clone();
                    log.selected_epoch = Some(epoch);
                }
                if decision.stop {
                    break;
                }
            }
            None => {
                best = params.clone();
                log.selected_epoch = Some(epoch);
            }
        }
    }
    Ok((best, log))
}
