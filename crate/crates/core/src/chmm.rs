//! The conditional HMM: per-token transition and emission tables produced
//! from embeddings by a small network, trained by generalized EM.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alt::EarlyStopper;
use crate::data::{Corpus, Denoised, EmbeddingSequence, Instance, Split, WeakObservationTensor};
use crate::error::{Error, Result};
use crate::eval::score_split;
use crate::hmm::{init_statistics, PROB_FLOOR};
use crate::kernels::{
    initial_pi, observation_logliks, posterior_from_loglik, q_from_loglik, viterbi_from_loglik, PosteriorStats,
    TokenConditionedParams, DEFAULT_PI_EPS,
};
use crate::labelspace::{LabelSet, OUTSIDE};
use crate::neural::{sgd_step, softmax_in_place, Activations, AffineStack, Architecture, GradientBuffer};

pub const CHMM_FORMAT: &str = "seqdenoise-chmm-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sentence training objective.
    pub objective: f64,
    pub dev_f1: Option<f64>,
    /// Largest `|row sum - 1|` over every table and soft-label row produced
    /// while evaluating this epoch's model.
    pub max_row_error: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean loss per pretraining epoch.
    pub pretrain_loss: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: Option<usize>,
    pub notes: Vec<String>,
}

impl TrainingLog {
    pub fn dev_trace(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.dev_f1).collect()
    }
}

/// Flattens the observations of sources that see nothing where another
/// source sees an entity. A source observes an entity at a token when it
/// puts more than half its mass on non-`O` labels; every other source's row
/// there becomes `[eps, (1-eps)/|L|, ...]`, renormalized.
pub fn sparsity_adjust(x: &WeakObservationTensor, eps: f64) -> WeakObservationTensor {
    let (l, kk) = (x.n_labels(), x.n_sources());
    let mut out = x.clone();
    let mut flat = vec![(1.0 - eps) / l as f64; l];
    flat[OUTSIDE] = eps;
    let s: f64 = flat.iter().sum();
    flat.iter_mut().for_each(|v| *v /= s);
    let observes = |row: &[f64]| 1.0 - row[OUTSIDE] > 0.5;
    for t in 0..x.len() {
        if !(0..kk).any(|k| observes(x.row(t, k))) {
            continue;
        }
        for k in 0..kk {
            if !observes(x.row(t, k)) {
                out.row_mut(t, k).copy_from_slice(&flat);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChmmConfig {
    pub lr: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Pretraining step size, divided by `1 + mean squared embedding norm`.
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub sparsity_eps: f64,
    pub pi_eps: f64,
    /// Replace the transition head by a per-token state prior.
    pub iid: bool,
    /// One tanh hidden layer of width `d_emb`.
    pub hidden: bool,
    pub shared_trunk: bool,
    pub seed: u64,
}

impl Default for ChmmConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            pretrain_epochs: 5,
            pretrain_lr: 0.5,
            batch_size: 64,
            patience: 5,
            sparsity_eps: 0.05,
            pi_eps: DEFAULT_PI_EPS,
            iid: false,
            hidden: false,
            shared_trunk: false,
            seed: 0,
        }
    }
}

impl ChmmConfig {
    /// Settings tuned for the synthetic reference suite: plain gradient
    /// ascent on the batch-averaged objective needs a far larger step than
    /// the default.
    pub fn reference(seed: u64) -> Self {
        Self {
            lr: 0.2,
            epochs: 40,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChmmModel {
    pub net: AffineStack,
    pub labels: LabelSet,
    pub source_names: Vec<String>,
    pub pi_eps: f64,
    pub sparsity_eps: f64,
    pub iid: bool,
}

/// Tables and network activations for one sentence.
struct Evaluated {
    params: TokenConditionedParams,
    acts: Vec<Activations>,
    log_phi: Vec<f64>,
}

fn floor_renormalize(row: &mut [f64]) {
    if row.iter().all(|&v| v >= PROB_FLOOR) {
        return;
    }
    row.iter_mut().for_each(|v| *v = v.max(PROB_FLOOR));
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    labels: Vec<String>,
    sources: Vec<String>,
    pi_eps: f64,
    sparsity_eps: f64,
    iid: bool,
}

impl ChmmModel {
    pub fn new(labels: LabelSet, source_names: Vec<String>, emb_dim: usize, config: &ChmmConfig) -> Result<Self> {
        let (l, kk) = (labels.len(), source_names.len());
        let arch = Architecture {
            input_dim: emb_dim,
            hidden: if config.hidden { vec![emb_dim] } else { Vec::new() },
            heads: vec![if config.iid { l } else { l * l }, l * l * kk],
            shared_trunk: config.shared_trunk,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            net: AffineStack::new(arch, &mut rng)?,
            labels,
            source_names,
            pi_eps: config.pi_eps,
            sparsity_eps: config.sparsity_eps,
            iid: config.iid,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn n_sources(&self) -> usize {
        self.source_names.len()
    }

    /// Observations as the model consumes them (sparsity-adjusted).
    pub fn prepare(&self, x: &WeakObservationTensor) -> WeakObservationTensor {
        sparsity_adjust(x, self.sparsity_eps)
    }

    fn evaluate(&self, emb: &EmbeddingSequence, x: &WeakObservationTensor) -> Result<Evaluated> {
        let (params, acts) = self.tables(emb)?;
        if x.len() != params.len() || x.n_sources() != self.n_sources() || x.n_labels() != self.n_labels() {
            return Err(Error::dim(format!(
                "observations are {}x{}x{}, model expects {}x{}x{}",
                x.len(),
                x.n_sources(),
                x.n_labels(),
                params.len(),
                self.n_sources(),
                self.n_labels()
            )));
        }
        let log_phi = observation_logliks(&params, x)?;
        Ok(Evaluated { params, acts, log_phi })
    }

    fn tables(&self, emb: &EmbeddingSequence) -> Result<(TokenConditionedParams, Vec<Activations>)> {
        let (l, kk) = (self.n_labels(), self.n_sources());
        let len = emb.len();
        let mut trans = Vec::with_capacity(len * l * l);
        let mut emit = vec![0.0; len * l * l * kk];
        let mut acts = Vec::with_capacity(len);
        let mut row = vec![0.0; l];
        for t in 0..len {
            let a = self.net.forward(&emb.row_f64(t))?;
            let s = a.output(0);
            if self.iid {
                row.copy_from_slice(s);
                softmax_in_place(&mut row);
                floor_renormalize(&mut row);
                for _ in 0..l {
                    trans.extend_from_slice(&row);
                }
            } else {
                for chunk in s.chunks_exact(l) {
                    row.copy_from_slice(chunk);
                    softmax_in_place(&mut row);
                    floor_renormalize(&mut row);
                    trans.extend_from_slice(&row);
                }
            }
            let h = a.output(1);
            let e = &mut emit[t * l * l * kk..(t + 1) * l * l * kk];
            for i in 0..l {
                for k in 0..kk {
                    for j in 0..l {
                        row[j] = h[(i * l + j) * kk + k];
                    }
                    softmax_in_place(&mut row);
                    floor_renormalize(&mut row);
                    for j in 0..l {
                        e[(i * l + j) * kk + k] = row[j];
                    }
                }
            }
            acts.push(a);
        }
        let params = TokenConditionedParams::new(l, kk, initial_pi(l, self.pi_eps), trans, emit)?;
        Ok((params, acts))
    }

    /// Per-token tables for one embedded sentence.
    pub fn emit_params(&self, emb: &EmbeddingSequence) -> Result<TokenConditionedParams> {
        Ok(self.tables(emb)?.0)
    }

    /// Posterior statistics for already-prepared observations.
    pub fn e_step(&self, emb: &EmbeddingSequence, x: &WeakObservationTensor) -> Result<PosteriorStats> {
        let ev = self.evaluate(emb, x)?;
        Ok(posterior_from_loglik(&ev.params, &ev.log_phi))
    }

    /// The expected complete-data log likelihood under fixed statistics.
    pub fn q_given_stats(&self, emb: &EmbeddingSequence, x: &WeakObservationTensor, stats: &PosteriorStats) -> Result<f64> {
        let ev = self.evaluate(emb, x)?;
        Ok(q_from_loglik(&ev.params, stats, &ev.log_phi))
    }

    /// Adds the gradient of [`Self::q_given_stats`] to `grads` and returns the value.
    pub fn q_gradient(
        &self,
        emb: &EmbeddingSequence,
        x: &WeakObservationTensor,
        stats: &PosteriorStats,
        grads: &mut GradientBuffer,
    ) -> Result<f64> {
        let ev = self.evaluate(emb, x)?;
        self.accumulate(&ev, x, stats, grads)?;
        Ok(q_from_loglik(&ev.params, stats, &ev.log_phi))
    }

    fn accumulate(&self, ev: &Evaluated, x: &WeakObservationTensor, stats: &PosteriorStats, grads: &mut GradientBuffer) -> Result<()> {
        let (l, kk) = (self.n_labels(), self.n_sources());
        let mut up_s = vec![0.0; if self.iid { l } else { l * l }];
        let mut up_h = vec![0.0; l * l * kk];
        let mut m = vec![0.0; l * kk];
        for t in 0..ev.params.len() {
            let xi = stats.xi_at(t);
            let psi = ev.params.trans_at(t);
            if self.iid {
                // every row holds the same prior p: sum_i xi_ij - p_j sum_ij xi_ij
                let total: f64 = xi.iter().sum();
                for j in 0..l {
                    let col: f64 = (0..l).map(|i| xi[i * l + j]).sum();
                    up_s[j] = col - psi[j] * total;
                }
            } else {
                for i in 0..l {
                    let occ: f64 = xi[i * l..(i + 1) * l].iter().sum();
                    for j in 0..l {
                        up_s[i * l + j] = xi[i * l + j] - psi[i * l + j] * occ;
                    }
                }
            }
            let phi = ev.params.emit_token(t);
            let xt = x.token(t);
            m.fill(0.0);
            for i in 0..l {
                for j in 0..l {
                    for k in 0..kk {
                        m[i * kk + k] += phi[(i * l + j) * kk + k] * xt[k * l + j];
                    }
                }
            }
            let g = stats.gamma_at(t);
            for i in 0..l {
                for j in 0..l {
                    for k in 0..kk {
                        let p = phi[(i * l + j) * kk + k];
                        up_h[(i * l + j) * kk + k] = g[i] * (p * xt[k * l + j] / m[i * kk + k] - p);
                    }
                }
            }
            self.net.backprop(&ev.acts[t], &[&up_s, &up_h], grads)?;
        }
        Ok(())
    }

    /// Viterbi labels and smoothed marginals for one instance.
    pub fn denoise_instance(&self, inst: &Instance) -> Result<Denoised> {
        let x = self.prepare(&inst.obs);
        let ev = self.evaluate(inst.embeddings()?, &x)?;
        let stats = posterior_from_loglik(&ev.params, &ev.log_phi);
        Ok(Denoised {
            hard: viterbi_from_loglik(&ev.params, &ev.log_phi),
            soft: stats.gamma,
        })
    }

    /// Marginal-argmax labels, and the largest row-normalization error seen
    /// in the tables and marginals.
    fn marginal_labels(&self, inst: &Instance) -> Result<(Vec<usize>, f64)> {
        let x = self.prepare(&inst.obs);
        let ev = self.evaluate(inst.embeddings()?, &x)?;
        let stats = posterior_from_loglik(&ev.params, &ev.log_phi);
        let err = max_row_error(&ev.params).max(rows_error(&stats.gamma, self.n_labels()));
        let (hard, _) = crate::kernels::marginal_decode(&stats);
        Ok((hard, err))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format: CHMM_FORMAT.into(),
            labels: self.labels.names().to_vec(),
            sources: self.source_names.clone(),
            pi_eps: self.pi_eps,
            sparsity_eps: self.sparsity_eps,
            iid: self.iid,
        };
        self.net.save_file(path, &serde_json::to_value(header)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = AffineStack::load_file(path)?;
        let header: ModelHeader = serde_json::from_value(meta)?;
        if header.format != CHMM_FORMAT {
            return Err(Error::load(path.display().to_string(), format!("not a CHMM model ({})", header.format)));
        }
        let labels = LabelSet::from_label_names(&header.labels)?;
        let (l, kk) = (labels.len(), header.sources.len());
        let expected = vec![if header.iid { l } else { l * l }, l * l * kk];
        if net.architecture().heads != expected {
            return Err(Error::load(path.display().to_string(), "network heads do not match the label set"));
        }
        Ok(Self {
            net,
            labels,
            source_names: header.sources,
            pi_eps: header.pi_eps,
            sparsity_eps: header.sparsity_eps,
            iid: header.iid,
        })
    }
}

/// Largest `|row sum - 1|` over transition and emission rows.
pub fn max_row_error(params: &TokenConditionedParams) -> f64 {
    let (l, kk) = (params.n_labels(), params.n_sources());
    let mut worst = rows_error(params.trans(), l);
    for t in 0..params.len() {
        let e = params.emit_token(t);
        for i in 0..l {
            for k in 0..kk {
                let s: f64 = (0..l).map(|j| e[(i * l + j) * kk + k]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    worst
}

/// Largest `|row sum - 1|` over contiguous rows; NaN rows count as infinite.
pub fn rows_error(values: &[f64], row_len: usize) -> f64 {
    values
        .chunks(row_len)
        .map(|r| {
            let e = (r.iter().sum::<f64>() - 1.0).abs();
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .fold(0.0, f64::max)
}

/// Training instances with prepared observations and embeddings.
struct Prepared<'a> {
    inst: &'a Instance,
    emb: &'a EmbeddingSequence,
    x: WeakObservationTensor,
}

fn prepare_split<'a>(model: &ChmmModel, corpus: &'a Corpus, split: Split) -> Result<Vec<Prepared<'a>>> {
    corpus
        .split(split)
        .map(|inst| {
            Ok(Prepared {
                inst,
                emb: inst.embeddings()?,
                x: model.prepare(&inst.obs),
            })
        })
        .collect()
}

fn check_compatible(model: &ChmmModel, corpus: &Corpus) -> Result<()> {
    let dim = corpus.require_embeddings()?;
    if dim != model.net.architecture().input_dim {
        return Err(Error::dim(format!(
            "corpus embeddings have dimension {dim}, model expects {}",
            model.net.architecture().input_dim
        )));
    }
    if corpus.n_labels() != model.n_labels() || corpus.n_sources() != model.n_sources() {
        return Err(Error::dim(format!(
            "corpus has {} labels and {} sources, model expects {} and {}",
            corpus.n_labels(),
            corpus.n_sources(),
            model.n_labels(),
            model.n_sources()
        )));
    }
    Ok(())
}

/// Regresses the raw network outputs onto the target statistics with mean
/// squared error. Returns the mean loss of each epoch.
pub fn pretrain_init(
    model: &mut ChmmModel,
    corpus: &Corpus,
    trans_target: &[f64],
    emit_target: &[f64],
    epochs: usize,
    config: &ChmmConfig,
) -> Result<Vec<f64>> {
    check_compatible(model, corpus)?;
    let l = model.n_labels();
    let trans_target: Vec<f64> = if model.iid {
        // column means of the transition target
        (0..l).map(|j| (0..l).map(|i| trans_target[i * l + j]).sum::<f64>() / l as f64).collect()
    } else {
        trans_target.to_vec()
    };
    if emit_target.len() != model.net.architecture().heads[1] {
        return Err(Error::dim("emission target does not match the network head"));
    }
    let train = prepare_split(model, corpus, Split::Train)?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let mut sq_norm = 0.0;
    let mut n_tokens = 0usize;
    for p in &train {
        for t in 0..p.emb.len() {
            sq_norm += p.emb.row(t).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            n_tokens += 1;
        }
    }
    let step = config.pretrain_lr / (1.0 + sq_norm / n_tokens as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5052_4554);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = GradientBuffer::zeros_like(&model.net);
    let mut trace = Vec::with_capacity(epochs);
    let mut up_s = vec![0.0; trans_target.len()];
    let mut up_h = vec![0.0; emit_target.len()];
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            grads.clear();
            for &idx in batch {
                let emb = train[idx].emb;
                let scale = 2.0 / emb.len() as f64;
                let mut loss = 0.0;
                for t in 0..emb.len() {
                    let a = model.net.forward(&emb.row_f64(t))?;
                    for ((u, &target), &out) in up_s.iter_mut().zip(&trans_target).zip(a.output(0)) {
                        *u = scale * (target - out);
                        loss += (target - out) * (target - out);
                    }
                    for ((u, &target), &out) in up_h.iter_mut().zip(emit_target).zip(a.output(1)) {
                        *u = scale * (target - out);
                        loss += (target - out) * (target - out);
                    }
                    model.net.backprop(&a, &[&up_s, &up_h], &mut grads)?;
                }
                total += loss / emb.len() as f64;
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(&mut model.net, &grads, step)?;
        }
        trace.push(total / train.len() as f64);
    }
    Ok(trace)
}

/// One pass of generalized EM over the training split: for each seeded
/// mini-batch, E-step under the current network, then one ascent step on
/// the batch-averaged objective. Returns the mean per-sentence objective.
pub fn generalized_em_epoch(model: &mut ChmmModel, corpus: &Corpus, lr: f64, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    check_compatible(model, corpus)?;
    let train = prepare_split(model, corpus, Split::Train)?;
    em_epoch(model, &train, lr, batch_size, rng)
}

fn em_epoch(model: &mut ChmmModel, train: &[Prepared<'_>], lr: f64, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut grads = GradientBuffer::zeros_like(&model.net);
    let mut total = 0.0;
    for batch in order.chunks(batch_size.max(1)) {
        grads.clear();
        for &idx in batch {
            let p = &train[idx];
            let ev = model.evaluate(p.emb, &p.x)?;
            let stats = posterior_from_loglik(&ev.params, &ev.log_phi);
            let q = q_from_loglik(&ev.params, &stats, &ev.log_phi);
            if !q.is_finite() {
                return Err(Error::Numerical(format!("objective is {q} on sentence {}", p.inst.id())));
            }
            total += q;
            model.accumulate(&ev, &p.x, &stats, &mut grads)?;
        }
        grads.scale(1.0 / batch.len() as f64);
        sgd_step(&mut model.net, &grads, lr)?;
    }
    Ok(total / train.len() as f64)
}

/// Dev entity F1 from marginal decoding, with the largest row error seen.
fn dev_evaluation(model: &ChmmModel, corpus: &Corpus) -> Result<(Option<f64>, f64)> {
    let mut worst = 0.0f64;
    let mut pred = vec![Vec::new(); corpus.instances.len()];
    let mut any_dev = false;
    let mut has_gold = true;
    for (n, inst) in corpus.instances.iter().enumerate() {
        if inst.split != Split::Dev {
            continue;
        }
        any_dev = true;
        has_gold &= inst.sentence.gold.is_some();
        let (hard, err) = model.marginal_labels(inst)?;
        worst = worst.max(err);
        pred[n] = hard;
    }
    if !(any_dev && has_gold) {
        return Ok((None, worst));
    }
    Ok((Some(score_split(corpus, Split::Dev, &pred)?.f1), worst))
}

/// Statistics initialization, MSE pretraining and generalized EM with
/// early stopping on dev F1. With `warm` the network starts from that model
/// and pretraining is skipped.
pub fn train_chmm(corpus: &Corpus, config: &ChmmConfig, warm: Option<&ChmmModel>) -> Result<(ChmmModel, TrainingLog)> {
    let dim = corpus.require_embeddings()?;
    if config.batch_size == 0 || config.epochs == 0 && config.pretrain_epochs == 0 && warm.is_none() {
        return Err(Error::Config("batch size and epoch counts must be positive".into()));
    }
    let mut log = TrainingLog::default();
    let mut model = match warm {
        Some(m) if m.n_sources() == corpus.n_sources() && m.iid == config.iid => {
            let mut m = m.clone();
            m.source_names = corpus.source_names.clone();
            m
        }
        Some(_) => {
            log.notes.push("warm start skipped: source count or mode changed".into());
            ChmmModel::new(corpus.labels.clone(), corpus.source_names.clone(), dim, config)?
        }
        None => ChmmModel::new(corpus.labels.clone(), corpus.source_names.clone(), dim, config)?,
    };
    check_compatible(&model, corpus)?;
    let train = prepare_split(&model, corpus, Split::Train)?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let warm_started = warm.is_some() && log.notes.is_empty();
    if !warm_started {
        let prepared: Vec<Instance> = train
            .iter()
            .map(|p| Instance {
                obs: p.x.clone(),
                ..p.inst.clone()
            })
            .collect();
        let (trans, emit) = init_statistics(&prepared, corpus.n_labels(), corpus.n_sources(), config.seed);
        log.pretrain_loss = pretrain_init(&mut model, corpus, &trans, &emit, config.pretrain_epochs, config)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x454d_4550);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = model.clone();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let objective = em_epoch(&mut model, &train, config.lr, config.batch_size, &mut rng)?;
        let (dev_f1, max_row_error) = dev_evaluation(&model, corpus)?;
        log.epochs.push(EpochRecord {
            epoch,
            objective,
            dev_f1,
            max_row_error,
            seconds: started.elapsed().as_secs_f64(),
        });
        match dev_f1 {
            Some(score) => {
                let decision = stopper.observe(score);
                if decision.improved {
                    best = model.clone();
                    log.selected_epoch = Some(epoch);
                }
                if decision.stop {
                    break;
                }
            }
            None => {
                best = model.clone();
                log.selected_epoch = Some(epoch);
            }
        }
    }
    if config.epochs == 0 {
        best = model;
    }
    Ok((best, log))
}

/// Denoised labels for every instance of the corpus.
pub fn denoise(model: &ChmmModel, corpus: &Corpus) -> Result<Vec<Denoised>> {
    check_compatible(model, corpus)?;
    corpus.instances.iter().map(|inst| model.denoise_instance(inst)).collect()
}
