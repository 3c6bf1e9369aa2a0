//! A feed-forward token classifier over frozen embeddings, trained by KL
//! divergence against soft labels. Its predictions rejoin the observations
//! as an extra source.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alt::EarlyStopper;
use crate::chmm::{rows_error, EpochRecord, TrainingLog};
use crate::data::{argmax, Corpus, EmbeddingSequence, Split, WeakObservationTensor};
use crate::error::{Error, Result};
use crate::eval::score_split;
use crate::hmm::PROB_FLOOR;
use crate::labelspace::LabelSet;
use crate::neural::{sgd_step, softmax_in_place, AffineStack, Architecture, GradientBuffer};

pub const REFINER_FORMAT: &str = "seqdenoise-refiner-v1";
/// Name of the source slot the refiner occupies.
pub const REFINER_SOURCE: &str = "refiner";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Width of the tanh hidden layer; 0 gives a linear classifier.
    pub hidden: usize,
    /// Neighbouring tokens on each side whose embeddings join the input.
    pub window: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 30,
            batch_size: 16,
            hidden: 64,
            window: 1,
            patience: 5,
            seed: 0,
        }
    }
}

impl RefinerConfig {
    /// Settings for the warm-started loops: half the learning rate, a fifth
    /// of the epochs, one batch per epoch.
    pub fn phase_two(&self) -> Self {
        Self {
            lr: self.lr / 2.0,
            epochs: (self.epochs / 5).max(1),
            batch_size: usize::MAX,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerModel {
    pub net: AffineStack,
    pub labels: LabelSet,
    pub window: usize,
    pub emb_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    labels: Vec<String>,
    window: usize,
    emb_dim: usize,
}

impl RefinerModel {
    pub fn new(labels: LabelSet, emb_dim: usize, config: &RefinerConfig) -> Result<Self> {
        let arch = Architecture {
            input_dim: emb_dim * (2 * config.window + 1),
            hidden: if config.hidden > 0 { vec![config.hidden] } else { Vec::new() },
            heads: vec![labels.len()],
            shared_trunk: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            net: AffineStack::new(arch, &mut rng)?,
            labels,
            window: config.window,
            emb_dim,
        })
    }

    /// Embeddings of tokens `t-w..=t+w`, zero outside the sentence.
    pub fn features(&self, emb: &EmbeddingSequence, t: usize) -> Vec<f64> {
        let d = self.emb_dim;
        let mut f = vec![0.0; d * (2 * self.window + 1)];
        for (slot, off) in (0..=2 * self.window).enumerate() {
            let pos = t as isize + off as isize - self.window as isize;
            if pos >= 0 && (pos as usize) < emb.len() {
                for (o, &v) in f[slot * d..(slot + 1) * d].iter_mut().zip(emb.row(pos as usize)) {
                    *o = v as f64;
                }
            }
        }
        f
    }

    /// Per-token label distributions, `T * |L|`.
    pub fn predict(&self, emb: &EmbeddingSequence) -> Result<Vec<f64>> {
        if emb.dim() != self.emb_dim {
            return Err(Error::dim(format!("embeddings have dimension {}, refiner expects {}", emb.dim(), self.emb_dim)));
        }
        let mut out = Vec::with_capacity(emb.len() * self.labels.len());
        for t in 0..emb.len() {
            let a = self.net.forward(&self.features(emb, t))?;
            let mut row = a.output(0).to_vec();
            softmax_in_place(&mut row);
            out.extend(row);
        }
        Ok(out)
    }

    /// KL divergence of the predictions from `target` summed over tokens;
    /// with `grads` the gradient of its negation is accumulated.
    pub fn kl(&self, emb: &EmbeddingSequence, target: &[f64], mut grads: Option<&mut GradientBuffer>) -> Result<f64> {
        let l = self.labels.len();
        if target.len() != emb.len() * l {
            return Err(Error::dim("soft labels do not match the sentence length"));
        }
        let mut total = 0.0;
        for t in 0..emb.len() {
            let a = self.net.forward(&self.features(emb, t))?;
            let mut y = a.output(0).to_vec();
            softmax_in_place(&mut y);
            let ys = &target[t * l..(t + 1) * l];
            for (&p, &q) in ys.iter().zip(&y) {
                if p > 0.0 {
                    total += p * (p.ln() - q.max(PROB_FLOOR).ln());
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let up: Vec<f64> = ys.iter().zip(&y).map(|(p, q)| p - q).collect();
                self.net.backprop(&a, &[&up], g)?;
            }
        }
        Ok(total)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format: REFINER_FORMAT.into(),
            labels: self.labels.names().to_vec(),
            window: self.window,
            emb_dim: self.emb_dim,
        };
        self.net.save_file(path, &serde_json::to_value(header)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = AffineStack::load_file(path)?;
        let header: ModelHeader = serde_json::from_value(meta)?;
        if header.format != REFINER_FORMAT {
            return Err(Error::load(path.display().to_string(), format!("not a refiner model ({})", header.format)));
        }
        let labels = LabelSet::from_label_names(&header.labels)?;
        let arch = net.architecture();
        if arch.heads != [labels.len()] || arch.input_dim != header.emb_dim * (2 * header.window + 1) {
            return Err(Error::load(path.display().to_string(), "network shape does not match the header"));
        }
        Ok(Self {
            net,
            labels,
            window: header.window,
            emb_dim: header.emb_dim,
        })
    }
}

/// Fits the refiner to `soft[n]` (`T * |L|` for instance `n`) on the
/// training split, selecting the best-dev-F1 epoch. `warm` continues from
/// an existing model instead of a fresh one.
pub fn train_refiner(
    corpus: &Corpus,
    soft: &[Vec<f64>],
    config: &RefinerConfig,
    warm: Option<&RefinerModel>,
) -> Result<(RefinerModel, TrainingLog)> {
    let dim = corpus.require_embeddings()?;
    if soft.len() != corpus.instances.len() {
        return Err(Error::dim("one soft-label table per instance is required"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = match warm {
        Some(m) => m.clone(),
        None => RefinerModel::new(corpus.labels.clone(), dim, config)?,
    };
    if model.emb_dim != dim || model.labels != corpus.labels {
        return Err(Error::dim("refiner does not match the corpus"));
    }
    let l = corpus.n_labels();
    let train: Vec<usize> = corpus.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    for &n in &train {
        let inst = &corpus.instances[n];
        if soft[n].len() != inst.len() * l {
            return Err(Error::dim(format!("soft labels for {} have the wrong length", inst.id())));
        }
        if rows_error(&soft[n], l) > 1e-6 {
            return Err(Error::validation(format!("soft labels for {} are not distributions", inst.id())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5245_464e);
    let mut order = train.clone();
    let mut grads = GradientBuffer::zeros_like(&model.net);
    let mut log = TrainingLog::default();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = model.clone();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.clear();
            for &n in batch {
                total += model.kl(corpus.instances[n].embeddings()?, &soft[n], Some(&mut grads))?;
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(&mut model.net, &grads, config.lr)?;
        }
        let objective = total / train.len() as f64;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!("refiner loss is {objective} at epoch {epoch}")));
        }
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

fn dev_evaluation(model: &RefinerModel, corpus: &Corpus) -> Result<(Option<f64>, f64)> {
    let l = corpus.n_labels();
    let dev = corpus.split_indices(Split::Dev);
    let mut pred = vec![Vec::new(); corpus.instances.len()];
    let mut worst = 0.0f64;
    for &n in &dev {
        let y = model.predict(corpus.instances[n].embeddings()?)?;
        worst = worst.max(rows_error(&y, l));
        pred[n] = y.chunks(l).map(argmax).collect();
    }
    let scored = !dev.is_empty() && dev.iter().all(|&n| corpus.instances[n].sentence.gold.is_some());
    if !scored {
        return Ok((None, worst));
    }
    Ok((Some(score_split(corpus, Split::Dev, &pred)?.f1), worst))
}

/// Refiner distributions for every instance.
pub fn predict_refiner(model: &RefinerModel, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    corpus.instances.iter().map(|inst| model.predict(inst.embeddings()?)).collect()
}

/// `x` with `extra` (`T * |L|`) as an additional last source.
pub fn append_source(x: &WeakObservationTensor, extra: &[f64]) -> Result<WeakObservationTensor> {
    if extra.len() != x.len() * x.n_labels() {
        return Err(Error::dim(format!(
            "extra source has {} values, expected {}",
            extra.len(),
            x.len() * x.n_labels()
        )));
    }
    let out = x.with_extra_source(extra);
    WeakObservationTensor::new(out.len(), out.n_sources(), out.n_labels(), out.values().to_vec())
}

/// Puts the refiner predictions into the corpus as the [`REFINER_SOURCE`]
/// source: appended the first time, overwritten afterwards.
pub fn attach_refiner_source(corpus: &mut Corpus, preds: &[Vec<f64>]) -> Result<()> {
    if preds.len() != corpus.instances.len() {
        return Err(Error::dim("one prediction table per instance is required"));
    }
    let l = corpus.n_labels();
    for (inst, p) in corpus.instances.iter().zip(preds) {
        if p.len() != inst.len() * l {
            return Err(Error::dim(format!("refiner output for {} has the wrong length", inst.id())));
        }
        if rows_error(p, l) > 1e-6 {
            return Err(Error::validation(format!("refiner output for {} is not normalized", inst.id())));
        }
    }
    let present = corpus.source_names.last().map(String::as_str) == Some(REFINER_SOURCE);
    for (inst, p) in corpus.instances.iter_mut().zip(preds) {
        if present {
            inst.obs.overwrite_last_source(p);
        } else {
            inst.obs = inst.obs.with_extra_source(p);
        }
    }
    if !present {
        corpus.source_names.push(REFINER_SOURCE.to_string());
    }
    Ok(())
}
