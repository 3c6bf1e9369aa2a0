//! Synthetic weak-supervision corpora.
//!
//! Gold labels come from a Markov chain over BIO labels. Every sentence has
//! a latent domain; each source's recall and precision may depend on it.
//! A token's embedding mixes its entity class, its neighbours' classes, the
//! sentence domain and Gaussian noise, so the domain (and with it each
//! source's reliability) is recoverable from the embeddings alone.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, EmbeddingSequence, Instance, Sentence, Split, WeakObservationTensor};
use crate::error::{Error, Result};
use crate::labelspace::{labels_to_spans, LabelSet, OUTSIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceChannel {
    pub name: String,
    /// Probability that a gold span is reported, per domain (one value
    /// means the same in every domain).
    pub recall: Vec<f64>,
    /// Fraction of reported spans that stem from a gold span, per domain;
    /// the rest are single-token hallucinations.
    pub precision: Vec<f64>,
    /// `confusion[e][f]`: probability a reported type-`e` span is labelled `f`.
    /// Empty means the identity.
    #[serde(default)]
    pub confusion: Vec<Vec<f64>>,
    /// Probability, per domain, that a reported span's type is drawn from
    /// `confusion` rather than kept. Empty means always.
    #[serde(default)]
    pub confusion_rate: Vec<f64>,
    /// Probability, per domain, that a reported span runs on into the `O`
    /// token that follows the gold span. Empty means never.
    #[serde(default)]
    pub boundary: Vec<f64>,
    /// Probability, per domain, that a reported multi-token span is cut
    /// short at a random inner token. Empty means never.
    #[serde(default)]
    pub truncate: Vec<f64>,
    /// Probability, per domain, that a single reported token inside a span
    /// gets a different, uniformly drawn type. Empty means never.
    #[serde(default)]
    pub token_noise: Vec<f64>,
}

impl SourceChannel {
    pub fn context_dependent(&self) -> bool {
        self.recall.len() > 1 || self.precision.len() > 1 || self.boundary.iter().chain(&self.truncate).chain(&self.token_noise).any(|&b| b > 0.0)
    }

    fn recall_in(&self, domain: usize) -> f64 {
        self.recall[domain.min(self.recall.len() - 1)]
    }

    fn precision_in(&self, domain: usize) -> f64 {
        self.precision[domain.min(self.precision.len() - 1)]
    }

    fn boundary_in(&self, domain: usize) -> f64 {
        per_domain(&self.boundary, domain, 0.0)
    }

    fn truncate_in(&self, domain: usize) -> f64 {
        per_domain(&self.truncate, domain, 0.0)
    }

    fn token_noise_in(&self, domain: usize) -> f64 {
        per_domain(&self.token_noise, domain, 0.0)
    }

    fn confusion_rate_in(&self, domain: usize) -> f64 {
        per_domain(&self.confusion_rate, domain, 1.0)
    }
}

fn per_domain(values: &[f64], domain: usize, default: f64) -> f64 {
    if values.is_empty() {
        default
    } else {
        values[domain.min(values.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub entity_types: Vec<String>,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Gold chain over BIO labels, `[i][j] = p(z_t = j | z_{t-1} = i)`; the
    /// chain starts from `O`.
    pub transition: Vec<Vec<f64>>,
    pub n_domains: usize,
    pub sources: Vec<SourceChannel>,
    pub emb_dim: usize,
    /// Weight of the token's entity-or-outside status in its embedding.
    pub class_strength: f64,
    /// Weight of the token's entity type.
    #[serde(default)]
    pub type_strength: f64,
    /// Weight of the neighbouring tokens' classes.
    pub context_strength: f64,
    /// Weight of the sentence domain.
    pub domain_strength: f64,
    /// Norm-scale of the Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

fn check_prob(what: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be a probability, got {p}")))
    }
}

fn check_dist(what: &str, row: &[f64]) -> Result<()> {
    for &p in row {
        check_prob(what, p)?;
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{what} row sums to {s}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn labels(&self) -> Result<LabelSet> {
        LabelSet::from_entity_names(self.entity_types.iter().cloned())
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.labels()?;
        let (l, ne) = (labels.len(), self.entity_types.len());
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        if self.transition.len() != l || self.transition.iter().any(|r| r.len() != l) {
            return Err(Error::Config(format!("transition must be {l}x{l}")));
        }
        for row in &self.transition {
            check_dist("transition", row)?;
        }
        if self.n_domains == 0 || self.emb_dim == 0 {
            return Err(Error::Config("n_domains and emb_dim must be positive".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source is required".into()));
        }
        for s in &self.sources {
            for v in [&s.recall, &s.precision] {
                if v.is_empty() || (v.len() != 1 && v.len() != self.n_domains) {
                    return Err(Error::Config(format!(
                        "source {}: rates need one value or one per domain",
                        s.name
                    )));
                }
            }
            for (what, v) in [("boundary", &s.boundary), ("truncate", &s.truncate), ("token_noise", &s.token_noise), ("confusion_rate", &s.confusion_rate)] {
                if v.len() > 1 && v.len() != self.n_domains {
                    return Err(Error::Config(format!("source {}: {what} needs one value or one per domain", s.name)));
                }
                for &b in v.iter() {
                    check_prob(what, b)?;
                }
            }
            for &r in &s.recall {
                check_prob("recall", r)?;
            }
            for &p in &s.precision {
                check_prob("precision", p)?;
                if p == 0.0 {
                    return Err(Error::Config(format!("source {}: precision must be positive", s.name)));
                }
            }
            if !s.confusion.is_empty() {
                if s.confusion.len() != ne || s.confusion.iter().any(|r| r.len() != ne) {
                    return Err(Error::Config(format!("source {}: confusion must be {ne}x{ne}", s.name)));
                }
                for row in &s.confusion {
                    check_dist("confusion", row)?;
                }
            }
        }
        for v in [self.class_strength, self.type_strength, self.context_strength, self.domain_strength, self.noise] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config("embedding strengths must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

struct Draft {
    split: Split,
    domain: usize,
    gold: Vec<usize>,
}

/// Entity class of a label: 0 for `O`, `1 + e` for either tag of type `e`.
fn class_of(labels: &LabelSet, z: usize) -> usize {
    labels.decompose(z).map_or(0, |(e, _)| e + 1)
}

/// Generates a corpus with gold labels, one hard-label tensor per sentence
/// and embeddings. Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let labels = config.labels()?;
    let ne = config.entity_types.len();
    let n_classes = ne + 1;
    let dim = config.emb_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let status_dirs: Vec<Vec<f64>> = (0..2).map(|_| unit_vector(&mut rng, dim)).collect();
    let class_dirs: Vec<Vec<f64>> = (0..n_classes).map(|_| unit_vector(&mut rng, dim)).collect();
    // neighbour tables have an extra row for the sentence boundary
    let prev_dirs: Vec<Vec<f64>> = (0..=n_classes).map(|_| unit_vector(&mut rng, dim)).collect();
    let next_dirs: Vec<Vec<f64>> = (0..=n_classes).map(|_| unit_vector(&mut rng, dim)).collect();
    let domain_dirs: Vec<Vec<f64>> = (0..config.n_domains).map(|_| unit_vector(&mut rng, dim)).collect();

    let mut drafts = Vec::with_capacity(config.n_train + config.n_dev + config.n_test);
    for (split, n) in [(Split::Train, config.n_train), (Split::Dev, config.n_dev), (Split::Test, config.n_test)] {
        for _ in 0..n {
            let len = rng.random_range(config.min_len..=config.max_len);
            let domain = rng.random_range(0..config.n_domains);
            let mut gold = Vec::with_capacity(len);
            let mut prev = OUTSIDE;
            for _ in 0..len {
                prev = draw(&mut rng, &config.transition[prev]);
                gold.push(prev);
            }
            drafts.push(Draft { split, domain, gold });
        }
    }

    // per-domain span and outside-token counts fix the hallucination rates
    let mut spans_in = vec![0usize; config.n_domains];
    let mut outside_in = vec![0usize; config.n_domains];
    for d in &drafts {
        spans_in[d.domain] += labels_to_spans(&d.gold, &labels).len();
        outside_in[d.domain] += d.gold.iter().filter(|&&z| z == OUTSIDE).count();
    }
    let halluc_rate = |s: &SourceChannel, domain: usize| -> f64 {
        let (r, p) = (s.recall_in(domain), s.precision_in(domain));
        if outside_in[domain] == 0 {
            return 0.0;
        }
        let expected = r * spans_in[domain] as f64 * (1.0 - p) / p;
        (expected / outside_in[domain] as f64).min(1.0)
    };
    let uniform_types = vec![1.0 / ne as f64; ne];

    let normal = Normal::new(0.0, config.noise / (dim as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut instances = Vec::with_capacity(drafts.len());
    let mut counters = [0usize; 3];
    for d in drafts {
        let len = d.gold.len();
        let spans = labels_to_spans(&d.gold, &labels);
        let mut hard = Vec::with_capacity(config.sources.len());
        for s in &config.sources {
            let mut seq = vec![OUTSIDE; len];
            let r = s.recall_in(d.domain);
            for span in &spans {
                if !rng.random_bool(r) {
                    continue;
                }
                let e = span.entity;
                let f = if !s.confusion.is_empty() && rng.random_bool(s.confusion_rate_in(d.domain)) {
                    draw(&mut rng, &s.confusion[e])
                } else {
                    e
                };
                seq[span.start] = labels.begin(f);
                let mut end = span.end;
                if end - span.start > 1 && rng.random_bool(s.truncate_in(d.domain)) {
                    end = rng.random_range(span.start + 1..end);
                } else if end < len && d.gold[end] == OUTSIDE && rng.random_bool(s.boundary_in(d.domain)) {
                    end += 1;
                }
                for slot in &mut seq[span.start + 1..end] {
                    *slot = labels.inside(f);
                }
                let flip = s.token_noise_in(d.domain);
                if flip > 0.0 && ne > 1 {
                    for t in span.start..end {
                        if rng.random_bool(flip) {
                            let g = (f + rng.random_range(1..ne)) % ne;
                            seq[t] = if t == span.start { labels.begin(g) } else { labels.inside(g) };
                        }
                    }
                }
            }
            let q = halluc_rate(s, d.domain);
            for t in 0..len {
                if d.gold[t] == OUTSIDE && rng.random_bool(q) {
                    seq[t] = labels.begin(draw(&mut rng, &uniform_types));
                }
            }
            hard.push(seq);
        }
        let mut vectors = Vec::with_capacity(len * dim);
        for t in 0..len {
            let own = class_of(&labels, d.gold[t]);
            let before = if t == 0 { n_classes } else { class_of(&labels, d.gold[t - 1]) };
            let after = if t + 1 == len { n_classes } else { class_of(&labels, d.gold[t + 1]) };
            for c in 0..dim {
                let v = config.class_strength * status_dirs[usize::from(own > 0)][c]
                    + config.type_strength * class_dirs[own][c]
                    + config.context_strength * (prev_dirs[before][c] + next_dirs[after][c])
                    + config.domain_strength * domain_dirs[d.domain][c]
                    + normal.sample(&mut rng);
                vectors.push(v as f32);
            }
        }
        let slot = match d.split {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        };
        let id = format!("{}-{:05}", d.split, counters[slot]);
        counters[slot] += 1;
        instances.push(Instance {
            sentence: Sentence {
                id,
                tokens: (0..len).map(|t| format!("w{t}")).collect(),
                gold: Some(d.gold),
            },
            split: d.split,
            obs: WeakObservationTensor::from_hard(&hard, labels.len())?,
            emb: Some(EmbeddingSequence::new(dim, vectors)?),
            denoised: None,
        });
    }
    Corpus::new(labels, config.sources.iter().map(|s| s.name.clone()).collect(), instances)
}

/// A BIO chain: from `O` an entity starts with probability `start`
/// (types weighted by `weights`); inside an entity the next token continues
/// it with probability `cont`, else `O` or a new entity.
pub fn bio_chain(weights: &[f64], start: f64, cont: f64) -> Vec<Vec<f64>> {
    let ne = weights.len();
    let l = 2 * ne + 1;
    let total: f64 = weights.iter().sum();
    let w: Vec<f64> = weights.iter().map(|v| v / total).collect();
    let mut m = vec![vec![0.0; l]; l];
    m[0][0] = 1.0 - start;
    for e in 0..ne {
        m[0][1 + 2 * e] = start * w[e];
    }
    for e in 0..ne {
        for from in [1 + 2 * e, 2 + 2 * e] {
            let row = &mut m[from];
            row[2 + 2 * e] = cont;
            row[0] = (1.0 - cont) * (1.0 - start);
            for f in 0..ne {
                row[1 + 2 * f] += (1.0 - cont) * start * w[f];
            }
        }
    }
    m
}

/// The desk-scale benchmark configuration: three entity types, four
/// sources with domain-dependent noise, 2000/400/400 sentences, 32-dim
/// embeddings.
pub fn reference_config(seed: u64) -> SynthConfig {
    let n_domains = 4;
    let names = ["gazetteer", "patterns", "tagger", "rules"];
    // each source is sharp in its own domain and sparse and sloppy elsewhere
    let by_domain = |k: usize, own: f64, other: f64| (0..n_domains).map(|d| if d == k { own } else { other }).collect();
    let mut sources: Vec<SourceChannel> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let shift = 0.03 * k as f64;
            SourceChannel {
                name: (*name).into(),
                recall: by_domain(k, 0.6 - shift, 0.15 - shift),
                precision: by_domain(k, 0.99, 0.97),
                confusion: Vec::new(),
                confusion_rate: Vec::new(),
                boundary: Vec::new(),
                truncate: by_domain(k, 0.1, 0.4),
                token_noise: Vec::new(),
            }
        })
        .collect();
    // a token-level tagger: broad coverage, but types flip on single tokens
    sources[2].recall = vec![0.6];
    sources[2].token_noise = by_domain(2, 0.1, 0.3);
    SynthConfig {
        entity_types: vec!["PER".into(), "LOC".into(), "ORG".into()],
        n_train: 2000,
        n_dev: 400,
        n_test: 400,
        min_len: 8,
        max_len: 20,
        transition: bio_chain(&[0.4, 0.35, 0.25], 0.15, 0.7),
        n_domains,
        sources,
        emb_dim: 32,
        class_strength: 1.0,
        type_strength: 0.3,
        context_strength: 0.3,
        domain_strength: 1.0,
        noise: 0.8,
        seed,
    }
}

pub fn reference_suite(seed: u64) -> Result<Corpus> {
    generate(&reference_config(seed))
}
