//! Corpus model and on-disk formats.
//!
//! Corpus files are line-delimited JSON: a header line carrying the ordered
//! label list and source order, then one record per sentence. Embedding files
//! are binary: `SDEMB1`, little-endian `u32` dimension, then for every
//! sentence a `u32` id length, the id bytes, a `u32` token count and
//! `T * d` little-endian `f32` values in row-major order.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::labelspace::{labels_to_spans, LabelSet, OUTSIDE};

pub const CORPUS_FORMAT: &str = "seqdenoise-corpus-v1";
pub const EMBEDDING_MAGIC: &[u8; 6] = b"SDEMB1";
pub const DEFAULT_MAX_LEN: usize = 512;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub gold: Option<Vec<usize>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-token, per-source distributions over the label set, laid out
/// `[t][k][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakObservationTensor {
    len: usize,
    n_sources: usize,
    n_labels: usize,
    values: Vec<f64>,
}

impl WeakObservationTensor {
    pub fn new(len: usize, n_sources: usize, n_labels: usize, values: Vec<f64>) -> Result<Self> {
        if n_sources == 0 {
            return Err(Error::validation("observation tensor needs at least one source"));
        }
        if values.len() != len * n_sources * n_labels {
            return Err(Error::dim(format!(
                "observation tensor has {} values, expected {len}x{n_sources}x{n_labels}",
                values.len()
            )));
        }
        let tensor = Self {
            len,
            n_sources,
            n_labels,
            values,
        };
        tensor.validate()?;
        Ok(tensor)
    }

    /// One-hot tensor from per-source hard label sequences (`hard[k][t]`).
    pub fn from_hard(hard: &[Vec<usize>], n_labels: usize) -> Result<Self> {
        let n_sources = hard.len();
        let len = hard.first().map_or(0, Vec::len);
        if hard.iter().any(|s| s.len() != len) {
            return Err(Error::dim("hard label sequences differ in length"));
        }
        let mut values = vec![0.0; len * n_sources * n_labels];
        for (k, seq) in hard.iter().enumerate() {
            for (t, &label) in seq.iter().enumerate() {
                if label >= n_labels {
                    return Err(Error::validation(format!("label index {label} out of range")));
                }
                values[(t * n_sources + k) * n_labels + label] = 1.0;
            }
        }
        Self::new(len, n_sources, n_labels, values)
    }

    fn validate(&self) -> Result<()> {
        for t in 0..self.len {
            for k in 0..self.n_sources {
                let row = self.row(t, k);
                if row.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                    return Err(Error::validation(format!(
                        "observation row (t={t}, source={k}) has negative or non-finite entries"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::validation(format!(
                        "observation row (t={t}, source={k}) sums to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// All sources at token `t`, `K * |L|` values.
    pub fn token(&self, t: usize) -> &[f64] {
        let w = self.n_sources * self.n_labels;
        &self.values[t * w..(t + 1) * w]
    }

    pub fn row(&self, t: usize, k: usize) -> &[f64] {
        let start = (t * self.n_sources + k) * self.n_labels;
        &self.values[start..start + self.n_labels]
    }

    pub(crate) fn row_mut(&mut self, t: usize, k: usize) -> &mut [f64] {
        let start = (t * self.n_sources + k) * self.n_labels;
        &mut self.values[start..start + self.n_labels]
    }

    /// Argmax label per token for source `k`, lowest index on ties.
    pub fn hard_labels(&self, k: usize) -> Vec<usize> {
        (0..self.len).map(|t| argmax(self.row(t, k))).collect()
    }

    fn is_one_hot_source(&self, k: usize) -> bool {
        (0..self.len).all(|t| {
            let row = self.row(t, k);
            row.iter().filter(|&&v| v == 1.0).count() == 1 && row.iter().all(|&v| v == 0.0 || v == 1.0)
        })
    }

    /// Sub-range of tokens `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let w = self.n_sources * self.n_labels;
        Self {
            len: end - start,
            n_sources: self.n_sources,
            n_labels: self.n_labels,
            values: self.values[start * w..end * w].to_vec(),
        }
    }

    /// Keeps only the listed sources, in the given order.
    pub fn select_sources(&self, sources: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.len * sources.len() * self.n_labels);
        for t in 0..self.len {
            for &k in sources {
                values.extend_from_slice(self.row(t, k));
            }
        }
        Self {
            len: self.len,
            n_sources: sources.len(),
            n_labels: self.n_labels,
            values,
        }
    }

    /// Appends `extra` (`T * |L|`) as a new last source.
    pub(crate) fn with_extra_source(&self, extra: &[f64]) -> Self {
        let l = self.n_labels;
        let mut values = Vec::with_capacity(self.len * (self.n_sources + 1) * l);
        for t in 0..self.len {
            values.extend_from_slice(self.token(t));
            values.extend_from_slice(&extra[t * l..(t + 1) * l]);
        }
        Self {
            len: self.len,
            n_sources: self.n_sources + 1,
            n_labels: l,
            values,
        }
    }

    /// Overwrites the last source with `extra`.
    pub(crate) fn overwrite_last_source(&mut self, extra: &[f64]) {
        let l = self.n_labels;
        let k = self.n_sources - 1;
        for t in 0..self.len {
            self.row_mut(t, k).copy_from_slice(&extra[t * l..(t + 1) * l]);
        }
    }

    fn concat(parts: &[&Self]) -> Self {
        let first = parts[0];
        Self {
            len: parts.iter().map(|p| p.len).sum(),
            n_sources: first.n_sources,
            n_labels: first.n_labels,
            values: parts.iter().flat_map(|p| p.values.iter().copied()).collect(),
        }
    }
}

/// Dense per-token feature vectors, stored at the on-disk `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    dim: usize,
    vectors: Vec<f32>,
}

impl EmbeddingSequence {
    pub fn new(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        if !vectors.len().is_multiple_of(dim) {
            return Err(Error::dim(format!(
                "{} embedding values is not a multiple of dimension {dim}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding contains non-finite values"));
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.vectors[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_f64(&self, t: usize) -> Vec<f64> {
        self.row(t).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            dim: self.dim,
            vectors: self.vectors[start * self.dim..end * self.dim].to_vec(),
        }
    }
}

/// Model output attached to a sentence: hard labels plus `T * |L|` marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub hard: Vec<usize>,
    pub soft: Vec<f64>,
}

/// One sentence with everything aligned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub sentence: Sentence,
    pub split: Split,
    pub obs: WeakObservationTensor,
    pub emb: Option<EmbeddingSequence>,
    pub denoised: Option<Denoised>,
}

impl Instance {
    pub fn id(&self) -> &str {
        &self.sentence.id
    }

    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }

    pub fn embeddings(&self) -> Result<&EmbeddingSequence> {
        self.emb
            .as_ref()
            .ok_or_else(|| Error::load(&self.sentence.id, "missing embeddings"))
    }

    fn check(&self, n_labels: usize, n_sources: usize) -> Result<()> {
        let id = &self.sentence.id;
        let len = self.sentence.len();
        if len == 0 {
            return Err(Error::load(id, "sentence has no tokens"));
        }
        if let Some(gold) = &self.sentence.gold {
            if gold.len() != len {
                return Err(Error::load(
                    id,
                    format!("{len} tokens but {} gold labels", gold.len()),
                ));
            }
            if gold.iter().any(|&g| g >= n_labels) {
                return Err(Error::load(id, "gold label index out of range"));
            }
        }
        if self.obs.len() != len || self.obs.n_sources() != n_sources || self.obs.n_labels() != n_labels {
            return Err(Error::load(
                id,
                format!(
                    "observation tensor {}x{}x{} does not match {len} tokens, {n_sources} sources, {n_labels} labels",
                    self.obs.len(),
                    self.obs.n_sources(),
                    self.obs.n_labels()
                ),
            ));
        }
        if let Some(emb) = &self.emb {
            if emb.len() != len {
                return Err(Error::load(
                    id,
                    format!("{len} tokens but {} embedding rows", emb.len()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub labels: LabelSet,
    pub source_names: Vec<String>,
    pub instances: Vec<Instance>,
}

impl Corpus {
    pub fn new(labels: LabelSet, source_names: Vec<String>, instances: Vec<Instance>) -> Result<Self> {
        let corpus = Self {
            labels,
            source_names,
            instances,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_names.is_empty() {
            return Err(Error::validation("corpus needs at least one source"));
        }
        let mut ids = HashMap::new();
        let mut dim = None;
        for inst in &self.instances {
            if ids.insert(inst.id().to_string(), ()).is_some() {
                return Err(Error::load(inst.id(), "duplicate sentence id"));
            }
            inst.check(self.labels.len(), self.source_names.len())?;
            if let Some(emb) = &inst.emb {
                match dim {
                    None => dim = Some(emb.dim()),
                    Some(d) if d != emb.dim() => {
                        return Err(Error::load(inst.id(), "inconsistent embedding dimension"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn n_sources(&self) -> usize {
        self.source_names.len()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.split == split)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn has_embeddings(&self) -> bool {
        !self.instances.is_empty() && self.instances.iter().all(|i| i.emb.is_some())
    }

    pub fn require_embeddings(&self) -> Result<usize> {
        for inst in &self.instances {
            inst.embeddings()?;
        }
        self.embedding_dim()
            .ok_or_else(|| Error::validation("corpus has no sentences"))
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.instances
            .iter()
            .find_map(|i| i.emb.as_ref().map(EmbeddingSequence::dim))
    }

    /// Copy restricted to a subset of sources.
    pub fn with_sources(&self, sources: &[usize]) -> Self {
        let mut out = self.clone();
        out.source_names = sources.iter().map(|&k| self.source_names[k].clone()).collect();
        for inst in &mut out.instances {
            inst.obs = inst.obs.select_sources(sources);
        }
        out
    }

    /// Applies [`segment_long`] to every instance.
    pub fn segment_long(&self, max_len: usize) -> Result<Self> {
        let mut instances = Vec::with_capacity(self.instances.len());
        for inst in &self.instances {
            instances.extend(segment_long(inst, &self.labels, max_len)?);
        }
        Corpus::new(self.labels.clone(), self.source_names.clone(), instances)
    }
}

// ---------------------------------------------------------------------------
// Corpus file

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    labels: Vec<String>,
    sources: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SourceLabels {
    Hard(Vec<String>),
    Soft(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: String,
    #[serde(default = "default_split")]
    split: Split,
    tokens: Vec<String>,
    weak_labels: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    gold: Option<Vec<String>>,
    #[serde(default)]
    pred: Option<Vec<String>>,
    #[serde(default)]
    soft: Option<Vec<Vec<f64>>>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    split: Split,
    tokens: &'a [String],
    weak_labels: WeakLabelsOut<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<Vec<&'a str>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pred: Option<Vec<&'a str>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    soft: Option<Vec<&'a [f64]>>,
}

struct WeakLabelsOut<'a> {
    obs: &'a WeakObservationTensor,
    sources: &'a [String],
    labels: &'a LabelSet,
}

impl Serialize for WeakLabelsOut<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.sources.len()))?;
        for (k, name) in self.sources.iter().enumerate() {
            if self.obs.is_one_hot_source(k) {
                let names: Vec<&str> = self
                    .obs
                    .hard_labels(k)
                    .into_iter()
                    .map(|l| self.labels.name(l))
                    .collect();
                map.serialize_entry(name, &names)?;
            } else {
                let rows: Vec<&[f64]> = (0..self.obs.len()).map(|t| self.obs.row(t, k)).collect();
                map.serialize_entry(name, &rows)?;
            }
        }
        map.end()
    }
}

fn label_indices(names: &[String], labels: &LabelSet, id: &str, what: &str) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            labels
                .index_of(n)
                .ok_or_else(|| Error::load(id, format!("unknown label {n:?} in {what}")))
        })
        .collect()
}

fn parse_record(line: &str, header: &Header, labels: &LabelSet) -> Result<Instance> {
    let rec: RecordIn = serde_json::from_str(line)?;
    let id = rec.id.as_str();
    let len = rec.tokens.len();
    let n_labels = labels.len();
    let n_sources = header.sources.len();
    for key in rec.weak_labels.keys() {
        if !header.sources.contains(key) {
            return Err(Error::load(id, format!("unknown source {key:?}")));
        }
    }
    let mut values = vec![0.0; len * n_sources * n_labels];
    for (k, name) in header.sources.iter().enumerate() {
        let raw = rec
            .weak_labels
            .get(name)
            .ok_or_else(|| Error::load(id, format!("missing weak labels for source {name:?}")))?;
        let parsed: SourceLabels = serde_json::from_value(raw.clone())
            .map_err(|e| Error::load(id, format!("source {name:?}: {e}")))?;
        match parsed {
            SourceLabels::Hard(names) => {
                if names.len() != len {
                    return Err(Error::load(
                        id,
                        format!("{len} tokens but source {name:?} has {} labels", names.len()),
                    ));
                }
                let idx = label_indices(&names, labels, id, &format!("source {name:?}"))?;
                for (t, l) in idx.into_iter().enumerate() {
                    values[(t * n_sources + k) * n_labels + l] = 1.0;
                }
            }
            SourceLabels::Soft(rows) => {
                if rows.len() != len {
                    return Err(Error::load(
                        id,
                        format!("{len} tokens but source {name:?} has {} rows", rows.len()),
                    ));
                }
                for (t, row) in rows.iter().enumerate() {
                    if row.len() != n_labels {
                        return Err(Error::load(
                            id,
                            format!("source {name:?} row {t} has {} entries, expected {n_labels}", row.len()),
                        ));
                    }
                    let start = (t * n_sources + k) * n_labels;
                    values[start..start + n_labels].copy_from_slice(row);
                }
            }
        }
    }
    let obs = WeakObservationTensor::new(len, n_sources, n_labels, values)
        .map_err(|e| Error::load(id, e.to_string()))?;
    let gold = rec
        .gold
        .map(|g| label_indices(&g, labels, id, "gold"))
        .transpose()?;
    let denoised = match (rec.pred, rec.soft) {
        (Some(pred), Some(soft)) => {
            let hard = label_indices(&pred, labels, id, "pred")?;
            if hard.len() != len || soft.len() != len || soft.iter().any(|r| r.len() != n_labels) {
                return Err(Error::load(id, "denoised output does not match sentence length"));
            }
            Some(Denoised {
                hard,
                soft: soft.into_iter().flatten().collect(),
            })
        }
        (Some(pred), None) => {
            let hard = label_indices(&pred, labels, id, "pred")?;
            if hard.len() != len {
                return Err(Error::load(id, "pred does not match sentence length"));
            }
            let mut soft = vec![0.0; len * n_labels];
            for (t, &l) in hard.iter().enumerate() {
                soft[t * n_labels + l] = 1.0;
            }
            Some(Denoised { hard, soft })
        }
        (None, Some(_)) => return Err(Error::load(id, "soft output without pred")),
        (None, None) => None,
    };
    let inst = Instance {
        sentence: Sentence {
            id: rec.id.clone(),
            tokens: rec.tokens,
            gold,
        },
        split: rec.split,
        obs,
        emb: None,
        denoised,
    };
    inst.check(n_labels, n_sources)?;
    Ok(inst)
}

/// Reads a corpus file and, optionally, its embedding file.
pub fn load_corpus(corpus_path: &Path, embedding_path: Option<&Path>) -> Result<Corpus> {
    let file = File::open(corpus_path)
        .map_err(|e| Error::load(corpus_path.display().to_string(), e.to_string()))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::load(corpus_path.display().to_string(), "empty corpus file"))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::load("header", e.to_string()))?;
    if header.format != CORPUS_FORMAT {
        return Err(Error::load(
            "header",
            format!("unsupported format {:?}", header.format),
        ));
    }
    let labels = LabelSet::from_label_names(&header.labels)?;
    let mut instances = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = parse_record(&line, &header, &labels).map_err(|e| match e {
            Error::Json(j) => Error::load(format!("record {}", n + 1), j.to_string()),
            other => other,
        })?;
        instances.push(inst);
    }
    let mut corpus = Corpus::new(labels, header.sources, instances)?;
    if let Some(path) = embedding_path {
        let table = read_embeddings(path)?;
        attach_embeddings(&mut corpus, table)?;
    }
    Ok(corpus)
}

/// Aligns embeddings to sentences by id. Every sentence must be covered.
pub fn attach_embeddings(corpus: &mut Corpus, mut table: HashMap<String, EmbeddingSequence>) -> Result<()> {
    for inst in &mut corpus.instances {
        let emb = table
            .remove(inst.id())
            .ok_or_else(|| Error::load(inst.id(), "no embeddings for sentence"))?;
        inst.emb = Some(emb);
    }
    corpus.validate()
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let header = Header {
        format: CORPUS_FORMAT.to_string(),
        labels: corpus.labels.names().to_vec(),
        sources: corpus.source_names.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let names = |seq: &[usize]| -> Vec<&str> { seq.iter().map(|&l| corpus.labels.name(l)).collect() };
    let l = corpus.n_labels();
    for inst in &corpus.instances {
        let rec = RecordOut {
            id: &inst.sentence.id,
            split: inst.split,
            tokens: &inst.sentence.tokens,
            weak_labels: WeakLabelsOut {
                obs: &inst.obs,
                sources: &corpus.source_names,
                labels: &corpus.labels,
            },
            gold: inst.sentence.gold.as_deref().map(names),
            pred: inst.denoised.as_ref().map(|d| names(&d.hard)),
            soft: inst.denoised.as_ref().map(|d| d.soft.chunks(l).collect()),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    write_corpus(corpus, BufWriter::new(File::create(path)?))
}

// ---------------------------------------------------------------------------
// Embedding file

pub fn write_embeddings<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let dim = corpus.require_embeddings()?;
    out.write_all(EMBEDDING_MAGIC)?;
    out.write_all(&u32_le(dim)?)?;
    for inst in &corpus.instances {
        let emb = inst.embeddings()?;
        let id = inst.id().as_bytes();
        out.write_all(&u32_le(id.len())?)?;
        out.write_all(id)?;
        out.write_all(&u32_le(emb.len())?)?;
        for v in &emb.vectors {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_embeddings(corpus: &Corpus, path: &Path) -> Result<()> {
    write_embeddings(corpus, BufWriter::new(File::create(path)?))
}

fn u32_le(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::validation(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn parse_embeddings<R: Read>(mut r: R) -> Result<HashMap<String, EmbeddingSequence>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::load("embeddings", "truncated header"))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::load("embeddings", "bad magic bytes"));
    }
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(Error::load("embeddings", "zero embedding dimension"));
    }
    let mut table = HashMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf[..1])? {
            0 => break,
            _ => r.read_exact(&mut len_buf[1..])?,
        }
        let id_len = u32::from_le_bytes(len_buf) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::load("embeddings", "sentence id is not utf-8"))?;
        let rows = read_u32(&mut r)? as usize;
        let mut raw = vec![0u8; rows * dim * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::load(&id, "truncated embedding rows"))?;
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let emb = EmbeddingSequence::new(dim, vectors).map_err(|e| Error::load(&id, e.to_string()))?;
        if table.insert(id.clone(), emb).is_some() {
            return Err(Error::load(id, "duplicate id in embedding file"));
        }
    }
    Ok(table)
}

pub fn read_embeddings(path: &Path) -> Result<HashMap<String, EmbeddingSequence>> {
    let file = File::open(path).map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
    parse_embeddings(BufReader::new(file))
}

// ---------------------------------------------------------------------------
// Segmentation

/// Splits an instance into pieces of at most `max_len` tokens. Cuts never fall
/// inside a gold entity; a cut that would is moved left to the span start.
/// Segment ids are `{id}#{n}` when more than one segment results.
pub fn segment_long(inst: &Instance, labels: &LabelSet, max_len: usize) -> Result<Vec<Instance>> {
    if max_len == 0 {
        return Err(Error::validation("max_len must be at least 1"));
    }
    let len = inst.len();
    if len <= max_len {
        return Ok(vec![inst.clone()]);
    }
    let spans = inst
        .sentence
        .gold
        .as_deref()
        .map(|g| labels_to_spans(g, labels))
        .unwrap_or_default();
    let mut cuts = vec![0];
    let mut start = 0;
    while len - start > max_len {
        let mut cut = start + max_len;
        if let Some(span) = spans.iter().find(|s| s.start < cut && cut < s.end) {
            cut = span.start;
        }
        if cut <= start {
            return Err(Error::load(
                inst.id(),
                format!("gold entity longer than max_len {max_len} at token {start}"),
            ));
        }
        cuts.push(cut);
        start = cut;
    }
    cuts.push(len);
    let segments = cuts
        .windows(2)
        .enumerate()
        .map(|(n, w)| {
            let (a, b) = (w[0], w[1]);
            Instance {
                sentence: Sentence {
                    id: format!("{}#{n}", inst.id()),
                    tokens: inst.sentence.tokens[a..b].to_vec(),
                    gold: inst.sentence.gold.as_ref().map(|g| g[a..b].to_vec()),
                },
                split: inst.split,
                obs: inst.obs.slice(a, b),
                emb: inst.emb.as_ref().map(|e| e.slice(a, b)),
                denoised: inst.denoised.as_ref().map(|d| Denoised {
                    hard: d.hard[a..b].to_vec(),
                    soft: d.soft[a * labels.len()..b * labels.len()].to_vec(),
                }),
            }
        })
        .collect();
    Ok(segments)
}

/// Inverse of [`segment_long`]: concatenates segments under `id`.
pub fn join_segments(id: &str, segments: &[Instance]) -> Result<Instance> {
    let first = segments
        .first()
        .ok_or_else(|| Error::validation("no segments to join"))?;
    let cat_opt = |f: &dyn Fn(&Instance) -> Option<Vec<usize>>| -> Option<Vec<usize>> {
        segments.iter().map(f).collect::<Option<Vec<_>>>().map(|v| v.concat())
    };
    let emb = segments.iter().map(|s| s.emb.as_ref()).collect::<Option<Vec<_>>>().map(|parts| EmbeddingSequence {
            dim: parts[0].dim,
            vectors: parts.iter().flat_map(|p| p.vectors.iter().copied()).collect(),
        });
    let denoised = segments
        .iter()
        .map(|s| s.denoised.as_ref())
        .collect::<Option<Vec<_>>>()
        .map(|parts| Denoised {
            hard: parts.iter().flat_map(|d| d.hard.iter().copied()).collect(),
            soft: parts.iter().flat_map(|d| d.soft.iter().copied()).collect(),
        });
    Ok(Instance {
        sentence: Sentence {
            id: id.to_string(),
            tokens: segments.iter().flat_map(|s| s.sentence.tokens.iter().cloned()).collect(),
            gold: cat_opt(&|s: &Instance| s.sentence.gold.clone()),
        },
        split: first.split,
        obs: WeakObservationTensor::concat(&segments.iter().map(|s| &s.obs).collect::<Vec<_>>()),
        emb,
        denoised,
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// All-`O` hard labels of length `len`.
pub fn all_outside(len: usize) -> Vec<usize> {
    vec![OUTSIDE; len]
}
