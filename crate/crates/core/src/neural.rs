//! Small dense networks with exact hand-written gradients.
//!
//! All parameters of an [`AffineStack`] live in one flat vector; layers are
//! views into it. Weights are stored row-major `out x in`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NET_MAGIC: &[u8; 6] = b"SDNET1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the tanh hidden layers; empty means each head is affine.
    pub hidden: Vec<usize>,
    /// Output sizes, one per head.
    pub heads: Vec<usize>,
    /// Hidden layers shared by all heads instead of one stack per head.
    pub shared_trunk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    offset: usize,
    input: usize,
    output: usize,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.output * (self.input + 1)
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.output * self.input]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.output * self.input;
        &params[start..start + self.output]
    }

    fn apply(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        let w = self.weights(params);
        out.clear();
        out.extend_from_slice(self.bias(params));
        for (o, row) in out.iter_mut().zip(w.chunks_exact(self.input)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates weight/bias gradients for upstream `delta` and returns the
    /// gradient with respect to the layer input when `want_input` is set.
    fn backward(&self, params: &[f64], x: &[f64], delta: &[f64], grads: &mut [f64], want_input: bool) -> Vec<f64> {
        let (gw, rest) = grads[self.offset..self.offset + self.n_params()].split_at_mut(self.output * self.input);
        for ((row, &d), gb) in gw.chunks_exact_mut(self.input).zip(delta).zip(rest.iter_mut()) {
            if d == 0.0 {
                continue;
            }
            *gb += d;
            for (g, &xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if !want_input {
            return Vec::new();
        }
        let w = self.weights(params);
        let mut dx = vec![0.0; self.input];
        for (row, &d) in w.chunks_exact(self.input).zip(delta) {
            for (g, &wi) in dx.iter_mut().zip(row) {
                *g += d * wi;
            }
        }
        dx
    }
}

/// A chain of layers: tanh after every layer except, optionally, the last.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Chain {
    layers: Vec<Layer>,
    linear_last: bool,
}

impl Chain {
    fn activated(&self, idx: usize) -> bool {
        !(self.linear_last && idx + 1 == self.layers.len())
    }
}

/// A feed-forward network with one or more output heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStack {
    arch: Architecture,
    trunk: Option<Chain>,
    heads: Vec<Chain>,
    params: Vec<f64>,
    version: u64,
}

/// Intermediate values of one forward evaluation, enough for backprop.
#[derive(Debug, Clone)]
pub struct Activations {
    version: u64,
    input: Vec<f64>,
    /// outputs of each trunk layer
    trunk: Vec<Vec<f64>>,
    /// outputs of each head layer; the last entry is the head output
    heads: Vec<Vec<Vec<f64>>>,
}

impl Activations {
    pub fn output(&self, head: usize) -> &[f64] {
        self.heads[head].last().expect("head has layers")
    }
}

/// Gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub values: Vec<f64>,
    /// Number of backprop calls accumulated.
    pub count: usize,
}

impl GradientBuffer {
    pub fn zeros_like(net: &AffineStack) -> Self {
        Self {
            values: vec![0.0; net.params.len()],
            count: 0,
        }
    }

    pub fn clear(&mut self) {
        self.values.fill(0.0);
        self.count = 0;
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn add(&mut self, other: &GradientBuffer) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.count += other.count;
    }
}

fn chain_of(offset: &mut usize, input: usize, widths: &[usize], linear_last: bool) -> Chain {
    let mut layers = Vec::with_capacity(widths.len());
    let mut prev = input;
    for &w in widths {
        let layer = Layer {
            offset: *offset,
            input: prev,
            output: w,
        };
        *offset += layer.n_params();
        layers.push(layer);
        prev = w;
    }
    Chain { layers, linear_last }
}

impl AffineStack {
    /// Builds the layout with all parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        if arch.input_dim == 0 || arch.heads.is_empty() || arch.heads.contains(&0) || arch.hidden.contains(&0) {
            return Err(Error::dim(format!("invalid architecture {arch:?}")));
        }
        let mut offset = 0;
        let (trunk, head_input, head_hidden): (Option<Chain>, usize, &[usize]) =
            if arch.shared_trunk && !arch.hidden.is_empty() {
                let trunk = chain_of(&mut offset, arch.input_dim, &arch.hidden, false);
                (Some(trunk), *arch.hidden.last().unwrap(), &[])
            } else {
                (None, arch.input_dim, &arch.hidden)
            };
        let heads = arch
            .heads
            .iter()
            .map(|&out| {
                let mut widths = head_hidden.to_vec();
                widths.push(out);
                chain_of(&mut offset, head_input, &widths, true)
            })
            .collect();
        Ok(Self {
            arch,
            trunk,
            heads,
            params: vec![0.0; offset],
            version: 0,
        })
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn new(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let layers: Vec<Layer> = net.all_layers().collect();
        for layer in layers {
            let bound = 1.0 / (layer.input as f64).sqrt();
            for w in &mut net.params[layer.offset..layer.offset + layer.output * layer.input] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    fn all_layers(&self) -> impl Iterator<Item = Layer> + '_ {
        self.trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|c| c.layers.iter().copied())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; bumps the version so older caches go stale.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Output-layer bias of a head.
    pub fn head_bias_mut(&mut self, head: usize) -> &mut [f64] {
        self.version += 1;
        let layer = *self.heads[head].layers.last().unwrap();
        let start = layer.offset + layer.output * layer.input;
        &mut self.params[start..start + layer.output]
    }

    /// Output-layer weights of a head (`out x in`).
    pub fn head_weights_mut(&mut self, head: usize) -> &mut [f64] {
        self.version += 1;
        let layer = *self.heads[head].layers.last().unwrap();
        &mut self.params[layer.offset..layer.offset + layer.output * layer.input]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Activations> {
        if input.len() != self.arch.input_dim {
            return Err(Error::dim(format!(
                "network expects input of size {}, got {}",
                self.arch.input_dim,
                input.len()
            )));
        }
        let mut trunk_out = Vec::new();
        let mut current = input.to_vec();
        if let Some(trunk) = &self.trunk {
            for layer in &trunk.layers {
                let mut out = Vec::with_capacity(layer.output);
                layer.apply(&self.params, &current, &mut out);
                out.iter_mut().for_each(|v| *v = v.tanh());
                trunk_out.push(out.clone());
                current = out;
            }
        }
        let heads = self
            .heads
            .iter()
            .map(|chain| {
                let mut outs: Vec<Vec<f64>> = Vec::with_capacity(chain.layers.len());
                for (n, layer) in chain.layers.iter().enumerate() {
                    let x = outs.last().unwrap_or(&current);
                    let mut out = Vec::with_capacity(layer.output);
                    layer.apply(&self.params, x, &mut out);
                    if chain.activated(n) {
                        out.iter_mut().for_each(|v| *v = v.tanh());
                    }
                    outs.push(out);
                }
                outs
            })
            .collect();
        Ok(Activations {
            version: self.version,
            input: input.to_vec(),
            trunk: trunk_out,
            heads,
        })
    }

    /// Adds the parameter gradient of a scalar whose partials with respect to
    /// each head's output are `upstream[h]`. A head may be skipped with an
    /// empty slice.
    pub fn backprop(&self, cache: &Activations, upstream: &[&[f64]], grads: &mut GradientBuffer) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        if upstream.len() != self.heads.len() || grads.values.len() != self.params.len() {
            return Err(Error::dim("upstream gradients do not match the network heads"));
        }
        let head_input: &[f64] = cache.trunk.last().unwrap_or(&cache.input);
        let mut trunk_delta = self.trunk.as_ref().map(|_| vec![0.0; head_input.len()]);
        for ((chain, outs), up) in self.heads.iter().zip(&cache.heads).zip(upstream) {
            if up.is_empty() {
                continue;
            }
            if up.len() != outs.last().unwrap().len() {
                return Err(Error::dim("upstream gradient has the wrong size"));
            }
            let mut delta = up.to_vec();
            for n in (0..chain.layers.len()).rev() {
                if chain.activated(n) {
                    for (d, y) in delta.iter_mut().zip(&outs[n]) {
                        *d *= 1.0 - y * y;
                    }
                }
                let x: &[f64] = if n == 0 { head_input } else { &outs[n - 1] };
                let want_input = n > 0 || trunk_delta.is_some();
                let dx = chain.layers[n].backward(&self.params, x, &delta, &mut grads.values, want_input);
                if n == 0 {
                    if let Some(td) = trunk_delta.as_mut() {
                        for (a, b) in td.iter_mut().zip(&dx) {
                            *a += b;
                        }
                    }
                } else {
                    delta = dx;
                }
            }
        }
        if let (Some(trunk), Some(mut delta)) = (&self.trunk, trunk_delta) {
            for n in (0..trunk.layers.len()).rev() {
                for (d, y) in delta.iter_mut().zip(&cache.trunk[n]) {
                    *d *= 1.0 - y * y;
                }
                let x: &[f64] = if n == 0 { &cache.input } else { &cache.trunk[n - 1] };
                delta = trunk.layers[n].backward(&self.params, x, &delta, &mut grads.values, n > 0);
            }
        }
        grads.count += 1;
        Ok(())
    }

    pub fn save<W: Write>(&self, mut out: W, metadata: &serde_json::Value) -> Result<()> {
        let header = serde_json::to_vec(&NetHeader {
            architecture: self.arch.clone(),
            n_params: self.params.len(),
            metadata: metadata.clone(),
        })?;
        out.write_all(NET_MAGIC)?;
        let len = u32::try_from(header.len()).map_err(|_| Error::validation("network header too large"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&header)?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_file(&self, path: &Path, metadata: &serde_json::Value) -> Result<()> {
        self.save(std::io::BufWriter::new(std::fs::File::create(path)?), metadata)
    }

    pub fn load<R: Read>(mut r: R) -> Result<(Self, serde_json::Value)> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(Error::load("network", "bad magic bytes"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: NetHeader = serde_json::from_slice(&header)?;
        let mut net = Self::zeros(header.architecture)?;
        if net.params.len() != header.n_params {
            return Err(Error::load("network", "parameter count does not match architecture"));
        }
        let mut buf = [0u8; 8];
        for p in &mut net.params {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::load("network", "non-finite parameter"));
        }
        Ok((net, header.metadata))
    }

    pub fn load_file(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    architecture: Architecture,
    n_params: usize,
    metadata: serde_json::Value,
}

/// Gradient ascent: `params += lr * grads`. Rejects non-finite gradients.
pub fn sgd_step(net: &mut AffineStack, grads: &GradientBuffer, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    if let Some(idx) = grads.values.iter().position(|g| !g.is_finite()) {
        let n_bad = grads.values.iter().filter(|g| !g.is_finite()).count();
        return Err(Error::Numerical(format!(
            "non-finite gradient: {n_bad} of {} entries, first at parameter {idx} ({})",
            grads.values.len(),
            grads.values[idx]
        )));
    }
    if grads.values.len() != net.params.len() {
        return Err(Error::dim("gradient buffer does not match network"));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in net.params_mut().iter_mut().zip(&grads.values) {
        *p += lr * g;
    }
    Ok(())
}

/// In-place softmax of one row, max-shifted.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Softmax along the label axis of a `[i][j][k]` tensor (rows over `j`).
/// With `n_sources == 1` this is a row-wise softmax of an `[i][j]` matrix.
pub fn softmax_label_axis(scores: &[f64], n_labels: usize, n_sources: usize) -> Vec<f64> {
    let (l, kk) = (n_labels, n_sources);
    debug_assert_eq!(scores.len() % (l * kk), 0);
    let mut out = vec![0.0; scores.len()];
    let mut row = vec![0.0; l];
    for block in 0..scores.len() / (l * kk) {
        let base = block * l * kk;
        for k in 0..kk {
            for j in 0..l {
                row[j] = scores[base + j * kk + k];
            }
            softmax_in_place(&mut row);
            for j in 0..l {
                out[base + j * kk + k] = row[j];
            }
        }
    }
    out
}

/// Backpropagates through a row softmax: given `p = softmax(a)` and
/// `g = dL/dp`, returns `dL/da = p * (g - <p, g>)`.
pub fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}
