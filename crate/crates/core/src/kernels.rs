//! Dynamic-programming kernels over a chain whose transition and emission
//! tables may change at every token.
//!
//! The chain starts from a fixed pseudo-state `z0` drawn from `pi` (which
//! puts almost all mass on `O`); token `t` (0-based) has transition table
//! `trans[t][i][j] = p(z_t = j | z_{t-1} = i)` where `z_{-1}` is `z0`, and
//! emission table `emit[t][i][j][k] = p(source k observes j | z_t = i)`.
//!
//! Recursions are run on per-step normalized vectors with the log
//! normalizers accumulated, so the log evidence falls out of the forward
//! pass and nothing leaves the representable range.

use crate::data::{argmax, WeakObservationTensor};
use crate::error::{Error, Result};
use crate::labelspace::OUTSIDE;

/// Default mass given to every non-`O` label in the start distribution.
pub const DEFAULT_PI_EPS: f64 = 1e-6;

const NORM_TOL: f64 = 1e-6;

/// Start distribution concentrated on `O`.
pub fn initial_pi(n_labels: usize, eps: f64) -> Vec<f64> {
    let mut pi = vec![eps; n_labels];
    pi[OUTSIDE] = 1.0 - (n_labels as f64 - 1.0) * eps;
    pi
}

/// Per-token transition and emission tables plus the start distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenConditionedParams {
    n_labels: usize,
    n_sources: usize,
    len: usize,
    pi: Vec<f64>,
    trans: Vec<f64>,
    emit: Vec<f64>,
}

impl TokenConditionedParams {
    pub fn new(
        n_labels: usize,
        n_sources: usize,
        pi: Vec<f64>,
        trans: Vec<f64>,
        emit: Vec<f64>,
    ) -> Result<Self> {
        let l = n_labels;
        if l == 0 || n_sources == 0 {
            return Err(Error::dim("need at least one label and one source"));
        }
        if pi.len() != l || !trans.len().is_multiple_of(l * l) {
            return Err(Error::dim("pi or transition table has the wrong size"));
        }
        let len = trans.len() / (l * l);
        if emit.len() != len * l * l * n_sources {
            return Err(Error::dim(format!(
                "emission table has {} entries, expected {}",
                emit.len(),
                len * l * l * n_sources
            )));
        }
        let params = Self {
            n_labels,
            n_sources,
            len,
            pi,
            trans,
            emit,
        };
        params.validate()?;
        Ok(params)
    }

    /// Repeats one transition/emission table across `len` tokens.
    pub fn tiled(pi: Vec<f64>, trans: &[f64], emit: &[f64], n_sources: usize, len: usize) -> Result<Self> {
        let l = pi.len();
        if trans.len() != l * l || emit.len() != l * l * n_sources {
            return Err(Error::dim("tiled tables have the wrong size"));
        }
        Self::new(l, n_sources, pi, trans.repeat(len), emit.repeat(len))
    }

    fn validate(&self) -> Result<()> {
        let l = self.n_labels;
        let check = |row: &mut dyn Iterator<Item = f64>, what: &str| -> Result<()> {
            let mut sum = 0.0;
            for v in row {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Numerical(format!("{what} has a non-positive entry {v}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > NORM_TOL {
                return Err(Error::Numerical(format!("{what} sums to {sum}")));
            }
            Ok(())
        };
        check(&mut self.pi.iter().copied(), "pi")?;
        for t in 0..self.len {
            for i in 0..l {
                check(&mut self.trans_row(t, i).iter().copied(), "transition row")?;
                for k in 0..self.n_sources {
                    check(
                        &mut (0..l).map(|j| self.emit_at(t, i, j, k)),
                        "emission row",
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn trans(&self) -> &[f64] {
        &self.trans
    }

    pub fn emit(&self) -> &[f64] {
        &self.emit
    }

    /// `|L| x |L|` transition table of token `t`.
    pub fn trans_at(&self, t: usize) -> &[f64] {
        let w = self.n_labels * self.n_labels;
        &self.trans[t * w..(t + 1) * w]
    }

    pub fn trans_row(&self, t: usize, i: usize) -> &[f64] {
        let l = self.n_labels;
        &self.trans[(t * l + i) * l..(t * l + i + 1) * l]
    }

    /// `|L| x |L| x K` emission table of token `t`.
    pub fn emit_at(&self, t: usize, i: usize, j: usize, k: usize) -> f64 {
        let (l, kk) = (self.n_labels, self.n_sources);
        self.emit[((t * l + i) * l + j) * kk + k]
    }

    pub fn emit_token(&self, t: usize) -> &[f64] {
        let w = self.n_labels * self.n_labels * self.n_sources;
        &self.emit[t * w..(t + 1) * w]
    }

    fn check_obs(&self, x: &WeakObservationTensor) -> Result<()> {
        if x.is_empty() {
            return Err(Error::validation("cannot run a chain over zero tokens"));
        }
        if x.len() != self.len || x.n_sources() != self.n_sources || x.n_labels() != self.n_labels {
            return Err(Error::dim(format!(
                "observations {}x{}x{} do not match parameters {}x{}x{}",
                x.len(),
                x.n_sources(),
                x.n_labels(),
                self.len,
                self.n_sources,
                self.n_labels
            )));
        }
        Ok(())
    }
}

/// Smoothed marginals, pairwise expectations and the log evidence of one
/// sequence. `xi[t]` is the joint posterior of `(z_{t-1}, z_t)`; `xi[0]`
/// pairs the first token with the start state.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub n_labels: usize,
    pub len: usize,
    pub gamma: Vec<f64>,
    pub xi: Vec<f64>,
    pub log_evidence: f64,
}

impl PosteriorStats {
    pub fn gamma_at(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.n_labels..(t + 1) * self.n_labels]
    }

    pub fn xi_at(&self, t: usize) -> &[f64] {
        let w = self.n_labels * self.n_labels;
        &self.xi[t * w..(t + 1) * w]
    }
}

/// `log phi_i = sum_k log sum_j emit[i][j][k] * x[k][j]` for one token.
///
/// `emit_t` is `|L| x |L| x K`, `x_t` is `K x |L|`.
pub fn observation_loglik(emit_t: &[f64], x_t: &[f64], n_labels: usize, n_sources: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_labels];
    observation_loglik_into(emit_t, x_t, n_labels, n_sources, &mut out);
    out
}

fn observation_loglik_into(emit_t: &[f64], x_t: &[f64], l: usize, kk: usize, out: &mut [f64]) {
    debug_assert_eq!(emit_t.len(), l * l * kk);
    debug_assert_eq!(x_t.len(), kk * l);
    debug_assert!(x_t
        .chunks(l)
        .all(|row| (row.iter().sum::<f64>() - 1.0).abs() < NORM_TOL));
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..kk {
            let x_row = &x_t[k * l..(k + 1) * l];
            let mut m = 0.0;
            for (j, &xj) in x_row.iter().enumerate() {
                m += emit_t[(i * l + j) * kk + k] * xj;
            }
            acc += m.ln();
        }
        *o = acc;
    }
}

/// `T x |L|` log observation likelihoods.
pub fn observation_logliks(params: &TokenConditionedParams, x: &WeakObservationTensor) -> Result<Vec<f64>> {
    params.check_obs(x)?;
    let (l, kk) = (params.n_labels, params.n_sources);
    let mut out = vec![0.0; x.len() * l];
    for t in 0..x.len() {
        observation_loglik_into(params.emit_token(t), x.token(t), l, kk, &mut out[t * l..(t + 1) * l]);
    }
    Ok(out)
}

/// Exponentiates a log vector after shifting by its max; returns the shift.
fn exp_shifted(logs: &[f64], out: &mut [f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &v) in out.iter_mut().zip(logs) {
        *o = (v - m).exp();
    }
    m
}

fn normalize(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    s
}

/// Scaled forward recursion. Returns normalized alphas (`T x |L|`) and the
/// per-step log normalizers.
fn forward_scaled(params: &TokenConditionedParams, log_phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let l = params.n_labels;
    let len = log_phi.len() / l;
    let mut alpha = vec![0.0; len * l];
    let mut log_c = vec![0.0; len];
    let mut phi = vec![0.0; l];
    for t in 0..len {
        let shift = exp_shifted(&log_phi[t * l..(t + 1) * l], &mut phi);
        let (done, rest) = alpha.split_at_mut(t * l);
        let prev: &[f64] = if t == 0 { &params.pi } else { &done[(t - 1) * l..] };
        let cur = &mut rest[..l];
        cur.fill(0.0);
        let trans = params.trans_at(t);
        for (i, &p) in prev.iter().enumerate() {
            for (c, &a) in cur.iter_mut().zip(&trans[i * l..(i + 1) * l]) {
                *c += p * a;
            }
        }
        for (c, &f) in cur.iter_mut().zip(&phi) {
            *c *= f;
        }
        log_c[t] = normalize(cur).ln() + shift;
    }
    (alpha, log_c)
}

/// Scaled backward recursion. Returns normalized betas and, per token, the
/// log of the factor that was divided out (`log beta = ln beta_hat + scale`).
fn backward_scaled(params: &TokenConditionedParams, log_phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let l = params.n_labels;
    let len = log_phi.len() / l;
    let mut beta = vec![0.0; len * l];
    let mut scale = vec![0.0; len];
    beta[(len - 1) * l..].fill(1.0);
    let mut weighted = vec![0.0; l];
    for t in (1..len).rev() {
        let shift = exp_shifted(&log_phi[t * l..(t + 1) * l], &mut weighted);
        let (head, tail) = beta.split_at_mut(t * l);
        for (w, &b) in weighted.iter_mut().zip(&tail[..l]) {
            *w *= b;
        }
        let cur = &mut head[(t - 1) * l..];
        let trans = params.trans_at(t);
        for (i, c) in cur.iter_mut().enumerate() {
            *c = trans[i * l..(i + 1) * l]
                .iter()
                .zip(&weighted)
                .map(|(a, w)| a * w)
                .sum();
        }
        scale[t - 1] = scale[t] + shift + normalize(cur).ln();
    }
    (beta, scale)
}

/// Forward pass: `log alpha` (`T x |L|`, each row a normalized filtered
/// marginal) and `log p(x)`. Observation likelihoods are folded in one
/// step at a time.
pub fn forward_pass(params: &TokenConditionedParams, x: &WeakObservationTensor) -> Result<(Vec<f64>, f64)> {
    params.check_obs(x)?;
    let (l, kk) = (params.n_labels, params.n_sources);
    let mut log_alpha = vec![0.0; x.len() * l];
    let mut prev = params.pi.clone();
    let mut log_phi = vec![0.0; l];
    let mut phi = vec![0.0; l];
    let mut log_evidence = 0.0;
    for t in 0..x.len() {
        observation_loglik_into(params.emit_token(t), x.token(t), l, kk, &mut log_phi);
        let shift = exp_shifted(&log_phi, &mut phi);
        let trans = params.trans_at(t);
        let mut cur = vec![0.0; l];
        for (i, &p) in prev.iter().enumerate() {
            for (c, &a) in cur.iter_mut().zip(&trans[i * l..(i + 1) * l]) {
                *c += p * a;
            }
        }
        for (c, &f) in cur.iter_mut().zip(&phi) {
            *c *= f;
        }
        log_evidence += normalize(&mut cur).ln() + shift;
        for (o, &c) in log_alpha[t * l..(t + 1) * l].iter_mut().zip(&cur) {
            *o = c.ln();
        }
        prev = cur;
    }
    Ok((log_alpha, log_evidence))
}

/// Backward pass: `log beta` (`T x |L|`), the true conditional future
/// evidence, with the last row all zeros.
pub fn backward_pass(params: &TokenConditionedParams, x: &WeakObservationTensor) -> Result<Vec<f64>> {
    let log_phi = observation_logliks(params, x)?;
    let (beta, scale) = backward_scaled(params, &log_phi);
    let l = params.n_labels;
    Ok(beta
        .iter()
        .enumerate()
        .map(|(n, &b)| b.ln() + scale[n / l])
        .collect())
}

/// Forward-backward: smoothed marginals, pairwise expectations, evidence.
pub fn posterior_stats(params: &TokenConditionedParams, x: &WeakObservationTensor) -> Result<PosteriorStats> {
    let log_phi = observation_logliks(params, x)?;
    Ok(posterior_from_loglik(params, &log_phi))
}

pub(crate) fn posterior_from_loglik(params: &TokenConditionedParams, log_phi: &[f64]) -> PosteriorStats {
    let l = params.n_labels;
    let len = log_phi.len() / l;
    let (alpha, log_c) = forward_scaled(params, log_phi);
    let (beta, _) = backward_scaled(params, log_phi);

    let mut gamma = vec![0.0; len * l];
    for t in 0..len {
        let g = &mut gamma[t * l..(t + 1) * l];
        for ((o, &a), &b) in g.iter_mut().zip(&alpha[t * l..]).zip(&beta[t * l..]) {
            *o = a * b;
        }
        normalize(g);
    }

    let mut xi = vec![0.0; len * l * l];
    let mut phi = vec![0.0; l];
    for t in 0..len {
        exp_shifted(&log_phi[t * l..(t + 1) * l], &mut phi);
        for (p, &b) in phi.iter_mut().zip(&beta[t * l..(t + 1) * l]) {
            *p *= b;
        }
        let prev: &[f64] = if t == 0 { &params.pi } else { &alpha[(t - 1) * l..t * l] };
        let trans = params.trans_at(t);
        let slice = &mut xi[t * l * l..(t + 1) * l * l];
        for i in 0..l {
            for j in 0..l {
                slice[i * l + j] = prev[i] * trans[i * l + j] * phi[j];
            }
        }
        normalize(slice);
    }

    PosteriorStats {
        n_labels: l,
        len,
        gamma,
        xi,
        log_evidence: log_c.iter().sum(),
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Most probable label sequence `argmax_z p(z_{1:T} | x)`, with the start
/// state summed out. Ties go to the lowest label index.
pub fn viterbi(params: &TokenConditionedParams, x: &WeakObservationTensor) -> Result<Vec<usize>> {
    let log_phi = observation_logliks(params, x)?;
    Ok(viterbi_from_loglik(params, &log_phi))
}

pub(crate) fn viterbi_from_loglik(params: &TokenConditionedParams, log_phi: &[f64]) -> Vec<usize> {
    let l = params.n_labels;
    let len = log_phi.len() / l;
    let mut delta = vec![0.0; l];
    let trans0 = params.trans_at(0);
    for (j, d) in delta.iter_mut().enumerate() {
        let incoming = (0..l).map(|i| params.pi[i].ln() + trans0[i * l + j].ln());
        *d = log_sum_exp(incoming) + log_phi[j];
    }
    let mut back = vec![0usize; len * l];
    let mut next = vec![0.0; l];
    for t in 1..len {
        let trans = params.trans_at(t);
        for j in 0..l {
            let mut best = 0;
            let mut best_score = delta[0] + trans[j].ln();
            for i in 1..l {
                let s = delta[i] + trans[i * l + j].ln();
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            back[t * l + j] = best;
            next[j] = best_score + log_phi[t * l + j];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut path = vec![0; len];
    path[len - 1] = argmax(&delta);
    for t in (1..len).rev() {
        path[t - 1] = back[t * l + path[t]];
    }
    path
}

/// `log p(z_{1:T}, x)` for a given label path, start state summed out.
pub fn path_log_joint(params: &TokenConditionedParams, x: &WeakObservationTensor, path: &[usize]) -> Result<f64> {
    let log_phi = observation_logliks(params, x)?;
    if path.len() != x.len() {
        return Err(Error::dim("path length does not match observations"));
    }
    let l = params.n_labels;
    let trans0 = params.trans_at(0);
    let mut total = log_sum_exp((0..l).map(|i| params.pi[i].ln() + trans0[i * l + path[0]].ln()));
    total += log_phi[path[0]];
    for t in 1..path.len() {
        total += params.trans_at(t)[path[t - 1] * l + path[t]].ln() + log_phi[t * l + path[t]];
    }
    Ok(total)
}

/// Hard labels by per-token marginal argmax (lowest index on ties) and the
/// marginals themselves as soft labels.
pub fn marginal_decode(stats: &PosteriorStats) -> (Vec<usize>, Vec<f64>) {
    let hard = (0..stats.len).map(|t| argmax(stats.gamma_at(t))).collect();
    (hard, stats.gamma.clone())
}

/// Expected complete-data log likelihood under `stats`:
///
/// `log pi_O + sum_t sum_ij xi_t[i][j] log trans_t[i][j] + sum_t sum_i gamma_t[i] log phi_t[i]`.
///
/// The start state is treated as known to be `O`, so the first term is a
/// constant.
pub fn q_objective(params: &TokenConditionedParams, stats: &PosteriorStats, x: &WeakObservationTensor) -> Result<f64> {
    let log_phi = observation_logliks(params, x)?;
    if stats.len != x.len() || stats.n_labels != params.n_labels {
        return Err(Error::dim("posterior statistics do not match observations"));
    }
    Ok(q_from_loglik(params, stats, &log_phi))
}

pub(crate) fn q_from_loglik(params: &TokenConditionedParams, stats: &PosteriorStats, log_phi: &[f64]) -> f64 {
    let mut q = params.pi[OUTSIDE].ln();
    for (xi, trans) in stats.xi.iter().zip(&params.trans) {
        q += xi * trans.ln();
    }
    for (g, lp) in stats.gamma.iter().zip(log_phi) {
        q += g * lp;
    }
    q
}
