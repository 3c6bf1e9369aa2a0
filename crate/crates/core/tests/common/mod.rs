//! Test-only oracles. Nothing here calls into the kernels it checks.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seqdenoise::data::WeakObservationTensor;
use seqdenoise::kernels::{initial_pi, TokenConditionedParams};

/// A random positive distribution with moderate spread.
pub fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 3.0 - 1.5).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub struct Instance {
    pub params: TokenConditionedParams,
    pub x: WeakObservationTensor,
}

/// Random token-conditioned chain with `n_labels` labels, `len` tokens and
/// `n_sources` sources. Observation rows are a mix of one-hot and soft.
pub fn random_instance(rng: &mut ChaCha8Rng, n_labels: usize, len: usize, n_sources: usize) -> Instance {
    let l = n_labels;
    let pi_eps = if rng.random_bool(0.5) { 1e-6 } else { rng.random_range(0.01..0.15) };
    let pi = initial_pi(l, pi_eps);
    let mut trans = Vec::with_capacity(len * l * l);
    for _ in 0..len * l {
        trans.extend(random_dist(rng, l));
    }
    // emit[t][i][j][k] with rows over j
    let mut emit = vec![0.0; len * l * l * n_sources];
    for t in 0..len {
        for i in 0..l {
            for k in 0..n_sources {
                let row = random_dist(rng, l);
                for j in 0..l {
                    emit[((t * l + i) * l + j) * n_sources + k] = row[j];
                }
            }
        }
    }
    let params = TokenConditionedParams::new(l, n_sources, pi, trans, emit).unwrap();
    let mut xv = Vec::with_capacity(len * n_sources * l);
    for _ in 0..len * n_sources {
        if rng.random_bool(0.6) {
            let mut row = vec![0.0; l];
            row[rng.random_range(0..l)] = 1.0;
            xv.extend(row);
        } else {
            xv.extend(random_dist(rng, l));
        }
    }
    let x = WeakObservationTensor::new(len, n_sources, l, xv).unwrap();
    Instance { params, x }
}

/// Direct evaluation of `prod_k sum_j emit[t][i][j][k] x[t][k][j]`.
pub fn dense_phi(inst: &Instance, t: usize, i: usize) -> f64 {
    let p = &inst.params;
    let mut prod = 1.0;
    for k in 0..p.n_sources() {
        let mut s = 0.0;
        for j in 0..p.n_labels() {
            s += p.emit_at(t, i, j, k) * inst.x.row(t, k)[j];
        }
        prod *= s;
    }
    prod
}

/// Everything exhaustive enumeration over `(z_start, z_1..z_T)` yields.
pub struct Enumerated {
    pub evidence: f64,
    pub gamma: Vec<f64>,
    pub xi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// argmax over label paths of p(path, x) with the start state summed out
    pub map_path: Vec<usize>,
    pub map_log_joint: f64,
    /// posterior entropy of (z_start, z_1..z_T)
    pub entropy: f64,
    /// E[log pi_{z_start}] under the posterior
    pub expected_log_pi: f64,
    /// log p(path, x) for any path, start summed out
    pub path_joint: Vec<(Vec<usize>, f64)>,
}

fn decode_index(mut code: usize, l: usize, len: usize) -> Vec<usize> {
    let mut z = vec![0; len];
    for slot in z.iter_mut().rev() {
        *slot = code % l;
        code /= l;
    }
    z
}

pub fn enumerate(inst: &Instance) -> Enumerated {
    let p = &inst.params;
    let (l, len) = (p.n_labels(), p.len());
    let phi: Vec<Vec<f64>> = (0..len)
        .map(|t| (0..l).map(|i| dense_phi(inst, t, i)).collect())
        .collect();
    let trans = |t: usize, i: usize, j: usize| p.trans_at(t)[i * l + j];

    let n_paths = l.pow(len as u32);
    let mut evidence = 0.0;
    let mut gamma = vec![0.0; len * l];
    let mut xi = vec![0.0; len * l * l];
    let mut path_joint = Vec::with_capacity(n_paths);
    let mut weighted_log = 0.0;
    let mut pi_log = 0.0;
    let mut joints = Vec::with_capacity(n_paths * l);
    for code in 0..n_paths {
        let z = decode_index(code, l, len);
        let mut tail = 1.0;
        for t in 0..len {
            if t > 0 {
                tail *= trans(t, z[t - 1], z[t]);
            }
            tail *= phi[t][z[t]];
        }
        let mut path_total = 0.0;
        for s in 0..l {
            let joint = p.pi()[s] * trans(0, s, z[0]) * tail;
            joints.push(joint);
            path_total += joint;
            evidence += joint;
            for t in 0..len {
                gamma[t * l + z[t]] += joint;
                let prev = if t == 0 { s } else { z[t - 1] };
                xi[(t * l + prev) * l + z[t]] += joint;
            }
            if joint > 0.0 {
                weighted_log += joint * joint.ln();
                pi_log += joint * p.pi()[s].ln();
            }
        }
        path_joint.push((z, path_total.ln()));
    }
    for v in gamma.iter_mut().chain(xi.iter_mut()) {
        *v /= evidence;
    }
    let entropy = -(weighted_log / evidence - evidence.ln());
    let expected_log_pi = pi_log / evidence;

    // filtered marginals: enumerate prefixes
    let mut alpha = vec![0.0; len * l];
    for t in 0..len {
        let mut row = vec![0.0; l];
        for code in 0..l.pow((t + 1) as u32) {
            let z = decode_index(code, l, t + 1);
            let mut w = 0.0;
            for s in 0..l {
                w += p.pi()[s] * trans(0, s, z[0]);
            }
            w *= phi[0][z[0]];
            for u in 1..=t {
                w *= trans(u, z[u - 1], z[u]) * phi[u][z[u]];
            }
            row[z[t]] += w;
        }
        let s: f64 = row.iter().sum();
        for i in 0..l {
            alpha[t * l + i] = row[i] / s;
        }
    }

    // future evidence: enumerate suffixes
    let mut beta = vec![0.0; len * l];
    for t in 0..len {
        let rest = len - 1 - t;
        for i in 0..l {
            if rest == 0 {
                beta[t * l + i] = 1.0;
                continue;
            }
            let mut total = 0.0;
            for code in 0..l.pow(rest as u32) {
                let z = decode_index(code, l, rest);
                let mut w = 1.0;
                let mut prev = i;
                for (u, &zu) in z.iter().enumerate() {
                    let tt = t + 1 + u;
                    w *= trans(tt, prev, zu) * phi[tt][zu];
                    prev = zu;
                }
                total += w;
            }
            beta[t * l + i] = total;
        }
    }

    let (map_path, map_log_joint) = path_joint
        .iter()
        .fold((Vec::new(), f64::NEG_INFINITY), |(bp, bv), (z, v)| {
            if *v > bv {
                (z.clone(), *v)
            } else {
                (bp, bv)
            }
        });

    Enumerated {
        evidence,
        gamma,
        xi,
        alpha,
        beta,
        map_path,
        map_log_joint,
        entropy,
        expected_log_pi,
        path_joint,
    }
}

/// Independent triple-loop evaluation of the expected complete-data log
/// likelihood with the start state taken as `O`.
pub fn dense_q(inst: &Instance, gamma: &[f64], xi: &[f64]) -> f64 {
    let p = &inst.params;
    let (l, len) = (p.n_labels(), p.len());
    let mut q = p.pi()[0].ln();
    for t in 0..len {
        for i in 0..l {
            for j in 0..l {
                q += xi[(t * l + i) * l + j] * p.trans_at(t)[i * l + j].ln();
            }
        }
        for i in 0..l {
            q += gamma[t * l + i] * dense_phi(inst, t, i).ln();
        }
    }
    q
}

/// Entity names `E0, E1, ...` giving `2n + 1` labels.
pub fn labels_with(n_entities: usize) -> seqdenoise::labelspace::LabelSet {
    seqdenoise::labelspace::LabelSet::from_entity_names((0..n_entities).map(|e| format!("E{e}"))).unwrap()
}

/// Assembles a corpus; instance ids are `s0, s1, ...`.
pub fn make_corpus(
    labels: seqdenoise::labelspace::LabelSet,
    n_sources: usize,
    items: Vec<(
        seqdenoise::data::Split,
        Option<Vec<usize>>,
        WeakObservationTensor,
        Option<seqdenoise::data::EmbeddingSequence>,
    )>,
) -> seqdenoise::data::Corpus {
    let instances = items
        .into_iter()
        .enumerate()
        .map(|(n, (split, gold, obs, emb))| seqdenoise::data::Instance {
            sentence: seqdenoise::data::Sentence {
                id: format!("s{n}"),
                tokens: (0..obs.len()).map(|t| format!("w{t}")).collect(),
                gold,
            },
            split,
            obs,
            emb,
            denoised: None,
        })
        .collect();
    let sources = (0..n_sources).map(|k| format!("src{k}")).collect();
    seqdenoise::data::Corpus::new(labels, sources, instances).unwrap()
}

/// Draws an index from a distribution.
pub fn sample(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}
