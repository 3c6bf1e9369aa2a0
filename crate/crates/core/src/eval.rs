//! Entity-level scoring and the non-learned reference aggregators.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split, WeakObservationTensor};
use crate::error::{Error, Result};
use crate::labelspace::{labels_to_spans, EntitySpan, LabelSet};

const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    /// 0/0 is scored as 0.
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub entity: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

/// Micro-averaged exact-match entity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub per_type: Vec<TypeScore>,
}

impl ScoreReport {
    fn from_counts(total: Counts, per_type: Vec<Counts>, labels: &LabelSet) -> Self {
        let per_type = per_type
            .into_iter()
            .enumerate()
            .map(|(e, c)| TypeScore {
                entity: labels.entities().name(e).to_string(),
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                counts: c,
            })
            .collect();
        Self {
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            counts: total,
            per_type,
        }
    }
}

/// Entity-level precision, recall and F1 over aligned label sequences.
pub fn entity_f1(pred: &[Vec<usize>], gold: &[Vec<usize>], labels: &LabelSet) -> Result<ScoreReport> {
    if pred.len() != gold.len() {
        return Err(Error::dim(format!(
            "{} predicted sequences vs {} gold sequences",
            pred.len(),
            gold.len()
        )));
    }
    let n_types = labels.entities().len();
    let mut total = Counts::default();
    let mut per_type = vec![Counts::default(); n_types];
    for (n, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::dim(format!(
                "sequence {n}: {} predicted labels vs {} gold labels",
                p.len(),
                g.len()
            )));
        }
        let ps: HashSet<EntitySpan> = labels_to_spans(p, labels).into_iter().collect();
        let gs: HashSet<EntitySpan> = labels_to_spans(g, labels).into_iter().collect();
        for s in &ps {
            per_type[s.entity].predicted += 1;
        }
        for s in &gs {
            per_type[s.entity].gold += 1;
            if ps.contains(s) {
                per_type[s.entity].correct += 1;
            }
        }
        total.predicted += ps.len();
        total.gold += gs.len();
        total.correct += ps.intersection(&gs).count();
    }
    Ok(ScoreReport::from_counts(total, per_type, labels))
}

/// Per-token label with the largest summed probability across sources.
/// Exact ties are broken uniformly at random.
pub fn majority_vote<R: Rng>(x: &WeakObservationTensor, rng: &mut R) -> Vec<usize> {
    let l = x.n_labels();
    let mut votes = vec![0.0; l];
    let mut tied = Vec::with_capacity(l);
    (0..x.len())
        .map(|t| {
            votes.fill(0.0);
            for k in 0..x.n_sources() {
                for (v, p) in votes.iter_mut().zip(x.row(t, k)) {
                    *v += p;
                }
            }
            let best = votes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            tied.clear();
            tied.extend((0..l).filter(|&j| best - votes[j] <= TIE_TOL));
            if tied.len() == 1 {
                tied[0]
            } else {
                tied[rng.random_range(0..tied.len())]
            }
        })
        .collect()
}

/// Majority vote over every instance of a corpus, one seeded stream.
pub fn majority_vote_corpus(corpus: &Corpus, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .instances
        .iter()
        .map(|inst| majority_vote(&inst.obs, &mut rng))
        .collect()
}

/// Oracle that keeps exactly the correct annotations: a gold entity is
/// recalled iff some single source's hard labels contain its exact span and
/// type. Precision is 1 by construction.
pub fn best_consensus(items: &[(&WeakObservationTensor, &[usize])], labels: &LabelSet) -> ScoreReport {
    let n_types = labels.entities().len();
    let mut total = Counts::default();
    let mut per_type = vec![Counts::default(); n_types];
    for (x, gold) in items {
        let found: HashSet<EntitySpan> = (0..x.n_sources())
            .flat_map(|k| labels_to_spans(&x.hard_labels(k), labels))
            .collect();
        for s in labels_to_spans(gold, labels) {
            total.gold += 1;
            per_type[s.entity].gold += 1;
            if found.contains(&s) {
                total.correct += 1;
                per_type[s.entity].correct += 1;
            }
        }
    }
    total.predicted = total.correct;
    for c in &mut per_type {
        c.predicted = c.correct;
    }
    let mut report = ScoreReport::from_counts(total, per_type, labels);
    report.precision = 1.0;
    report.f1 = if report.recall == 0.0 {
        0.0
    } else {
        2.0 * report.recall / (1.0 + report.recall)
    };
    for t in &mut report.per_type {
        t.precision = 1.0;
        t.f1 = if t.recall == 0.0 { 0.0 } else { 2.0 * t.recall / (1.0 + t.recall) };
    }
    report
}

/// [`best_consensus`] on one split of a corpus. Every sentence needs gold.
pub fn best_consensus_split(corpus: &Corpus, split: Split) -> Result<ScoreReport> {
    let items = corpus
        .split(split)
        .map(|inst| {
            inst.sentence
                .gold
                .as_deref()
                .map(|g| (&inst.obs, g))
                .ok_or_else(|| Error::validation(format!("sentence {} has no gold labels", inst.id())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(best_consensus(&items, &corpus.labels))
}

/// Scores predictions (one per instance, in corpus order) on one split.
pub fn score_split(corpus: &Corpus, split: Split, pred: &[Vec<usize>]) -> Result<ScoreReport> {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (inst, seq) in corpus.instances.iter().zip(pred) {
        if inst.split != split {
            continue;
        }
        let gold = inst
            .sentence
            .gold
            .clone()
            .ok_or_else(|| Error::validation(format!("sentence {} has no gold labels", inst.id())))?;
        p.push(seq.clone());
        g.push(gold);
    }
    entity_f1(&p, &g, &corpus.labels)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn labels() -> LabelSet {
        LabelSet::from_entity_names(["PER", "LOC"]).unwrap()
    }

    /// Independent scorer: spans as (type, start, end) tuples, set intersection.
    fn oracle_f1(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> (usize, usize, usize) {
        fn spans(seq: &[usize]) -> Vec<(usize, usize, usize)> {
            let mut out = Vec::new();
            let mut t = 0;
            while t < seq.len() {
                if seq[t] == 0 {
                    t += 1;
                    continue;
                }
                let ty = (seq[t] - 1) / 2;
                let start = t;
                t += 1;
                while t < seq.len() && seq[t] == 2 + 2 * ty {
                    t += 1;
                }
                out.push((ty, start, t));
            }
            out
        }
        let (mut np, mut ng, mut nc) = (0, 0, 0);
        for (p, g) in pred.iter().zip(gold) {
            let ps = spans(p);
            let gs = spans(g);
            np += ps.len();
            ng += gs.len();
            nc += ps.iter().filter(|s| gs.contains(s)).count();
        }
        (np, ng, nc)
    }

    #[test]
    fn perfect_prediction() {
        let g = vec![vec![0, 1, 2, 0, 3]];
        let r = entity_f1(&g, &g, &labels()).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.per_type[0].counts.gold, 1);
    }

    #[test]
    fn all_outside_prediction_scores_zero() {
        let g = vec![vec![0, 1, 2, 0]];
        let p = vec![vec![0, 0, 0, 0]];
        let r = entity_f1(&p, &g, &labels()).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(entity_f1(&[vec![0, 0]], &[vec![0]], &labels()).is_err());
        assert!(entity_f1(&[vec![0]], &[], &labels()).is_err());
    }

    #[test]
    fn two_of_three_vote() {
        let x = WeakObservationTensor::from_hard(&[vec![1], vec![1], vec![3]], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(majority_vote(&x, &mut rng), vec![1]);
    }

    #[test]
    fn seeded_tie_is_reproducible() {
        let x = WeakObservationTensor::from_hard(&[vec![1; 40], vec![3; 40]], 5).unwrap();
        let a = majority_vote(&x, &mut ChaCha8Rng::seed_from_u64(9));
        let b = majority_vote(&x, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.iter().all(|&l| l == 1 || l == 3));
        assert!(a.contains(&1) && a.contains(&3));
    }

    #[test]
    fn single_source_vote_is_that_source() {
        let seq = vec![0, 1, 2, 0, 3, 4, 4];
        let x = WeakObservationTensor::from_hard(std::slice::from_ref(&seq), 5).unwrap();
        assert_eq!(majority_vote(&x, &mut ChaCha8Rng::seed_from_u64(1)), seq);
    }

    #[test]
    fn consensus_edge_cases() {
        let ls = labels();
        let gold = vec![0, 1, 2, 0, 3];
        let a = WeakObservationTensor::from_hard(&[vec![0, 1, 2, 0, 0], vec![0, 0, 0, 0, 3]], 5).unwrap();
        let r = best_consensus(&[(&a, &gold)], &ls);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let none = WeakObservationTensor::from_hard(&[vec![0; 5]], 5).unwrap();
        let r = best_consensus(&[(&none, &gold)], &ls);
        assert_eq!((r.precision, r.recall), (1.0, 0.0));
        // fragments from different sources do not compose
        let frag = WeakObservationTensor::from_hard(&[vec![0, 1, 0, 0, 0], vec![0, 0, 4, 0, 0]], 5).unwrap();
        assert_eq!(best_consensus(&[(&frag, &gold)], &ls).counts.correct, 0);
    }

    fn seq_strategy(len: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(prop_oneof![6 => Just(0usize), 1 => 1usize..5], len)
    }

    proptest! {
        #[test]
        fn matches_set_intersection_scorer(
            pairs in proptest::collection::vec((1usize..15).prop_flat_map(|n| (seq_strategy(n), seq_strategy(n))), 1..8)
        ) {
            let (pred, gold): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = entity_f1(&pred, &gold, &labels()).unwrap();
            let (np, ng, nc) = oracle_f1(&pred, &gold);
            prop_assert_eq!((r.counts.predicted, r.counts.gold, r.counts.correct), (np, ng, nc));
            prop_assert!((0.0..=1.0).contains(&r.f1));
        }

        #[test]
        fn vote_matches_counting(hard in proptest::collection::vec(seq_strategy(12), 1..6), seed in any::<u64>()) {
            let x = WeakObservationTensor::from_hard(&hard, 5).unwrap();
            let voted = majority_vote(&x, &mut ChaCha8Rng::seed_from_u64(seed));
            for t in 0..12 {
                let mut counts = [0usize; 5];
                for s in &hard {
                    counts[s[t]] += 1;
                }
                let top = *counts.iter().max().unwrap();
                prop_assert_eq!(counts[voted[t]], top);
            }
        }
    }
}
