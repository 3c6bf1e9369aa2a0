mod common;

use common::{labels_with, make_corpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqdenoise::data::{Corpus, Split, WeakObservationTensor};
use seqdenoise::eval::best_consensus_split;

/// `(start, end, type)` spans of a BIO sequence, with labels laid out as
/// `O, B-0, I-0, B-1, I-1, ...`; a stray I- opens a span.
fn spans(seq: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (t, &z) in seq.iter().enumerate() {
        let cont = z > 0 && z % 2 == 0 && open.is_some_and(|(_, e)| e == (z - 1) / 2);
        if !cont {
            if let Some((s, e)) = open.take() {
                out.push((s, t, e));
            }
            if z > 0 {
                open = Some((t, (z - 1) / 2));
            }
        }
    }
    if let Some((s, e)) = open {
        out.push((s, seq.len(), e));
    }
    out
}

fn random_corpus(rng: &mut ChaCha8Rng) -> (Corpus, Vec<Vec<Vec<usize>>>) {
    let ne = rng.random_range(1..4);
    let labels = labels_with(ne);
    let l = labels.len();
    let k = rng.random_range(1..6);
    let mut items = Vec::new();
    let mut hard_all = Vec::new();
    for _ in 0..rng.random_range(3..12) {
        let len = rng.random_range(1..12);
        let mut gold = vec![0; len];
        let mut t = 0;
        while t < len {
            if rng.random_bool(0.3) {
                let e = rng.random_range(0..ne);
                let n = rng.random_range(1..4).min(len - t);
                gold[t] = 1 + 2 * e;
                for z in &mut gold[t + 1..t + n] {
                    *z = 2 + 2 * e;
                }
                t += n;
            } else {
                t += 1;
            }
        }
        // each source copies gold with per-token corruption
        let hard: Vec<Vec<usize>> = (0..k)
            .map(|_| {
                let keep = rng.random_range(0.3..1.0);
                gold.iter().map(|&z| if rng.random_bool(keep) { z } else { rng.random_range(0..l) }).collect()
            })
            .collect();
        let obs = WeakObservationTensor::from_hard(&hard, l).unwrap();
        items.push((Split::Test, Some(gold), obs, None));
        hard_all.push(hard);
    }
    (make_corpus(labels, k, items), hard_all)
}

#[test]
fn consensus_precision_is_one_and_recall_grows_with_sources() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let (corpus, hard) = random_corpus(&mut rng);
        let k = corpus.n_sources();
        let recall: Vec<f64> = (0..1usize << k)
            .map(|mask| {
                let subset: Vec<usize> = (0..k).filter(|&j| mask >> j & 1 == 1).collect();
                let report = best_consensus_split(&corpus.with_sources(&subset), Split::Test).unwrap();
                assert_eq!(report.precision, 1.0);
                report.recall
            })
            .collect();
        for mask in 0..1usize << k {
            for j in 0..k {
                assert!(recall[mask] <= recall[mask | 1 << j], "subset {mask:b} + source {j}");
            }
        }
        assert_eq!(recall[0], 0.0);

        // full-set recall against direct span matching
        let (mut found, mut total) = (0usize, 0usize);
        for (inst, h) in corpus.instances.iter().zip(&hard) {
            let from_sources: Vec<_> = h.iter().flat_map(|s| spans(s)).collect();
            for s in spans(inst.sentence.gold.as_ref().unwrap()) {
                total += 1;
                found += usize::from(from_sources.contains(&s));
            }
        }
        let expected = if total == 0 { 0.0 } else { found as f64 / total as f64 };
        assert!((recall[(1 << k) - 1] - expected).abs() < 1e-12);
    }
}
