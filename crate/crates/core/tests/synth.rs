use std::fs;

use seqdenoise::chmm::{denoise, train_chmm, ChmmConfig};
use seqdenoise::data::{argmax, load_corpus, save_corpus, save_embeddings, Split};
use seqdenoise::eval::{best_consensus_split, entity_f1, majority_vote_corpus, score_split};
use seqdenoise::hmm::{train_hmm, HmmConfig};
use seqdenoise::labelspace::OUTSIDE;
use seqdenoise::synth::{bio_chain, generate, reference_config, reference_suite, SourceChannel, SynthConfig};

fn channel(name: &str, recall: f64, precision: f64) -> SourceChannel {
    SourceChannel {
        name: name.into(),
        recall: vec![recall],
        precision: vec![precision],
        confusion: Vec::new(),
        confusion_rate: Vec::new(),
        boundary: Vec::new(),
        truncate: Vec::new(),
        token_noise: Vec::new(),
    }
}

fn small_config(sources: Vec<SourceChannel>, n_train: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        entity_types: vec!["PER".into(), "LOC".into()],
        n_train,
        n_dev: 40,
        n_test: 40,
        min_len: 10,
        max_len: 18,
        transition: bio_chain(&[0.5, 0.5], 0.15, 0.5),
        n_domains: 2,
        sources,
        emb_dim: 8,
        class_strength: 1.0,
        type_strength: 0.5,
        context_strength: 0.3,
        domain_strength: 0.5,
        noise: 0.5,
        seed,
    }
}

#[test]
fn noiseless_sources_equal_gold_and_every_aggregator_is_perfect() {
    let corpus = generate(&small_config(vec![channel("a", 1.0, 1.0), channel("b", 1.0, 1.0), channel("c", 1.0, 1.0)], 150, 3)).unwrap();
    for inst in &corpus.instances {
        let gold = inst.sentence.gold.as_ref().unwrap();
        for k in 0..corpus.n_sources() {
            assert_eq!(&inst.obs.hard_labels(k), gold, "{}", inst.id());
        }
    }
    let l = corpus.n_labels();
    let mv = majority_vote_corpus(&corpus, 0);
    assert_eq!(score_split(&corpus, Split::Test, &mv).unwrap().f1, 1.0);
    assert_eq!(best_consensus_split(&corpus, Split::Test).unwrap().f1, 1.0);

    let (hmm, _) = train_hmm(&corpus, &HmmConfig::default()).unwrap();
    let hard: Vec<Vec<usize>> = corpus.instances.iter().map(|i| hmm.denoise(&i.obs).unwrap().0).collect();
    assert_eq!(score_split(&corpus, Split::Test, &hard).unwrap().f1, 1.0);

    let config = ChmmConfig { epochs: 3, ..ChmmConfig::reference(0) };
    let (chmm, _) = train_chmm(&corpus, &config, None).unwrap();
    let out = denoise(&chmm, &corpus).unwrap();
    let hard: Vec<Vec<usize>> = out.iter().map(|d| d.hard.clone()).collect();
    assert_eq!(score_split(&corpus, Split::Test, &hard).unwrap().f1, 1.0);
    let marginal: Vec<Vec<usize>> = out.iter().map(|d| d.soft.chunks(l).map(argmax).collect()).collect();
    assert_eq!(score_split(&corpus, Split::Test, &marginal).unwrap().f1, 1.0);
}

#[test]
fn zero_recall_gives_all_outside_and_zero_consensus_recall() {
    let corpus = generate(&small_config(vec![channel("a", 0.0, 0.8), channel("b", 0.0, 0.5)], 100, 5)).unwrap();
    for inst in &corpus.instances {
        for k in 0..corpus.n_sources() {
            assert!(inst.obs.hard_labels(k).iter().all(|&z| z == OUTSIDE));
        }
    }
    for split in [Split::Train, Split::Dev, Split::Test] {
        assert_eq!(best_consensus_split(&corpus, split).unwrap().recall, 0.0);
    }
}

#[test]
fn empirical_source_rates_match_configuration() {
    let rates = [(0.7, 0.9), (0.4, 0.6), (0.95, 0.75)];
    let sources = rates.iter().enumerate().map(|(k, &(r, p))| channel(&format!("s{k}"), r, p)).collect();
    let corpus = generate(&small_config(sources, 7500, 11)).unwrap();
    let tokens: usize = corpus.instances.iter().map(|i| i.len()).sum();
    assert!(tokens >= 100_000, "{tokens} tokens");
    let gold: Vec<Vec<usize>> = corpus.instances.iter().map(|i| i.sentence.gold.clone().unwrap()).collect();
    for (k, &(r, p)) in rates.iter().enumerate() {
        let pred: Vec<Vec<usize>> = corpus.instances.iter().map(|i| i.obs.hard_labels(k)).collect();
        let report = entity_f1(&pred, &gold, &corpus.labels).unwrap();
        assert!((report.recall - r).abs() < 0.03, "source {k}: recall {} vs {r}", report.recall);
        assert!((report.precision - p).abs() < 0.03, "source {k}: precision {} vs {p}", report.precision);
    }
}

#[test]
fn per_domain_rates_average_over_domains() {
    // one domain with recall 0.9 and one with 0.3 give roughly their mean
    let mut a = channel("a", 0.0, 1.0);
    a.recall = vec![0.9, 0.3];
    let corpus = generate(&small_config(vec![a, channel("b", 0.5, 1.0)], 6000, 2)).unwrap();
    let gold: Vec<Vec<usize>> = corpus.instances.iter().map(|i| i.sentence.gold.clone().unwrap()).collect();
    let pred: Vec<Vec<usize>> = corpus.instances.iter().map(|i| i.obs.hard_labels(0)).collect();
    let report = entity_f1(&pred, &gold, &corpus.labels).unwrap();
    assert!((report.recall - 0.6).abs() < 0.03, "recall {}", report.recall);
    assert!(report.precision > 0.999);
}

#[test]
fn reference_suite_is_byte_identical_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, seed: u64| {
        let corpus = reference_suite(seed).unwrap();
        let c = dir.path().join(format!("{name}.jsonl"));
        let e = dir.path().join(format!("{name}.emb"));
        save_corpus(&corpus, &c).unwrap();
        save_embeddings(&corpus, &e).unwrap();
        (fs::read(c).unwrap(), fs::read(e).unwrap())
    };
    let first = write("a", 4);
    let second = write("b", 4);
    assert!(first == second);
    let other = write("c", 5);
    assert!(first.0 != other.0 && first.1 != other.1);
}

#[test]
fn reference_suite_round_trips_through_the_loader() {
    let corpus = reference_suite(0).unwrap();
    let config = reference_config(0);
    assert_eq!(corpus.n_sources(), 4);
    assert_eq!(corpus.labels.entities().len(), 3);
    assert_eq!(corpus.embedding_dim(), Some(32));
    assert!(config.sources.iter().all(|s| s.context_dependent()));
    for (split, n) in [(Split::Train, 2000), (Split::Dev, 400), (Split::Test, 400)] {
        assert_eq!(corpus.split(split).count(), n);
    }
    let dir = tempfile::tempdir().unwrap();
    let (c, e) = (dir.path().join("corpus.jsonl"), dir.path().join("corpus.emb"));
    save_corpus(&corpus, &c).unwrap();
    save_embeddings(&corpus, &e).unwrap();
    let loaded = load_corpus(&c, Some(&e)).unwrap();
    loaded.validate().unwrap();
    assert_eq!(loaded.instances.len(), corpus.instances.len());
    for (a, b) in loaded.instances.iter().zip(&corpus.instances) {
        assert_eq!(a.sentence, b.sentence);
        assert_eq!(a.split, b.split);
        assert_eq!(a.obs, b.obs);
        assert_eq!(a.emb, b.emb);
    }
}

#[test]
fn span_channels_behave_as_configured() {
    use seqdenoise::labelspace::labels_to_spans;
    let mut trunc = channel("trunc", 1.0, 1.0);
    trunc.truncate = vec![1.0];
    let mut flip = channel("flip", 1.0, 1.0);
    flip.token_noise = vec![1.0];
    let mut grow = channel("grow", 1.0, 1.0);
    grow.boundary = vec![1.0];
    let mut swap = channel("swap", 1.0, 1.0);
    swap.confusion = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    swap.confusion_rate = vec![1.0, 0.0];
    let corpus = generate(&small_config(vec![trunc, flip, grow, swap], 300, 9)).unwrap();
    let labels = &corpus.labels;
    let (mut shortened, mut multi) = (0, 0);
    let (mut with_spans, mut swapped_sentences) = (0, 0);
    for inst in &corpus.instances {
        let gold = inst.sentence.gold.as_ref().unwrap();
        let len = gold.len();
        let gold_spans = labels_to_spans(gold, labels);
        let cut = inst.obs.hard_labels(0);
        let flipped = inst.obs.hard_labels(1);
        let grown = inst.obs.hard_labels(2);
        let swapped = inst.obs.hard_labels(3);
        for s in &gold_spans {
            // truncation keeps the start and stops early on multi-token spans
            assert_eq!(cut[s.start], labels.begin(s.entity));
            if s.end - s.start > 1 {
                multi += 1;
                let reported = (s.start..s.end).take_while(|&t| cut[t] != OUTSIDE).count();
                assert!(reported >= 1 && reported < s.end - s.start);
                shortened += 1;
            }
            // every token of a flipped span changes type but keeps its B/I role
            for t in s.start..s.end {
                let (e, bio) = labels.decompose(flipped[t]).unwrap();
                assert_ne!(e, s.entity);
                assert_eq!(Some(bio), labels.decompose(gold[t]).map(|(_, b)| b));
            }
            // growth runs one token into a following O
            if s.end < len && gold[s.end] == OUTSIDE {
                assert_eq!(grown[s.end], labels.inside(s.entity));
            }
        }
        // the swap applies in one domain only, so a sentence swaps all or none
        let changed: Vec<bool> = labels_to_spans(&swapped, labels)
            .iter()
            .map(|s| {
                let g = gold_spans.iter().find(|g| g.start == s.start && g.end == s.end).unwrap();
                s.entity != g.entity
            })
            .collect();
        if let Some(&first) = changed.first() {
            assert!(changed.iter().all(|&c| c == first));
            with_spans += 1;
            swapped_sentences += usize::from(first);
        }
    }
    assert!(multi > 50);
    assert_eq!(shortened, multi);
    let share = swapped_sentences as f64 / with_spans as f64;
    assert!((0.35..0.65).contains(&share), "{share}");
}
