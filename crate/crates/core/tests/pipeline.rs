use msin::data::{corpus_tokens, make_samples, Corpus, CorpusDay, Dataset, SampleConfig, Series, SplitRule, Vocab};
use msin::eval::{per_k_metrics, DayRanking};
use msin::model::{ModelConfig, ModelParams, Variant};
use msin::rng::{seeded, Stream};
use msin::synth::{generate, Planting, SynthSpec};
use msin::train::{train, TrainConfig};

fn hundred_days() -> (Corpus, Series) {
    let spec = SynthSpec {
        n_days: 100,
        docs_min: 1,
        docs_max: 5,
        doc_len_min: 2,
        doc_len_max: 6,
        background_words: 50,
        planting: Planting::PerDocument(0.3),
        seed: 21,
        ..SynthSpec::default()
    };
    let (corpus, series) = generate(&spec).unwrap();
    // drop every seventh day's documents and blank some headlines
    let days: Vec<CorpusDay> = corpus
        .days()
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 7 != 3)
        .map(|(i, d)| {
            let mut d = d.clone();
            if i % 11 == 0 {
                for h in &mut d.headlines {
                    h.text = "  ".into();
                }
            }
            d
        })
        .collect();
    (Corpus::new(days).unwrap(), series)
}

fn samples(corpus: &Corpus, series: &Series, window: usize, cap: usize) -> (Dataset, Vocab) {
    let vocab = Vocab::build(corpus_tokens(corpus, 6).iter().map(String::as_str), 1000, None);
    let cfg = SampleConfig {
        window,
        max_len: 6,
        daily_doc_cap: cap,
        split: SplitRule::Fractions([0.7, 0.15, 0.15]),
    };
    (make_samples(corpus, series, &vocab, &cfg, None).unwrap(), vocab)
}

#[test]
fn sample_count_matches_brute_force_enumeration() {
    let (corpus, series) = hundred_days();
    for window in [1, 5, 12] {
        let (data, _) = samples(&corpus, &series, window, 3);
        let expected: Vec<_> = (window..series.len())
            .map(|t| series.dates()[t])
            .filter(|date| {
                corpus
                    .day(*date)
                    .is_some_and(|d| d.headlines.iter().rev().take(3).any(|h| !h.text.trim().is_empty()))
            })
            .collect();
        let got: Vec<_> = data.all().map(|s| s.window.date).collect();
        assert_eq!(got, expected, "window {window}");
        assert_eq!(data.report.samples, expected.len());
        assert_eq!(data.report.train + data.report.valid + data.report.test, expected.len());
        assert_eq!(data.report.eligible_days, series.len() - window);
        for s in data.all() {
            assert_eq!(s.window.len(), window);
            assert!(!s.docs.is_empty() && s.docs.len() <= 3);
            let t = series.dates().binary_search(&s.window.date).unwrap();
            assert_eq!(s.window.target_raw, series.values()[t][0]);
            for (k, row) in (t - window..t).enumerate() {
                let z = data.normalizer.apply(0, series.values()[row][0]) as f32;
                assert_eq!(s.window.step(k), &[z]);
            }
        }
    }
}

#[test]
fn oracle_ranker_on_planted_days_has_perfect_recall_at_one() {
    let spec = SynthSpec {
        n_days: 120,
        ..SynthSpec::default()
    };
    let (corpus, series) = generate(&spec).unwrap();
    let (data, _) = samples(&corpus, &series, 5, 25);
    let days: Vec<DayRanking> = data
        .all()
        .map(|s| {
            let gtn = s.docs.ground_truth();
            let mass: Vec<f64> = (0..s.docs.len()).map(|j| if gtn.contains(&j) { 1.0 } else { 0.0 }).collect();
            DayRanking::new(s.window.date, mass, gtn).unwrap()
        })
        .collect();
    let m = per_k_metrics(&days, 3).unwrap();
    assert_eq!((m[0].pre, m[0].rec), (1.0, 1.0));
    assert_eq!(m[2].rec, 1.0);
}

#[test]
fn training_ignores_relevance_flags() {
    let (corpus, series) = hundred_days();
    let stripped = Corpus::new(
        corpus
            .days()
            .iter()
            .map(|d| {
                let mut d = d.clone();
                for h in &mut d.headlines {
                    h.relevant = None;
                }
                d
            })
            .collect(),
    )
    .unwrap();
    let run = |c: &Corpus| {
        let (data, vocab) = samples(c, &series, 3, 5);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            window: 3,
            max_len: 6,
            ..ModelConfig::tiny(Variant::Msin)
        };
        let params = ModelParams::init(&cfg, &mut seeded(1, Stream::Init)).unwrap();
        let tc = TrainConfig {
            max_steps: 6,
            batch_size: 4,
            eval_every: 3,
            ..TrainConfig::default()
        };
        train(params, &data, &tc).unwrap().params
    };
    assert_eq!(run(&corpus), run(&stripped));
}
