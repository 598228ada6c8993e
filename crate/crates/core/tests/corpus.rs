use std::collections::HashSet;

use polyavsr::corpus::{
    apportion, build_language_specs, generate, inject_noise, make_split, mean_power, sample_utterance,
    split_languages, unigram_language, Corpus, CorpusConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn empirical_bigrams_match_the_transition_matrix() {
    let cfg = CorpusConfig {
        len_range: [8, 8],
        jitter: 0.0,
        ..CorpusConfig::default()
    };
    let specs = build_language_specs(&cfg).unwrap();
    let spec = &specs[1];
    let v = spec.tokens.len();
    let pos = |t: usize| spec.tokens.iter().position(|&x| x == t).unwrap();
    let mut counts = vec![vec![0usize; v]; v];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20_000 {
        let u = sample_utterance(spec, &cfg, &mut rng);
        for w in u.tokens.windows(2) {
            counts[pos(w[0])][pos(w[1])] += 1;
        }
    }
    let total: usize = counts.iter().flatten().sum();
    let mut weighted_tv = 0.0;
    for (i, row) in counts.iter().enumerate() {
        let n: usize = row.iter().sum();
        let tv: f64 = row
            .iter()
            .zip(&spec.transitions[i])
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        weighted_tv += tv * n as f64 / total as f64;
    }
    assert!(weighted_tv <= 0.02, "total variation {weighted_tv}");
}

#[test]
fn transition_rows_are_distributions() {
    for spec in build_language_specs(&CorpusConfig::default()).unwrap() {
        assert!((spec.initial.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for row in &spec.transitions {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn injected_noise_hits_the_requested_snr() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..40 {
        let n = rng.random_range(1000..5000);
        let signal: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.05).sin() + 0.1 * trial as f32).collect();
        let snr: f64 = rng.random_range(-10.0..30.0);
        let noisy = inject_noise(&signal, snr, &mut rng).unwrap();
        let noise: Vec<f32> = noisy.iter().zip(&signal).map(|(a, b)| a - b).collect();
        let realized = 10.0 * (mean_power(&signal) / mean_power(&noise)).log10();
        assert!((realized - snr).abs() <= 0.5, "target {snr}, realized {realized}");
    }
}

#[test]
fn infinite_snr_is_identity_and_silence_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = vec![0.5f32, -0.25, 1.0];
    assert_eq!(inject_noise(&x, f64::INFINITY, &mut rng).unwrap(), x);
    assert!(inject_noise(&[0.0; 8], 10.0, &mut rng).is_err());
    assert!(inject_noise(&x, f64::NAN, &mut rng).is_err());
}

#[test]
fn utterance_ids_are_unique() {
    let cfg = CorpusConfig {
        train_total: 10_000,
        len_range: [1, 1],
        frame: polyavsr::frontends::FrameGeom {
            height: 2,
            width: 2,
            channels: 1,
        },
        ..CorpusConfig::default()
    };
    let specs = build_language_specs(&cfg).unwrap();
    let mut seen = HashSet::new();
    for split in ["train", "valid", "test"] {
        for (id, _) in make_split(&specs, &cfg, split).unwrap() {
            assert!(seen.insert(id.clone()), "duplicate id {id}");
        }
    }
    assert_eq!(seen.len(), 10_000 + 2 * 3 * cfg.eval_per_lang);
}

#[test]
fn disjoint_vocabularies_make_unigram_lookup_exact() {
    let cfg = CorpusConfig::default();
    let specs = build_language_specs(&cfg).unwrap();
    for split in ["train", "test"] {
        for (_, u) in make_split(&specs, &cfg, split).unwrap() {
            assert_eq!(unigram_language(&specs, &u.tokens), u.lang);
        }
    }
}

#[test]
fn stream_lengths_follow_token_counts() {
    let cfg = CorpusConfig::default();
    let specs = build_language_specs(&cfg).unwrap();
    for (_, u) in make_split(&specs, &cfg, "valid").unwrap() {
        assert_eq!(u.frames, cfg.frames_per_token * u.tokens.len());
        assert_eq!(u.audio.len(), cfg.audio_downsample * u.frames);
        assert_eq!(u.video.len(), u.frames * cfg.frame.pixels());
        assert!((cfg.len_range[0]..=cfg.len_range[1]).contains(&u.tokens.len()));
    }
}

#[test]
fn shared_tokens_look_the_same_in_every_language() {
    let cfg = CorpusConfig {
        disjoint_vocab: false,
        overlap_fraction: 0.3,
        ..CorpusConfig::default()
    };
    let specs = build_language_specs(&cfg).unwrap();
    assert_eq!(cfg.content_tokens().unwrap(), 3 + 3 * 7);
    for k in 0..3 {
        let a = specs[0].tokens.iter().position(|&t| t == k).unwrap();
        let b = specs[2].tokens.iter().position(|&t| t == k).unwrap();
        assert_eq!(specs[0].audio[a], specs[2].audio[b]);
        assert_eq!(specs[0].video[a], specs[2].video[b]);
    }
}

#[test]
fn train_split_follows_ratios() {
    let cfg = CorpusConfig {
        ratios: vec![0.6, 0.3, 0.1],
        train_total: 601,
        ..CorpusConfig::default()
    };
    let langs = split_languages(&cfg, "train").unwrap();
    let counts: Vec<usize> = (0..3).map(|l| langs.iter().filter(|&&x| x == l).count()).collect();
    assert_eq!(counts, apportion(601, &cfg.ratios));
    assert_eq!(counts.iter().sum::<usize>(), 601);
    for (c, r) in counts.iter().zip(&cfg.ratios) {
        assert!((*c as f64 - r * 601.0).abs() < 1.0);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        CorpusConfig { languages: 1, ratios: vec![1.0], ..CorpusConfig::default() },
        CorpusConfig { ratios: vec![0.5, 0.5], ..CorpusConfig::default() },
        CorpusConfig { ratios: vec![0.5, 0.4, 0.2], ..CorpusConfig::default() },
        CorpusConfig { len_range: [3, 2], ..CorpusConfig::default() },
        CorpusConfig { max_content_tokens: 20, ..CorpusConfig::default() },
    ];
    for cfg in bad {
        assert!(build_language_specs(&cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn generated_corpus_reloads_identically() {
    let cfg = CorpusConfig {
        train_total: 30,
        eval_per_lang: 2,
        ..CorpusConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&cfg, a.path()).unwrap();
    generate(&cfg, b.path()).unwrap();
    for name in ["corpus.json", "train.jsonl", "train.audio", "test.video"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let corpus = Corpus::open(a.path()).unwrap();
    let specs = build_language_specs(&cfg).unwrap();
    let direct = make_split(&specs, &cfg, "test").unwrap();
    let loaded = corpus.load_split("test").unwrap();
    assert_eq!(direct.len(), loaded.len());
    let vocab = cfg.vocab().unwrap();
    for ((id, u), l) in direct.iter().zip(&loaded) {
        assert_eq!(id, &l.record.utt_id);
        assert_eq!(u.audio, l.audio);
        assert_eq!(u.video, l.video);
        let ids: Vec<usize> = u.tokens.iter().map(|&k| vocab.content(k)).collect();
        assert_eq!(ids, l.record.tokens);
    }
}
