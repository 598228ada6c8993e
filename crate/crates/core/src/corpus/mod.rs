//! Deterministic synthetic multilingual audio-visual corpus.
//!
//! Each language owns a token subset, a bigram table over it and fixed
//! audio/video emission patterns per token. Utterances concatenate the
//! patterns of a sampled token sequence with small Gaussian jitter.

mod blob;
mod manifest;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontends::FrameGeom;
use crate::vocab::Vocab;

pub use blob::{read_record, BlobReader, BlobWriter, AUDIO_MAGIC, BLOB_VERSION, VIDEO_MAGIC};
pub use manifest::{generate, inspect, Corpus, CorpusMeta, LoadedUtterance, SplitInfo, SplitStats, UttRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub languages: usize,
    pub vocab_per_lang: usize,
    /// Token subsets are pairwise disjoint when set.
    pub disjoint_vocab: bool,
    /// Fraction of each language's tokens drawn from a pool shared by all
    /// languages when `disjoint_vocab` is off.
    pub overlap_fraction: f64,
    /// Upper bound on the number of distinct content tokens.
    pub max_content_tokens: usize,
    pub frames_per_token: usize,
    pub audio_downsample: usize,
    pub frame: FrameGeom,
    pub len_range: [usize; 2],
    pub jitter: f64,
    pub train_total: usize,
    pub ratios: Vec<f64>,
    /// Utterances per language in each of valid and test.
    pub eval_per_lang: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            languages: 3,
            vocab_per_lang: 10,
            disjoint_vocab: true,
            overlap_fraction: 0.0,
            max_content_tokens: 256,
            frames_per_token: 4,
            audio_downsample: 4,
            frame: FrameGeom {
                height: 8,
                width: 8,
                channels: 1,
            },
            len_range: [2, 4],
            jitter: 0.05,
            train_total: 600,
            ratios: vec![1.0 / 3.0; 3],
            eval_per_lang: 40,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.languages < 2 {
            return bad(format!("need at least 2 languages, got {}", self.languages));
        }
        if self.vocab_per_lang == 0 || self.frames_per_token == 0 || self.audio_downsample == 0 {
            return bad("vocab size, frames per token and downsample must be positive".into());
        }
        if self.len_range[0] < 1 || self.len_range[0] > self.len_range[1] {
            return bad(format!("invalid length range {:?}", self.len_range));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) || self.jitter < 0.0 {
            return bad("overlap fraction must be in [0,1] and jitter non-negative".into());
        }
        check_ratios(&self.ratios, self.languages)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Ok(Vocab::new(self.languages, self.content_tokens()?))
    }

    fn shared_tokens(&self) -> usize {
        if self.disjoint_vocab {
            0
        } else {
            (self.overlap_fraction * self.vocab_per_lang as f64).round() as usize
        }
    }

    pub fn content_tokens(&self) -> Result<usize> {
        let s = self.shared_tokens();
        let total = s + self.languages * (self.vocab_per_lang - s);
        if total > self.max_content_tokens {
            return Err(Error::Capacity(format!(
                "{total} content tokens exceed the configured maximum {}",
                self.max_content_tokens
            )));
        }
        Ok(total)
    }
}

fn check_ratios(ratios: &[f64], m: usize) -> Result<()> {
    if ratios.len() != m {
        return Err(Error::Config(format!("{} ratios for {m} languages", ratios.len())));
    }
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r.is_nan() || r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("ratios must be non-negative and sum to 1, got {sum}")));
    }
    Ok(())
}

/// SplitMix64 combination of two words, used to derive independent streams.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub id: usize,
    /// Content token indices (0-based, before the vocabulary offset).
    pub tokens: Vec<usize>,
    pub initial: Vec<f64>,
    /// `transitions[i][j]` = P(next = tokens[j] | current = tokens[i]).
    pub transitions: Vec<Vec<f64>>,
    /// Per token, `k_a · f` samples.
    pub audio: Vec<Vec<f32>>,
    /// Per token, `f` frames of `H×W×C`.
    pub video: Vec<Vec<f32>>,
}

/// Token patterns depend only on `(seed, token)`, so tokens shared between
/// languages look and sound the same in each.
fn token_patterns(cfg: &CorpusConfig, token: usize) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, 0x70a7), token as u64));
    let samples = cfg.audio_downsample * cfg.frames_per_token;
    let freq: f64 = rng.random_range(0.05..0.45);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.random_range(0.5..1.5);
    let audio = (0..samples)
        .map(|i| {
            let n: f64 = rng.sample(StandardNormal);
            (amp * (std::f64::consts::TAU * freq * i as f64 + phase).sin() + 0.5 * n) as f32
        })
        .collect();
    let pixels = cfg.frames_per_token * cfg.frame.pixels();
    let video = (0..pixels).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    (audio, video)
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| (1.5 * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn build_language_specs(cfg: &CorpusConfig) -> Result<Vec<LanguageSpec>> {
    cfg.validate()?;
    cfg.content_tokens()?;
    let shared = cfg.shared_tokens();
    let own = cfg.vocab_per_lang - shared;
    (0..cfg.languages)
        .map(|lang| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, 0x1a46), lang as u64));
            let tokens: Vec<usize> = (0..shared).chain((0..own).map(|k| shared + lang * own + k)).collect();
            let v = tokens.len();
            let initial = vec![1.0 / v as f64; v];
            let transitions = (0..v).map(|_| random_distribution(&mut rng, v)).collect();
            let (audio, video) = tokens.iter().map(|&t| token_patterns(cfg, t)).unzip();
            Ok(LanguageSpec {
                id: lang,
                tokens,
                initial,
                transitions,
                audio,
                video,
            })
        })
        .collect()
}

/// One generated utterance; token ids are content indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub lang: usize,
    pub tokens: Vec<usize>,
    pub audio: Vec<f32>,
    /// `L×H×W×C`, `L = f · |tokens|`.
    pub video: Vec<f32>,
    pub frames: usize,
}

fn draw(rng: &mut impl Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn jittered<R: Rng + ?Sized>(x: f32, std: f64, rng: &mut R) -> f32 {
    if std == 0.0 {
        x
    } else {
        x + (std * rng.sample::<f64, _>(StandardNormal)) as f32
    }
}

pub fn sample_utterance(spec: &LanguageSpec, cfg: &CorpusConfig, rng: &mut impl Rng) -> Utterance {
    let count = rng.random_range(cfg.len_range[0]..=cfg.len_range[1]);
    let mut idx = Vec::with_capacity(count);
    let mut cur = draw(rng, &spec.initial);
    idx.push(cur);
    while idx.len() < count {
        cur = draw(rng, &spec.transitions[cur]);
        idx.push(cur);
    }
    let mut audio = Vec::new();
    let mut video = Vec::new();
    for &i in &idx {
        audio.extend(spec.audio[i].iter().map(|&x| jittered(x, cfg.jitter, rng)));
        video.extend(spec.video[i].iter().map(|&x| jittered(x, cfg.jitter, rng)));
    }
    Utterance {
        lang: spec.id,
        tokens: idx.iter().map(|&i| spec.tokens[i]).collect(),
        audio,
        video,
        frames: count * cfg.frames_per_token,
    }
}

/// Adds Gaussian noise scaled so the realized signal-to-noise ratio is
/// exactly `snr_db`. `+inf` returns the input unchanged.
pub fn inject_noise(samples: &[f32], snr_db: f64, rng: &mut impl Rng) -> Result<Vec<f32>> {
    if snr_db == f64::INFINITY {
        return Ok(samples.to_vec());
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    let power = mean_power(samples);
    if power == 0.0 || samples.is_empty() {
        return Err(Error::DegenerateSignal);
    }
    let noise: Vec<f64> = (0..samples.len()).map(|_| rng.sample(StandardNormal)).collect();
    let noise_power = noise.iter().map(|x| x * x).sum::<f64>() / noise.len() as f64;
    let scale = (power / 10f64.powf(snr_db / 10.0) / noise_power).sqrt();
    Ok(samples
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| (f64::from(s) + scale * n) as f32)
        .collect())
}

pub fn mean_power(samples: &[f32]) -> f64 {
    samples.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>() / samples.len().max(1) as f64
}

/// Largest-remainder apportionment of `total` by `ratios`.
pub fn apportion(total: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Language of every utterance in a split, in order.
pub fn split_languages(cfg: &CorpusConfig, split: &str) -> Result<Vec<usize>> {
    match split {
        "train" => {
            check_ratios(&cfg.ratios, cfg.languages)?;
            let counts = apportion(cfg.train_total, &cfg.ratios);
            let mut langs: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(l, &c)| std::iter::repeat_n(l, c))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5b1f));
            langs.shuffle(&mut rng);
            Ok(langs)
        }
        "valid" | "test" => Ok((0..cfg.eval_per_lang * cfg.languages).map(|i| i % cfg.languages).collect()),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

pub fn utt_id(split: &str, index: usize) -> String {
    format!("{split}-{index:06}")
}

/// Random stream of one utterance, independent of generation order.
pub fn utterance_rng(seed: u64, split: &str, index: usize) -> ChaCha8Rng {
    let tag = SPLITS.iter().position(|s| *s == split).unwrap_or(SPLITS.len()) as u64;
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed, 0x0de5), tag + 1), index as u64))
}

/// Generates a whole split in memory.
pub fn make_split(specs: &[LanguageSpec], cfg: &CorpusConfig, split: &str) -> Result<Vec<(String, Utterance)>> {
    let langs = split_languages(cfg, split)?;
    Ok(langs
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut rng = utterance_rng(cfg.seed, split, i);
            (utt_id(split, i), sample_utterance(&specs[l], cfg, &mut rng))
        })
        .collect())
}

/// Unigram-lookup language identification: the language owning the most
/// of the utterance's tokens, ties to the lowest id.
pub fn unigram_language(specs: &[LanguageSpec], tokens: &[usize]) -> usize {
    let sets: Vec<BTreeSet<usize>> = specs.iter().map(|s| s.tokens.iter().copied().collect()).collect();
    let mut best = (0, 0);
    for (l, set) in sets.iter().enumerate() {
        let hits = tokens.iter().filter(|t| set.contains(t)).count();
        if hits > best.1 {
            best = (l, hits);
        }
    }
    best.0
}
