//! Decoding a split and summarizing per-language WER.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::mix;
use crate::decoder::BeamConfig;
use crate::error::{Error, Result};
use crate::losses::ctc::is_realizable;
use crate::metrics::{wer, ErrorCount};
use crate::model::AvsrModel;
use crate::scalar::Scalar;
use crate::train::Sample;

pub const THREADS_VAR: &str = "POLYAVSR_THREADS";

/// Worker count from `POLYAVSR_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub beam: BeamConfig,
    /// Audio SNR in dB; `None` decodes clean input.
    pub noise_snr: Option<f64>,
    pub noise_seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            noise_snr: None,
            noise_seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utt_id: String,
    pub lang_gt: String,
    pub lang_pred: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
    pub wer: f64,
    pub att_score: f64,
    pub ctc_score: f64,
    #[serde(skip)]
    pub hyp_tokens: Vec<usize>,
}

/// WER of one condition (clean or noisy) per language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub snr_db: Option<f64>,
    /// Corpus-level WER fraction per language.
    pub wer: Vec<f64>,
    /// Mean of the per-language WERs.
    pub avg_wer: f64,
    pub lang_acc: f64,
    pub utterances: Vec<usize>,
    /// References that cannot be aligned in their frame count.
    pub skipped: usize,
}

impl ConditionReport {
    pub fn average_consistent(&self) -> bool {
        let mean = self.wer.iter().sum::<f64>() / self.wer.len() as f64;
        (mean - self.avg_wer).abs() <= 1e-9
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub languages: Vec<String>,
    pub conditions: Vec<ConditionReport>,
}

impl MetricReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == name)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "WER (%)")?;
        for l in &self.languages {
            write!(f, "{l:>8}")?;
        }
        writeln!(f, "{:>8}{:>10}", "Avg", "LangAcc")?;
        for c in &self.conditions {
            let label = match c.snr_db {
                Some(snr) => format!("{} ({snr} dB)", c.condition),
                None => c.condition.clone(),
            };
            write!(f, "{label:<16}")?;
            for w in &c.wer {
                write!(f, "{:>8.2}", 100.0 * w)?;
            }
            writeln!(f, "{:>8.2}{:>10.2}", 100.0 * c.avg_wer, 100.0 * c.lang_acc)?;
        }
        Ok(())
    }
}

fn decode_one<F: Scalar>(model: &AvsrModel<F>, s: &Sample<F>, index: usize, opts: &EvalOptions) -> Result<DecodeRecord> {
    let noisy;
    let input = match opts.noise_snr {
        Some(snr) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.noise_seed, index as u64));
            noisy = s.with_noise(snr, &mut rng)?;
            &noisy
        }
        None => s,
    };
    let d = model.decode(&input.audio, &input.video, opts.beam, None)?;
    let vocab = model.vocab();
    Ok(DecodeRecord {
        utt_id: s.utt_id.clone(),
        lang_gt: format!("L{}", s.lang),
        lang_pred: d.lang_pred.code(),
        reference: vocab.decode(&s.tokens),
        hyp: vocab.decode(&d.hypothesis.tokens),
        wer: wer(&s.tokens, &d.hypothesis.tokens)?,
        att_score: d.hypothesis.att_score,
        ctc_score: d.hypothesis.ctc_score,
        hyp_tokens: d.hypothesis.tokens,
    })
}

/// Decodes every sample, in parallel over `opts.threads` workers; the output
/// order matches the input.
pub fn decode_all<F: Scalar>(model: &AvsrModel<F>, samples: &[Sample<F>], opts: &EvalOptions) -> Result<Vec<DecodeRecord>> {
    let threads = opts.threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return samples.iter().enumerate().map(|(i, s)| decode_one(model, s, i, opts)).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<DecodeRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, s)| decode_one(model, s, c * chunk + i, opts))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Per-language corpus-level WER and language accuracy of decoded records.
pub fn summarize<F: Scalar>(
    condition: &str,
    snr_db: Option<f64>,
    languages: usize,
    samples: &[Sample<F>],
    records: &[DecodeRecord],
) -> Result<ConditionReport> {
    let mut counts = vec![ErrorCount::default(); languages];
    let mut utterances = vec![0; languages];
    let mut correct = 0;
    let mut skipped = 0;
    for (s, r) in samples.iter().zip(records) {
        counts[s.lang].add(&s.tokens, &r.hyp_tokens);
        utterances[s.lang] += 1;
        correct += usize::from(r.lang_pred == r.lang_gt);
        skipped += usize::from(!is_realizable(s.video.len(), &s.tokens));
    }
    let wer = counts.iter().map(ErrorCount::wer).collect::<Result<Vec<_>>>()?;
    Ok(ConditionReport {
        condition: condition.to_string(),
        snr_db,
        avg_wer: wer.iter().sum::<f64>() / languages as f64,
        wer,
        lang_acc: correct as f64 / samples.len().max(1) as f64,
        utterances,
        skipped,
    })
}

/// Clean evaluation, plus a noisy one when `opts.noise_snr` is set.
pub fn evaluate<F: Scalar>(
    model: &AvsrModel<F>,
    samples: &[Sample<F>],
    opts: &EvalOptions,
) -> Result<(MetricReport, Vec<DecodeRecord>)> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("evaluation split is empty".into()));
    }
    let m = model.config.languages;
    let clean_opts = EvalOptions {
        noise_snr: None,
        ..*opts
    };
    let clean = decode_all(model, samples, &clean_opts)?;
    let mut conditions = vec![summarize("clean", None, m, samples, &clean)?];
    let mut records = clean;
    if let Some(snr) = opts.noise_snr {
        let noisy = decode_all(model, samples, opts)?;
        conditions.push(summarize("noisy", Some(snr), m, samples, &noisy)?);
        records = noisy;
    }
    let report = MetricReport {
        languages: (0..m).map(|l| format!("L{l}")).collect(),
        conditions,
    };
    Ok((report, records))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
