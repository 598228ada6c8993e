//! On-disk corpus layout: `corpus.json` metadata plus, per split, a JSON
//! Lines manifest and audio/video blob files.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blob::{BlobReader, BlobWriter, AUDIO_MAGIC, VIDEO_MAGIC};
use super::{build_language_specs, make_split, mix, CorpusConfig, SPLITS};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttRecord {
    pub utt_id: String,
    pub lang: usize,
    /// Vocabulary ids of the transcript.
    pub tokens: Vec<usize>,
    pub frames: usize,
    pub audio_offset: u64,
    pub video_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub count: usize,
    pub per_language: Vec<usize>,
    /// Sampling ratios for imbalanced splits; `None` for balanced ones.
    pub ratios: Option<Vec<f64>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub splits: Vec<SplitInfo>,
}

/// Writes all splits under `dir` and returns the metadata.
pub fn generate(cfg: &CorpusConfig, dir: &Path) -> Result<CorpusMeta> {
    let specs = build_language_specs(cfg)?;
    let vocab = cfg.vocab()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = Vec::new();
    for split in SPLITS {
        let utts = make_split(&specs, cfg, split)?;
        let mut audio = BlobWriter::new(AUDIO_MAGIC);
        let mut video = BlobWriter::new(VIDEO_MAGIC);
        let mut lines = Vec::new();
        let mut per_language = vec![0; cfg.languages];
        for (utt_id, u) in &utts {
            per_language[u.lang] += 1;
            let g = cfg.frame;
            let record = UttRecord {
                utt_id: utt_id.clone(),
                lang: u.lang,
                tokens: u.tokens.iter().map(|&t| vocab.content(t)).collect(),
                frames: u.frames,
                audio_offset: audio.push(&[u.audio.len()], &u.audio),
                video_offset: video.push(&[u.frames, g.height, g.width, g.channels], &u.video),
            };
            serde_json::to_writer(&mut lines, &record)?;
            lines.push(b'\n');
        }
        let path = dir.join(format!("{split}.jsonl"));
        fs::write(&path, &lines).map_err(|e| Error::io(&path, e))?;
        audio.write(&dir.join(format!("{split}.audio")))?;
        video.write(&dir.join(format!("{split}.video")))?;
        splits.push(SplitInfo {
            name: split.to_string(),
            count: utts.len(),
            per_language,
            ratios: (split == "train").then(|| cfg.ratios.clone()),
            seed: mix(cfg.seed, SPLITS.iter().position(|s| *s == split).unwrap_or(0) as u64 + 1),
        });
    }
    let meta = CorpusMeta {
        format_version: CORPUS_FORMAT_VERSION,
        config: cfg.clone(),
        vocab,
        splits,
    };
    let path = dir.join("corpus.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

/// Utterance with its decoded payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedUtterance {
    pub record: UttRecord,
    pub audio: Vec<f32>,
    pub video: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub meta: CorpusMeta,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CorpusMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if meta.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::Format {
                path,
                detail: format!("unsupported corpus format version {}", meta.format_version),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn records(&self, split: &str) -> Result<Vec<UttRecord>> {
        let path = self.dir.join(format!("{split}.jsonl"));
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.clone(),
                detail: format!("line {}: {e}", i + 1),
            })?);
        }
        Ok(out)
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<LoadedUtterance>> {
        let records = self.records(split)?;
        let audio = BlobReader::open(&self.dir.join(format!("{split}.audio")), AUDIO_MAGIC)?;
        let video = BlobReader::open(&self.dir.join(format!("{split}.video")), VIDEO_MAGIC)?;
        let k = self.meta.config.audio_downsample;
        records
            .into_iter()
            .map(|record| {
                let (a_shape, a) = audio.record(record.audio_offset)?;
                let (v_shape, v) = video.record(record.video_offset)?;
                if a_shape != [k * record.frames] || v_shape.first() != Some(&record.frames) {
                    return Err(Error::Alignment(format!(
                        "{}: audio {:?} / video {:?} do not match {} frames",
                        record.utt_id, a_shape, v_shape, record.frames
                    )));
                }
                Ok(LoadedUtterance {
                    record,
                    audio: a,
                    video: v,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LanguageStats {
    pub lang: usize,
    pub count: usize,
    pub frames_min: usize,
    pub frames_mean: f64,
    pub frames_max: usize,
    pub tokens_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: String,
    pub languages: Vec<LanguageStats>,
}

/// Per-language counts and duration statistics of every split.
pub fn inspect(corpus: &Corpus) -> Result<Vec<SplitStats>> {
    let m = corpus.meta.config.languages;
    corpus
        .meta
        .splits
        .iter()
        .map(|info| {
            let records = corpus.records(&info.name)?;
            let languages = (0..m)
                .map(|lang| {
                    let rs: Vec<&UttRecord> = records.iter().filter(|r| r.lang == lang).collect();
                    let n = rs.len().max(1) as f64;
                    LanguageStats {
                        lang,
                        count: rs.len(),
                        frames_min: rs.iter().map(|r| r.frames).min().unwrap_or(0),
                        frames_mean: rs.iter().map(|r| r.frames).sum::<usize>() as f64 / n,
                        frames_max: rs.iter().map(|r| r.frames).max().unwrap_or(0),
                        tokens_mean: rs.iter().map(|r| r.tokens.len()).sum::<usize>() as f64 / n,
                    }
                })
                .collect();
            Ok(SplitStats {
                split: info.name.clone(),
                languages,
            })
        })
        .collect()
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.split)?;
        writeln!(
            f,
            "{:<6}{:>7}{:>8}{:>9}{:>8}{:>9}",
            "lang", "count", "min", "mean", "max", "tokens"
        )?;
        for l in &self.languages {
            writeln!(
                f,
                "{:<6}{:>7}{:>8}{:>9.2}{:>8}{:>9.2}",
                format!("L{}", l.lang),
                l.count,
                l.frames_min,
                l.frames_mean,
                l.frames_max,
                l.tokens_mean
            )?;
        }
        Ok(())
    }
}
