//! End-to-end training under the balanced joint objective.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::checkpoint;
use crate::classifier::{class_loss_node, predict_language};
use crate::corpus::{inject_noise, mix, Corpus, LoadedUtterance};
use crate::decoder::{attention_loss_node, teacher_forcing, BeamConfig};
use crate::error::{Error, Result};
use crate::frontends::{AudioSeq, FrameGeom, VideoSeq};
use crate::losses::ctc::is_realizable;
use crate::losses::{balance_weights, LossBreakdown, ObjectiveWeights};
use crate::model::{AvsrModel, AvsrNet, ModelConfig, BACKBONE, CLASSIFIER, PROMPTS};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::vocab::BLANK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Architecture sizes not fixed by the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d: usize,
    pub prompts: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub audio_channels: usize,
    pub visual_channels: [usize; 2],
}

impl Default for ModelDims {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d: m.d,
            prompts: m.prompts,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            audio_channels: m.audio_channels,
            visual_channels: m.visual_channels,
        }
    }
}

/// Additive training noise: with probability `prob`, audio is corrupted at
/// an SNR drawn uniformly from `snr_db`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub prob: f64,
    pub snr_db: [f64; 2],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            prob: 0.0,
            snr_db: [0.0, 20.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelDims,
    pub alpha: f64,
    pub beta: f64,
    /// CTC weight during joint decoding.
    pub ctc_weight: f64,
    pub beam: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Fraction of `steps` with a linear learning-rate ramp.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Keeps frontend and encoder weights fixed.
    pub freeze_backbone: bool,
    /// Initial steps that train only prompts and classifier on the
    /// classification loss.
    pub classifier_warmup_steps: usize,
    pub balance_enabled: bool,
    pub noise: NoiseConfig,
    pub precision: Precision,
    pub log_every: usize,
    /// Intermediate checkpoint interval; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = ObjectiveWeights::default();
        Self {
            corpus: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            model: ModelDims::default(),
            alpha: w.alpha,
            beta: w.beta,
            ctc_weight: 0.1,
            beam: 4,
            max_len: 12,
            batch_size: 8,
            steps: 2000,
            lr: AdamConfig::default().lr,
            warmup_fraction: 0.05,
            seed: 0,
            freeze_backbone: false,
            classifier_warmup_steps: 0,
            balance_enabled: true,
            noise: NoiseConfig::default(),
            precision: Precision::F32,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            ctc_weight: self.ctc_weight,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("learning rate must be positive and warm-up fraction in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) || self.beam == 0 || self.max_len == 0 {
            return bad("decoding needs beam >= 1, max_len >= 1 and ctc weight in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.noise.prob) || self.noise.snr_db[0] > self.noise.snr_db[1] {
            return bad("noise probability must be in [0,1] with an ordered SNR range".into());
        }
        if self.log_every == 0 {
            return bad("log interval must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        let c = &corpus.meta.config;
        let m = &self.model;
        ModelConfig {
            languages: c.languages,
            content_tokens: corpus.meta.vocab.len() - corpus.meta.vocab.first_content(),
            d: m.d,
            prompts: m.prompts,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            audio_downsample: c.audio_downsample,
            audio_channels: m.audio_channels,
            frame: c.frame,
            visual_channels: m.visual_channels,
            seed: self.seed,
        }
    }

    /// Learning rate at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let ramp = (self.warmup_fraction * self.steps as f64).ceil() as usize;
        if ramp == 0 || step >= ramp {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / ramp as f64
        }
    }
}

/// One utterance ready for the network.
#[derive(Clone, Debug)]
pub struct Sample<F> {
    pub utt_id: String,
    pub lang: usize,
    pub tokens: Vec<usize>,
    pub audio: AudioSeq<F>,
    pub video: VideoSeq<F>,
}

impl<F: Scalar> Sample<F> {
    pub fn from_loaded(u: &LoadedUtterance, geom: FrameGeom) -> Result<Self> {
        Ok(Self {
            utt_id: u.record.utt_id.clone(),
            lang: u.record.lang,
            tokens: u.record.tokens.clone(),
            audio: AudioSeq::from_samples(&u.audio),
            video: VideoSeq::from_frames(u.record.frames, geom, &u.video)?,
        })
    }

    /// The same sample with its audio corrupted at `snr_db`.
    pub fn with_noise(&self, snr_db: f64, rng: &mut impl Rng) -> Result<Self> {
        let clean: Vec<f32> = self.audio.samples.data().iter().map(|x| x.f64() as f32).collect();
        let noisy = inject_noise(&clean, snr_db, rng)?;
        Ok(Self {
            audio: AudioSeq::from_samples(&noisy),
            ..self.clone()
        })
    }
}

pub fn load_samples<F: Scalar>(corpus: &Corpus, split: &str) -> Result<Vec<Sample<F>>> {
    let geom = corpus.meta.config.frame;
    corpus
        .load_split(split)?
        .iter()
        .map(|u| Sample::from_loaded(u, geom))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Only the classification term.
    Classifier,
    /// All three terms.
    Joint,
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveOptions {
    pub weights: ObjectiveWeights,
    pub balance: bool,
    pub phase: Phase,
}

/// Batch loss node and its per-sample parts.
#[derive(Clone, Debug)]
pub struct BatchObjective {
    pub loss: NodeId,
    pub parts: Vec<LossBreakdown>,
    pub correct: usize,
    /// Samples whose transcript cannot be aligned in their frame count.
    pub skipped: Vec<String>,
}

/// Mean over the batch of `γ_i · (α·ctc_i + (1−α)·att_i + β·cls_i)`.
pub fn batch_objective<F: Scalar>(
    net: &AvsrNet,
    g: &mut Graph<'_, F>,
    batch: &[&Sample<F>],
    opts: ObjectiveOptions,
) -> Result<BatchObjective> {
    let w = opts.weights;
    w.validate()?;
    let mut skipped = Vec::new();
    let kept: Vec<&Sample<F>> = batch
        .iter()
        .copied()
        .filter(|s| {
            let frames = s.video.len();
            let ok = opts.phase == Phase::Classifier || is_realizable(frames, &s.tokens);
            if !ok {
                skipped.push(s.utt_id.clone());
            }
            ok
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Contract("batch has no trainable samples".into()));
    }
    let gammas = if opts.balance {
        balance_weights(&kept.iter().map(|s| s.lang).collect::<Vec<_>>())?
    } else {
        vec![1.0; kept.len()]
    };
    let embeddings = kept
        .iter()
        .map(|s| net.encode(g, &s.audio, &s.video))
        .collect::<Result<Vec<_>>>()?;
    let logits = net.classifier.classify_batch(g, &embeddings)?;
    let b = kept.len() as f64;
    let mut terms = Vec::new();
    let mut parts = Vec::new();
    let mut correct = 0;
    for (i, s) in kept.iter().enumerate() {
        if predict_language(g.value(logits[i]).data()).id == s.lang {
            correct += 1;
        }
        let cls = class_loss_node(g, logits[i], s.lang)?;
        let gamma = gammas[i];
        let (ctc_v, att_v) = match opts.phase {
            Phase::Classifier => (0.0, 0.0),
            Phase::Joint => {
                let e = &embeddings[i];
                let ctc_logits = net.ctc_logits(g, e)?;
                let ctc = g.ctc_loss(ctc_logits, &s.tokens, BLANK)?;
                let (input, target) = teacher_forcing(&net.vocab, s.lang, &s.tokens);
                let lp = net.decoder_log_probs(g, &input, e)?;
                let att = attention_loss_node(g, lp, &target)?;
                terms.push((ctc, F::of(gamma * w.alpha / b)));
                terms.push((att, F::of(gamma * (1.0 - w.alpha) / b)));
                (g.value(ctc).item().f64(), g.value(att).item().f64())
            }
        };
        terms.push((cls, F::of(gamma * w.beta / b)));
        let cls_v = g.value(cls).item().f64();
        let part = match opts.phase {
            Phase::Joint => LossBreakdown::new(ctc_v, att_v, cls_v, gamma, w)?,
            Phase::Classifier => LossBreakdown {
                ctc: 0.0,
                att: 0.0,
                cls: cls_v,
                gamma,
                total: gamma * w.beta * cls_v,
            },
        };
        parts.push(part);
    }
    let loss = g.weighted_sum(&terms)?;
    Ok(BatchObjective {
        loss,
        parts,
        correct,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_ctc: f64,
    pub loss_att: f64,
    pub loss_cls: f64,
    pub lang_acc: f64,
    pub lr: f64,
    /// Samples skipped so far because their CTC loss is infinite.
    pub skipped: usize,
}

/// Optimizer state and data for one run.
pub struct Trainer<F> {
    pub config: RunConfig,
    pub model: AvsrModel<F>,
    pub optimizer: OptimizerState<F>,
    pub train: Vec<Sample<F>>,
    pub step: usize,
    pub skipped: usize,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(config: RunConfig, model: AvsrModel<F>, train: Vec<Sample<F>>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let optimizer = OptimizerState::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        let rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xba7c));
        Ok(Self {
            config,
            model,
            optimizer,
            train,
            step: 0,
            skipped: 0,
            rng,
        })
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.config.classifier_warmup_steps {
            Phase::Classifier
        } else {
            Phase::Joint
        }
    }

    /// Parameters the optimizer updates at the current step.
    pub fn trainable(&self) -> Vec<ParamId> {
        let all = self.model.store.weights();
        let keep = |prefixes: &[&str]| -> Vec<ParamId> {
            let chosen = self.model.store.weights_with_prefix(prefixes);
            all.iter().copied().filter(|p| chosen.contains(p)).collect()
        };
        match self.phase() {
            Phase::Classifier => keep(&[PROMPTS, CLASSIFIER].concat()),
            Phase::Joint if self.config.freeze_backbone => {
                let frozen = self.model.store.weights_with_prefix(BACKBONE);
                all.into_iter().filter(|p| !frozen.contains(p)).collect()
            }
            Phase::Joint => all,
        }
    }

    fn draw_batch(&mut self) -> Result<Vec<Sample<F>>> {
        let n = self.train.len();
        let k = self.config.batch_size.min(n);
        let idx = sample(&mut self.rng, n, k).into_vec();
        let noise = self.config.noise.clone();
        idx.into_iter()
            .map(|i| {
                let s = &self.train[i];
                if noise.prob > 0.0 && self.rng.random::<f64>() < noise.prob {
                    let snr = self.rng.random_range(noise.snr_db[0]..=noise.snr_db[1]);
                    s.with_noise(snr, &mut self.rng)
                } else {
                    Ok(s.clone())
                }
            })
            .collect()
    }

    /// One optimizer step; returns the batch's logged values.
    pub fn step_once(&mut self) -> Result<MetricRecord> {
        let batch = self.draw_batch()?;
        let opts = ObjectiveOptions {
            weights: self.config.weights(),
            balance: self.config.balance_enabled,
            phase: self.phase(),
        };
        let params = self.trainable();
        let lr = self.config.lr_at(self.step);
        let refs: Vec<&Sample<F>> = batch.iter().collect();
        let (record, outputs) = {
            let mut g = Graph::with_params(&self.model.store, true);
            let obj = batch_objective(&self.model.net, &mut g, &refs, opts)?;
            let total = g.value(obj.loss).item().f64();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    utt_ids: batch.iter().map(|s| s.utt_id.clone()).collect(),
                });
            }
            g.backward(obj.loss)?;
            self.skipped += obj.skipped.len();
            let n = obj.parts.len() as f64;
            let mean = |f: fn(&LossBreakdown) -> f64| obj.parts.iter().map(f).sum::<f64>() / n;
            let record = MetricRecord {
                step: self.step + 1,
                loss_total: total,
                loss_ctc: mean(|p| p.ctc),
                loss_att: mean(|p| p.att),
                loss_cls: mean(|p| p.cls),
                lang_acc: obj.correct as f64 / n,
                lr,
                skipped: self.skipped,
            };
            (record, g.into_outputs())
        };
        self.model.store.zero_grad();
        outputs.apply(&mut self.model.store)?;
        self.optimizer.step(&mut self.model.store, &params, lr)?;
        self.step += 1;
        Ok(record)
    }
}

/// Checkpoint path for a step, or the final one.
pub fn checkpoint_path(out_dir: &Path, step: Option<usize>) -> PathBuf {
    match step {
        Some(s) => out_dir.join(format!("step-{s:06}.ckpt")),
        None => out_dir.join("final.ckpt"),
    }
}

pub struct TrainOutcome<F> {
    pub model: AvsrModel<F>,
    pub metrics: Vec<MetricRecord>,
    pub final_checkpoint: PathBuf,
    pub skipped: usize,
}

/// Runs `config.steps` steps, writing `metrics.jsonl` and checkpoints under
/// `config.out_dir`.
pub fn train_model<F: Scalar>(config: &RunConfig) -> Result<TrainOutcome<F>> {
    config.validate()?;
    let corpus = Corpus::open(&config.corpus)?;
    let model = AvsrModel::<F>::new(config.model_config(&corpus))?;
    model.vocab().check_compatible(&corpus.meta.vocab)?;
    let train = load_samples::<F>(&corpus, "train")?;
    let mut trainer = Trainer::new(config.clone(), model, train)?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut metrics = Vec::new();
    while trainer.step < config.steps {
        let record = trainer.step_once()?;
        if trainer.step % config.log_every == 0 || trainer.step == config.steps {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            log.write_all(&line).map_err(|e| Error::io(&log_path, e))?;
            metrics.push(record);
        }
        if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 {
            checkpoint::save(&checkpoint_path(out, Some(trainer.step)), &trainer.model, trainer.step)?;
        }
    }
    let final_checkpoint = checkpoint_path(out, None);
    checkpoint::save(&final_checkpoint, &trainer.model, trainer.step)?;
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        final_checkpoint,
        skipped: trainer.skipped,
    })
}

/// Runs training at the configured precision; returns the metric log and
/// final checkpoint path.
pub fn train(config: &RunConfig) -> Result<(Vec<MetricRecord>, PathBuf)> {
    match config.precision {
        Precision::F32 => train_model::<f32>(config).map(|o| (o.metrics, o.final_checkpoint)),
        Precision::F64 => train_model::<f64>(config).map(|o| (o.metrics, o.final_checkpoint)),
    }
}
