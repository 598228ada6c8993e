//! The full audio-visual recognizer: frontends, prompted encoder, language
//! classifier, CTC head and language-conditioned decoder.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::classifier::{predict_language, LangClassifier, LanguageLabel};
use crate::decoder::{beam_decode, greedy_decode, BeamConfig, Decoder, DecoderConfig, Hypothesis};
use crate::encoder::{init_prompt_bank, EncoderConfig, PromptBank, PromptEmbedding, PromptEncoder};
use crate::error::{Error, Result};
use crate::frontends::{AudioFront, AudioSeq, FrameGeom, FrontendConfig, Fusion, VideoSeq, VisualFront};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub languages: usize,
    /// Content tokens across all languages.
    pub content_tokens: usize,
    pub d: usize,
    /// Prompt rows per encoder layer (`n`).
    pub prompts: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub audio_downsample: usize,
    pub audio_channels: usize,
    pub frame: FrameGeom,
    pub visual_channels: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            languages: 3,
            content_tokens: 30,
            d: 32,
            prompts: 4,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_mult: 4,
            audio_downsample: 4,
            audio_channels: 16,
            frame: FrameGeom {
                height: 8,
                width: 8,
                channels: 1,
            },
            visual_channels: [4, 8],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.languages < 1 || self.content_tokens < 1 {
            return bad("model needs at least one language and one content token".into());
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("width {} must be a positive multiple of heads {}", self.d, self.heads));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.audio_downsample == 0 || self.ffn_mult == 0 || self.audio_channels == 0 {
            return bad("downsample, ffn multiplier and audio channels must be positive".into());
        }
        if self.visual_channels.contains(&0) || self.frame.channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.languages, self.content_tokens)
    }

    fn frontend(&self) -> FrontendConfig {
        FrontendConfig {
            d: self.d,
            audio_downsample: self.audio_downsample,
            audio_channels: self.audio_channels,
            frame: self.frame,
            visual_channels: self.visual_channels,
        }
    }
}

/// Parameter layout of the network; values live in a separate store so a
/// caller can borrow both independently.
#[derive(Clone, Debug)]
pub struct AvsrNet {
    pub vocab: Vocab,
    pub audio: AudioFront,
    pub visual: VisualFront,
    pub fusion: Fusion,
    pub encoder: PromptEncoder,
    pub bank: PromptBank,
    pub classifier: LangClassifier,
    pub ctc_head: Linear,
    pub decoder: Decoder,
}

/// Parameter groups by name prefix.
pub const BACKBONE: &[&str] = &["frontend.", "encoder."];
pub const PROMPTS: &[&str] = &["prompts."];
pub const CLASSIFIER: &[&str] = &["classifier."];

impl AvsrNet {
    /// Raw inputs to `e_av`.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        audio: &AudioSeq<F>,
        video: &VideoSeq<F>,
    ) -> Result<PromptEmbedding> {
        let x_a = g.constant(audio.samples.clone());
        let x_v = g.constant(video.frames.clone());
        let f_a = self.audio.forward(g, x_a)?;
        let f_v = self.visual.forward(g, x_v)?;
        let f_av = self.fusion.forward(g, f_a, f_v)?;
        self.encoder.encode_with_prompts(g, f_av, &self.bank)
    }

    /// `T×V` CTC logits from the feature rows of `e_av`.
    pub fn ctc_logits<F: Scalar>(&self, g: &mut Graph<'_, F>, e: &PromptEmbedding) -> Result<NodeId> {
        let feats = g.slice(e.values, 0, e.prompts, e.frames)?;
        self.ctc_head.forward(g, feats)
    }

    pub fn decoder_log_probs<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        prefix: &[usize],
        e: &PromptEmbedding,
    ) -> Result<NodeId> {
        self.decoder.forward(g, prefix, e.values)
    }
}

#[derive(Clone, Debug)]
pub struct AvsrModel<F> {
    pub config: ModelConfig,
    pub net: AvsrNet,
    pub store: ParamStore<F>,
}

/// Result of decoding one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub lang_pred: LanguageLabel,
    pub lang_logits: Vec<f64>,
    pub hypothesis: Hypothesis,
}

impl<F: Scalar> AvsrModel<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let vocab = config.vocab();
        let net = Self::layout(&config, &vocab, &mut store)?;
        Ok(Self { config, net, store })
    }

    fn layout(config: &ModelConfig, vocab: &Vocab, store: &mut ParamStore<F>) -> Result<AvsrNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fe = config.frontend();
        let audio = AudioFront::new(store, &fe, &mut rng);
        let visual = VisualFront::new(store, &fe, &mut rng);
        let fusion = Fusion::new(store, config.d, &mut rng);
        let enc_cfg = EncoderConfig {
            d: config.d,
            heads: config.heads,
            layers: config.enc_layers,
            ffn_mult: config.ffn_mult,
        };
        let encoder = PromptEncoder::new(store, &enc_cfg, &mut rng);
        let bank = init_prompt_bank(
            store,
            config.prompts,
            config.d,
            config.enc_layers,
            config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        )?;
        let classifier = LangClassifier::new(store, config.d, config.languages, &mut rng);
        let ctc_head = Linear::new(store, "ctc_head", config.d, vocab.len(), &mut rng);
        let dec_cfg = DecoderConfig {
            d: config.d,
            heads: config.heads,
            layers: config.dec_layers,
            ffn_mult: config.ffn_mult,
        };
        let decoder = Decoder::new(store, &dec_cfg, vocab, &mut rng);
        Ok(AvsrNet {
            vocab: vocab.clone(),
            audio,
            visual,
            fusion,
            encoder,
            bank,
            classifier,
            ctc_head,
            decoder,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.net.vocab
    }

    /// Same network in another precision.
    pub fn cast<G: Scalar>(&self) -> AvsrModel<G> {
        AvsrModel {
            config: self.config.clone(),
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    pub fn weights_in(&self, groups: &[&[&str]]) -> Vec<ParamId> {
        let prefixes: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
        self.store.weights_with_prefix(&prefixes)
    }

    /// Language prediction and joint CTC/attention decoding. With
    /// `forced_lang` the decoder is conditioned on that language instead of
    /// the classifier's prediction.
    pub fn decode(
        &self,
        audio: &AudioSeq<F>,
        video: &VideoSeq<F>,
        beam: BeamConfig,
        forced_lang: Option<usize>,
    ) -> Result<Decoded> {
        let (lang_logits, ctc_lp, mut scorer) = self.prepare(audio, video)?;
        let lang_pred = predict_language(&lang_logits);
        let lang = forced_lang.unwrap_or(lang_pred.id);
        let beam = BeamConfig {
            max_len: beam.max_len.min(ctc_lp.shape()[0]),
            ..beam
        };
        let hypothesis = beam_decode(&mut scorer, &ctc_lp, &self.net.vocab, lang, beam)?;
        Ok(Decoded {
            lang_pred,
            lang_logits,
            hypothesis,
        })
    }

    /// Classifier prediction alone.
    pub fn predict_language(&self, audio: &AudioSeq<F>, video: &VideoSeq<F>) -> Result<LanguageLabel> {
        let mut g = Graph::with_params(&self.store, false);
        let e = self.net.encode(&mut g, audio, video)?;
        let logits = self.net.classifier.classify(&mut g, &e)?;
        Ok(predict_language(g.value(logits).data()))
    }

    /// Greedy attention decoding conditioned on `lang`.
    pub fn greedy(&self, audio: &AudioSeq<F>, video: &VideoSeq<F>, lang: usize, max_len: usize) -> Result<Vec<usize>> {
        let (_, _, mut scorer) = self.prepare(audio, video)?;
        greedy_decode(&mut scorer, &self.net.vocab, lang, max_len)
    }

    /// Encoder pass shared by all decoding modes: language logits, CTC
    /// log-probabilities and a cached next-token scorer over `e_av`.
    pub fn prepare(
        &self,
        audio: &AudioSeq<F>,
        video: &VideoSeq<F>,
    ) -> Result<(Vec<f64>, Tensor<f64>, MemoryScorer<'_, F>)> {
        let mut g = Graph::with_params(&self.store, false);
        let e = self.net.encode(&mut g, audio, video)?;
        let logits = self.net.classifier.classify(&mut g, &e)?;
        let ctc = self.net.ctc_logits(&mut g, &e)?;
        let lang_logits = g.value(logits).data().iter().map(|x| x.f64()).collect();
        let ctc_lp = g.value(ctc).cast::<f64>().log_softmax();
        let memory = g.value(e.values).clone();
        Ok((
            lang_logits,
            ctc_lp,
            MemoryScorer {
                net: &self.net,
                store: &self.store,
                memory,
                cache: HashMap::new(),
            },
        ))
    }
}

/// Next-token scorer over fixed encoder memory, memoized per prefix.
pub struct MemoryScorer<'a, F> {
    net: &'a AvsrNet,
    store: &'a ParamStore<F>,
    memory: Tensor<F>,
    cache: HashMap<Vec<usize>, Vec<f64>>,
}

impl<F: Scalar> crate::decoder::NextTokenScorer for MemoryScorer<'_, F> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.get(prefix) {
            return Ok(v.clone());
        }
        let mut g = Graph::with_params(self.store, false);
        let mem = g.constant(self.memory.clone());
        let lp = self.net.decoder.forward(&mut g, prefix, mem)?;
        let row: Vec<f64> = g.value(lp).row(prefix.len() - 1).iter().map(|x| x.f64()).collect();
        self.cache.insert(prefix.to_vec(), row.clone());
        Ok(row)
    }
}
