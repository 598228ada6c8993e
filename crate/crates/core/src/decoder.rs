//! Language-conditioned transformer decoder and joint CTC/attention decoding.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, sinusoidal, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{log_add, Scalar};
use crate::tensor::Tensor;
use crate::vocab::{Vocab, BLANK, EOS, SOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    out: Linear,
    vocab: Vocab,
    d: usize,
}

impl Decoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &DecoderConfig,
        vocab: &Vocab,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d;
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("decoder.layer{i}");
                DecoderLayer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
                    norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d * cfg.ffn_mult, rng),
                }
            })
            .collect();
        Self {
            embed: store.add_randn("decoder.embed", &[vocab.len(), d], 0.5, rng),
            layers,
            final_norm: LayerNorm::new(store, "decoder.final_norm", d),
            out: Linear::new(store, "decoder.out", d, vocab.len(), rng),
            vocab: vocab.clone(),
            d,
        }
    }

    /// Per-position log-distributions (`|prefix|×V`) for a prefix that starts
    /// `<sos>, <lang_k>`, attending over every row of `memory`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, prefix: &[usize], memory: NodeId) -> Result<NodeId> {
        if prefix.len() < 2 || prefix[0] != SOS || self.vocab.lang_of_token(prefix[1]).is_none() {
            return Err(Error::Conditioning(format!(
                "decoder prefix must start with <sos> and a language token, got {:?}",
                &prefix[..prefix.len().min(2)]
            )));
        }
        if g.shape(memory)[1] != self.d {
            return Err(Error::dim(
                "decoder",
                format!("memory width {} vs decoder width {}", g.shape(memory)[1], self.d),
            ));
        }
        let n = prefix.len();
        let table = g.param(self.embed);
        let x = g.embedding(table, prefix)?;
        let pe = g.constant(sinusoidal(n, self.d));
        let mut x = g.add(x, pe)?;
        let mask = g.constant(causal_mask(n));
        for layer in &self.layers {
            let h = layer.norm1.forward(g, x)?;
            let a = layer.self_attn.forward(g, h, h, Some(mask))?;
            x = g.add(x, a)?;
            let h = layer.norm2.forward(g, x)?;
            let c = layer.cross_attn.forward(g, h, memory, None)?;
            x = g.add(x, c)?;
            let h = layer.norm3.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let h = self.final_norm.forward(g, x)?;
        let logits = self.out.forward(g, h)?;
        Ok(g.log_softmax(logits))
    }
}

/// Teacher-forcing input and targets for a transcript: input
/// `<sos> <lang> y1 … yN`, predictions read from rows `1..`, targets `y1 … yN <eos>`.
pub fn teacher_forcing(vocab: &Vocab, lang: usize, transcript: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vec![SOS, vocab.lang_token(lang)];
    input.extend_from_slice(transcript);
    let mut target = transcript.to_vec();
    target.push(EOS);
    (input, target)
}

/// Attention negative log-likelihood node from full decoder output.
pub fn attention_loss_node<F: Scalar>(g: &mut Graph<'_, F>, log_probs: NodeId, target: &[usize]) -> Result<NodeId> {
    let rows = g.shape(log_probs)[0];
    if rows != target.len() + 1 {
        return Err(Error::Alignment(format!(
            "decoder produced {rows} rows for {} targets",
            target.len()
        )));
    }
    let steps = g.slice(log_probs, 0, 1, target.len())?;
    let picked = g.pick_sum(steps, target)?;
    Ok(g.scale(picked, -F::one()))
}

/// Source of next-token log-probabilities for a decoding prefix
/// (`<sos> <lang> y1 … yk`).
pub trait NextTokenScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<T: FnMut(&[usize]) -> Result<Vec<f64>>> NextTokenScorer for T {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

fn argmax_over(lp: &[f64], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &c in allowed {
        if lp[c] > lp[best] || (lp[c] == lp[best] && c < best) {
            best = c;
        }
    }
    best
}

/// Appends the most likely emittable token until `<eos>` or `max_len` tokens.
pub fn greedy_decode(scorer: &mut impl NextTokenScorer, vocab: &Vocab, lang: usize, max_len: usize) -> Result<Vec<usize>> {
    let allowed = vocab.emittable();
    let mut prefix = vec![SOS, vocab.lang_token(lang)];
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = scorer.next_log_probs(&prefix)?;
        let best = argmax_over(&lp, &allowed);
        if best == EOS {
            break;
        }
        out.push(best);
        prefix.push(best);
    }
    Ok(out)
}

/// Prefix probabilities of label sequences under frame-wise CTC outputs.
///
/// For a prefix `g`, `r_n[t]`/`r_b[t]` are the log-probabilities of emitting
/// `g` in frames `0..=t` ending in a label / a blank. The prefix score of
/// `g + c` sums over the frame at which `c` is first emitted.
pub struct CtcPrefixScorer<'a> {
    log_probs: &'a Tensor<f64>,
    frames: usize,
}

#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<usize>,
    /// Log prefix probability of the sequence so far.
    pub score: f64,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(log_probs: &'a Tensor<f64>) -> Result<Self> {
        let (frames, _) = log_probs.dims2()?;
        if frames == 0 {
            return Err(Error::dim("ctc_prefix", "no frames"));
        }
        Ok(Self { log_probs, frames })
    }

    pub fn initial(&self) -> CtcPrefixState {
        let mut r_b = vec![0.0; self.frames];
        let mut acc = 0.0;
        for (t, r) in r_b.iter_mut().enumerate() {
            acc += self.log_probs.at(t, BLANK);
            *r = acc;
        }
        CtcPrefixState {
            r_n: vec![f64::NEG_INFINITY; self.frames],
            r_b,
            last: None,
            score: 0.0,
        }
    }

    pub fn extend(&self, state: &CtcPrefixState, c: usize) -> CtcPrefixState {
        let x = self.log_probs;
        let ninf = f64::NEG_INFINITY;
        let mut r_n = vec![ninf; self.frames];
        let mut r_b = vec![ninf; self.frames];
        if state.last.is_none() {
            r_n[0] = x.at(0, c);
        }
        let mut psi = r_n[0];
        for t in 1..self.frames {
            let prev = if state.last == Some(c) {
                state.r_b[t - 1]
            } else {
                log_add(state.r_b[t - 1], state.r_n[t - 1])
            };
            r_n[t] = log_add(r_n[t - 1], prev) + x.at(t, c);
            r_b[t] = log_add(r_b[t - 1], r_n[t - 1]) + x.at(t, BLANK);
            psi = log_add(psi, prev + x.at(t, c));
        }
        CtcPrefixState {
            r_n,
            r_b,
            last: Some(c),
            score: psi,
        }
    }

    /// Log-probability of exactly the sequence held by `state`.
    pub fn finish(&self, state: &CtcPrefixState) -> f64 {
        log_add(state.r_n[self.frames - 1], state.r_b[self.frames - 1])
    }

    pub fn sequence_log_prob(&self, tokens: &[usize]) -> f64 {
        let mut s = self.initial();
        for &c in tokens {
            s = self.extend(&s, c);
        }
        self.finish(&s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Content tokens (no specials).
    pub tokens: Vec<usize>,
    /// `λ·ctc_score + (1−λ)·att_score`.
    pub score: f64,
    pub att_score: f64,
    pub ctc_score: f64,
}

fn joint(lambda: f64, ctc: f64, att: f64) -> f64 {
    if lambda == 0.0 {
        att
    } else if lambda == 1.0 {
        ctc
    } else {
        lambda * ctc + (1.0 - lambda) * att
    }
}

/// Better-first ordering: higher joint score, then shorter, then smaller ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            ctc_weight: 0.1,
            max_len: 12,
        }
    }
}

/// Joint score of a complete sequence (the `<eos>` step included).
pub fn score_sequence(
    scorer: &mut impl NextTokenScorer,
    ctc: &CtcPrefixScorer<'_>,
    vocab: &Vocab,
    lang: usize,
    tokens: &[usize],
    ctc_weight: f64,
) -> Result<Hypothesis> {
    let mut prefix = vec![SOS, vocab.lang_token(lang)];
    let mut att = 0.0;
    for &c in tokens.iter().chain(std::iter::once(&EOS)) {
        att += scorer.next_log_probs(&prefix)?[c];
        prefix.push(c);
    }
    let ctc_score = ctc.sequence_log_prob(tokens);
    Ok(Hypothesis {
        tokens: tokens.to_vec(),
        score: joint(ctc_weight, ctc_score, att),
        att_score: att,
        ctc_score,
    })
}

/// Length-synchronous beam search over attention scores combined with CTC
/// prefix scores. The greedy attention hypothesis always competes for the
/// final answer, so the result never scores below it.
pub fn beam_decode(
    scorer: &mut impl NextTokenScorer,
    ctc_log_probs: &Tensor<f64>,
    vocab: &Vocab,
    lang: usize,
    cfg: BeamConfig,
) -> Result<Hypothesis> {
    if cfg.beam == 0 || !(0.0..=1.0).contains(&cfg.ctc_weight) {
        return Err(Error::Config(format!(
            "beam must be >= 1 and ctc weight in [0,1], got {} / {}",
            cfg.beam, cfg.ctc_weight
        )));
    }
    let ctc = CtcPrefixScorer::new(ctc_log_probs)?;
    let allowed = vocab.emittable();
    let lang_tok = vocab.lang_token(lang);

    struct Live {
        hyp: Hypothesis,
        state: CtcPrefixState,
    }
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            att_score: 0.0,
            ctc_score: 0.0,
        },
        state: ctc.initial(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..=cfg.max_len {
        let mut candidates: Vec<(Hypothesis, Option<CtcPrefixState>)> = Vec::new();
        for l in &live {
            let mut prefix = vec![SOS, lang_tok];
            prefix.extend_from_slice(&l.hyp.tokens);
            let lp = scorer.next_log_probs(&prefix)?;
            for &c in &allowed {
                let att = l.hyp.att_score + lp[c];
                if c == EOS {
                    let ctc_score = ctc.finish(&l.state);
                    candidates.push((
                        Hypothesis {
                            tokens: l.hyp.tokens.clone(),
                            score: joint(cfg.ctc_weight, ctc_score, att),
                            att_score: att,
                            ctc_score,
                        },
                        None,
                    ));
                } else if step < cfg.max_len {
                    let state = ctc.extend(&l.state, c);
                    let mut tokens = l.hyp.tokens.clone();
                    tokens.push(c);
                    candidates.push((
                        Hypothesis {
                            tokens,
                            score: joint(cfg.ctc_weight, state.score, att),
                            att_score: att,
                            ctc_score: state.score,
                        },
                        Some(state),
                    ));
                }
            }
        }
        // Ended candidates sort ahead of equal-scored continuations (shorter).
        candidates.sort_by(|a, b| rank(&a.0, &b.0).then(a.1.is_some().cmp(&b.1.is_some())));
        candidates.truncate(cfg.beam);
        live.clear();
        for (hyp, state) in candidates {
            match state {
                None => finished.push(hyp),
                Some(state) => live.push(Live { hyp, state }),
            }
        }
        if live.is_empty() {
            break;
        }
        // Scores only decrease as hypotheses grow.
        let best_live = live.iter().map(|l| l.hyp.score).fold(f64::NEG_INFINITY, f64::max);
        if finished.iter().any(|h| h.score >= best_live) {
            break;
        }
    }

    let greedy = greedy_decode(scorer, vocab, lang, cfg.max_len)?;
    finished.push(score_sequence(scorer, &ctc, vocab, lang, &greedy, cfg.ctc_weight)?);
    finished.sort_by(rank);
    Ok(finished.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ctc_loss;

    fn toy_vocab() -> Vocab {
        Vocab::new(2, 3)
    }

    /// Scorer whose distribution depends only on the prefix length.
    fn table_scorer(rows: Vec<Vec<f64>>) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
        move |prefix: &[usize]| {
            let i = (prefix.len() - 2).min(rows.len() - 1);
            let mut r = rows[i].clone();
            let lse = crate::scalar::log_sum_exp(&r);
            r.iter_mut().for_each(|x| *x -= lse);
            Ok(r)
        }
    }

    #[test]
    fn greedy_stops_at_eos_and_caps_length() {
        let v = toy_vocab();
        let mut eos_first = table_scorer(vec![vec![0., 0., 0., 5., 0., 0., 0., 0., 1., 0.]]);
        assert!(greedy_decode(&mut eos_first, &v, 0, 5).unwrap().is_empty());
        let mut never_eos = table_scorer(vec![vec![0., 0., 0., -5., 0., 0., 0., 3., 0., 0.]]);
        let out = greedy_decode(&mut never_eos, &v, 1, 4).unwrap();
        assert_eq!(out, vec![7; 4]);
    }

    #[test]
    fn prefix_scorer_full_sequence_matches_ctc_loss() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let lp = Tensor::<f64>::randn(&[6, 10], 1.0, &mut rng).log_softmax();
        let sc = CtcPrefixScorer::new(&lp).unwrap();
        for target in [vec![], vec![7], vec![7, 8], vec![8, 8], vec![7, 9, 7]] {
            let expect = -ctc_loss(&lp, &target, BLANK).unwrap();
            assert!((sc.sequence_log_prob(&target) - expect).abs() < 1e-10, "{target:?}");
        }
    }

    #[test]
    fn prefix_scores_do_not_increase() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let lp = Tensor::<f64>::randn(&[8, 10], 1.0, &mut rng).log_softmax();
        let sc = CtcPrefixScorer::new(&lp).unwrap();
        let mut s = sc.initial();
        for c in [7, 7, 9, 8] {
            let next = sc.extend(&s, c);
            assert!(next.score <= s.score + 1e-12);
            s = next;
        }
    }

    #[test]
    fn beam_one_without_ctc_is_greedy() {
        let v = toy_vocab();
        let rows = vec![
            vec![0., 0., 0., -1., 0., 0., 0., 2., 1.5, 0.],
            vec![0., 0., 0., 0.5, 0., 0., 0., 0.1, 1.9, 0.2],
            vec![0., 0., 0., 3.0, 0., 0., 0., 0.1, 0.2, 0.3],
        ];
        let lp = Tensor::<f64>::full(&[6, 10], -(10f64).ln());
        let g = greedy_decode(&mut table_scorer(rows.clone()), &v, 0, 6).unwrap();
        let cfg = BeamConfig { beam: 1, ctc_weight: 0.0, max_len: 6 };
        let b = beam_decode(&mut table_scorer(rows), &lp, &v, 0, cfg).unwrap();
        assert_eq!(b.tokens, g);
        assert_eq!(g, vec![7, 8]);
    }

    #[test]
    fn full_ctc_weight_follows_ctc() {
        let v = toy_vocab();
        // Attention prefers token 7 then eos; CTC output clearly says "8".
        let rows = vec![
            vec![0., 0., 0., -1., 0., 0., 0., 4., 0., 0.],
            vec![0., 0., 0., 4., 0., 0., 0., 0., 0., 0.],
        ];
        let mut lp = Tensor::<f64>::full(&[4, 10], -20.0);
        for t in 0..4 {
            lp.data_mut()[t * 10 + if t == 1 { 8 } else { BLANK }] = 0.0;
        }
        let lp = lp.log_softmax();
        let cfg = BeamConfig { beam: 4, ctc_weight: 1.0, max_len: 4 };
        let h = beam_decode(&mut table_scorer(rows), &lp, &v, 0, cfg).unwrap();
        assert_eq!(h.tokens, vec![8]);
        assert_eq!(h.score, h.ctc_score);
    }

    #[test]
    fn decoder_rejects_missing_language_token() {
        let v = toy_vocab();
        let mut store = ParamStore::<f64>::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let cfg = DecoderConfig { d: 8, heads: 2, layers: 1, ffn_mult: 2 };
        let dec = Decoder::new(&mut store, &cfg, &v, &mut rng);
        let mut g = Graph::with_params(&store, false);
        let mem = g.constant(Tensor::zeros(&[5, 8]));
        assert!(matches!(dec.forward(&mut g, &[SOS, 8, 9], mem), Err(Error::Conditioning(_))));
        let y = dec.forward(&mut g, &[SOS, v.lang_token(1), 8, 9, 7], mem).unwrap();
        assert_eq!(g.shape(y), &[5, 10]);
        for r in 0..5 {
            let s: f64 = g.value(y).row(r).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
