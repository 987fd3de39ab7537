//! Decoding: beam search and seeded sampling over any model that yields a
//! next-token distribution, with a repetition penalty on tokens already in
//! the hypothesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, LmError, LOG_FLOOR};

/// Values below 1 make repetition more likely, values above 1 less likely
/// (positive scores divide by the penalty, non-positive scores multiply).
pub const DEFAULT_REPETITION_PENALTY: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenStrategy {
    BeamSearch { beam_width: usize },
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub strategy: GenStrategy,
    pub max_new_tokens: usize,
    pub repetition_penalty: f64,
}

impl GenConfig {
    pub fn beam(beam_width: usize, max_new_tokens: usize) -> Self {
        Self {
            strategy: GenStrategy::BeamSearch { beam_width },
            max_new_tokens,
            repetition_penalty: DEFAULT_REPETITION_PENALTY,
        }
    }

    /// Beam width 1 with no penalty: plain argmax decoding.
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: GenStrategy::BeamSearch { beam_width: 1 },
            max_new_tokens,
            repetition_penalty: 1.0,
        }
    }

    pub fn sample(temperature: f64, seed: u64, max_new_tokens: usize) -> Self {
        Self {
            strategy: GenStrategy::Sample { temperature, seed },
            max_new_tokens,
            repetition_penalty: DEFAULT_REPETITION_PENALTY,
        }
    }

    pub fn with_penalty(mut self, repetition_penalty: f64) -> Self {
        self.repetition_penalty = repetition_penalty;
        self
    }
}

/// A model that scores continuations token by token. `dist` must return a
/// normalized distribution over the vocabulary.
pub(crate) trait TokenScorer {
    type State: Clone;
    fn vocab(&self) -> usize;
    fn dist(&self, st: &Self::State) -> Vec<f64>;
    fn push(&self, st: &mut Self::State, token: u32);
}

/// Log-probabilities for expansion: log of the model distribution with the
/// repetition penalty applied to already-generated tokens, renormalized.
fn expansion_log_probs<M: TokenScorer>(
    model: &M,
    st: &M::State,
    generated: &[u32],
    penalty: f64,
) -> Vec<f64> {
    let mut lp: Vec<f64> = model
        .dist(st)
        .iter()
        .map(|&p| p.max(LOG_FLOOR).ln())
        .collect();
    if penalty != 1.0 {
        let mut seen = vec![false; lp.len()];
        for &t in generated {
            let t = t as usize;
            if !seen[t] {
                seen[t] = true;
                lp[t] = if lp[t] > 0.0 {
                    lp[t] / penalty
                } else {
                    lp[t] * penalty
                };
            }
        }
        let lse = log_sum_exp(&lp);
        lp.iter_mut().for_each(|x| *x -= lse);
    }
    lp
}

struct Hypothesis<S> {
    state: S,
    tokens: Vec<u32>,
    score: f64,
}

impl<S> Hypothesis<S> {
    fn normalized(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }
}

fn beam_search<M: TokenScorer>(
    model: &M,
    init: M::State,
    width: usize,
    max_new: usize,
    penalty: f64,
    eos: u32,
) -> Vec<u32> {
    let mut active = vec![Hypothesis {
        state: init,
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();
    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let mut expansions: Vec<(usize, u32, f64)> = Vec::new();
        for (i, hyp) in active.iter().enumerate() {
            let lp = expansion_log_probs(model, &hyp.state, &hyp.tokens, penalty);
            for (tok, l) in lp.iter().enumerate() {
                expansions.push((i, tok as u32, hyp.score + l));
            }
        }
        expansions.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| a.1.cmp(&b.1))
        });
        let mut next = Vec::with_capacity(width);
        for &(i, tok, score) in expansions.iter().take(width) {
            let hyp = &active[i];
            if tok == eos {
                finished.push(Hypothesis {
                    state: hyp.state.clone(),
                    tokens: hyp.tokens.clone(),
                    score,
                });
            } else {
                let mut state = hyp.state.clone();
                model.push(&mut state, tok);
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                next.push(Hypothesis { state, tokens, score });
            }
        }
        active = next;
    }
    // Final selection is length-normalized across finished and still-active
    // hypotheses.
    finished
        .into_iter()
        .chain(active)
        .max_by(|a, b| a.normalized().total_cmp(&b.normalized()))
        .map(|h| h.tokens)
        .unwrap_or_default()
}

fn sample<M: TokenScorer>(
    model: &M,
    mut state: M::State,
    temperature: f64,
    seed: u64,
    max_new: usize,
    penalty: f64,
    eos: u32,
) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::new();
    for _ in 0..max_new {
        let lp = expansion_log_probs(model, &state, &tokens, penalty);
        let scaled: Vec<f64> = lp.iter().map(|&l| l / temperature).collect();
        let lse = log_sum_exp(&scaled);
        let u: f64 = rng.random();
        let mut acc = 0.0f64;
        let mut choice = (scaled.len() - 1) as u32;
        for (tok, &s) in scaled.iter().enumerate() {
            acc += (s - lse).exp();
            if u < acc {
                choice = tok as u32;
                break;
            }
        }
        if choice == eos {
            break;
        }
        model.push(&mut state, choice);
        tokens.push(choice);
    }
    tokens
}

/// Runs the configured decoding strategy from an initialized state.
pub(crate) fn decode<M: TokenScorer>(
    model: &M,
    init: M::State,
    gen: &GenConfig,
    eos: u32,
) -> Result<Vec<u32>, LmError> {
    if gen.repetition_penalty <= 0.0 {
        return Err(LmError::BadPenalty(gen.repetition_penalty));
    }
    match gen.strategy {
        GenStrategy::BeamSearch { beam_width } => {
            if beam_width == 0 {
                return Err(LmError::ZeroBeamWidth);
            }
            if beam_width > model.vocab() {
                return Err(LmError::BeamTooWide {
                    width: beam_width,
                    vocab: model.vocab(),
                });
            }
            Ok(beam_search(
                model,
                init,
                beam_width,
                gen.max_new_tokens,
                gen.repetition_penalty,
                eos,
            ))
        }
        GenStrategy::Sample { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(LmError::BadTemperature(temperature));
            }
            Ok(sample(
                model,
                init,
                temperature,
                seed,
                gen.max_new_tokens,
                gen.repetition_penalty,
                eos,
            ))
        }
    }
}

/// Total log-probability of `tokens` as a continuation, under the same
/// penalized scoring the beam accumulates. Used to compare decoders.
#[cfg(test)]
pub(crate) fn continuation_score<M: TokenScorer>(
    model: &M,
    mut state: M::State,
    tokens: &[u32],
    penalty: f64,
) -> f64 {
    let mut score = 0.0;
    let mut generated: Vec<u32> = Vec::new();
    for &tok in tokens {
        let lp = expansion_log_probs(model, &state, &generated, penalty);
        score += lp[tok as usize];
        model.push(&mut state, tok);
        generated.push(tok);
    }
    score
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Corpus, Origin, TokenSeq, Vocabulary};
    use crate::lm::{LmConfig, LmParams};

    fn vocab12() -> Vocabulary {
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let corpus = Corpus::from_texts("t", Origin::Synthetic, vec![words.join(" ")]);
        build_vocab(&corpus, 16).unwrap()
    }

    fn params(seed: u64) -> LmParams {
        LmParams::init(
            LmConfig {
                embed_dim: 8,
                hidden_dim: 8,
                context_window: 8,
                seed,
            },
            &vocab12(),
        )
    }

    #[test]
    fn beam_width_one_without_penalty_is_greedy_argmax() {
        let p = params(3);
        let prompt = TokenSeq::new(vec![4, 5]);
        let beamed = p.generate(&prompt, &GenConfig::greedy(6)).unwrap();

        // Manual argmax walk.
        let mut st = p.state(prompt.as_slice()).unwrap();
        let mut expect = Vec::new();
        for _ in 0..6 {
            let dist = p.state_probs(&st);
            let tok = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0 as u32;
            if tok == crate::corpus::EOS_ID {
                break;
            }
            p.state_advance(&mut st, tok);
            expect.push(tok);
        }
        assert_eq!(beamed.ids, expect);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = params(4);
        let prompt = TokenSeq::new(vec![4]);
        let a = p.generate(&prompt, &GenConfig::sample(0.9, 7, 10)).unwrap();
        let b = p.generate(&prompt, &GenConfig::sample(0.9, 7, 10)).unwrap();
        let c = p.generate(&prompt, &GenConfig::sample(0.9, 8, 10)).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 10);
        // Different seeds almost surely diverge on a 16-token vocabulary
        // over 10 steps; pinned here by the fixed seeds.
        assert_ne!(a, c);
    }

    #[test]
    fn beam_scores_at_least_greedy() {
        for seed in [1u64, 2, 3, 9, 17] {
            let p = params(seed);
            let prompt = TokenSeq::new(vec![5]);
            let greedy = p.generate(&prompt, &GenConfig::greedy(8)).unwrap();
            let beamed = p
                .generate(&prompt, &GenConfig::beam(4, 8).with_penalty(1.0))
                .unwrap();
            let init = p.state(prompt.as_slice()).unwrap();
            let gs = continuation_score(&p, init.clone(), greedy.as_slice(), 1.0)
                / greedy.len().max(1) as f64;
            let bs = continuation_score(&p, init, beamed.as_slice(), 1.0)
                / beamed.len().max(1) as f64;
            assert!(
                bs >= gs - 1e-12,
                "seed {seed}: beam {bs} < greedy {gs}"
            );
        }
    }

    #[test]
    fn penalty_below_one_encourages_repetition() {
        // With penalty < 1 a repeated token's log-probability shrinks in
        // magnitude (moves toward zero), so its renormalized probability
        // grows relative to the unpenalized distribution.
        let p = params(6);
        let st = p.state(&[4]).unwrap();
        let plain = expansion_log_probs(&p, &st, &[], 1.0);
        let boosted = expansion_log_probs(&p, &st, &[7], 0.75);
        let renorm: Vec<f64> = {
            let lse = log_sum_exp(&plain);
            plain.iter().map(|l| l - lse).collect()
        };
        assert!(boosted[7] > renorm[7]);
    }

    #[test]
    fn generate_validates_config() {
        let p = params(5);
        let prompt = TokenSeq::new(vec![4]);
        assert!(matches!(
            p.generate(&prompt, &GenConfig::beam(0, 4)),
            Err(LmError::ZeroBeamWidth)
        ));
        assert!(matches!(
            p.generate(&prompt, &GenConfig::beam(999, 4)),
            Err(LmError::BeamTooWide { .. })
        ));
        assert!(matches!(
            p.generate(&prompt, &GenConfig::sample(0.0, 1, 4)),
            Err(LmError::BadTemperature(_))
        ));
        assert!(matches!(
            p.generate(&prompt, &GenConfig::greedy(4).with_penalty(0.0)),
            Err(LmError::BadPenalty(_))
        ));
        assert_eq!(p.generate(&prompt, &GenConfig::greedy(0)).unwrap().len(), 0);
    }
}
