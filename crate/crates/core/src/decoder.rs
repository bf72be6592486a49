//! Frame-synchronous beam search with hypothesis merging.
//!
//! Within a frame the beam is expanded breadth-first by the number of labels
//! emitted in that frame. Candidates reaching the next frame with the same
//! label sequence have their probabilities summed; there is no summation over
//! prefixes of other hypotheses. Expansion of a frame stops once the next-frame
//! set holds `beam_size` entries that all beat the best still-expanding
//! candidate, or after `max_symbols_per_frame` labels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{log_add, normalize, sequence_log_prob};
use crate::mwer::{hypothesis_order, Hypothesis, ScoreSource};
use crate::model::Transducer;

/// Upper bound on the number of sequences [`exhaustive_decode`] will score.
pub const EXHAUSTIVE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub temperature: f64,
    pub max_symbols_per_frame: usize,
    /// When set, a hypothesis that emits this token may only emit blanks afterwards.
    pub eos_id: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            temperature: 1.0,
            max_symbols_per_frame: 10,
            eos_id: None,
        }
    }
}

impl DecodeConfig {
    pub fn include_eos(&self) -> bool {
        self.eos_id.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::InvalidArgument("beam_size must be at least 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::InvalidArgument(
                "max_symbols_per_frame must be at least 1".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A partial hypothesis on the beam.
#[derive(Debug, Clone)]
pub struct BeamCandidate<S> {
    pub tokens: Vec<usize>,
    /// Log of the summed probability of every retained alignment of `tokens`.
    pub log_score: f64,
    /// `(frame, labels emitted)` at the candidate's frontier.
    pub last_advance: (usize, usize),
    state: S,
}

impl<S> BeamCandidate<S> {
    fn ended(&self, eos: Option<usize>) -> bool {
        matches!((eos, self.tokens.last()), (Some(e), Some(&l)) if e == l)
    }
}

fn candidate_order<S>(a: &BeamCandidate<S>, b: &BeamCandidate<S>) -> std::cmp::Ordering {
    b.log_score
        .total_cmp(&a.log_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Decodes up to `beam_size` distinct label sequences, best first.
pub fn beam_search<M: Transducer>(model: &M, config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let t_len = model.frames();
    if t_len == 0 {
        return Err(Error::InvalidInput("cannot decode zero frames".into()));
    }
    let k_len = model.vocab_size();
    let blank = model.blank_id();
    let beam_size = config.beam_size;
    let mut logits = vec![0.0; k_len];
    let mut log_probs = vec![0.0; k_len];

    let mut beam = vec![BeamCandidate {
        tokens: Vec::new(),
        log_score: 0.0,
        last_advance: (0, 0),
        state: model.start_state(),
    }];

    for t in 0..t_len {
        let mut next: Vec<BeamCandidate<M::State>> = Vec::new();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut active = beam;
        for step in 0..=config.max_symbols_per_frame {
            if active.is_empty() {
                break;
            }
            if next.len() >= beam_size {
                let mut scores: Vec<f64> = next.iter().map(|c| c.log_score).collect();
                scores.sort_by(|a, b| b.total_cmp(a));
                if scores[beam_size - 1] > active[0].log_score {
                    break;
                }
            }
            // (parent, token, score) for label expansions.
            let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
            for (ci, cand) in active.iter().enumerate() {
                model.logits_into(t, &cand.state, &mut logits);
                log_softmax(&logits, config.temperature, &mut log_probs);

                let blank_score = cand.log_score + log_probs[blank];
                match index.get(&cand.tokens) {
                    Some(&i) => next[i].log_score = log_add(next[i].log_score, blank_score),
                    None => {
                        index.insert(cand.tokens.clone(), next.len());
                        next.push(BeamCandidate {
                            tokens: cand.tokens.clone(),
                            log_score: blank_score,
                            last_advance: (t + 1, cand.tokens.len()),
                            state: cand.state.clone(),
                        });
                    }
                }

                if step < config.max_symbols_per_frame && !cand.ended(config.eos_id) {
                    for (k, lp) in log_probs.iter().enumerate() {
                        if k != blank && *lp > f64::NEG_INFINITY {
                            expansions.push((ci, k, cand.log_score + lp));
                        }
                    }
                }
            }
            expansions.sort_by(|a, b| {
                b.2.total_cmp(&a.2).then_with(|| {
                    let ta = active[a.0].tokens.iter().chain(std::iter::once(&a.1));
                    let tb = active[b.0].tokens.iter().chain(std::iter::once(&b.1));
                    ta.cmp(tb)
                })
            });
            expansions.truncate(beam_size);
            active = expansions
                .into_iter()
                .map(|(ci, k, score)| {
                    let parent = &active[ci];
                    let mut tokens = parent.tokens.clone();
                    tokens.push(k);
                    let u = tokens.len();
                    BeamCandidate {
                        tokens,
                        log_score: score,
                        last_advance: (t, u),
                        state: model.advance(&parent.state, k),
                    }
                })
                .collect();
        }
        next.sort_by(candidate_order);
        next.truncate(beam_size);
        beam = next;
    }

    beam.retain(|c| c.log_score.is_finite());
    if beam.is_empty() {
        return Err(Error::EmptyResult("every beam candidate was pruned".into()));
    }
    Ok(beam
        .into_iter()
        .map(|c| Hypothesis::new(c.tokens, c.log_score, ScoreSource::Beam))
        .collect())
}

fn log_softmax(logits: &[f64], temperature: f64, out: &mut [f64]) {
    crate::lattice::log_softmax_into(ndarray::ArrayView1::from(logits), temperature, out);
}

/// Scores every blank-free sequence of length at most `max_len` with its exact
/// lattice probability and returns the best `top_n`, best first.
pub fn exhaustive_decode<M: Transducer>(
    model: &M,
    max_len: usize,
    temperature: f64,
    top_n: usize,
) -> Result<Vec<Hypothesis>> {
    let k_len = model.vocab_size();
    let blank = model.blank_id();
    let labels: Vec<usize> = (0..k_len).filter(|&k| k != blank).collect();
    let mut count = 0usize;
    let mut level = 1usize;
    for _ in 0..=max_len {
        count = count.saturating_add(level);
        level = level.saturating_mul(labels.len());
    }
    if count > EXHAUSTIVE_CAP {
        return Err(Error::SizeLimit(format!(
            "{count} sequences exceed the exhaustive cap {EXHAUSTIVE_CAP}"
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..=max_len {
        let mut deeper = Vec::with_capacity(frontier.len() * labels.len());
        for y in frontier {
            let post = normalize(&model.lattice(&y)?, temperature)?;
            let score = sequence_log_prob(&post, &y)?;
            for &k in &labels {
                let mut z = y.clone();
                z.push(k);
                deeper.push(z);
            }
            out.push(Hypothesis::new(y, score, ScoreSource::Exact));
        }
        frontier = deeper;
    }
    out.sort_by(hypothesis_order);
    out.truncate(top_n);
    Ok(out)
}
