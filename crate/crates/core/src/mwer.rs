//! Minimum word error rate loss over N-best lists.
//!
//! The N-best hypotheses are renormalized with a softmax over their log-scores,
//! and the loss is the expected number of token errors under that distribution.
//! Gradients flow from each hypothesis log-score back into its own lattice:
//! `dL/dlogP_i = P_i (R_i - R_mean)`, then through the hypothesis' forward-backward
//! occupancies and the softmax Jacobian.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{forward_backward, log_prob_logit_grad, normalize};
use crate::model::Transducer;

/// Where a hypothesis log-score came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    /// Merged beam-search score over the alignments the beam kept.
    Beam,
    /// Exact all-alignment lattice score.
    Exact,
    /// Acoustic score plus weighted, length-normalized LM score.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_score: f64,
    pub source: ScoreSource,
}

impl Hypothesis {
    pub fn new(tokens: Vec<usize>, log_score: f64, source: ScoreSource) -> Self {
        Self {
            tokens,
            log_score,
            source,
        }
    }
}

/// Distinct hypotheses for one utterance, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utterance_id: String,
    pub hypotheses: Vec<Hypothesis>,
    pub reference: Vec<usize>,
    /// Token removed from hypotheses and reference before counting errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_id: Option<usize>,
}

/// Descending score, ties broken by ascending token sequence.
pub(crate) fn hypothesis_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.log_score
        .total_cmp(&a.log_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

impl NBestList {
    /// Builds a list, merging duplicate token sequences (the best-scored copy is
    /// kept) and sorting best first.
    pub fn new(
        utterance_id: impl Into<String>,
        hypotheses: Vec<Hypothesis>,
        reference: Vec<usize>,
    ) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::InvalidInput("N-best list is empty".into()));
        }
        let mut list = Self {
            utterance_id: utterance_id.into(),
            hypotheses,
            reference,
            eos_id: None,
        };
        list.sort();
        list.dedup();
        Ok(list)
    }

    pub fn with_eos(mut self, eos_id: Option<usize>) -> Self {
        self.eos_id = eos_id;
        self
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn sort(&mut self) {
        self.hypotheses.sort_by(hypothesis_order);
    }

    /// Drops later copies of a token sequence already present.
    pub fn dedup(&mut self) {
        let mut seen = std::collections::HashSet::new();
        self.hypotheses.retain(|h| seen.insert(h.tokens.clone()));
    }

    /// Checks non-emptiness, distinctness and score ordering.
    pub fn validate(&self) -> Result<()> {
        if self.hypotheses.is_empty() {
            return Err(Error::InvalidInput(format!(
                "N-best list for {} is empty",
                self.utterance_id
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for h in &self.hypotheses {
            if !seen.insert(&h.tokens) {
                return Err(Error::InvalidInput(format!(
                    "duplicate hypothesis {:?} in {}",
                    h.tokens, self.utterance_id
                )));
            }
            if h.log_score.is_nan() {
                return Err(Error::InvalidInput(format!(
                    "NaN score in {}",
                    self.utterance_id
                )));
            }
        }
        if self
            .hypotheses
            .windows(2)
            .any(|w| w[0].log_score < w[1].log_score)
        {
            return Err(Error::InvalidInput(format!(
                "hypotheses of {} are not sorted by score",
                self.utterance_id
            )));
        }
        Ok(())
    }

    fn strip(&self, tokens: &[usize]) -> Vec<usize> {
        match self.eos_id {
            Some(eos) => tokens.iter().copied().filter(|&t| t != eos).collect(),
            None => tokens.to_vec(),
        }
    }

    /// Token errors `R(y_i, y_ref)` for every hypothesis.
    pub fn errors(&self) -> Vec<f64> {
        let reference = self.strip(&self.reference);
        self.hypotheses
            .iter()
            .map(|h| edit_distance(&self.strip(&h.tokens), &reference).total() as f64)
            .collect()
    }

    pub fn log_scores(&self) -> Vec<f64> {
        self.hypotheses.iter().map(|h| h.log_score).collect()
    }
}

/// Levenshtein breakdown of a hypothesis against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub substitutions: usize,
    /// Hypothesis tokens with no reference counterpart.
    pub insertions: usize,
    /// Reference tokens missing from the hypothesis.
    pub deletions: usize,
}

impl ErrorCount {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

impl std::ops::AddAssign for ErrorCount {
    fn add_assign(&mut self, rhs: Self) {
        self.substitutions += rhs.substitutions;
        self.insertions += rhs.insertions;
        self.deletions += rhs.deletions;
    }
}

/// Unit-cost edit distance with a deterministic backtrace
/// (substitution/match, then insertion, then deletion).
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> ErrorCount {
    let (n, m) = (hyp.len(), reference.len());
    let width = m + 1;
    let mut d = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * width] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * width + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let ins = d[(i - 1) * width + j] + 1;
            let del = d[i * width + j - 1] + 1;
            d[i * width + j] = sub.min(ins).min(del);
        }
    }
    let mut count = ErrorCount::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * width + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(hyp[i - 1] != reference[j - 1]);
            if here == d[(i - 1) * width + j - 1] + mismatch {
                count.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * width + j] + 1 {
            count.insertions += 1;
            i -= 1;
        } else {
            count.deletions += 1;
            j -= 1;
        }
    }
    count
}

/// Softmax over hypothesis log-scores.
pub fn normalize_scores(log_scores: &[f64]) -> Result<Vec<f64>> {
    if log_scores.is_empty() {
        return Err(Error::InvalidInput("no scores to normalize".into()));
    }
    if let Some(bad) = log_scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite hypothesis score {bad}")));
    }
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Expected errors `sum_i P_i R_i`, evaluated relative to the smallest `R` so
/// that equal error counts give exactly that count; clamped into `[min R, max R]`.
fn expected_errors(posteriors: &[f64], errors: &[f64]) -> f64 {
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let excess: f64 = posteriors.iter().zip(errors).map(|(p, r)| p * (r - min)).sum();
    (min + excess).clamp(min, max)
}

fn loss_parts(log_scores: &[f64], errors: &[f64]) -> Result<(Vec<f64>, f64)> {
    let posteriors = normalize_scores(log_scores)?;
    let r_mean = expected_errors(&posteriors, errors);
    Ok((posteriors, r_mean))
}

/// Score gradients `P_i (R_i - R_mean)` from raw scores and error counts.
pub fn score_grads_from(log_scores: &[f64], errors: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (posteriors, r_mean) = loss_parts(log_scores, errors)?;
    let grads = posteriors
        .iter()
        .zip(errors)
        .map(|(p, r)| p * (r - r_mean))
        .collect();
    Ok((grads, r_mean))
}

/// MWER loss and expected errors; the two coincide.
pub fn mwer_loss(nbest: &NBestList) -> Result<(f64, f64)> {
    let (_, r_mean) = loss_parts(&nbest.log_scores(), &nbest.errors())?;
    Ok((r_mean, r_mean))
}

/// `dL / d log P(y_i|x)` for every hypothesis, in list order.
pub fn mwer_score_grads(nbest: &NBestList) -> Result<Vec<f64>> {
    Ok(score_grads_from(&nbest.log_scores(), &nbest.errors())?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwerConfig {
    /// Softmax temperature used when recomputing exact hypothesis scores.
    pub temperature: f64,
    /// Append the reference to the list when decoding missed it.
    pub add_reference: bool,
}

impl Default for MwerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            add_reference: false,
        }
    }
}

/// Output of [`mwer_full_grad`]; vectors are aligned with `hypotheses`.
#[derive(Debug, Clone, PartialEq)]
pub struct MwerGradients {
    /// The hypotheses actually used, carrying their exact scores.
    pub hypotheses: Vec<Hypothesis>,
    pub score_grads: Vec<f64>,
    /// `dL / d logits` of each hypothesis' own lattice, shape `(T, U_i + 1, K)`.
    pub lattice_grads: Vec<Array3<f64>>,
    pub loss: f64,
    pub expected_errors: f64,
    /// Hypotheses removed for having a non-finite exact score.
    pub dropped: usize,
}

/// Full MWER gradient: exact rescoring of every hypothesis over all of its
/// alignments, then the chain rule down to each hypothesis' lattice logits.
pub fn mwer_full_grad<M: Transducer>(
    model: &M,
    nbest: &NBestList,
    config: &MwerConfig,
) -> Result<MwerGradients> {
    let mut list = nbest.clone();
    if list.hypotheses.is_empty() {
        return Err(Error::InvalidInput(format!(
            "N-best list for {} is empty",
            list.utterance_id
        )));
    }
    list.dedup();
    if config.add_reference && !list.hypotheses.iter().any(|h| h.tokens == list.reference) {
        list.hypotheses.push(Hypothesis::new(
            list.reference.clone(),
            f64::NEG_INFINITY,
            ScoreSource::Exact,
        ));
    }

    let mut kept = Vec::with_capacity(list.len());
    let mut dropped = 0;
    for h in &list.hypotheses {
        let lattice = model.lattice(&h.tokens)?;
        let post = normalize(&lattice, config.temperature)?;
        let ab = forward_backward(&post, &h.tokens)?;
        let log_p = ab.log_likelihood(&post);
        if !log_p.is_finite() {
            log::warn!(
                "dropping hypothesis {:?} of {}: exact score {log_p}",
                h.tokens,
                list.utterance_id
            );
            dropped += 1;
            continue;
        }
        kept.push((Hypothesis::new(h.tokens.clone(), log_p, ScoreSource::Exact), post, ab));
    }
    if kept.is_empty() {
        return Err(Error::NonFiniteLoss(format!(
            "every hypothesis of {} has a non-finite exact score",
            list.utterance_id
        )));
    }

    let hypotheses: Vec<Hypothesis> = kept.iter().map(|(h, _, _)| h.clone()).collect();
    let scored = NBestList {
        utterance_id: list.utterance_id.clone(),
        hypotheses,
        reference: list.reference.clone(),
        eos_id: list.eos_id,
    };
    let (score_grads, r_mean) = score_grads_from(&scored.log_scores(), &scored.errors())?;

    let mut lattice_grads = Vec::with_capacity(kept.len());
    for ((h, post, ab), g) in kept.iter().zip(&score_grads) {
        let mut grad = log_prob_logit_grad(post, &h.tokens, ab)?;
        grad.mapv_inplace(|v| v * g);
        lattice_grads.push(grad);
    }

    Ok(MwerGradients {
        hypotheses: scored.hypotheses,
        score_grads,
        lattice_grads,
        loss: r_mean,
        expected_errors: r_mean,
        dropped,
    })
}
