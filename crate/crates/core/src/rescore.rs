//! Second-pass re-ranking of N-best lists.
//!
//! Two rescorers are provided: exact transducer rescoring, which replaces each
//! beam score by the all-alignment lattice score, and external LM rescoring,
//! `log P(y|x) + lambda * log P_LM(y) / |y|`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{from_json_str, Error, Result};
use crate::lattice::{normalize, sequence_log_prob};
use crate::model::Transducer;
use crate::mwer::{hypothesis_order, Hypothesis, NBestList, ScoreSource};

pub const SENTENCE_START: &str = "<s>";
pub const SENTENCE_END: &str = "</s>";
pub const UNKNOWN: &str = "<unk>";
pub const LM_FORMAT_VERSION: u32 = 1;

/// Anything that assigns a log-probability to a token-name sequence.
pub trait LanguageModel {
    /// Natural-log probability of `words` including the end-of-sentence event.
    fn log_prob(&self, words: &[String]) -> f64;
}

/// Add-delta smoothed n-gram model over a closed vocabulary.
///
/// Conditionals are `(c(h, w) + delta) / (c(h) + delta * V)` where `V` counts the
/// vocabulary plus `</s>` and `<unk>`, and `h` is the previous `order - 1`
/// symbols padded with `<s>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramLM {
    pub format_version: u32,
    pub order: usize,
    pub delta: f64,
    pub vocab: BTreeSet<String>,
    /// `counts[n - 1]` maps a space-joined context of `n - 1` symbols to word counts.
    pub counts: Vec<BTreeMap<String, BTreeMap<String, u64>>>,
}

impl NGramLM {
    pub fn train(
        sentences: &[Vec<String>],
        vocab: impl IntoIterator<Item = String>,
        order: usize,
        delta: f64,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        let vocab: BTreeSet<String> = vocab.into_iter().collect();
        for reserved in [SENTENCE_START, SENTENCE_END, UNKNOWN] {
            if vocab.contains(reserved) {
                return Err(Error::InvalidInput(format!("{reserved} is reserved")));
            }
        }
        let mut lm = Self {
            format_version: LM_FORMAT_VERSION,
            order,
            delta,
            vocab,
            counts: vec![BTreeMap::new(); order],
        };
        for s in sentences {
            let padded = lm.pad(s);
            for i in (order - 1)..padded.len() {
                for n in 1..=order {
                    let context = padded[i + 1 - n..i].join(" ");
                    *lm.counts[n - 1]
                        .entry(context)
                        .or_default()
                        .entry(padded[i].clone())
                        .or_insert(0) += 1;
                }
            }
        }
        Ok(lm)
    }

    /// `<s>` * (order - 1), the mapped words, then `</s>`.
    fn pad(&self, words: &[String]) -> Vec<String> {
        let mut out = vec![SENTENCE_START.to_string(); self.order - 1];
        out.extend(words.iter().map(|w| self.map_word(w).to_string()));
        out.push(SENTENCE_END.to_string());
        out
    }

    fn map_word<'a>(&self, w: &'a str) -> &'a str {
        if self.vocab.contains(w) {
            w
        } else {
            UNKNOWN
        }
    }

    /// Size of the predicted-symbol set: vocabulary, `</s>` and `<unk>`.
    pub fn outcome_count(&self) -> usize {
        self.vocab.len() + 2
    }

    /// Every symbol the model can predict.
    pub fn outcomes(&self) -> Vec<String> {
        let mut out: Vec<String> = self.vocab.iter().cloned().collect();
        out.push(SENTENCE_END.to_string());
        out.push(UNKNOWN.to_string());
        out
    }

    /// `log P(word | context)` using the last `order - 1` context symbols.
    pub fn cond_log_prob(&self, context: &[String], word: &str) -> f64 {
        let n = self.order;
        let start = context.len().saturating_sub(n - 1);
        let mut ctx: Vec<&str> = vec![SENTENCE_START; (n - 1).saturating_sub(context.len())];
        ctx.extend(context[start..].iter().map(|w| w.as_str()));
        let key = ctx.join(" ");
        let table = self.counts[n - 1].get(&key);
        let (c_hw, c_h) = match table {
            Some(t) => (
                t.get(word).copied().unwrap_or(0),
                t.values().sum::<u64>(),
            ),
            None => (0, 0),
        };
        ((c_hw as f64 + self.delta) / (c_h as f64 + self.delta * self.outcome_count() as f64)).ln()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lm serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lm: NGramLM = from_json_str(text)?;
        if lm.format_version != LM_FORMAT_VERSION {
            return Err(Error::Parse {
                path: "format_version".into(),
                message: format!("unsupported version {}", lm.format_version),
            });
        }
        if lm.order == 0 || lm.counts.len() != lm.order {
            return Err(Error::Parse {
                path: "counts".into(),
                message: format!("expected {} count tables, found {}", lm.order, lm.counts.len()),
            });
        }
        if !(lm.delta > 0.0) {
            return Err(Error::Parse {
                path: "delta".into(),
                message: "delta must be positive".into(),
            });
        }
        Ok(lm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl LanguageModel for NGramLM {
    fn log_prob(&self, words: &[String]) -> f64 {
        let padded = self.pad(words);
        let mut total = 0.0;
        for i in (self.order - 1)..padded.len() {
            total += self.cond_log_prob(&padded[..i], &padded[i]);
        }
        total
    }
}

/// `log P_LM(y)` including the end-of-sentence event.
pub fn lm_score<L: LanguageModel + ?Sized>(lm: &L, words: &[String]) -> f64 {
    lm.log_prob(words)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RescoreConfig {
    /// LM weight.
    pub lambda: f64,
    /// Divide the LM term by the hypothesis length.
    pub length_normalize: bool,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            length_normalize: true,
        }
    }
}

/// Replaces every score with the exact all-alignment score and re-sorts.
pub fn rnnt_rescore<M: Transducer>(nbest: &NBestList, model: &M, temperature: f64) -> Result<NBestList> {
    if nbest.is_empty() {
        return Err(Error::InvalidInput(format!(
            "N-best list for {} is empty",
            nbest.utterance_id
        )));
    }
    let mut out = nbest.clone();
    for h in &mut out.hypotheses {
        let post = normalize(&model.lattice(&h.tokens)?, temperature)?;
        h.log_score = sequence_log_prob(&post, &h.tokens)?;
        h.source = ScoreSource::Exact;
    }
    out.sort();
    Ok(out)
}

/// Combines acoustic and LM scores and re-sorts (stable on ties).
///
/// `names` maps token ids to LM words; tokens mapped to `None` (EOS) are skipped.
/// Empty hypotheses are normalized by a length of one.
pub fn lm_rescore<L, F>(nbest: &NBestList, lm: &L, names: F, config: &RescoreConfig) -> Result<NBestList>
where
    L: LanguageModel + ?Sized,
    F: Fn(usize) -> Option<String>,
{
    if !(config.lambda >= 0.0) || !config.lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {}",
            config.lambda
        )));
    }
    if nbest.is_empty() {
        return Err(Error::InvalidInput(format!(
            "N-best list for {} is empty",
            nbest.utterance_id
        )));
    }
    let mut out = nbest.clone();
    if config.lambda == 0.0 {
        return Ok(out);
    }
    for h in &mut out.hypotheses {
        let words: Vec<String> = h.tokens.iter().filter_map(|&k| names(k)).collect();
        let length = if config.length_normalize {
            words.len().max(1) as f64
        } else {
            1.0
        };
        h.log_score += config.lambda * lm.log_prob(&words) / length;
        h.source = ScoreSource::Combined;
    }
    out.hypotheses
        .sort_by(|a: &Hypothesis, b: &Hypothesis| b.log_score.total_cmp(&a.log_score));
    Ok(out)
}

/// Re-sorts with the decoder's deterministic tie-breaking.
pub fn sort_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(hypothesis_order);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn corpus() -> NGramLM {
        let sents = vec![words("a b"), words("a c b"), words("b a"), words("c")];
        NGramLM::train(&sents, words("a b c"), 3, 0.1).unwrap()
    }

    /// Independent scorer: recount trigrams straight from the corpus.
    fn brute_force(sents: &[Vec<String>], vocab: &[&str], delta: f64, y: &[String]) -> f64 {
        let pad = |s: &[String]| {
            let mut v = vec!["<s>".to_string(), "<s>".to_string()];
            v.extend(s.iter().map(|w| if vocab.contains(&w.as_str()) { w.clone() } else { "<unk>".into() }));
            v.push("</s>".into());
            v
        };
        let v_size = (vocab.len() + 2) as f64;
        let padded = pad(y);
        let mut total = 0.0;
        for i in 2..padded.len() {
            let (h1, h2, w) = (&padded[i - 2], &padded[i - 1], &padded[i]);
            let mut c_hw = 0.0;
            let mut c_h = 0.0;
            for s in sents {
                let ps = pad(s);
                for j in 2..ps.len() {
                    if &ps[j - 2] == h1 && &ps[j - 1] == h2 {
                        c_h += 1.0;
                        if &ps[j] == w {
                            c_hw += 1.0;
                        }
                    }
                }
            }
            total += ((c_hw + delta) / (c_h + delta * v_size)).ln();
        }
        total
    }

    #[test]
    fn conditionals_are_normalized_for_every_context() {
        let lm = corpus();
        let outcomes = lm.outcomes();
        let mut contexts: Vec<Vec<String>> = vec![vec![], words("a"), words("zzz q")];
        for a in &outcomes {
            for b in &outcomes {
                contexts.push(vec![a.clone(), b.clone()]);
            }
        }
        for ctx in contexts {
            let s: f64 = outcomes.iter().map(|w| lm.cond_log_prob(&ctx, w).exp()).sum();
            assert!((s - 1.0).abs() < 1e-10, "{ctx:?}: {s}");
        }
    }

    #[test]
    fn empty_sequence_scores_only_the_end_event() {
        let lm = corpus();
        let expected = lm.cond_log_prob(&[], SENTENCE_END);
        assert_eq!(lm_score(&lm, &[]), expected);
        assert!(expected < 0.0);
    }

    #[test]
    fn single_sentence_corpus_approaches_certainty() {
        let lm = NGramLM::train(&[words("a b")], words("a b"), 3, 1e-12).unwrap();
        let s = lm_score(&lm, &words("a b"));
        assert!(s <= 0.0 && s > -1e-10, "{s}");
    }

    #[test]
    fn matches_brute_force_counts() {
        let sents = vec![words("a b"), words("a c b"), words("b a"), words("c")];
        let lm = corpus();
        for y in ["a b", "c b a", "", "a d", "b b b b"] {
            let y = words(y);
            let fast = lm_score(&lm, &y);
            let slow = brute_force(&sents, &["a", "b", "c"], 0.1, &y);
            assert!((fast - slow).abs() < 1e-12, "{y:?}: {fast} vs {slow}");
        }
    }

    #[test]
    fn lm_file_round_trip() {
        let lm = corpus();
        let back = NGramLM::from_json(&lm.to_json()).unwrap();
        assert_eq!(lm, back);
        let text = lm.to_json().replace("\"order\": 3", "\"order\": \"3\"");
        assert!(matches!(NGramLM::from_json(&text), Err(Error::Parse { path, .. }) if path == "order"));
        let text = lm.to_json().replace("\"order\": 3", "\"order\": 2");
        assert!(NGramLM::from_json(&text).is_err());
    }

    #[test]
    fn training_rejects_bad_arguments() {
        assert!(NGramLM::train(&[], words("a"), 0, 0.1).is_err());
        assert!(NGramLM::train(&[], words("a"), 2, 0.0).is_err());
        assert!(NGramLM::train(&[], words("a </s>"), 2, 0.1).is_err());
    }

    fn names(k: usize) -> Option<String> {
        ["_", "a", "b", "c"].get(k).map(|s| s.to_string())
    }

    fn nbest(scores: &[(Vec<usize>, f64)]) -> NBestList {
        NBestList::new(
            "u",
            scores
                .iter()
                .map(|(t, s)| Hypothesis::new(t.clone(), *s, ScoreSource::Beam))
                .collect(),
            vec![1, 2],
        )
        .unwrap()
    }

    #[test]
    fn zero_lambda_is_identity() {
        let lm = corpus();
        let l = nbest(&[(vec![1, 2], -1.0), (vec![3], -1.5), (vec![], -4.0)]);
        let cfg = RescoreConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(lm_rescore(&l, &lm, names, &cfg).unwrap(), l);
    }

    #[test]
    fn equal_acoustic_scores_follow_normalized_lm() {
        let lm = corpus();
        let l = nbest(&[(vec![1, 2], -2.0), (vec![2, 2, 2], -2.0)]);
        let norm = |t: &[usize]| {
            let w: Vec<String> = t.iter().filter_map(|&k| names(k)).collect();
            lm_score(&lm, &w) / w.len().max(1) as f64
        };
        let winner = if norm(&[1, 2]) > norm(&[2, 2, 2]) { vec![1, 2] } else { vec![2, 2, 2] };
        for lambda in [0.01, 0.3, 5.0] {
            let cfg = RescoreConfig { lambda, ..Default::default() };
            assert_eq!(lm_rescore(&l, &lm, names, &cfg).unwrap().hypotheses[0].tokens, winner);
        }
    }

    #[test]
    fn hand_built_three_hypothesis_case() {
        // Bigram counts: <s> -> a:2 b:1, a -> b:2, b -> </s>:3. Four outcomes, delta 0.5.
        let lm = NGramLM::train(&[words("a b"), words("a b"), words("b")], words("a b"), 2, 0.5).unwrap();
        let l = nbest(&[(vec![1], -1.0), (vec![2], -1.1), (vec![1, 2], -1.2)]);
        let cfg = RescoreConfig { lambda: 0.5, length_normalize: true };
        let out = lm_rescore(&l, &lm, names, &cfg).unwrap();
        // a: 0.5 * 0.125; b: 0.3 * 0.7; a b: 0.5 * 0.625 * 0.7
        let expected = [
            (vec![1, 2], -1.2 + 0.5 * (0.5f64 * 0.625 * 0.7).ln() / 2.0),
            (vec![2], -1.1 + 0.5 * (0.3f64 * 0.7).ln()),
            (vec![1], -1.0 + 0.5 * (0.5f64 * 0.125).ln()),
        ];
        for (h, (tokens, score)) in out.hypotheses.iter().zip(expected) {
            assert_eq!(h.tokens, tokens);
            assert!((h.log_score - score).abs() < 1e-12, "{} vs {score}", h.log_score);
            assert_eq!(h.source, ScoreSource::Combined);
        }
    }

    #[test]
    fn rnnt_rescore_recovers_exhaustive_winner() {
        use crate::decoder::{beam_search, exhaustive_decode, DecodeConfig};
        use crate::model::{ModelDims, ModelParams};
        use ndarray::Array2;
        let dims = ModelDims {
            input_dim: 2,
            enc_hidden: 3,
            embed_dim: 2,
            pred_hidden: 3,
            joint_dim: 4,
            vocab_size: 3,
            blank_id: 0,
        };
        let cfg = DecodeConfig { beam_size: 3, ..Default::default() };
        let mut found = 0;
        for seed in 0..300u64 {
            let mut params = ModelParams::init(seed, dims).unwrap();
            params.scale(3.0);
            let x = Array2::from_shape_fn((3, 2), |(t, f)| ((seed as f64 + 1.0) * (t * 2 + f + 1) as f64).sin());
            let enc = params.encode(&x).unwrap();
            let beam = beam_search(&enc, &cfg).unwrap();
            let oracle = exhaustive_decode(&enc, 8, 1.0, 1).unwrap();
            let best = &oracle[0].tokens;
            if beam.iter().any(|h| h.tokens.len() > 8)
                || &beam[0].tokens == best
                || !beam.iter().any(|h| &h.tokens == best)
            {
                continue;
            }
            found += 1;
            let l = NBestList::new("u", beam, vec![]).unwrap();
            let once = rnnt_rescore(&l, &enc, 1.0).unwrap();
            assert_eq!(&once.hypotheses[0].tokens, best, "seed {seed}");
            assert_eq!(once.hypotheses[0].log_score, oracle[0].log_score);
            assert_eq!(rnnt_rescore(&once, &enc, 1.0).unwrap(), once);
        }
        assert!(found > 0, "no under-merged beam found");
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let l = nbest(&[(vec![1], -1.0)]);
        let cfg = RescoreConfig { lambda: -0.1, ..Default::default() };
        assert!(matches!(lm_rescore(&l, &corpus(), names, &cfg), Err(Error::InvalidArgument(_))));
    }
}
