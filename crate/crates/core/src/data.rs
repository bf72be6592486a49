//! On-disk formats: vocabulary, utterance datasets, N-best lists and WER reports.
//!
//! Datasets and N-best lists are JSON lines. Reals are written with the
//! shortest round-tripping decimal form, so reading a file back is bit-exact.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{from_json_str, Error, Result};
use crate::mwer::{edit_distance, ErrorCount, Hypothesis, NBestList, ScoreSource};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub blank: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, blank: &str, eos: Option<&str>) -> Result<Self> {
        let mut v = Self {
            tokens,
            blank: blank.to_string(),
            eos: eos.map(String::from),
            index: HashMap::new(),
        };
        v.build_index()?;
        Ok(v)
    }

    fn build_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        if !self.index.contains_key(&self.blank) {
            return Err(Error::InvalidInput(format!("blank {:?} is not in the vocabulary", self.blank)));
        }
        if let Some(e) = &self.eos {
            if !self.index.contains_key(e) || *e == self.blank {
                return Err(Error::InvalidInput(format!("bad EOS token {e:?}")));
            }
        }
        if self.real_tokens().count() < 2 {
            return Err(Error::InvalidInput("vocabulary needs at least 2 real tokens".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.index[&self.blank]
    }

    pub fn eos_id(&self) -> Option<usize> {
        self.eos.as_ref().map(|e| self.index[e])
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("token {name:?} is not in the vocabulary")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Tokens other than blank and EOS.
    pub fn real_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .filter(|t| **t != self.blank && Some(*t) != self.eos.as_ref())
            .map(|t| t.as_str())
    }

    /// Name of a real token, `None` for blank and EOS.
    pub fn word(&self, id: usize) -> Option<String> {
        let t = &self.tokens[id];
        (*t != self.blank && Some(t) != self.eos.as_ref()).then(|| t.clone())
    }

    pub fn ids(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.id(n)).collect()
    }

    pub fn names(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&k| self.tokens[k].clone()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocab = from_json_str(text)?;
        v.build_index()?;
        Ok(v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_text(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `(T, F)` feature matrix.
    pub features: Array2<f64>,
    /// Reference token ids, without EOS.
    pub reference: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub reference: Vec<String>,
}

impl Utterance {
    pub fn to_record(&self, vocab: &Vocab) -> UtteranceRecord {
        UtteranceRecord {
            id: self.id.clone(),
            features: self.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            reference: vocab.names(&self.reference),
        }
    }

    pub fn from_record(rec: UtteranceRecord, vocab: &Vocab) -> Result<Self> {
        let frames = rec.features.len();
        if frames == 0 {
            return Err(Error::InvalidInput(format!("utterance {} has no frames", rec.id)));
        }
        let dim = rec.features[0].len();
        if rec.features.iter().any(|r| r.len() != dim) || dim == 0 {
            return Err(Error::InvalidInput(format!("utterance {} has ragged features", rec.id)));
        }
        if rec.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("utterance {} has non-finite features", rec.id)));
        }
        let features = Array2::from_shape_vec((frames, dim), rec.features.concat()).expect("shape checked");
        let reference = vocab.ids(&rec.reference)?;
        if reference.iter().any(|&k| vocab.word(k).is_none()) {
            return Err(Error::InvalidInput(format!(
                "utterance {} reference contains blank or EOS",
                rec.id
            )));
        }
        Ok(Self {
            id: rec.id,
            features,
            reference,
        })
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Serializes records one per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSON lines; field-path errors are prefixed with `line N`.
pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match from_json_str(line) {
            Ok(r) => out.push(r),
            Err(Error::Parse { path, message }) => {
                return Err(Error::Parse {
                    path: format!("line {}: {path}", i + 1),
                    message,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, utts: &[Utterance], vocab: &Vocab) -> Result<()> {
    let records: Vec<_> = utts.iter().map(|u| u.to_record(vocab)).collect();
    write_text(path.as_ref(), &to_jsonl(&records))
}

pub fn read_dataset(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let records: Vec<UtteranceRecord> = from_jsonl(&read_text(path)?)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.clone()) {
            return Err(Error::InvalidInput(format!("duplicate utterance id {}", r.id)));
        }
        out.push(Utterance::from_record(r, vocab)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no utterances", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisRecord {
    pub tokens: Vec<String>,
    pub log_score: f64,
    pub score_source: ScoreSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBestRecord {
    pub id: String,
    pub hypotheses: Vec<HypothesisRecord>,
    pub reference: Vec<String>,
}

impl NBestRecord {
    pub fn from_list(list: &NBestList, vocab: &Vocab) -> Self {
        Self {
            id: list.utterance_id.clone(),
            hypotheses: list
                .hypotheses
                .iter()
                .map(|h| HypothesisRecord {
                    tokens: vocab.names(&h.tokens),
                    log_score: h.log_score,
                    score_source: h.source,
                })
                .collect(),
            reference: vocab.names(&list.reference),
        }
    }

    /// Rebuilds the list exactly as written; order and scores are kept.
    pub fn to_list(&self, vocab: &Vocab) -> Result<NBestList> {
        let mut hyps = Vec::with_capacity(self.hypotheses.len());
        for h in &self.hypotheses {
            hyps.push(Hypothesis::new(vocab.ids(&h.tokens)?, h.log_score, h.score_source));
        }
        let list = NBestList {
            utterance_id: self.id.clone(),
            hypotheses: hyps,
            reference: vocab.ids(&self.reference)?,
            eos_id: vocab.eos_id(),
        };
        list.validate()?;
        Ok(list)
    }
}

pub fn nbest_to_jsonl(lists: &[NBestList], vocab: &Vocab) -> String {
    let records: Vec<_> = lists.iter().map(|l| NBestRecord::from_list(l, vocab)).collect();
    to_jsonl(&records)
}

pub fn nbest_from_jsonl(text: &str, vocab: &Vocab) -> Result<Vec<NBestList>> {
    from_jsonl::<NBestRecord>(text)?
        .iter()
        .map(|r| r.to_list(vocab))
        .collect()
}

pub fn write_nbest(path: impl AsRef<Path>, lists: &[NBestList], vocab: &Vocab) -> Result<()> {
    write_text(path.as_ref(), &nbest_to_jsonl(lists, vocab))
}

pub fn read_nbest(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<NBestList>> {
    nbest_from_jsonl(&read_text(path.as_ref())?, vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub utterances: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub errors: usize,
    pub reference_words: usize,
    pub wer: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_wer: Option<f64>,
}

impl WerReport {
    pub fn with_baseline(mut self, baseline_wer: f64) -> Result<Self> {
        if !(baseline_wer > 0.0) || !baseline_wer.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "baseline WER must be positive, got {baseline_wer}"
            )));
        }
        self.baseline_wer = Some(baseline_wer);
        self.normalized_wer = Some(self.wer / baseline_wer);
        Ok(self)
    }
}

impl fmt::Display for WerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "utterances   {:>8}", self.utterances)?;
        writeln!(f, "ref words    {:>8}", self.reference_words)?;
        writeln!(f, "subs         {:>8}", self.substitutions)?;
        writeln!(f, "ins          {:>8}", self.insertions)?;
        writeln!(f, "dels         {:>8}", self.deletions)?;
        write!(f, "WER          {:>8.4}", self.wer)?;
        if let Some(n) = self.normalized_wer {
            write!(f, "\nnormalized   {:>8.4}", n)?;
        }
        Ok(())
    }
}

/// Corpus WER of `hyps` against `refs`, both keyed by utterance id.
///
/// The id sets must match exactly. EOS should be stripped by the caller.
pub fn compute_wer(
    hyps: &BTreeMap<String, Vec<usize>>,
    refs: &BTreeMap<String, Vec<usize>>,
) -> Result<WerReport> {
    let missing: Vec<&str> = refs.keys().filter(|k| !hyps.contains_key(*k)).map(|s| s.as_str()).collect();
    let extra: Vec<&str> = hyps.keys().filter(|k| !refs.contains_key(*k)).map(|s| s.as_str()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::InvalidInput(format!(
            "hypothesis ids do not match references; missing: [{}], extra: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let mut counts = ErrorCount::default();
    let mut reference_words = 0;
    for (id, r) in refs {
        counts += edit_distance(&hyps[id], r);
        reference_words += r.len();
    }
    if reference_words == 0 {
        return Err(Error::InvalidInput("references contain no words".into()));
    }
    Ok(WerReport {
        utterances: refs.len(),
        substitutions: counts.substitutions,
        insertions: counts.insertions,
        deletions: counts.deletions,
        errors: counts.total(),
        reference_words,
        wer: counts.total() as f64 / reference_words as f64,
        baseline_wer: None,
        normalized_wer: None,
    })
}

/// Top-1 tokens of each list, EOS removed.
pub fn top1_map(lists: &[NBestList]) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for l in lists {
        let best = l
            .hypotheses
            .first()
            .ok_or_else(|| Error::EmptyResult(format!("N-best list for {} is empty", l.utterance_id)))?;
        let tokens = best.tokens.iter().copied().filter(|&k| Some(k) != l.eos_id).collect();
        if out.insert(l.utterance_id.clone(), tokens).is_some() {
            return Err(Error::InvalidInput(format!("duplicate N-best id {}", l.utterance_id)));
        }
    }
    Ok(out)
}

pub fn reference_map(utts: &[Utterance]) -> BTreeMap<String, Vec<usize>> {
    utts.iter().map(|u| (u.id.clone(), u.reference.clone())).collect()
}
