//! Synthetic template-feature task.
//!
//! Each real token owns a random feature template. An utterance is a token
//! sequence drawn from a sparse Markov grammar and rendered frame by frame:
//! the first frame of a token adds a shared onset vector (so repeats stay
//! separable), the rest repeat the template, silence is all zeros, and every
//! frame gets Gaussian noise. Tokens in a confusion group are pulled towards
//! the group mean by `confusability`, and `pause_prob` inserts mid-utterance silences that
//! look exactly like the trailing silence.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, Utterance, Vocab};
use crate::error::{Error, Result};

pub const BLANK: &str = "<b>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    /// Real tokens, excluding blank and EOS.
    pub num_tokens: usize,
    pub feature_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_token_frames: usize,
    pub max_token_frames: usize,
    /// Standard deviation of additive frame noise.
    pub noise: f64,
    /// 0 keeps templates apart, 1 makes every member of a group identical.
    pub confusability: f64,
    /// Number of confusion groups, taken from the lowest token indices.
    pub confusion_groups: usize,
    /// Tokens per confusion group.
    pub group_size: usize,
    /// Dirichlet concentration of grammar rows; small values give a peaked grammar.
    pub grammar_concentration: f64,
    pub lead_silence: usize,
    pub min_trail_silence: usize,
    pub max_trail_silence: usize,
    /// Probability of a silence after each non-final token.
    pub pause_prob: f64,
    pub min_pause: usize,
    pub max_pause: usize,
    /// Adds an EOS entry to the vocabulary.
    pub eos: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_train: 600,
            num_dev: 100,
            num_test: 100,
            num_tokens: 6,
            feature_dim: 8,
            min_tokens: 2,
            max_tokens: 5,
            min_token_frames: 2,
            max_token_frames: 3,
            noise: 0.3,
            confusability: 0.0,
            confusion_groups: 1,
            group_size: 2,
            grammar_concentration: 0.5,
            lead_silence: 1,
            min_trail_silence: 2,
            max_trail_silence: 4,
            pause_prob: 0.0,
            min_pause: 2,
            max_pause: 4,
            eos: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_tokens < 2 {
            return bad(format!("need at least 2 real tokens, got {}", self.num_tokens));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("bad token range {}..={}", self.min_tokens, self.max_tokens));
        }
        if self.min_token_frames == 0 || self.min_token_frames > self.max_token_frames {
            return bad("bad frames-per-token range".into());
        }
        if self.min_trail_silence > self.max_trail_silence || self.min_pause > self.max_pause {
            return bad("bad silence range".into());
        }
        if !(0.0..=1.0).contains(&self.confusability) || !(0.0..=1.0).contains(&self.pause_prob) {
            return bad("confusability and pause_prob must lie in [0, 1]".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be non-negative".into());
        }
        if self.group_size < 2 || self.confusion_groups * self.group_size > self.num_tokens {
            return bad(format!(
                "{} groups of {} do not fit in {} tokens",
                self.confusion_groups, self.group_size, self.num_tokens
            ));
        }
        if !(self.grammar_concentration > 0.0) {
            return bad("grammar_concentration must be positive".into());
        }
        Ok(())
    }
}

pub struct SynthTask {
    pub vocab: Vocab,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

struct Generator {
    templates: Vec<Array1<f64>>,
    onset: Array1<f64>,
    start: WeightedIndex<f64>,
    next: Vec<WeightedIndex<f64>>,
}

impl Generator {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.feature_dim;
        let unit = |rng: &mut ChaCha8Rng| {
            let v = Array1::from_shape_fn(f, |_| rng.sample::<f64, _>(StandardNormal));
            let n = v.dot(&v).sqrt().max(1e-12);
            v * ((f as f64).sqrt() / n)
        };
        let mut templates: Vec<Array1<f64>> = (0..cfg.num_tokens).map(|_| unit(rng)).collect();
        let onset = unit(rng) * 0.5;
        for group in templates.chunks_mut(cfg.group_size).take(cfg.confusion_groups) {
            let mut mid = Array1::zeros(f);
            for t in group.iter() {
                mid += t;
            }
            mid /= group.len() as f64;
            for t in group.iter_mut() {
                *t = &*t * (1.0 - cfg.confusability) + &mid * cfg.confusability;
            }
        }
        let dir = Dirichlet::new_with_size(cfg.grammar_concentration, cfg.num_tokens).expect("valid");
        let row = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = dir.sample(rng).into_iter().map(|p| p + 1e-3).collect();
            WeightedIndex::new(w).expect("positive weights")
        };
        let start = row(rng);
        let next = (0..cfg.num_tokens).map(|_| row(rng)).collect();
        Self {
            templates,
            onset,
            start,
            next,
        }
    }

    /// Token indices (0-based over real tokens) and rendered frames.
    fn utterance(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Array2<f64>) {
        let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let mut tokens = vec![self.start.sample(rng)];
        while tokens.len() < len {
            let prev = *tokens.last().expect("non-empty");
            tokens.push(self.next[prev].sample(rng));
        }
        let f = cfg.feature_dim;
        let mut frames: Vec<Array1<f64>> = vec![Array1::zeros(f); cfg.lead_silence];
        for (i, &k) in tokens.iter().enumerate() {
            let n = rng.gen_range(cfg.min_token_frames..=cfg.max_token_frames);
            frames.push(&self.templates[k] + &self.onset);
            frames.extend(std::iter::repeat_n(self.templates[k].clone(), n - 1));
            if i + 1 < tokens.len() && cfg.pause_prob > 0.0 && rng.gen_bool(cfg.pause_prob) {
                let p = rng.gen_range(cfg.min_pause..=cfg.max_pause);
                frames.extend(std::iter::repeat_n(Array1::zeros(f), p));
            }
        }
        let trail = rng.gen_range(cfg.min_trail_silence..=cfg.max_trail_silence);
        frames.extend(std::iter::repeat_n(Array1::zeros(f), trail));
        let noise = Normal::new(0.0, cfg.noise).expect("noise validated");
        let x = Array2::from_shape_fn((frames.len(), f), |(t, j)| {
            frames[t][j] + if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 }
        });
        (tokens, x)
    }
}

pub fn synth_vocab(cfg: &SynthConfig) -> Result<Vocab> {
    let mut tokens = vec![BLANK.to_string()];
    tokens.extend((0..cfg.num_tokens).map(|k| format!("t{k}")));
    if cfg.eos {
        tokens.push(EOS.to_string());
    }
    Vocab::new(tokens, BLANK, cfg.eos.then_some(EOS))
}

/// Generates the train/dev/test splits deterministically from `seed`.
pub fn gen_synth(seed: u64, cfg: &SynthConfig) -> Result<SynthTask> {
    cfg.validate()?;
    let vocab = synth_vocab(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator::new(cfg, &mut rng);
    let mut split = |name: &str, n: usize| -> Result<Vec<Utterance>> {
        (0..n)
            .map(|i| {
                let (tokens, features) = gen.utterance(cfg, &mut rng);
                let reference = tokens
                    .iter()
                    .map(|k| vocab.id(&format!("t{k}")))
                    .collect::<Result<_>>()?;
                Ok(Utterance {
                    id: format!("{name}-{i:05}"),
                    features,
                    reference,
                })
            })
            .collect()
    };
    let train = split("train", cfg.num_train)?;
    let dev = split("dev", cfg.num_dev)?;
    let test = split("test", cfg.num_test)?;
    Ok(SynthTask {
        vocab,
        train,
        dev,
        test,
    })
}

impl SynthTask {
    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `vocab.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(dir.join("vocab.json"))?;
        write_dataset(dir.join("train.jsonl"), &self.train, &self.vocab)?;
        write_dataset(dir.join("dev.jsonl"), &self.dev, &self.vocab)?;
        write_dataset(dir.join("test.jsonl"), &self.test, &self.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_train: 5,
            num_dev: 3,
            num_test: 2,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_synth(9, &small()).unwrap().write(a.path()).unwrap();
        gen_synth(9, &small()).unwrap().write(b.path()).unwrap();
        for f in ["vocab.json", "train.jsonl", "dev.jsonl", "test.jsonl"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let c = gen_synth(10, &small()).unwrap();
        assert_ne!(c.train[0].features, gen_synth(9, &small()).unwrap().train[0].features);
    }

    #[test]
    fn refuses_tiny_vocab() {
        let cfg = SynthConfig { num_tokens: 1, ..small() };
        assert!(matches!(gen_synth(0, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn frame_counts_follow_the_ranges() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let task = gen_synth(3, &cfg).unwrap();
        for u in &task.train {
            let u_len = u.reference.len();
            assert!((cfg.min_tokens..=cfg.max_tokens).contains(&u_len));
            let lo = cfg.lead_silence + u_len * cfg.min_token_frames + cfg.min_trail_silence;
            let hi = cfg.lead_silence + u_len * cfg.max_token_frames + cfg.max_trail_silence;
            assert!((lo..=hi).contains(&u.features.nrows()), "{}", u.features.nrows());
            assert!(u.features.row(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn full_confusability_merges_group_templates() {
        let cfg = SynthConfig { confusability: 1.0, noise: 0.0, group_size: 3, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(&cfg, &mut rng);
        for (a, b) in [(0, 1), (1, 2)] {
            for (x, y) in g.templates[a].iter().zip(g.templates[b].iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_ne!(g.templates[3], g.templates[4]);
        let bad = SynthConfig { confusion_groups: 2, group_size: 4, ..small() };
        assert!(gen_synth(0, &bad).is_err());
    }
}
