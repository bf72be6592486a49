//! Command-line surface of the `rnnt-mwer` binary.
//!
//! Every subcommand accepts `--seed`, `--config <json>` and `--json-out <path>`.
//! Flags given on the command line override the matching config field.
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric-invariant failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    compute_wer, read_dataset, read_nbest, reference_map, top1_map, write_nbest, Utterance, Vocab,
    WerReport,
};
use crate::decoder::DecodeConfig;
use crate::error::{from_json_str, Error, Result};
use crate::gradcheck::{check_model_rnnt_gradients, check_mwer_gradients, check_rnnt_gradients, GradCheckSummary};
use crate::model::{load_checkpoint, save_checkpoint, ModelDims, ModelParams};
use crate::mwer::NBestList;
use crate::rescore::{lm_rescore, rnnt_rescore, NGramLM, RescoreConfig};
use crate::synth::{gen_synth, SynthConfig};
use crate::trainer::{
    decode_nbest, train_mwer_on_the_fly, train_mwer_semi, train_rnnt, MwerTrainConfig, RnntTrainConfig,
    SemiOnTheFlyPlan,
};

#[derive(Debug, Parser)]
#[command(name = "rnnt-mwer", version, about = "RNN-T training, MWER fine-tuning, decoding and rescoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON config for the subcommand.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/dev/test task.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        confusability: Option<f64>,
        #[arg(long)]
        pause_prob: Option<f64>,
    },
    /// Maximum-likelihood transducer training.
    TrainRnnt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Append EOS to every target.
        #[arg(long)]
        eos: bool,
    },
    /// Beam-search decode a dataset into N-best lists.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        nbest_out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Stop a hypothesis at EOS.
        #[arg(long)]
        eos: bool,
    },
    /// MWER fine-tuning of a seed model.
    TrainMwer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Onthefly)]
        mode: Mode,
        /// Number of contiguous splits (semi mode).
        #[arg(long, default_value_t = 8)]
        splits: usize,
        /// Utterances per split; overrides --splits.
        #[arg(long)]
        split_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Directory for persisted N-best lists, checkpoints and the manifest (semi mode).
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        eos: bool,
    },
    /// Re-rank N-best lists with exact transducer scores, an LM, or both.
    Rescore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Both)]
        method: Method,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset holding the features of the listed utterances.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Train an add-delta n-gram LM on dataset references.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
    /// Corpus WER of N-best top-1 hypotheses against dataset references.
    EvalWer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        baseline_wer: Option<f64>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        lattice_instances: usize,
        #[arg(long, default_value_t = 20)]
        model_instances: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Onthefly,
    Semi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rnnt,
    Lm,
    Both,
}

/// Model shape for `train-rnnt`; input and vocabulary sizes come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub enc_hidden: usize,
    pub embed_dim: usize,
    pub pred_hidden: usize,
    pub joint_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            enc_hidden: 12,
            embed_dim: 8,
            pred_hidden: 12,
            joint_dim: 12,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRnntFile {
    pub model: ModelShape,
    pub train: RnntTrainConfig,
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            from_json_str(&text)
        }
    }
}

fn emit<T: Serialize + std::fmt::Display>(report: &T, json_out: Option<&Path>) -> Result<()> {
    println!("{report}");
    if let Some(p) = json_out {
        let text = serde_json::to_string_pretty(report).expect("report serializes");
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthReport {
    out: PathBuf,
    train: usize,
    dev: usize,
    test: usize,
    vocab_size: usize,
}

impl std::fmt::Display for SynthReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "wrote {} train / {} dev / {} test utterances ({} tokens) to {}",
            self.train,
            self.dev,
            self.test,
            self.vocab_size,
            self.out.display()
        )
    }
}

#[derive(Debug, Serialize)]
struct TrainReport {
    out: PathBuf,
    steps: u64,
    losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dev: Option<Vec<crate::trainer::DevPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skipped: Option<usize>,
}

impl std::fmt::Display for TrainReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let first = self.losses.first().copied().unwrap_or(f64::NAN);
        let last = self.losses.last().copied().unwrap_or(f64::NAN);
        write!(f, "steps {:>6}  loss {:.4} -> {:.4}", self.steps, first, last)?;
        if let Some(dev) = &self.dev {
            for p in dev {
                write!(
                    f,
                    "\n  step {:>6}  dev expected errors {:.4}  WER {:.4}  dels {}",
                    p.step, p.expected_errors, p.wer, p.deletions
                )?;
            }
        }
        if let Some(s) = self.skipped.filter(|&s| s > 0) {
            write!(f, "\n  skipped {s} utterances with empty N-best lists")?;
        }
        write!(f, "\nsaved {}", self.out.display())
    }
}

#[derive(Debug, Serialize)]
struct DecodeReport {
    utterances: usize,
    empty: usize,
    decode_seconds: f64,
    wer: WerReport,
}

impl std::fmt::Display for DecodeReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "decoded {} utterances in {:.2}s ({} empty)", self.utterances, self.decode_seconds, self.empty)?;
        write!(f, "{}", self.wer)
    }
}

#[derive(Debug, Serialize)]
struct RescoreReport {
    lists: usize,
    top1_changed: usize,
    out: PathBuf,
}

impl std::fmt::Display for RescoreReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rescored {} lists, top-1 changed in {}; wrote {}",
            self.lists,
            self.top1_changed,
            self.out.display()
        )
    }
}

#[derive(Debug, Serialize)]
struct LmReport {
    order: usize,
    delta: f64,
    sentences: usize,
    out: PathBuf,
}

impl std::fmt::Display for LmReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}-gram LM (delta {}) from {} sentences -> {}",
            self.order,
            self.delta,
            self.sentences,
            self.out.display()
        )
    }
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    suites: Vec<(String, GradCheckSummary, f64)>,
    passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<16} {:>8} {:>14} {:>10}", "suite", "checked", "max rel err", "bound")?;
        for (name, s, bound) in &self.suites {
            writeln!(f, "{:<16} {:>8} {:>14.3e} {:>10.0e}", name, s.checked, s.max_rel_error, bound)?;
        }
        write!(f, "{}", if self.passed { "all suites within bounds" } else { "FAILED" })
    }
}

/// Loads a checkpoint and checks it against the vocabulary.
fn load_model(path: &Path, vocab: &Vocab) -> Result<ModelParams> {
    let params = load_checkpoint(path, None)?;
    if params.dims.vocab_size != vocab.len() || params.dims.blank_id != vocab.blank_id() {
        return Err(Error::InvalidInput(format!(
            "{} has {} outputs with blank {}, vocabulary has {} with blank {}",
            path.display(),
            params.dims.vocab_size,
            params.dims.blank_id,
            vocab.len(),
            vocab.blank_id()
        )));
    }
    Ok(params)
}

fn input_dim(data: &[Utterance]) -> Result<usize> {
    data.first()
        .map(|u| u.features.ncols())
        .ok_or_else(|| Error::InvalidInput("dataset is empty".into()))
}

fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth {
            common,
            out,
            noise,
            confusability,
            pause_prob,
        } => {
            let mut cfg: SynthConfig = load_config(common.config.as_deref())?;
            if let Some(v) = noise {
                cfg.noise = v;
            }
            if let Some(v) = confusability {
                cfg.confusability = v;
            }
            if let Some(v) = pause_prob {
                cfg.pause_prob = v;
            }
            let task = gen_synth(common.seed, &cfg)?;
            task.write(&out)?;
            let report = SynthReport {
                out,
                train: task.train.len(),
                dev: task.dev.len(),
                test: task.test.len(),
                vocab_size: task.vocab.len(),
            };
            emit(&report, common.json_out.as_deref())
        }
        Command::TrainRnnt {
            common,
            train,
            vocab,
            out,
            steps,
            workers,
            eos,
        } => {
            let mut cfg: TrainRnntFile = load_config(common.config.as_deref())?;
            let vocab = Vocab::load(&vocab)?;
            let data = read_dataset(&train, &vocab)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(w) = workers {
                cfg.train.workers = w;
            }
            cfg.train.use_eos |= eos;
            cfg.train.seed = common.seed;
            let dims = ModelDims {
                input_dim: input_dim(&data)?,
                enc_hidden: cfg.model.enc_hidden,
                embed_dim: cfg.model.embed_dim,
                pred_hidden: cfg.model.pred_hidden,
                joint_dim: cfg.model.joint_dim,
                vocab_size: vocab.len(),
                blank_id: vocab.blank_id(),
            };
            let init = ModelParams::init(common.seed, dims)?;
            let r = train_rnnt(&data, init, &cfg.train, vocab.eos_id())?;
            save_checkpoint(&r.params, &out)?;
            let report = TrainReport {
                out,
                steps: r.losses.len() as u64,
                losses: r.losses,
                dev: None,
                skipped: None,
            };
            emit(&report, common.json_out.as_deref())
        }
        Command::Decode {
            common,
            model,
            data,
            vocab,
            beam,
            temperature,
            nbest_out,
            workers,
            eos,
        } => {
            let mut cfg: DecodeConfig = load_config(common.config.as_deref())?;
            if let Some(b) = beam {
                cfg.beam_size = b;
            }
            if let Some(t) = temperature {
                cfg.temperature = t;
            }
            let vocab = Vocab::load(&vocab)?;
            if eos {
                cfg.eos_id = vocab.eos_id();
            }
            cfg.validate()?;
            let data = read_dataset(&data, &vocab)?;
            let params = load_model(&model, &vocab)?;
            let utts: Vec<&Utterance> = data.iter().collect();
            let t0 = Instant::now();
            let lists = decode_nbest(&params, &utts, &cfg, cfg.beam_size, cfg.eos_id.is_some(), &vocab, workers)?;
            let decode_seconds = t0.elapsed().as_secs_f64();
            let empty = lists.iter().filter(|l| l.is_none()).count();
            let lists: Vec<NBestList> = lists.into_iter().flatten().collect();
            let mut hyps = top1_map(&lists)?;
            for u in &data {
                hyps.entry(u.id.clone()).or_default();
            }
            let wer = compute_wer(&hyps, &reference_map(&data))?;
            if let Some(p) = &nbest_out {
                write_nbest(p, &lists, &vocab)?;
            }
            let report = DecodeReport {
                utterances: data.len(),
                empty,
                decode_seconds,
                wer,
            };
            emit(&report, common.json_out.as_deref())
        }
        Command::TrainMwer {
            common,
            model,
            train,
            dev,
            vocab,
            out,
            mode,
            splits,
            split_size,
            epochs,
            workers,
            work_dir,
            eos,
        } => {
            let mut cfg: MwerTrainConfig = load_config(common.config.as_deref())?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.use_eos |= eos;
            let vocab = Vocab::load(&vocab)?;
            let data = read_dataset(&train, &vocab)?;
            let dev = match &dev {
                Some(p) => read_dataset(p, &vocab)?,
                None => Vec::new(),
            };
            let params = load_model(&model, &vocab)?;
            let r = match mode {
                Mode::Onthefly => train_mwer_on_the_fly(&data, &dev, params, &cfg, &vocab)?,
                Mode::Semi => {
                    let ids: Vec<String> = data.iter().map(|u| u.id.clone()).collect();
                    let mut plan = match split_size {
                        Some(s) => SemiOnTheFlyPlan::with_split_size(&ids, s, cfg.epochs, cfg.workers)?,
                        None => SemiOnTheFlyPlan::contiguous(&ids, splits, cfg.epochs, cfg.workers)?,
                    };
                    plan.out_dir = work_dir;
                    train_mwer_semi(&data, &dev, params, &plan, &cfg, &vocab)?
                }
            };
            save_checkpoint(&r.params, &out)?;
            let report = TrainReport {
                out,
                steps: r.steps,
                losses: r.losses,
                dev: Some(r.dev_history),
                skipped: Some(r.skipped),
            };
            emit(&report, common.json_out.as_deref())
        }
        Command::Rescore {
            common,
            nbest,
            vocab,
            out,
            method,
            lambda,
            model,
            data,
            lm,
            temperature,
        } => {
            let mut cfg: RescoreConfig = load_config(common.config.as_deref())?;
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            let vocab = Vocab::load(&vocab)?;
            let mut lists = read_nbest(&nbest, &vocab)?;
            let before: Vec<Vec<usize>> = lists.iter().map(|l| l.hypotheses[0].tokens.clone()).collect();
            if matches!(method, Method::Rnnt | Method::Both) {
                let (Some(model), Some(data)) = (&model, &data) else {
                    return Err(Error::InvalidArgument("rnnt rescoring needs --model and --data".into()));
                };
                let params = load_model(model, &vocab)?;
                let utts = read_dataset(data, &vocab)?;
                let by_id: std::collections::HashMap<&str, &Utterance> =
                    utts.iter().map(|u| (u.id.as_str(), u)).collect();
                for l in &mut lists {
                    let u = by_id.get(l.utterance_id.as_str()).ok_or_else(|| {
                        Error::InvalidInput(format!("no features for utterance {}", l.utterance_id))
                    })?;
                    *l = rnnt_rescore(l, &params.encode(&u.features)?, temperature)?;
                }
            }
            if matches!(method, Method::Lm | Method::Both) {
                let Some(lm) = &lm else {
                    return Err(Error::InvalidArgument("lm rescoring needs --lm".into()));
                };
                let lm = NGramLM::load(lm)?;
                for l in &mut lists {
                    *l = lm_rescore(l, &lm, |k| vocab.word(k), &cfg)?;
                }
            }
            write_nbest(&out, &lists, &vocab)?;
            let report = RescoreReport {
                lists: lists.len(),
                top1_changed: lists
                    .iter()
                    .zip(&before)
                    .filter(|(l, b)| l.hypotheses[0].tokens != **b)
                    .count(),
                out,
            };
            emit(&report, common.json_out.as_deref())
        }
        Command::TrainLm {
            common,
            train,
            vocab,
            out,
            order,
            delta,
        } => {
            let vocab = Vocab::load(&vocab)?;
            let data = read_dataset(&train, &vocab)?;
            let sentences: Vec<Vec<String>> = data
                .iter()
                .map(|u| u.reference.iter().filter_map(|&k| vocab.word(k)).collect())
                .collect();
            let words: Vec<String> = vocab.real_tokens().map(String::from).collect();
            let lm = NGramLM::train(&sentences, words, order, delta)?;
            lm.save(&out)?;
            let report = LmReport {
                order,
                delta,
                sentences: sentences.len(),
                out,
            };
            emit(&report, common.json_out.as_deref())
        }
        Command::EvalWer {
            common,
            hyps,
            refs,
            vocab,
            baseline_wer,
        } => {
            let vocab = Vocab::load(&vocab)?;
            let lists = read_nbest(&hyps, &vocab)?;
            let refs = read_dataset(&refs, &vocab)?;
            let mut report = compute_wer(&top1_map(&lists)?, &reference_map(&refs))?;
            if let Some(b) = baseline_wer {
                report = report.with_baseline(b)?;
            }
            emit(&report, common.json_out.as_deref())
        }
        Command::Gradcheck {
            common,
            lattice_instances,
            model_instances,
        } => {
            let h = 1e-5;
            let suites = vec![
                ("rnnt-lattice".to_string(), check_rnnt_gradients(common.seed, lattice_instances, h, 1e-8)?, 1e-4),
                ("rnnt-model".to_string(), check_model_rnnt_gradients(common.seed, model_instances, h, 1e-7)?, 1e-4),
                ("mwer-model".to_string(), check_mwer_gradients(common.seed, model_instances, h, 1e-7)?, 1e-3),
            ];
            let passed = suites.iter().all(|(_, s, b)| s.max_rel_error < *b);
            let report = GradcheckReport { suites, passed };
            emit(&report, common.json_out.as_deref())?;
            if !passed {
                return Err(Error::Invariant("gradient check exceeded its bound".into()));
            }
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
