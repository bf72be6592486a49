//! Training loops: RNN-T maximum likelihood, on-the-fly MWER and
//! semi-on-the-fly MWER, all driven by Adam and a warmup/constant/decay schedule.
//!
//! Per-utterance gradients may be computed on a worker pool, but they are
//! always summed in utterance order, so results do not depend on the worker count.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compute_wer, nbest_from_jsonl, nbest_to_jsonl, reference_map, top1_map, Utterance, Vocab, WerReport};
use crate::decoder::{beam_search, DecodeConfig};
use crate::error::{Error, Result};
use crate::lattice::rnnt_loss_and_grad;
use crate::model::{save_checkpoint, ModelParams, Transducer};
use crate::mwer::{mwer_full_grad, MwerConfig, NBestList};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub warmup_steps: u64,
    pub constant_steps: u64,
    pub decay_steps: u64,
    pub lr_constant: f64,
    pub lr_final: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::rnnt()
    }
}

impl TrainSchedule {
    /// RNN-T defaults: plateau 5e-4, final 1e-5.
    pub fn rnnt() -> Self {
        Self {
            warmup_steps: 100,
            constant_steps: 900,
            decay_steps: 1000,
            lr_constant: 5e-4,
            lr_final: 1e-5,
        }
    }

    /// MWER fine-tuning defaults: plateau 1e-5, final 1e-6.
    pub fn mwer() -> Self {
        Self {
            warmup_steps: 20,
            constant_steps: 200,
            decay_steps: 200,
            lr_constant: 1e-5,
            lr_final: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_constant >= 0.0 && self.lr_final >= 0.0)
            || !self.lr_constant.is_finite()
            || !self.lr_final.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be non-negative, got {} and {}",
                self.lr_constant, self.lr_final
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.constant_steps + self.decay_steps
    }

    /// Learning rate at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let lc = self.lr_constant;
        if step < self.warmup_steps {
            return lc * step as f64 / self.warmup_steps as f64;
        }
        let decay_start = self.warmup_steps + self.constant_steps;
        if step < decay_start {
            return lc;
        }
        let into = step - decay_start;
        if into >= self.decay_steps {
            return self.lr_final;
        }
        let p = into as f64 / self.decay_steps as f64;
        if lc == 0.0 || self.lr_final == 0.0 {
            // No exponential path through zero; fall back to linear.
            return lc + (self.lr_final - lc) * p;
        }
        lc * (self.lr_final / lc).powf(p)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Bias-corrected Adam on flat slices; `step` is the 1-based count after this update.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) {
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    if grads.dims != params.dims || state.m.dims != params.dims {
        return Err(Error::InvalidInput(format!(
            "Adam shapes differ: params {:?}, grads {:?}, state {:?}",
            params.dims, grads.dims, state.m.dims
        )));
    }
    state.step += 1;
    let hyper = (state.beta1, state.beta2, state.eps);
    let AdamState { m, v, step, .. } = state;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        adam_update(p.1, g.1, m.1, v.1, *step, lr, hyper);
    }
    Ok(())
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::InvalidArgument("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))
}

fn clip(grads: &mut ModelParams, max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = grads.l2_norm();
        if n > c {
            grads.scale(c / n);
        }
    }
}

fn check_dataset(data: &[Utterance], params: &ModelParams) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    for u in data {
        if u.features.ncols() != params.dims.input_dim {
            return Err(Error::InvalidInput(format!(
                "utterance {} has {} feature dims, model expects {}",
                u.id,
                u.features.ncols(),
                params.dims.input_dim
            )));
        }
    }
    Ok(())
}

fn target(u: &Utterance, eos: Option<usize>) -> Vec<usize> {
    let mut y = u.reference.clone();
    y.extend(eos);
    y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RnntTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: TrainSchedule,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub workers: usize,
    pub max_grad_norm: Option<f64>,
    /// Append EOS to every target.
    pub use_eos: bool,
    pub log_every: u64,
}

impl Default for RnntTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            schedule: TrainSchedule::rnnt(),
            seed: 0,
            workers: 1,
            max_grad_norm: None,
            use_eos: false,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RnntTrainResult {
    pub params: ModelParams,
    /// Mean per-utterance loss (nats) of every step's batch, before the update.
    pub losses: Vec<f64>,
}

/// Maximum-likelihood training on whole-utterance batches.
pub fn train_rnnt(
    data: &[Utterance],
    params: ModelParams,
    config: &RnntTrainConfig,
    eos_id: Option<usize>,
) -> Result<RnntTrainResult> {
    check_dataset(data, &params)?;
    config.schedule.validate()?;
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let eos = if config.use_eos {
        Some(eos_id.ok_or_else(|| Error::InvalidArgument("use_eos needs an EOS token".into()))?)
    } else {
        None
    };
    let pool = worker_pool(config.workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut params = params;
    let mut adam = AdamState::new(&params);
    let mut losses = Vec::with_capacity(config.steps as usize);

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let per_utt: Vec<Result<(f64, ModelParams)>> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    let u = &data[i];
                    let y = target(u, eos);
                    let enc = params.encode(&u.features)?;
                    let (loss, grad) = rnnt_loss_and_grad(&enc.lattice(&y)?, &y, 1.0)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss(format!("utterance {}: loss {loss}", u.id)));
                    }
                    let mut g = params.zeros_like();
                    enc.backward_into(&y, &grad, &mut g)?;
                    Ok((loss, g))
                })
                .collect()
        });
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        for (r, &i) in per_utt.into_iter().zip(&batch) {
            let (l, g) = r.map_err(|e| match e {
                Error::NonFiniteLoss(m) => Error::NonFiniteLoss(m),
                other => Error::NonFiniteLoss(format!("utterance {}: {other}", data[i].id)),
            })?;
            loss += l;
            total.add_scaled(&g, 1.0);
        }
        let n = batch.len() as f64;
        total.scale(1.0 / n);
        loss /= n;
        clip(&mut total, config.max_grad_norm);
        adam_step(&mut adam, &mut params, &total, config.schedule.lr_at(step))?;
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss(format!("parameters became non-finite at step {step}")));
        }
        if config.log_every > 0 && step % config.log_every == 0 {
            log::info!("rnnt step {step} loss {loss:.4} lr {:.2e}", config.schedule.lr_at(step));
        }
        losses.push(loss);
    }
    Ok(RnntTrainResult { params, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwerTrainConfig {
    /// Passes over the data (on-the-fly mode; the semi plan carries its own).
    pub epochs: usize,
    pub batch_size: usize,
    pub beam_size: usize,
    /// Hypotheses kept per utterance.
    pub nbest: usize,
    pub max_symbols_per_frame: usize,
    pub mwer: MwerConfig,
    pub schedule: TrainSchedule,
    /// Decode workers (on-the-fly mode).
    pub workers: usize,
    pub max_grad_norm: Option<f64>,
    pub use_eos: bool,
    /// Dev evaluation cadence in steps (on-the-fly mode); 0 disables.
    pub dev_every: u64,
    /// Keep a copy of the parameters after every step.
    pub record_trajectory: bool,
}

impl Default for MwerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            beam_size: 4,
            nbest: 4,
            max_symbols_per_frame: 10,
            mwer: MwerConfig::default(),
            schedule: TrainSchedule::mwer(),
            workers: 1,
            max_grad_norm: None,
            use_eos: false,
            dev_every: 200,
            record_trajectory: false,
        }
    }
}

impl MwerTrainConfig {
    pub fn decode_config(&self, vocab: &Vocab) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            temperature: 1.0,
            max_symbols_per_frame: self.max_symbols_per_frame,
            eos_id: if self.use_eos { vocab.eos_id() } else { None },
        }
    }

    fn validate(&self, vocab: &Vocab) -> Result<()> {
        self.schedule.validate()?;
        self.decode_config(vocab).validate()?;
        if self.batch_size == 0 || self.nbest == 0 {
            return Err(Error::InvalidArgument("batch_size and nbest must be at least 1".into()));
        }
        if self.use_eos && vocab.eos_id().is_none() {
            return Err(Error::InvalidArgument("use_eos needs an EOS token".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevPoint {
    pub step: u64,
    /// Mean expected errors per utterance over the dev N-best lists.
    pub expected_errors: f64,
    pub wer: f64,
    pub deletions: usize,
}

#[derive(Debug, Clone)]
pub struct MwerTrainResult {
    pub params: ModelParams,
    pub adam: AdamState,
    pub steps: u64,
    /// Mean expected errors of every step's batch, before the update.
    pub losses: Vec<f64>,
    /// Utterances skipped because decoding produced no hypothesis.
    pub skipped: usize,
    pub dev_history: Vec<DevPoint>,
    pub trajectory: Vec<ModelParams>,
    /// Wall-clock seconds spent decoding N-best lists for training.
    pub decode_seconds: f64,
}

/// Decodes each utterance with frozen `params`; `None` marks an empty result.
pub fn decode_nbest(
    params: &ModelParams,
    utts: &[&Utterance],
    decode: &DecodeConfig,
    nbest: usize,
    use_eos: bool,
    vocab: &Vocab,
    workers: usize,
) -> Result<Vec<Option<NBestList>>> {
    let pool = worker_pool(workers)?;
    let eos = if use_eos { vocab.eos_id() } else { None };
    pool.install(|| {
        utts.par_iter()
            .map(|u| {
                let enc = params.encode(&u.features)?;
                match beam_search(&enc, decode) {
                    Ok(mut hyps) => {
                        hyps.truncate(nbest);
                        let list = NBestList {
                            utterance_id: u.id.clone(),
                            hypotheses: hyps,
                            reference: target(u, eos),
                            eos_id: vocab.eos_id(),
                        };
                        Ok(Some(list))
                    }
                    Err(Error::EmptyResult(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect()
    })
}

/// Dev-set expected errors and top-1 WER.
pub fn evaluate(
    params: &ModelParams,
    dev: &[Utterance],
    config: &MwerTrainConfig,
    vocab: &Vocab,
    workers: usize,
    step: u64,
) -> Result<DevPoint> {
    let utts: Vec<&Utterance> = dev.iter().collect();
    let lists = decode_nbest(params, &utts, &config.decode_config(vocab), config.nbest, config.use_eos, vocab, workers)?;
    let mut expected = 0.0;
    let mut hyps = std::collections::BTreeMap::new();
    for (u, l) in dev.iter().zip(&lists) {
        match l {
            Some(l) => {
                let enc = params.encode(&u.features)?;
                expected += mwer_full_grad(&enc, l, &config.mwer)?.expected_errors;
                hyps.extend(top1_map(std::slice::from_ref(l))?);
            }
            None => {
                expected += u.reference.len() as f64;
                hyps.insert(u.id.clone(), Vec::new());
            }
        }
    }
    let wer: WerReport = compute_wer(&hyps, &reference_map(dev))?;
    Ok(DevPoint {
        step,
        expected_errors: expected / dev.len() as f64,
        wer: wer.wer,
        deletions: wer.deletions,
    })
}

/// MWER loss of one utterance and its gradient with respect to every parameter.
pub fn mwer_param_grad(
    params: &ModelParams,
    features: &Array2<f64>,
    list: &NBestList,
    config: &MwerConfig,
) -> Result<(f64, ModelParams)> {
    let enc = params.encode(features)?;
    let g = mwer_full_grad(&enc, list, config)?;
    let mut grads = params.zeros_like();
    for (h, lg) in g.hypotheses.iter().zip(&g.lattice_grads) {
        enc.backward_into(&h.tokens, lg, &mut grads)?;
    }
    Ok((g.loss, grads))
}

/// Shared optimizer bookkeeping of both MWER modes.
struct MwerRun<'a> {
    config: &'a MwerTrainConfig,
    params: ModelParams,
    adam: AdamState,
    step: u64,
    losses: Vec<f64>,
    skipped: usize,
    trajectory: Vec<ModelParams>,
    pool: rayon::ThreadPool,
}

impl<'a> MwerRun<'a> {
    fn new(params: ModelParams, config: &'a MwerTrainConfig, workers: usize) -> Result<Self> {
        Ok(Self {
            adam: AdamState::new(&params),
            params,
            config,
            step: 0,
            losses: Vec::new(),
            skipped: 0,
            trajectory: Vec::new(),
            pool: worker_pool(workers)?,
        })
    }

    /// One Adam step over the batch; utterances without a list are skipped.
    fn step(&mut self, batch: &[(&Utterance, Option<&NBestList>)]) -> Result<()> {
        let params = &self.params;
        let mwer = &self.config.mwer;
        let per_utt: Vec<Result<Option<(f64, ModelParams)>>> = self.pool.install(|| {
            batch
                .par_iter()
                .map(|(u, list)| {
                    let Some(list) = list else { return Ok(None) };
                    mwer_param_grad(params, &u.features, list, mwer).map(Some)
                })
                .collect()
        });
        let mut total = self.params.zeros_like();
        let mut loss = 0.0;
        let mut used = 0usize;
        for (r, (u, _)) in per_utt.into_iter().zip(batch) {
            match r.map_err(|e| match e {
                Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("utterance {}: {m}", u.id)),
                other => other,
            })? {
                Some((l, g)) => {
                    loss += l;
                    total.add_scaled(&g, 1.0);
                    used += 1;
                }
                None => self.skipped += 1,
            }
        }
        if used > 0 {
            total.scale(1.0 / used as f64);
            clip(&mut total, self.config.max_grad_norm);
            let lr = self.config.schedule.lr_at(self.step);
            adam_step(&mut self.adam, &mut self.params, &total, lr)?;
            if !self.params.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "parameters became non-finite at MWER step {}",
                    self.step
                )));
            }
            self.losses.push(loss / used as f64);
            self.step += 1;
            if self.config.record_trajectory {
                self.trajectory.push(self.params.clone());
            }
        }
        Ok(())
    }
}

/// MWER with N-best lists decoded from the current model for every batch.
pub fn train_mwer_on_the_fly(
    data: &[Utterance],
    dev: &[Utterance],
    params: ModelParams,
    config: &MwerTrainConfig,
    vocab: &Vocab,
) -> Result<MwerTrainResult> {
    check_dataset(data, &params)?;
    config.validate(vocab)?;
    let decode = config.decode_config(vocab);
    let mut run = MwerRun::new(params, config, config.workers)?;
    let mut dev_history = Vec::new();
    let mut decode_seconds = 0.0;
    let mut last_dev = None;
    let mut eval = |run: &MwerRun, history: &mut Vec<DevPoint>| -> Result<()> {
        if !dev.is_empty() && last_dev != Some(run.step) {
            let p = evaluate(&run.params, dev, config, vocab, config.workers, run.step)?;
            log::info!("mwer step {} dev expected errors {:.4} wer {:.4}", p.step, p.expected_errors, p.wer);
            history.push(p);
            last_dev = Some(run.step);
        }
        Ok(())
    };
    eval(&run, &mut dev_history)?;
    for _ in 0..config.epochs {
        for chunk in data.chunks(config.batch_size) {
            let utts: Vec<&Utterance> = chunk.iter().collect();
            let t0 = Instant::now();
            let lists = decode_nbest(&run.params, &utts, &decode, config.nbest, config.use_eos, vocab, config.workers)?;
            decode_seconds += t0.elapsed().as_secs_f64();
            let batch: Vec<_> = chunk.iter().zip(lists.iter().map(|l| l.as_ref())).collect();
            let before = run.step;
            run.step(&batch)?;
            if config.dev_every > 0 && run.step != before && run.step % config.dev_every == 0 {
                eval(&run, &mut dev_history)?;
            }
        }
    }
    eval(&run, &mut dev_history)?;
    Ok(MwerTrainResult {
        params: run.params,
        adam: run.adam,
        steps: run.step,
        losses: run.losses,
        skipped: run.skipped,
        dev_history,
        trajectory: run.trajectory,
        decode_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiOnTheFlyPlan {
    /// Utterance ids of each split, in training order.
    pub splits: Vec<Vec<String>>,
    pub epochs: usize,
    pub workers: usize,
    /// Restart Adam moments at every split instead of one continuous optimization.
    #[serde(default)]
    pub reset_adam_per_split: bool,
    /// Where N-best lists, checkpoints and the run manifest go.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl SemiOnTheFlyPlan {
    /// `k` contiguous splits of near-equal size over `ids` in the given order.
    pub fn contiguous(ids: &[String], k: usize, epochs: usize, workers: usize) -> Result<Self> {
        if k == 0 || k > ids.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot make {k} splits of {} utterances",
                ids.len()
            )));
        }
        let (q, r) = (ids.len() / k, ids.len() % k);
        let mut splits = Vec::with_capacity(k);
        let mut start = 0;
        for j in 0..k {
            let len = q + usize::from(j < r);
            splits.push(ids[start..start + len].to_vec());
            start += len;
        }
        Ok(Self {
            splits,
            epochs,
            workers,
            reset_adam_per_split: false,
            out_dir: None,
        })
    }

    /// Splits of exactly `size` utterances (the last may be shorter).
    pub fn with_split_size(ids: &[String], size: usize, epochs: usize, workers: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("split size must be at least 1".into()));
        }
        Ok(Self {
            splits: ids.chunks(size).map(|c| c.to_vec()).collect(),
            epochs,
            workers,
            reset_adam_per_split: false,
            out_dir: None,
        })
    }

    /// Checks that the splits partition `data` exactly.
    pub fn validate(&self, data: &[Utterance]) -> Result<()> {
        if self.splits.is_empty() || self.splits.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("plan has an empty split".into()));
        }
        let known: HashMap<&str, ()> = data.iter().map(|u| (u.id.as_str(), ())).collect();
        let mut seen = HashMap::new();
        for (j, s) in self.splits.iter().enumerate() {
            for id in s {
                if !known.contains_key(id.as_str()) {
                    return Err(Error::InvalidInput(format!("split {} names unknown utterance {id}", j + 1)));
                }
                if let Some(prev) = seen.insert(id.as_str(), j) {
                    return Err(Error::InvalidInput(format!(
                        "utterance {id} appears in splits {} and {}",
                        prev + 1,
                        j + 1
                    )));
                }
            }
        }
        if seen.len() != data.len() {
            return Err(Error::InvalidInput(format!(
                "plan covers {} of {} utterances",
                seen.len(),
                data.len()
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Lineage label of the model after split `j` of epoch `i` (both 1-based).
pub fn checkpoint_name(epoch: usize, split: usize) -> String {
    format!("model.e{epoch}.s{split}.json")
}

pub fn nbest_name(epoch: usize, split: usize) -> String {
    format!("nbest.e{epoch}.s{split}.jsonl")
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    plan: &'a SemiOnTheFlyPlan,
    config: &'a MwerTrainConfig,
    completed: &'a [String],
    dev_history: &'a [DevPoint],
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Semi-on-the-fly MWER: each split is decoded once with the frozen model
/// `M_{i,j-1}`, the lists are persisted, and training on the split reads them back.
pub fn train_mwer_semi(
    data: &[Utterance],
    dev: &[Utterance],
    params: ModelParams,
    plan: &SemiOnTheFlyPlan,
    config: &MwerTrainConfig,
    vocab: &Vocab,
) -> Result<MwerTrainResult> {
    check_dataset(data, &params)?;
    config.validate(vocab)?;
    plan.validate(data)?;
    let by_id: HashMap<&str, &Utterance> = data.iter().map(|u| (u.id.as_str(), u)).collect();
    let decode = config.decode_config(vocab);
    if let Some(dir) = &plan.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut run = MwerRun::new(params, config, plan.workers)?;
    let mut dev_history = Vec::new();
    let mut completed = Vec::new();
    let mut decode_seconds = 0.0;
    let write_manifest = |completed: &[String], history: &[DevPoint]| -> Result<()> {
        if let Some(dir) = &plan.out_dir {
            let m = Manifest { plan, config, completed, dev_history: history };
            write_file(&dir.join("manifest.json"), &serde_json::to_string_pretty(&m).expect("manifest"))?;
        }
        Ok(())
    };
    if !dev.is_empty() {
        dev_history.push(evaluate(&run.params, dev, config, vocab, plan.workers, 0)?);
    }
    write_manifest(&completed, &dev_history)?;

    for epoch in 1..=plan.epochs {
        for (j, split) in plan.splits.iter().enumerate() {
            let utts: Vec<&Utterance> = split.iter().map(|id| by_id[id.as_str()]).collect();
            let t0 = Instant::now();
            let decoded = decode_nbest(&run.params, &utts, &decode, config.nbest, config.use_eos, vocab, plan.workers)?;
            decode_seconds += t0.elapsed().as_secs_f64();
            let lists: Vec<NBestList> = decoded.into_iter().flatten().collect();
            let text = nbest_to_jsonl(&lists, vocab);
            if let Some(dir) = &plan.out_dir {
                write_file(&dir.join(nbest_name(epoch, j + 1)), &text)?;
            }
            let persisted = match &plan.out_dir {
                Some(dir) => {
                    let p = dir.join(nbest_name(epoch, j + 1));
                    std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?
                }
                None => text,
            };
            let mut lists: HashMap<String, NBestList> = HashMap::new();
            for l in nbest_from_jsonl(&persisted, vocab)? {
                if !by_id.contains_key(l.utterance_id.as_str()) {
                    return Err(Error::InvalidInput(format!(
                        "persisted N-best names unknown utterance {}",
                        l.utterance_id
                    )));
                }
                lists.insert(l.utterance_id.clone(), l);
            }

            if plan.reset_adam_per_split {
                run.adam = AdamState::new(&run.params);
            }
            for chunk in utts.chunks(config.batch_size) {
                let batch: Vec<_> = chunk.iter().map(|u| (*u, lists.get(&u.id))).collect();
                run.step(&batch)?;
            }

            let label = checkpoint_name(epoch, j + 1);
            if let Some(dir) = &plan.out_dir {
                save_checkpoint(&run.params, dir.join(&label))?;
            }
            if !dev.is_empty() {
                dev_history.push(evaluate(&run.params, dev, config, vocab, plan.workers, run.step)?);
            }
            completed.push(label);
            write_manifest(&completed, &dev_history)?;
        }
    }
    Ok(MwerTrainResult {
        params: run.params,
        adam: run.adam,
        steps: run.step,
        losses: run.losses,
        skipped: run.skipped,
        dev_history,
        trajectory: run.trajectory,
        decode_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::synth::{gen_synth, SynthConfig};

    #[test]
    fn schedule_boundaries() {
        let s = TrainSchedule::rnnt();
        assert_eq!(s.lr_constant, 5e-4);
        assert_eq!(s.lr_final, 1e-5);
        let m = TrainSchedule::mwer();
        assert_eq!((m.lr_constant, m.lr_final), (1e-5, 1e-6));
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(s.warmup_steps), s.lr_constant);
        assert_eq!(s.lr_at(s.warmup_steps / 2), s.lr_constant / 2.0);
        let d = s.warmup_steps + s.constant_steps;
        assert_eq!(s.lr_at(d), s.lr_constant);
        assert!((s.lr_at(d + s.decay_steps - 1) / s.lr_final - 1.0).abs() < 1e-2);
        assert_eq!(s.lr_at(s.total_steps()), s.lr_final);
        assert_eq!(s.lr_at(10 * s.total_steps()), s.lr_final);
        let half = s.lr_at(d + s.decay_steps / 2);
        assert!((half - (s.lr_constant * s.lr_final).sqrt()).abs() < 1e-15);
    }

    /// Scalar Adam written from the textbook update, independent of `adam_update`.
    fn reference_adam(grads: &[f64], lrs: &[f64], p0: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, p0);
        let mut out = Vec::new();
        for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
            let t = (t + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            p -= lr * mh / (vh.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn scalar_adam_matches_reference() {
        let grads: Vec<f64> = (0..100).map(|i| ((i as f64) * 0.37).sin() * 2.0 + 0.1).collect();
        let sched = TrainSchedule { warmup_steps: 10, constant_steps: 40, decay_steps: 50, lr_constant: 1e-2, lr_final: 1e-4 };
        let lrs: Vec<f64> = (0..100).map(|s| sched.lr_at(s)).collect();
        let expected = reference_adam(&grads, &lrs, 0.5);
        let (mut p, mut m, mut v) = ([0.5], [0.0], [0.0]);
        for (i, (&g, &lr)) in grads.iter().zip(&lrs).enumerate() {
            adam_update(&mut p, &[g], &mut m, &mut v, i as u64 + 1, lr, (ADAM_BETA1, ADAM_BETA2, ADAM_EPS));
            assert!((p[0] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adam_update(&mut p, &[3.0], &mut m, &mut v, 1, 1e-3, (ADAM_BETA1, ADAM_BETA2, ADAM_EPS));
        assert!((1.0 - p[0] - 1e-3).abs() < 1e-11);
    }

    fn dims(k: usize) -> ModelDims {
        ModelDims {
            input_dim: 8,
            enc_hidden: 12,
            embed_dim: 6,
            pred_hidden: 12,
            joint_dim: 12,
            vocab_size: k,
            blank_id: 0,
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = ModelParams::init(1, dims(4)).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = p.zeros_like();
        for _ in 0..5 {
            adam_step(&mut st, &mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p, before);
        let wrong = ModelParams::zeros(dims(5));
        assert!(matches!(adam_step(&mut st, &mut p, &wrong, 1e-2), Err(Error::InvalidInput(_))));
    }

    fn task(n: usize) -> (Vocab, Vec<Utterance>, Vec<Utterance>) {
        let cfg = SynthConfig { num_train: n, num_dev: 6, num_test: 0, num_tokens: 3, max_tokens: 3, ..Default::default() };
        let t = gen_synth(4, &cfg).unwrap();
        (t.vocab, t.train, t.dev)
    }

    #[test]
    fn memorizes_a_single_utterance() {
        let u = Utterance {
            id: "only".into(),
            features: Array2::from_shape_fn((6, 8), |(t, f)| ((t * 8 + f) as f64 * 0.7).sin()),
            reference: vec![1, 2, 1],
        };
        let cfg = RnntTrainConfig {
            steps: 2000,
            batch_size: 1,
            schedule: TrainSchedule { warmup_steps: 50, constant_steps: 1950, decay_steps: 0, lr_constant: 1e-2, lr_final: 1e-2 },
            ..Default::default()
        };
        let r = train_rnnt(&[u], ModelParams::init(0, dims(3)).unwrap(), &cfg, None).unwrap();
        let last = *r.losses.last().unwrap();
        assert!(last < 0.01, "final loss {last}");
    }

    #[test]
    fn rnnt_training_is_deterministic_and_frozen_at_zero_lr() {
        let (vocab, train, _) = task(12);
        let p0 = ModelParams::init(2, dims(vocab.len())).unwrap();
        let cfg = RnntTrainConfig { steps: 6, batch_size: 4, ..Default::default() };
        let a = train_rnnt(&train, p0.clone(), &cfg, None).unwrap();
        let b = train_rnnt(&train, p0.clone(), &RnntTrainConfig { workers: 3, ..cfg.clone() }, None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        let zero = TrainSchedule { lr_constant: 0.0, lr_final: 0.0, ..TrainSchedule::rnnt() };
        let frozen = train_rnnt(&train, p0.clone(), &RnntTrainConfig { schedule: zero, ..cfg }, None).unwrap();
        assert_eq!(frozen.params, p0);
    }

    #[test]
    fn non_finite_loss_names_the_utterance() {
        let (vocab, mut train, _) = task(3);
        let mut p = ModelParams::init(2, dims(vocab.len())).unwrap();
        p.out_b[1] = f64::INFINITY;
        train.truncate(1);
        let err = train_rnnt(&train, p, &RnntTrainConfig { steps: 1, ..Default::default() }, None).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteLoss(m) | Error::InvalidInput(m) if m.contains(&train[0].id)), "{err}");
    }

    #[test]
    fn perfect_decoding_gives_zero_mwer_update() {
        let (vocab, train, _) = task(4);
        // A model that is certain of blank decodes the empty sequence; empty references make it
        // perfect, and a one-best list means every hypothesis has R = 0.
        let mut p = ModelParams::zeros(dims(vocab.len()));
        p.out_b[0] = 50.0;
        let data: Vec<Utterance> = train.into_iter().map(|mut u| { u.reference.clear(); u }).collect();
        let cfg = MwerTrainConfig { nbest: 1, schedule: TrainSchedule { lr_constant: 1e-1, ..TrainSchedule::mwer() }, dev_every: 0, ..Default::default() };
        let r = train_mwer_on_the_fly(&data, &[], p.clone(), &cfg, &vocab).unwrap();
        assert_eq!(r.params, p);
        assert!(r.losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn semi_with_batch_sized_splits_matches_on_the_fly() {
        let (vocab, train, dev) = task(24);
        let seed = train_rnnt(&train, ModelParams::init(3, dims(vocab.len())).unwrap(), &RnntTrainConfig { steps: 40, ..Default::default() }, None).unwrap().params;
        let cfg = MwerTrainConfig {
            epochs: 2,
            batch_size: 4,
            schedule: TrainSchedule { warmup_steps: 2, constant_steps: 4, decay_steps: 4, lr_constant: 1e-2, lr_final: 1e-3 },
            record_trajectory: true,
            dev_every: 0,
            ..Default::default()
        };
        let otf = train_mwer_on_the_fly(&train, &dev, seed.clone(), &cfg, &vocab).unwrap();
        let ids: Vec<String> = train.iter().map(|u| u.id.clone()).collect();
        let mut plan = SemiOnTheFlyPlan::with_split_size(&ids, 4, 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        plan.out_dir = Some(dir.path().to_path_buf());
        let semi = train_mwer_semi(&train, &dev, seed.clone(), &plan, &cfg, &vocab).unwrap();
        assert_eq!(otf.steps, 12);
        assert_eq!(otf.trajectory, semi.trajectory);
        assert_ne!(otf.params, seed);
        assert!(dir.path().join("model.e2.s6.json").exists());
        assert!(dir.path().join("nbest.e1.s1.jsonl").exists());
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn persisted_lists_do_not_depend_on_workers() {
        let (vocab, train, _) = task(10);
        let p = ModelParams::init(5, dims(vocab.len())).unwrap();
        let utts: Vec<&Utterance> = train.iter().collect();
        let cfg = MwerTrainConfig::default();
        let text = |w| {
            let l = decode_nbest(&p, &utts, &cfg.decode_config(&vocab), 4, false, &vocab, w).unwrap();
            nbest_to_jsonl(&l.into_iter().flatten().collect::<Vec<_>>(), &vocab)
        };
        assert_eq!(text(1), text(4));
    }

    #[test]
    fn plan_must_partition_the_data() {
        let (_, train, _) = task(5);
        let ids: Vec<String> = train.iter().map(|u| u.id.clone()).collect();
        let plan = SemiOnTheFlyPlan::contiguous(&ids, 2, 1, 1).unwrap();
        assert_eq!(plan.splits.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![3, 2]);
        plan.validate(&train).unwrap();
        let mut bad = plan.clone();
        bad.splits[1].push(ids[0].clone());
        assert!(bad.validate(&train).is_err());
        let mut bad = plan.clone();
        bad.splits[1].pop();
        assert!(bad.validate(&train).is_err());
        let mut bad = plan;
        bad.splits[0][0] = "ghost".into();
        assert!(matches!(bad.validate(&train), Err(Error::InvalidInput(m)) if m.contains("ghost")));
    }
}
