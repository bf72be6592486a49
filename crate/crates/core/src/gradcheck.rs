//! Finite-difference oracles for the lattice, MWER and model gradients.
//!
//! The lattice oracle never touches the forward-backward recursion: it scores
//! every enumerated alignment path directly. The loss change caused by nudging
//! one logit is accumulated as `ln(1 + sum_p w_p * expm1(delta_p))`, so central
//! differences at `h = 1e-5` resolve gradients far below the rounding noise of
//! a naive `f(x + h) - f(x - h)`.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::lattice::{
    enumerate_alignments, log_sum_exp, normalize, rnnt_loss_and_grad, AlignmentSymbol,
    LogitLattice,
};
use crate::model::{ModelDims, ModelParams};
use crate::mwer::{mwer_full_grad, Hypothesis, MwerConfig, NBestList, ScoreSource};
use crate::trainer::mwer_param_grad;

/// Largest `|a - b| / max(|a|, |b|)` over checked entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest absolute difference on entries skipped for being below the floor.
    pub max_abs_error_below_floor: f64,
}

impl GradCheckSummary {
    pub fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        if analytic.abs() > floor {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            self.checked += 1;
            self.max_rel_error = self.max_rel_error.max(rel);
        } else {
            self.max_abs_error_below_floor =
                self.max_abs_error_below_floor.max((analytic - numeric).abs());
        }
    }

    pub fn merge(&mut self, other: &GradCheckSummary) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error_below_floor = self
            .max_abs_error_below_floor
            .max(other.max_abs_error_below_floor);
    }
}

/// Central-difference gradient of `-log P(y|x)` with respect to every raw logit,
/// computed from enumerated alignments.
pub fn lattice_fd_grad(
    lattice: &LogitLattice,
    y: &[usize],
    temperature: f64,
    h: f64,
) -> Result<Array3<f64>> {
    let post = normalize(lattice, temperature)?;
    let blank = lattice.blank_id();
    let paths = enumerate_alignments(lattice.frames(), y.len())?;
    // Per path: log-probability and the symbol it takes at each visited node.
    let mut path_scores = Vec::with_capacity(paths.len());
    let mut visits: Vec<Vec<((usize, usize), usize)>> = Vec::with_capacity(paths.len());
    for p in &paths {
        path_scores.push(p.log_prob(&post, y));
        let (mut t, mut u) = (0, 0);
        let mut v = Vec::with_capacity(p.symbols.len());
        for s in &p.symbols {
            match s {
                AlignmentSymbol::Blank => {
                    v.push(((t, u), blank));
                    t += 1;
                }
                AlignmentSymbol::Label(pos) => {
                    v.push(((t, u), y[*pos]));
                    u += 1;
                }
            }
        }
        visits.push(v);
    }
    let log_p = log_sum_exp(&path_scores);
    let weights: Vec<f64> = path_scores.iter().map(|s| (s - log_p).exp()).collect();

    let (t_len, u1, k_len) = lattice.values().dim();
    let mut grad = Array3::zeros((t_len, u1, k_len));
    for t in 0..t_len {
        for u in 0..u1 {
            for j in 0..k_len {
                let p_j = post.log_prob(t, u, j).exp();
                // log P(x + d e_j) - log P(x)
                let shift = |d: f64| {
                    let scaled = d / temperature;
                    let log_z_change = (p_j * scaled.exp_m1()).ln_1p();
                    let mut acc = 0.0;
                    for (w, v) in weights.iter().zip(&visits) {
                        if let Some(&(_, k)) = v.iter().find(|(node, _)| *node == (t, u)) {
                            let delta = if k == j { scaled } else { 0.0 } - log_z_change;
                            acc += w * delta.exp_m1();
                        }
                    }
                    acc.ln_1p()
                };
                grad[[t, u, j]] = -(shift(h) - shift(-h)) / (2.0 * h);
            }
        }
    }
    Ok(grad)
}

/// Random logit lattice with entries in `[-3, 3]` and a random blank-free target.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    frames: usize,
    labels: usize,
    vocab: usize,
) -> (LogitLattice, Vec<usize>) {
    let values = Array3::from_shape_fn((frames, labels + 1, vocab), |_| rng.gen_range(-3.0..3.0));
    let y = (0..labels).map(|_| rng.gen_range(1..vocab)).collect();
    (LogitLattice::new(values, 0).expect("finite logits"), y)
}

/// Compares the analytic transducer gradient with [`lattice_fd_grad`] on
/// `instances` random lattices of shape up to `(4, 3, 5)`.
pub fn check_rnnt_gradients(seed: u64, instances: usize, h: f64, floor: f64) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary::default();
    for _ in 0..instances {
        let frames = rng.gen_range(1..=4);
        let labels = rng.gen_range(0..=2);
        let vocab = rng.gen_range(2..=5);
        let temperature = if rng.gen_bool(0.5) { 1.0 } else { 1.2 };
        let (lat, y) = random_instance(&mut rng, frames, labels, vocab);
        let (_, grad) = rnnt_loss_and_grad(&lat, &y, temperature)?;
        let fd = lattice_fd_grad(&lat, &y, temperature, h)?;
        for (a, n) in grad.iter().zip(fd.iter()) {
            summary.record(*a, *n, floor);
        }
    }
    Ok(summary)
}

/// A tiny random model with inputs of `frames` frames.
fn random_model(rng: &mut ChaCha8Rng, frames: usize) -> Result<(ModelParams, Array2<f64>)> {
    let dims = ModelDims {
        input_dim: 2,
        enc_hidden: 3,
        embed_dim: 2,
        pred_hidden: 3,
        joint_dim: 3,
        vocab_size: rng.gen_range(3..=4),
        blank_id: 0,
    };
    let mut params = ModelParams::init(rng.gen(), dims)?;
    params.scale(2.0);
    let x = Array2::from_shape_fn((frames, 2), |_| rng.gen_range(-1.0..1.0));
    Ok((params, x))
}

/// Central differences of `loss` over every parameter, compared with `analytic`.
fn check_params<F>(params: &ModelParams, analytic: &ModelParams, h: f64, floor: f64, loss: F) -> Result<GradCheckSummary>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    let mut summary = GradCheckSummary::default();
    let mut probe = params.clone();
    for (ti, (_, grad)) in analytic.tensors().into_iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = params.tensors()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = orig + h;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].1[i] = orig - h;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].1[i] = orig;
            summary.record(a, (up - down) / (2.0 * h), floor);
        }
    }
    Ok(summary)
}

/// Transducer loss gradients through the whole model on random tiny models.
pub fn check_model_rnnt_gradients(seed: u64, instances: usize, h: f64, floor: f64) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary::default();
    for _ in 0..instances {
        let frames = rng.gen_range(1..=4);
        let (params, x) = random_model(&mut rng, frames)?;
        let k = params.dims.vocab_size;
        let y: Vec<usize> = (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(1..k)).collect();
        let loss = |p: &ModelParams| -> Result<f64> {
            Ok(rnnt_loss_and_grad(&p.forward_lattice(&x, &y)?, &y, 1.0)?.0)
        };
        let (_, g) = rnnt_loss_and_grad(&params.forward_lattice(&x, &y)?, &y, 1.0)?;
        let analytic = params.backward_lattice(&x, &y, &g)?;
        summary.merge(&check_params(&params, &analytic, h, floor, loss)?);
    }
    Ok(summary)
}

/// MWER gradients through exact rescoring, the lattices and the model, on
/// random tiny models with random N-best lists.
pub fn check_mwer_gradients(seed: u64, instances: usize, h: f64, floor: f64) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary::default();
    let config = MwerConfig::default();
    for _ in 0..instances {
        let frames = rng.gen_range(2..=4);
        let (params, x) = random_model(&mut rng, frames)?;
        let k = params.dims.vocab_size;
        let mut seqs: Vec<Vec<usize>> = Vec::new();
        let n = rng.gen_range(2..=4);
        while seqs.len() < n {
            let s: Vec<usize> = (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(1..k)).collect();
            if !seqs.contains(&s) {
                seqs.push(s);
            }
        }
        let reference: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..k)).collect();
        let hyps = seqs.into_iter().map(|s| Hypothesis::new(s, 0.0, ScoreSource::Beam)).collect();
        let list = NBestList::new("gradcheck", hyps, reference)?;
        let loss = |p: &ModelParams| -> Result<f64> { Ok(mwer_full_grad(&p.encode(&x)?, &list, &config)?.loss) };
        let (_, analytic) = mwer_param_grad(&params, &x, &list, &config)?;
        summary.merge(&check_params(&params, &analytic, h, floor, loss)?);
    }
    Ok(summary)
}
