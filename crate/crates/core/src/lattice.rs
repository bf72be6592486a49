//! Log-space transducer alignment lattice.
//!
//! A lattice holds one output distribution per `(frame, label-position)` node.
//! Moving right along `t` consumes a blank, moving up along `u` emits the next
//! target label. The probability of a label sequence is the sum over every
//! monotone path from `(0, 0)` to the terminal blank at `(T-1, U)`, computed
//! here with a forward-backward pass in log space.

use ndarray::{Array2, Array3, ArrayView1};

use crate::error::{Error, Result};

/// Largest `T + U` accepted by [`enumerate_alignments`].
pub const ENUMERATION_CAP: usize = 24;

/// Tolerance used when validating that posterior rows are normalized.
const NORMALIZATION_TOL: f64 = 1e-10;

/// `log(exp(a) + exp(b))`, with `-inf` acting as the additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Stable log-sum-exp of a slice. Empty input yields `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of `logits / temperature` written into `out`.
pub(crate) fn log_softmax_into(logits: ArrayView1<f64>, temperature: f64, out: &mut [f64]) {
    let inv = 1.0 / temperature;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * inv));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits.iter()) {
        *o = x * inv - max;
        sum += o.exp();
    }
    let log_z = sum.ln();
    for o in out.iter_mut() {
        *o -= log_z;
    }
}

/// Raw joint-network logits of shape `(T, U+1, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLattice {
    values: Array3<f64>,
    blank_id: usize,
}

impl LogitLattice {
    pub fn new(values: Array3<f64>, blank_id: usize) -> Result<Self> {
        let (t, _, k) = values.dim();
        if t == 0 {
            return Err(Error::InvalidInput("lattice needs at least one frame".into()));
        }
        if k < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary size {k} is below 2 (blank plus one label)"
            )));
        }
        if blank_id >= k {
            return Err(Error::InvalidInput(format!(
                "blank id {blank_id} outside vocabulary of size {k}"
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
        }
        Ok(Self { values, blank_id })
    }

    pub fn frames(&self) -> usize {
        self.values.dim().0
    }

    /// Number of target labels `U`; the lattice has `U + 1` label positions.
    pub fn labels(&self) -> usize {
        self.values.dim().1 - 1
    }

    pub fn vocab_size(&self) -> usize {
        self.values.dim().2
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

/// Per-node log posteriors `log P(k | t, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPosteriorLattice {
    log_probs: Array3<f64>,
    temperature: f64,
    blank_id: usize,
}

impl LogPosteriorLattice {
    /// Wraps externally produced log posteriors. Entries may be `-inf`; every
    /// row must be normalized.
    pub fn from_log_probs(log_probs: Array3<f64>, blank_id: usize) -> Result<Self> {
        let (t, u1, k) = log_probs.dim();
        if t == 0 || u1 == 0 || k < 2 || blank_id >= k {
            return Err(Error::InvalidInput(format!(
                "posterior lattice of shape ({t}, {u1}, {k}) with blank {blank_id} is malformed"
            )));
        }
        if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidInput("posterior lattice contains NaN or +inf".into()));
        }
        for ti in 0..t {
            for ui in 0..u1 {
                let row = log_probs.slice(ndarray::s![ti, ui, ..]);
                let z = log_sum_exp(row.as_slice().expect("standard layout"));
                if z.abs() > NORMALIZATION_TOL {
                    return Err(Error::InvalidInput(format!(
                        "posterior row ({ti}, {ui}) sums to exp({z}) instead of 1"
                    )));
                }
            }
        }
        Ok(Self {
            log_probs,
            temperature: 1.0,
            blank_id,
        })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.dim().0
    }

    pub fn labels(&self) -> usize {
        self.log_probs.dim().1 - 1
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.dim().2
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn log_probs(&self) -> &Array3<f64> {
        &self.log_probs
    }

    #[inline]
    pub fn log_prob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[[t, u, k]]
    }

    fn check_target(&self, y: &[usize]) -> Result<()> {
        if y.len() != self.labels() {
            return Err(Error::InvalidInput(format!(
                "target has {} labels but the lattice was built for {}",
                y.len(),
                self.labels()
            )));
        }
        for &k in y {
            if k == self.blank_id {
                return Err(Error::InvalidInput("target contains the blank symbol".into()));
            }
            if k >= self.vocab_size() {
                return Err(Error::InvalidInput(format!(
                    "target token {k} outside vocabulary of size {}",
                    self.vocab_size()
                )));
            }
        }
        Ok(())
    }
}

/// Log forward and backward variables, both of shape `(T, U+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBeta {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
}

impl AlphaBeta {
    /// `log P(y|x)` read off the forward variables.
    pub fn log_likelihood(&self, post: &LogPosteriorLattice) -> f64 {
        let (t, u1) = self.alpha.dim();
        self.alpha[[t - 1, u1 - 1]] + post.log_prob(t - 1, u1 - 1, post.blank_id)
    }
}

/// Log-softmax over the vocabulary axis of `logits / temperature`.
pub fn normalize(lattice: &LogitLattice, temperature: f64) -> Result<LogPosteriorLattice> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let (t, u1, k) = lattice.values.dim();
    let mut log_probs = Array3::<f64>::zeros((t, u1, k));
    let mut row = vec![0.0; k];
    for ti in 0..t {
        for ui in 0..u1 {
            log_softmax_into(lattice.values.slice(ndarray::s![ti, ui, ..]), temperature, &mut row);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "logits at ({ti}, {ui}) overflow at temperature {temperature}"
                )));
            }
            log_probs
                .slice_mut(ndarray::s![ti, ui, ..])
                .iter_mut()
                .zip(&row)
                .for_each(|(d, s)| *d = *s);
        }
    }
    Ok(LogPosteriorLattice {
        log_probs,
        temperature,
        blank_id: lattice.blank_id,
    })
}

/// Fills the forward and backward variables for target `y`.
pub fn forward_backward(post: &LogPosteriorLattice, y: &[usize]) -> Result<AlphaBeta> {
    post.check_target(y)?;
    let t_len = post.frames();
    let u_len = y.len();
    let blank = post.blank_id;

    let mut alpha = Array2::from_elem((t_len, u_len + 1), f64::NEG_INFINITY);
    alpha[[0, 0]] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = alpha[[t - 1, u]] + post.log_prob(t - 1, u, blank);
            }
            if u > 0 {
                acc = log_add(acc, alpha[[t, u - 1]] + post.log_prob(t, u - 1, y[u - 1]));
            }
            alpha[[t, u]] = acc;
        }
    }

    let mut beta = Array2::from_elem((t_len, u_len + 1), f64::NEG_INFINITY);
    beta[[t_len - 1, u_len]] = post.log_prob(t_len - 1, u_len, blank);
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < t_len {
                acc = beta[[t + 1, u]] + post.log_prob(t, u, blank);
            }
            if u < u_len {
                acc = log_add(acc, beta[[t, u + 1]] + post.log_prob(t, u, y[u]));
            }
            beta[[t, u]] = acc;
        }
    }

    Ok(AlphaBeta { alpha, beta })
}

/// `log P(y|x)`, summed over every alignment of `y`.
pub fn sequence_log_prob(post: &LogPosteriorLattice, y: &[usize]) -> Result<f64> {
    let ab = forward_backward(post, y)?;
    Ok(ab.log_likelihood(post))
}

/// Gradient of `log P(y|x)` with respect to the raw logits that produced `post`.
///
/// Each transition's posterior occupancy is `alpha * P(k|t,u) * beta(next) / P(y|x)`;
/// the softmax-with-temperature Jacobian turns occupancies into logit gradients.
pub fn log_prob_logit_grad(
    post: &LogPosteriorLattice,
    y: &[usize],
    ab: &AlphaBeta,
) -> Result<Array3<f64>> {
    post.check_target(y)?;
    let log_p = ab.log_likelihood(post);
    if !log_p.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "log P(y|x) = {log_p}; a required transition has zero probability"
        )));
    }
    let (t_len, u1, k_len) = post.log_probs.dim();
    let u_len = u1 - 1;
    let blank = post.blank_id;
    let inv_temp = 1.0 / post.temperature;
    let mut grad = Array3::<f64>::zeros((t_len, u1, k_len));
    for t in 0..t_len {
        for u in 0..=u_len {
            let a = ab.alpha[[t, u]];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let blank_next = if t + 1 < t_len {
                ab.beta[[t + 1, u]]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let occ_blank = (a + post.log_prob(t, u, blank) + blank_next - log_p).exp();
            let occ_label = if u < u_len {
                (a + post.log_prob(t, u, y[u]) + ab.beta[[t, u + 1]] - log_p).exp()
            } else {
                0.0
            };
            let total = occ_blank + occ_label;
            if total == 0.0 {
                continue;
            }
            for k in 0..k_len {
                let mut g = -post.log_prob(t, u, k).exp() * total;
                if k == blank {
                    g += occ_blank;
                }
                if u < u_len && k == y[u] {
                    g += occ_label;
                }
                grad[[t, u, k]] = g * inv_temp;
            }
        }
    }
    Ok(grad)
}

/// Transducer loss `-log P(y|x)` and its gradient with respect to the raw logits.
pub fn rnnt_loss_and_grad(
    lattice: &LogitLattice,
    y: &[usize],
    temperature: f64,
) -> Result<(f64, Array3<f64>)> {
    let post = normalize(lattice, temperature)?;
    posterior_loss_and_grad(&post, y)
}

/// Same as [`rnnt_loss_and_grad`] for an already-normalized lattice.
pub fn posterior_loss_and_grad(
    post: &LogPosteriorLattice,
    y: &[usize],
) -> Result<(f64, Array3<f64>)> {
    let ab = forward_backward(post, y)?;
    let mut grad = log_prob_logit_grad(post, y, &ab)?;
    grad.mapv_inplace(|g| -g);
    Ok((-ab.log_likelihood(post), grad))
}

/// One step of an alignment path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignmentSymbol {
    /// Advance one frame without emitting.
    Blank,
    /// Emit the target label at this (zero-based) position.
    Label(usize),
}

/// A monotone path through the lattice: `T` blanks interleaved with `U` labels,
/// ending on the terminal blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlignmentPath {
    pub symbols: Vec<AlignmentSymbol>,
}

impl AlignmentPath {
    /// Token sequence with blanks marked by `blank_id`.
    pub fn tokens(&self, y: &[usize], blank_id: usize) -> Vec<usize> {
        self.symbols
            .iter()
            .map(|s| match s {
                AlignmentSymbol::Blank => blank_id,
                AlignmentSymbol::Label(u) => y[*u],
            })
            .collect()
    }

    /// Labels emitted by the path, i.e. the path with blanks removed.
    pub fn labels(&self, y: &[usize]) -> Vec<usize> {
        self.symbols
            .iter()
            .filter_map(|s| match s {
                AlignmentSymbol::Blank => None,
                AlignmentSymbol::Label(u) => Some(y[*u]),
            })
            .collect()
    }

    /// Sum of the path's transition log-probabilities.
    pub fn log_prob(&self, post: &LogPosteriorLattice, y: &[usize]) -> f64 {
        let (mut t, mut u) = (0, 0);
        let mut total = 0.0;
        for s in &self.symbols {
            match s {
                AlignmentSymbol::Blank => {
                    total += post.log_prob(t, u, post.blank_id);
                    t += 1;
                }
                AlignmentSymbol::Label(pos) => {
                    total += post.log_prob(t, u, y[*pos]);
                    u += 1;
                }
            }
        }
        total
    }
}

/// Every alignment path for `frames` frames and `labels` target labels.
///
/// There are `C(frames - 1 + labels, labels)` of them; requests with
/// `frames + labels > ENUMERATION_CAP` are refused.
pub fn enumerate_alignments(frames: usize, labels: usize) -> Result<Vec<AlignmentPath>> {
    if frames == 0 {
        return Err(Error::InvalidInput("alignment needs at least one frame".into()));
    }
    if frames + labels > ENUMERATION_CAP {
        return Err(Error::SizeLimit(format!(
            "T + U = {} exceeds the enumeration cap {ENUMERATION_CAP}",
            frames + labels
        )));
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(frames + labels);
    extend_paths(frames - 1, labels, 0, &mut prefix, &mut out);
    Ok(out)
}

fn extend_paths(
    blanks_left: usize,
    labels_left: usize,
    next_label: usize,
    prefix: &mut Vec<AlignmentSymbol>,
    out: &mut Vec<AlignmentPath>,
) {
    if blanks_left == 0 && labels_left == 0 {
        let mut symbols = prefix.clone();
        symbols.push(AlignmentSymbol::Blank);
        out.push(AlignmentPath { symbols });
        return;
    }
    if blanks_left > 0 {
        prefix.push(AlignmentSymbol::Blank);
        extend_paths(blanks_left - 1, labels_left, next_label, prefix, out);
        prefix.pop();
    }
    if labels_left > 0 {
        prefix.push(AlignmentSymbol::Label(next_label));
        extend_paths(blanks_left, labels_left - 1, next_label + 1, prefix, out);
        prefix.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn random_lattice(rng: &mut ChaCha8Rng, t: usize, u: usize, k: usize) -> LogitLattice {
        let values = Array3::from_shape_fn((t, u + 1, k), |_| rng.gen_range(-3.0..3.0));
        LogitLattice::new(values, 0).unwrap()
    }

    fn random_target(rng: &mut ChaCha8Rng, u: usize, k: usize) -> Vec<usize> {
        (0..u).map(|_| rng.gen_range(1..k)).collect()
    }

    fn uniform(t: usize, u: usize, k: usize) -> LogPosteriorLattice {
        normalize(&LogitLattice::new(Array3::zeros((t, u + 1, k)), 0).unwrap(), 1.0).unwrap()
    }

    /// Brute force: log-sum over every enumerated path.
    fn enumerated_log_prob(post: &LogPosteriorLattice, y: &[usize]) -> f64 {
        let paths = enumerate_alignments(post.frames(), y.len()).unwrap();
        let scores: Vec<f64> = paths.iter().map(|p| p.log_prob(post, y)).collect();
        log_sum_exp(&scores)
    }

    #[test]
    fn uniform_logits_normalize_to_one_third() {
        let post = uniform(2, 1, 3);
        for v in post.log_probs().iter() {
            assert_abs_diff_eq!(*v, (1.0f64 / 3.0).ln(), epsilon = 1e-15);
        }
        assert_abs_diff_eq!((1.0f64 / 3.0).ln(), -1.0986, epsilon = 1e-4);
    }

    #[test]
    fn huge_temperature_flattens_distribution() {
        let mut values = Array3::zeros((1, 1, 3));
        values[[0, 0, 0]] = 2.0;
        let post = normalize(&LogitLattice::new(values, 0).unwrap(), 1e6).unwrap();
        let max = post.log_probs().iter().copied().fold(f64::MIN, f64::max);
        let min = post.log_probs().iter().copied().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-5);
    }

    #[test]
    fn normalize_rejects_bad_temperature() {
        let lat = LogitLattice::new(Array3::zeros((1, 1, 2)), 0).unwrap();
        for temp in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(normalize(&lat, temp), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn lattice_rejects_non_finite_logits() {
        let mut values = Array3::zeros((1, 1, 2));
        values[[0, 0, 1]] = f64::NAN;
        assert!(matches!(LogitLattice::new(values, 0), Err(Error::InvalidInput(_))));
        assert!(LogitLattice::new(Array3::zeros((1, 1, 1)), 0).is_err());
        assert!(LogitLattice::new(Array3::zeros((1, 1, 2)), 2).is_err());
        assert!(LogitLattice::new(Array3::zeros((0, 1, 2)), 0).is_err());
    }

    #[test]
    fn single_frame_empty_target() {
        let post = uniform(1, 0, 3);
        let ab = forward_backward(&post, &[]).unwrap();
        assert_eq!(ab.alpha[[0, 0]], 0.0);
        assert_abs_diff_eq!(ab.beta[[0, 0]], (1.0f64 / 3.0).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            sequence_log_prob(&post, &[]).unwrap(),
            (1.0f64 / 3.0).ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn two_frames_one_label_has_two_paths() {
        // Paths: (label, blank, blank) and (blank, label, blank), each (1/3)^3.
        let post = uniform(2, 1, 3);
        let expected = (2.0f64).ln() - 3.0 * (3.0f64).ln();
        assert_abs_diff_eq!(expected, -2.6027, epsilon = 1e-4);
        assert_abs_diff_eq!(sequence_log_prob(&post, &[1]).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn empty_target_is_the_blank_only_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = normalize(&random_lattice(&mut rng, 6, 0, 4), 1.0).unwrap();
        let expected: f64 = (0..6).map(|t| post.log_prob(t, 0, 0)).sum();
        assert_abs_diff_eq!(sequence_log_prob(&post, &[]).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn forward_matches_enumeration_on_random_lattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let post = normalize(&random_lattice(&mut rng, 5, 3, 4), 1.0).unwrap();
        let y = random_target(&mut rng, 3, 4);
        let ab = forward_backward(&post, &y).unwrap();
        let brute = enumerated_log_prob(&post, &y);
        assert!((ab.log_likelihood(&post) - brute).abs() < 1e-10);
        assert!((ab.beta[[0, 0]] - brute).abs() < 1e-10);
    }

    #[test]
    fn target_validation() {
        let post = uniform(2, 1, 3);
        assert!(matches!(forward_backward(&post, &[0]), Err(Error::InvalidInput(_))));
        assert!(matches!(forward_backward(&post, &[1, 2]), Err(Error::InvalidInput(_))));
        assert!(matches!(forward_backward(&post, &[3]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn single_step_cross_entropy_gradient() {
        let (a_blank, a_tok) = (0.7, -0.4);
        let mut values = Array3::zeros((1, 1, 2));
        values[[0, 0, 0]] = a_blank;
        values[[0, 0, 1]] = a_tok;
        let (loss, grad) = rnnt_loss_and_grad(&LogitLattice::new(values, 0).unwrap(), &[], 1.0).unwrap();
        let z = a_blank.exp() + a_tok.exp();
        let (p_blank, p_tok) = (a_blank.exp() / z, a_tok.exp() / z);
        assert_abs_diff_eq!(loss, -p_blank.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(grad[[0, 0, 0]], p_blank - 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(grad[[0, 0, 1]], p_tok, epsilon = 1e-14);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let lat = LogitLattice::new(Array3::zeros((4, 3, 5)), 0).unwrap();
        let (_, grad) = rnnt_loss_and_grad(&lat, &[2, 4], 1.0).unwrap();
        for t in 0..4 {
            for u in 0..3 {
                let s: f64 = grad.slice(ndarray::s![t, u, ..]).sum();
                assert!(s.abs() < 1e-14, "row ({t},{u}) sums to {s}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for temp in [1.0, 1.2] {
            let lat = random_lattice(&mut rng, 4, 2, 5);
            let y = random_target(&mut rng, 2, 5);
            let (_, grad) = rnnt_loss_and_grad(&lat, &y, temp).unwrap();
            let fd = crate::gradcheck::lattice_fd_grad(&lat, &y, temp, 1e-5).unwrap();
            for ((idx, g), n) in grad.indexed_iter().zip(fd.iter()) {
                if g.abs() > 1e-8 {
                    let rel = (g - n).abs() / g.abs().max(n.abs());
                    assert!(rel < 1e-4, "{idx:?}: analytic {g} vs fd {n}");
                } else {
                    assert!(n.abs() < 1e-8, "{idx:?}: analytic {g} vs fd {n}");
                }
            }
        }
    }

    #[test]
    fn zero_probability_transition_is_reported() {
        // Blank impossible at the last node: P(y|x) = 0.
        let mut lp = Array3::from_elem((1, 1, 2), f64::NEG_INFINITY);
        lp[[0, 0, 1]] = 0.0;
        let post = LogPosteriorLattice::from_log_probs(lp, 0).unwrap();
        assert_eq!(sequence_log_prob(&post, &[]).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(posterior_loss_and_grad(&post, &[]), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn unnormalized_posteriors_are_rejected() {
        let lp = Array3::from_elem((1, 1, 2), -0.1);
        assert!(LogPosteriorLattice::from_log_probs(lp, 0).is_err());
    }

    #[test]
    fn alignment_counts() {
        assert_eq!(enumerate_alignments(2, 1).unwrap().len(), 2);
        assert_eq!(enumerate_alignments(1, 0).unwrap().len(), 1);
        assert_eq!(enumerate_alignments(3, 2).unwrap().len(), 6);
        assert!(matches!(enumerate_alignments(20, 5), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn alignment_paths_are_valid_and_distinct() {
        let y = [3, 1, 2];
        let paths = enumerate_alignments(4, 3).unwrap();
        assert_eq!(paths.len(), 20); // C(6, 3)
        let distinct: HashSet<_> = paths.iter().collect();
        assert_eq!(distinct.len(), paths.len());
        for p in &paths {
            assert_eq!(p.symbols.len(), 7);
            assert_eq!(p.symbols.last(), Some(&AlignmentSymbol::Blank));
            assert_eq!(p.labels(&y), y.to_vec());
            let blanks = p.tokens(&y, 0).iter().filter(|&&k| k == 0).count();
            assert_eq!(blanks, 4);
        }
    }

    #[test]
    fn sequence_log_prob_is_zero_only_for_certain_paths() {
        // Deterministic lattice: blank certain everywhere, target empty.
        let mut lp = Array3::from_elem((3, 1, 2), f64::NEG_INFINITY);
        lp.slice_mut(ndarray::s![.., .., 0]).fill(0.0);
        let post = LogPosteriorLattice::from_log_probs(lp, 0).unwrap();
        assert_eq!(sequence_log_prob(&post, &[]).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn forward_equals_brute_force(seed in any::<u64>(), t in 1usize..=5, u in 0usize..=4, k in 2usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = normalize(&random_lattice(&mut rng, t, u, k), 1.0).unwrap();
            let y = random_target(&mut rng, u, k);
            let fast = sequence_log_prob(&post, &y).unwrap();
            prop_assert!((fast - enumerated_log_prob(&post, &y)).abs() < 1e-10);
            prop_assert!(fast <= 0.0);
        }

        #[test]
        fn alpha_beta_diagonals_each_carry_full_mass(seed in any::<u64>(), t in 1usize..=8, u in 0usize..=6, k in 2usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = normalize(&random_lattice(&mut rng, t, u, k), 1.0).unwrap();
            let y = random_target(&mut rng, u, k);
            let ab = forward_backward(&post, &y).unwrap();
            let log_p = ab.log_likelihood(&post);
            // Every path visits exactly one node with t + u = n.
            for n in 0..(t + u) {
                let terms: Vec<f64> = (0..=u)
                    .filter(|&ui| ui <= n && n - ui < t)
                    .map(|ui| ab.alpha[[n - ui, ui]] + ab.beta[[n - ui, ui]])
                    .collect();
                prop_assert!((log_sum_exp(&terms) - log_p).abs() < 1e-9);
            }
            // Every path crosses from frame t to t+1 through exactly one blank.
            for ti in 0..t.saturating_sub(1) {
                let terms: Vec<f64> = (0..=u)
                    .map(|ui| ab.alpha[[ti, ui]] + post.log_prob(ti, ui, 0) + ab.beta[[ti + 1, ui]])
                    .collect();
                prop_assert!((log_sum_exp(&terms) - log_p).abs() < 1e-9);
            }
        }

        #[test]
        fn posteriors_are_normalized(seed in any::<u64>(), temp in 0.2f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = normalize(&random_lattice(&mut rng, 3, 2, 6), temp).unwrap();
            for t in 0..3 {
                for u in 0..3 {
                    let s: f64 = (0..6).map(|k| post.log_prob(t, u, k).exp()).sum();
                    prop_assert!((s - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
