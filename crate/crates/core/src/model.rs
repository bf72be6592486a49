//! Minimal trainable transducer.
//!
//! * encoder: one tanh recurrent layer over the feature frames,
//! * predictor: token embedding plus one tanh recurrent layer; the blank's
//!   embedding row doubles as the start symbol that produces `h_pre_0`,
//! * joint: `out_w * tanh(joint_enc * h_enc + joint_pred * h_pre + joint_b) + out_b`.
//!
//! Gradients are computed by hand (reverse mode through the additive joint and
//! both recurrences).

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{from_json_str, Error, Result};
use crate::lattice::LogitLattice;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Layer sizes and vocabulary layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub enc_hidden: usize,
    pub embed_dim: usize,
    pub pred_hidden: usize,
    pub joint_dim: usize,
    /// Output vocabulary including blank (and EOS when enabled).
    pub vocab_size: usize,
    pub blank_id: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("enc_hidden", self.enc_hidden),
            ("embed_dim", self.embed_dim),
            ("pred_hidden", self.pred_hidden),
            ("joint_dim", self.joint_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 || self.blank_id >= self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of size {} with blank {} is invalid",
                self.vocab_size, self.blank_id
            )));
        }
        Ok(())
    }
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub enc_w_in: Array2<f64>,
    pub enc_w_rec: Array2<f64>,
    pub enc_b: Array1<f64>,
    pub embed: Array2<f64>,
    pub pred_w_in: Array2<f64>,
    pub pred_w_rec: Array2<f64>,
    pub pred_b: Array1<f64>,
    pub joint_enc: Array2<f64>,
    pub joint_pred: Array2<f64>,
    pub joint_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

/// Tensor names in checkpoint order.
pub const TENSOR_NAMES: [&str; 12] = [
    "enc_w_in",
    "enc_w_rec",
    "enc_b",
    "embed",
    "pred_w_in",
    "pred_w_rec",
    "pred_b",
    "joint_enc",
    "joint_pred",
    "joint_b",
    "out_w",
    "out_b",
];

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims;
        Self {
            dims,
            enc_w_in: Array2::zeros((d.enc_hidden, d.input_dim)),
            enc_w_rec: Array2::zeros((d.enc_hidden, d.enc_hidden)),
            enc_b: Array1::zeros(d.enc_hidden),
            embed: Array2::zeros((d.vocab_size, d.embed_dim)),
            pred_w_in: Array2::zeros((d.pred_hidden, d.embed_dim)),
            pred_w_rec: Array2::zeros((d.pred_hidden, d.pred_hidden)),
            pred_b: Array1::zeros(d.pred_hidden),
            joint_enc: Array2::zeros((d.joint_dim, d.enc_hidden)),
            joint_pred: Array2::zeros((d.joint_dim, d.pred_hidden)),
            joint_b: Array1::zeros(d.joint_dim),
            out_w: Array2::zeros((d.vocab_size, d.joint_dim)),
            out_b: Array1::zeros(d.vocab_size),
        }
    }

    /// Seeded uniform initialization in `[-s, s]`, `s = 1 / sqrt(fan_in)`.
    /// Biases use the fan-in of their layer's input weights.
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let fan_ins = [
            dims.input_dim,
            dims.enc_hidden,
            dims.input_dim,
            1,
            dims.embed_dim,
            dims.pred_hidden,
            dims.embed_dim,
            dims.enc_hidden,
            dims.pred_hidden,
            dims.enc_hidden,
            dims.joint_dim,
            dims.joint_dim,
        ];
        for ((_, data), fan_in) in p.tensors_mut().into_iter().zip(fan_ins) {
            let s = 1.0 / (fan_in as f64).sqrt();
            for v in data.iter_mut() {
                *v = rng.gen_range(-s..=s);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 12] {
        let Self {
            dims: _,
            enc_w_in,
            enc_w_rec,
            enc_b,
            embed,
            pred_w_in,
            pred_w_rec,
            pred_b,
            joint_enc,
            joint_pred,
            joint_b,
            out_w,
            out_b,
        } = self;
        [
            (TENSOR_NAMES[0], enc_w_in.as_slice().expect("standard layout")),
            (TENSOR_NAMES[1], enc_w_rec.as_slice().expect("standard layout")),
            (TENSOR_NAMES[2], enc_b.as_slice().expect("standard layout")),
            (TENSOR_NAMES[3], embed.as_slice().expect("standard layout")),
            (TENSOR_NAMES[4], pred_w_in.as_slice().expect("standard layout")),
            (TENSOR_NAMES[5], pred_w_rec.as_slice().expect("standard layout")),
            (TENSOR_NAMES[6], pred_b.as_slice().expect("standard layout")),
            (TENSOR_NAMES[7], joint_enc.as_slice().expect("standard layout")),
            (TENSOR_NAMES[8], joint_pred.as_slice().expect("standard layout")),
            (TENSOR_NAMES[9], joint_b.as_slice().expect("standard layout")),
            (TENSOR_NAMES[10], out_w.as_slice().expect("standard layout")),
            (TENSOR_NAMES[11], out_b.as_slice().expect("standard layout")),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 12] {
        let Self {
            dims: _,
            enc_w_in,
            enc_w_rec,
            enc_b,
            embed,
            pred_w_in,
            pred_w_rec,
            pred_b,
            joint_enc,
            joint_pred,
            joint_b,
            out_w,
            out_b,
        } = self;
        [
            (TENSOR_NAMES[0], enc_w_in.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[1], enc_w_rec.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[2], enc_b.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[3], embed.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[4], pred_w_in.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[5], pred_w_rec.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[6], pred_b.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[7], joint_enc.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[8], joint_pred.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[9], joint_b.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[10], out_w.as_slice_mut().expect("standard layout")),
            (TENSOR_NAMES[11], out_b.as_slice_mut().expect("standard layout")),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Runs the encoder over `features` of shape `(T, input_dim)`.
    pub fn encode<'a>(&'a self, features: &'a Array2<f64>) -> Result<Encoded<'a>> {
        let (t_len, f) = features.dim();
        if t_len == 0 {
            return Err(Error::InvalidInput("feature matrix has no frames".into()));
        }
        if f != self.dims.input_dim {
            return Err(Error::InvalidInput(format!(
                "feature width {f} does not match model input_dim {}",
                self.dims.input_dim
            )));
        }
        let d = self.dims;
        let mut hidden = Array2::<f64>::zeros((t_len, d.enc_hidden));
        let mut proj = Array2::<f64>::zeros((t_len, d.joint_dim));
        let mut prev = vec![0.0; d.enc_hidden];
        let mut cur = vec![0.0; d.enc_hidden];
        for t in 0..t_len {
            let x = features.row(t);
            cur.copy_from_slice(self.enc_b.as_slice().unwrap());
            matvec_add(&self.enc_w_in, x.as_slice().expect("standard layout"), &mut cur);
            matvec_add(&self.enc_w_rec, &prev, &mut cur);
            cur.iter_mut().for_each(|v| *v = v.tanh());
            hidden.row_mut(t).as_slice_mut().unwrap().copy_from_slice(&cur);
            let p = proj.row_mut(t).into_slice().unwrap();
            p.copy_from_slice(self.joint_b.as_slice().unwrap());
            matvec_add(&self.joint_enc, &cur, p);
            std::mem::swap(&mut prev, &mut cur);
        }
        Ok(Encoded {
            params: self,
            features,
            hidden,
            proj,
        })
    }

    /// Logit lattice `(T, U+1, K)` for `features` and target `y`.
    pub fn forward_lattice(&self, features: &Array2<f64>, y: &[usize]) -> Result<LogitLattice> {
        self.encode(features)?.lattice(y)
    }

    /// Parameter gradients given the loss gradient with respect to the lattice logits.
    pub fn backward_lattice(
        &self,
        features: &Array2<f64>,
        y: &[usize],
        grad_logits: &Array3<f64>,
    ) -> Result<ModelParams> {
        let enc = self.encode(features)?;
        let mut grads = self.zeros_like();
        enc.backward_into(y, grad_logits, &mut grads)?;
        Ok(grads)
    }

    fn check_tokens(&self, y: &[usize]) -> Result<()> {
        for &k in y {
            if k == self.dims.blank_id || k >= self.dims.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token {k} is blank or outside the vocabulary of size {}",
                    self.dims.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// One predictor step from `prev` hidden state on input `token`.
    fn predictor_step(&self, prev: &[f64], token: usize, out: &mut [f64]) {
        out.copy_from_slice(self.pred_b.as_slice().unwrap());
        matvec_add(
            &self.pred_w_in,
            self.embed.row(token).to_slice().expect("standard layout"),
            out,
        );
        matvec_add(&self.pred_w_rec, prev, out);
        out.iter_mut().for_each(|v| *v = v.tanh());
    }

    fn project_predictor(&self, hidden: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        matvec_add(&self.joint_pred, hidden, out);
    }

    /// Raw logits for one joint input `enc_proj + pred_proj`; `z` receives the tanh activations.
    fn joint(&self, enc_proj: &[f64], pred_proj: &[f64], z: &mut [f64], logits: &mut [f64]) {
        for ((zi, e), p) in z.iter_mut().zip(enc_proj).zip(pred_proj) {
            *zi = (e + p).tanh();
        }
        logits.copy_from_slice(self.out_b.as_slice().unwrap());
        matvec_add(&self.out_w, z, logits);
    }
}

/// Predictor hidden state and its joint projection after consuming a token prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    hidden: Vec<f64>,
    proj: Vec<f64>,
}

/// Encoder output for one utterance, bound to the parameters that produced it.
#[derive(Debug, Clone)]
pub struct Encoded<'a> {
    params: &'a ModelParams,
    features: &'a Array2<f64>,
    hidden: Array2<f64>,
    /// `joint_enc * h_enc + joint_b` per frame.
    proj: Array2<f64>,
}

/// Anything that can be stepped by a transducer decoder and scored on a lattice.
pub trait Transducer {
    type State: Clone;

    fn frames(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn blank_id(&self) -> usize;
    /// Predictor state before any label (`h_pre_0`).
    fn start_state(&self) -> Self::State;
    fn advance(&self, state: &Self::State, token: usize) -> Self::State;
    /// Raw joint logits for frame `t` under predictor `state`.
    fn logits_into(&self, t: usize, state: &Self::State, out: &mut [f64]);

    /// Full logit lattice for target `y`.
    fn lattice(&self, y: &[usize]) -> Result<LogitLattice> {
        let k = self.vocab_size();
        if let Some(&bad) = y.iter().find(|&&tok| tok == self.blank_id() || tok >= k) {
            return Err(Error::InvalidInput(format!(
                "token {bad} is blank or outside the vocabulary of size {k}"
            )));
        }
        let t_len = self.frames();
        let mut values = Array3::<f64>::zeros((t_len, y.len() + 1, k));
        let mut state = self.start_state();
        for u in 0..=y.len() {
            for t in 0..t_len {
                let row = values.slice_mut(ndarray::s![t, u, ..]).into_slice().unwrap();
                self.logits_into(t, &state, row);
            }
            if u < y.len() {
                state = self.advance(&state, y[u]);
            }
        }
        LogitLattice::new(values, self.blank_id())
    }
}

impl Transducer for Encoded<'_> {
    type State = PredictorState;

    fn frames(&self) -> usize {
        self.hidden.nrows()
    }

    fn vocab_size(&self) -> usize {
        self.params.dims.vocab_size
    }

    fn blank_id(&self) -> usize {
        self.params.dims.blank_id
    }

    fn start_state(&self) -> PredictorState {
        self.advance_from(&vec![0.0; self.params.dims.pred_hidden], self.params.dims.blank_id)
    }

    fn advance(&self, state: &PredictorState, token: usize) -> PredictorState {
        self.advance_from(&state.hidden, token)
    }

    fn logits_into(&self, t: usize, state: &PredictorState, out: &mut [f64]) {
        let mut z = vec![0.0; self.params.dims.joint_dim];
        self.params
            .joint(self.proj.row(t).to_slice().unwrap(), &state.proj, &mut z, out);
    }

    fn lattice(&self, y: &[usize]) -> Result<LogitLattice> {
        self.params.check_tokens(y)?;
        let states = self.predictor_states(y);
        let d = self.params.dims;
        let t_len = self.frames();
        let mut values = Array3::<f64>::zeros((t_len, y.len() + 1, d.vocab_size));
        let mut z = vec![0.0; d.joint_dim];
        for t in 0..t_len {
            let ep = self.proj.row(t);
            let ep = ep.to_slice().unwrap();
            for (u, st) in states.iter().enumerate() {
                let row = values.slice_mut(ndarray::s![t, u, ..]).into_slice().unwrap();
                self.params.joint(ep, &st.proj, &mut z, row);
            }
        }
        LogitLattice::new(values, d.blank_id)
    }
}

impl<'a> Encoded<'a> {
    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    /// Encoder hidden states, one row per frame.
    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }

    fn advance_from(&self, prev: &[f64], token: usize) -> PredictorState {
        let d = self.params.dims;
        let mut hidden = vec![0.0; d.pred_hidden];
        self.params.predictor_step(prev, token, &mut hidden);
        let mut proj = vec![0.0; d.joint_dim];
        self.params.project_predictor(&hidden, &mut proj);
        PredictorState { hidden, proj }
    }

    /// States for the start symbol followed by each token of `y`.
    fn predictor_states(&self, y: &[usize]) -> Vec<PredictorState> {
        let mut states = Vec::with_capacity(y.len() + 1);
        states.push(self.start_state());
        for &tok in y {
            let next = self.advance(states.last().unwrap(), tok);
            states.push(next);
        }
        states
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub fn backward_into(
        &self,
        y: &[usize],
        grad_logits: &Array3<f64>,
        grads: &mut ModelParams,
    ) -> Result<()> {
        let p = self.params;
        let d = p.dims;
        let t_len = self.frames();
        let expected = (t_len, y.len() + 1, d.vocab_size);
        if grad_logits.dim() != expected {
            return Err(Error::InvalidInput(format!(
                "gradient shape {:?} does not match lattice shape {expected:?}",
                grad_logits.dim()
            )));
        }
        if grads.dims != d {
            return Err(Error::InvalidInput("gradient container has different dims".into()));
        }
        p.check_tokens(y)?;
        let states = self.predictor_states(y);
        let u1 = y.len() + 1;

        // Joint and output layer.
        let mut d_enc_proj = Array2::<f64>::zeros((t_len, d.joint_dim));
        let mut d_pred_proj = Array2::<f64>::zeros((u1, d.joint_dim));
        let mut z = vec![0.0; d.joint_dim];
        let mut dz = vec![0.0; d.joint_dim];
        for t in 0..t_len {
            let ep = self.proj.row(t);
            let ep = ep.to_slice().unwrap();
            for u in 0..u1 {
                let g = grad_logits.slice(ndarray::s![t, u, ..]);
                let g = g.to_slice().unwrap();
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for ((zi, e), q) in z.iter_mut().zip(ep).zip(&states[u].proj) {
                    *zi = (e + q).tanh();
                }
                outer_add(&mut grads.out_w, g, &z);
                add_into(grads.out_b.as_slice_mut().unwrap(), g);
                dz.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_add(&p.out_w, g, &mut dz);
                for (dzi, zi) in dz.iter_mut().zip(&z) {
                    *dzi *= 1.0 - zi * zi;
                }
                add_into(d_enc_proj.row_mut(t).into_slice().unwrap(), &dz);
                add_into(d_pred_proj.row_mut(u).into_slice().unwrap(), &dz);
            }
        }

        // Encoder projection and recurrence.
        let mut dh = Array2::<f64>::zeros((t_len, d.enc_hidden));
        for t in 0..t_len {
            let dep = d_enc_proj.row(t);
            let dep = dep.to_slice().unwrap();
            add_into(grads.joint_b.as_slice_mut().unwrap(), dep);
            outer_add(&mut grads.joint_enc, dep, self.hidden.row(t).to_slice().unwrap());
            matvec_t_add(&p.joint_enc, dep, dh.row_mut(t).into_slice().unwrap());
        }
        let mut carry = vec![0.0; d.enc_hidden];
        let mut da = vec![0.0; d.enc_hidden];
        for t in (0..t_len).rev() {
            let h = self.hidden.row(t);
            for ((a, (c, dht)), hv) in da.iter_mut().zip(carry.iter().zip(dh.row(t))).zip(h) {
                *a = (c + dht) * (1.0 - hv * hv);
            }
            add_into(grads.enc_b.as_slice_mut().unwrap(), &da);
            outer_add(&mut grads.enc_w_in, &da, self.features.row(t).to_slice().unwrap());
            if t > 0 {
                outer_add(&mut grads.enc_w_rec, &da, self.hidden.row(t - 1).to_slice().unwrap());
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&p.enc_w_rec, &da, &mut carry);
        }

        // Predictor projection and recurrence.
        let mut dg = Array2::<f64>::zeros((u1, d.pred_hidden));
        for u in 0..u1 {
            let dpp = d_pred_proj.row(u);
            let dpp = dpp.to_slice().unwrap();
            outer_add(&mut grads.joint_pred, dpp, &states[u].hidden);
            matvec_t_add(&p.joint_pred, dpp, dg.row_mut(u).into_slice().unwrap());
        }
        let mut carry = vec![0.0; d.pred_hidden];
        let mut da = vec![0.0; d.pred_hidden];
        for u in (0..u1).rev() {
            let g = &states[u].hidden;
            for ((a, (c, dgu)), gv) in da.iter_mut().zip(carry.iter().zip(dg.row(u))).zip(g) {
                *a = (c + dgu) * (1.0 - gv * gv);
            }
            let token = if u == 0 { d.blank_id } else { y[u - 1] };
            add_into(grads.pred_b.as_slice_mut().unwrap(), &da);
            outer_add(
                &mut grads.pred_w_in,
                &da,
                p.embed.row(token).to_slice().unwrap(),
            );
            matvec_t_add(&p.pred_w_in, &da, grads.embed.row_mut(token).into_slice().unwrap());
            if u > 0 {
                outer_add(&mut grads.pred_w_rec, &da, &states[u - 1].hidden);
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&p.pred_w_rec, &da, &mut carry);
        }
        Ok(())
    }
}

/// `out += w * x`.
#[inline]
fn matvec_add(w: &Array2<f64>, x: &[f64], out: &mut [f64]) {
    let cols = w.ncols();
    let data = w.as_slice().expect("standard layout");
    for (o, row) in out.iter_mut().zip(data.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += w^T * x`.
#[inline]
fn matvec_t_add(w: &Array2<f64>, x: &[f64], out: &mut [f64]) {
    let cols = w.ncols();
    let data = w.as_slice().expect("standard layout");
    for (xi, row) in x.iter().zip(data.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += xi * a;
        }
    }
}

/// `w += a * b^T`.
#[inline]
fn outer_add(w: &mut Array2<f64>, a: &[f64], b: &[f64]) {
    let cols = w.ncols();
    let data = w.as_slice_mut().expect("standard layout");
    for (ai, row) in a.iter().zip(data.chunks_exact_mut(cols)) {
        if *ai == 0.0 {
            continue;
        }
        for (r, bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    dims: ModelDims,
    params: std::collections::BTreeMap<String, Vec<f64>>,
}

impl ModelParams {
    pub fn to_json(&self) -> String {
        let params = self
            .tensors()
            .iter()
            .map(|(name, t)| (name.to_string(), t.to_vec()))
            .collect();
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: self.dims,
            params,
        };
        serde_json::to_string(&doc).expect("checkpoint serializes")
    }

    /// Parses a checkpoint; when `expected` is given the stored dims must match it.
    pub fn from_json(text: &str, expected: Option<&ModelDims>) -> Result<Self> {
        let doc: CheckpointDoc = from_json_str(text)?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Parse {
                path: "format_version".into(),
                message: format!("unsupported version {}", doc.format_version),
            });
        }
        doc.dims.validate().map_err(|e| Error::Parse {
            path: "dims".into(),
            message: e.to_string(),
        })?;
        if let Some(exp) = expected {
            if *exp != doc.dims {
                return Err(Error::InvalidInput(format!(
                    "checkpoint dims {:?} do not match configured dims {exp:?}",
                    doc.dims
                )));
            }
        }
        let mut params = ModelParams::zeros(doc.dims);
        for (name, dst) in params.tensors_mut() {
            let src = doc.params.get(name).ok_or_else(|| Error::Parse {
                path: format!("params.{name}"),
                message: "missing tensor".into(),
            })?;
            if src.len() != dst.len() {
                return Err(Error::Parse {
                    path: format!("params.{name}"),
                    message: format!("expected {} values, found {}", dst.len(), src.len()),
                });
            }
            if let Some(i) = src.iter().position(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    path: format!("params.{name}[{i}]"),
                    message: "non-finite value".into(),
                });
            }
            dst.copy_from_slice(src);
        }
        if let Some(extra) = doc.params.keys().find(|k| !TENSOR_NAMES.contains(&k.as_str())) {
            return Err(Error::Parse {
                path: format!("params.{extra}"),
                message: "unknown tensor".into(),
            });
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelDims>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_json(&text, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{normalize, rnnt_loss_and_grad, sequence_log_prob};
    use ndarray::Array2;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 3,
            enc_hidden: 4,
            embed_dim: 3,
            pred_hidden: 4,
            joint_dim: 5,
            vocab_size: 4,
            blank_id: 0,
        }
    }

    fn features(seed: u64, t: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, 3), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let p = ModelParams::zeros(dims());
        let lat = p.forward_lattice(&features(1, 3), &[1, 2]).unwrap();
        assert!(lat.values().iter().all(|v| *v == 0.0));
        let post = normalize(&lat, 1.0).unwrap();
        assert!(post.log_probs().iter().all(|v| (v - 0.25f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn empty_target_lattice_shape() {
        let p = ModelParams::init(0, dims()).unwrap();
        let lat = p.forward_lattice(&features(2, 5), &[]).unwrap();
        assert_eq!(lat.values().dim(), (5, 1, 4));
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = ModelParams::init(7, dims()).unwrap();
        let b = ModelParams::init(7, dims()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::init(8, dims()).unwrap());
        let x = features(3, 4);
        assert_eq!(
            a.forward_lattice(&x, &[3, 1]).unwrap(),
            b.forward_lattice(&x, &[3, 1]).unwrap()
        );
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let p = ModelParams::init(9, dims()).unwrap();
        let bound = 1.0 / (3.0f64).sqrt();
        assert!(p.enc_w_in.iter().all(|v| v.abs() <= bound));
        assert!(p.enc_w_in.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn trait_lattice_matches_batched_lattice() {
        let p = ModelParams::init(4, dims()).unwrap();
        let x = features(4, 4);
        let enc = p.encode(&x).unwrap();
        let y = [2, 3, 1];
        // Generic default implementation, stepping state by state.
        let mut stepped = Array3::zeros((4, 4, 4));
        let mut st = enc.start_state();
        for u in 0..=3 {
            for t in 0..4 {
                let mut row = vec![0.0; 4];
                enc.logits_into(t, &st, &mut row);
                for k in 0..4 {
                    stepped[[t, u, k]] = row[k];
                }
            }
            if u < 3 {
                st = enc.advance(&st, y[u]);
            }
        }
        assert_eq!(enc.lattice(&y).unwrap().values(), &stepped);
    }

    #[test]
    fn encoder_is_unidirectional() {
        let p = ModelParams::init(5, dims()).unwrap();
        let x = features(5, 6);
        let full = p.forward_lattice(&x, &[1, 2]).unwrap();
        let prefix = x.slice(ndarray::s![..4, ..]).to_owned();
        let part = p.forward_lattice(&prefix, &[1, 2]).unwrap();
        assert_eq!(part.values(), &full.values().slice(ndarray::s![..4, .., ..]).to_owned());
    }

    #[test]
    fn predictor_sees_only_earlier_tokens() {
        let p = ModelParams::init(6, dims()).unwrap();
        let x = features(6, 3);
        let full = p.forward_lattice(&x, &[1, 2, 3]).unwrap();
        let part = p.forward_lattice(&x, &[1, 2]).unwrap();
        assert_eq!(part.values(), &full.values().slice(ndarray::s![.., ..3, ..]).to_owned());
        let other = p.forward_lattice(&x, &[1, 2, 1]).unwrap();
        assert_eq!(
            other.values().slice(ndarray::s![.., ..3, ..]),
            full.values().slice(ndarray::s![.., ..3, ..])
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = ModelParams::init(0, dims()).unwrap();
        let bad = Array2::zeros((3, 2));
        assert!(matches!(p.forward_lattice(&bad, &[]), Err(Error::InvalidInput(_))));
        assert!(matches!(p.forward_lattice(&Array2::zeros((0, 3)), &[]), Err(Error::InvalidInput(_))));
        assert!(p.forward_lattice(&features(0, 2), &[0]).is_err());
        assert!(p.forward_lattice(&features(0, 2), &[4]).is_err());
        let g = Array3::zeros((2, 3, 4));
        assert!(p.backward_lattice(&features(0, 2), &[1], &g).is_err());
    }

    #[test]
    fn zero_logit_gradient_gives_zero_parameter_gradient() {
        let p = ModelParams::init(1, dims()).unwrap();
        let g = Array3::zeros((3, 2, 4));
        let grads = p.backward_lattice(&features(1, 3), &[2], &g).unwrap();
        assert!(grads.tensors().iter().all(|(_, t)| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = ModelParams::init(2, dims()).unwrap();
        let x = features(8, 4);
        let y = [1, 3];
        let loss = |q: &ModelParams| {
            let post = normalize(&q.forward_lattice(&x, &y).unwrap(), 1.0).unwrap();
            -sequence_log_prob(&post, &y).unwrap()
        };
        let (_, g_logits) = rnnt_loss_and_grad(&p.forward_lattice(&x, &y).unwrap(), &y, 1.0).unwrap();
        let grads = p.backward_lattice(&x, &y, &g_logits).unwrap();
        let h = 1e-5;
        for ti in 0..TENSOR_NAMES.len() {
            let n = grads.tensors()[ti].1.len();
            for _ in 0..8 {
                let i = rng.gen_range(0..n);
                let mut plus = p.clone();
                plus.tensors_mut()[ti].1[i] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].1[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = grads.tensors()[ti].1[i];
                if a.abs() > 1e-6 {
                    let rel = (a - fd).abs() / a.abs().max(fd.abs());
                    assert!(rel < 1e-4, "{}[{i}]: analytic {a} vs fd {fd}", TENSOR_NAMES[ti]);
                } else {
                    assert!((a - fd).abs() < 1e-9, "{}[{i}]: analytic {a} vs fd {fd}", TENSOR_NAMES[ti]);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::init(11, dims()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path, Some(&dims())).unwrap();
        for ((_, a), (_, b)) in p.tensors().iter().zip(back.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_with_other_dims_is_rejected() {
        let p = ModelParams::init(11, dims()).unwrap();
        let mut other = dims();
        other.joint_dim = 6;
        assert!(ModelParams::from_json(&p.to_json(), Some(&other)).is_err());
    }

    #[test]
    fn corrupt_checkpoint_reports_field_path() {
        let p = ModelParams::init(11, dims()).unwrap();
        let text = p.to_json().replace("\"joint_dim\":5", "\"joint_dim\":\"five\"");
        match ModelParams::from_json(&text, None) {
            Err(Error::Parse { path, .. }) => assert_eq!(path, "dims.joint_dim"),
            other => panic!("unexpected {other:?}"),
        }
        let mut doc: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        doc["params"]["out_b"] = serde_json::json!([1.0]);
        match ModelParams::from_json(&doc.to_string(), None) {
            Err(Error::Parse { path, .. }) => assert_eq!(path, "params.out_b"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
