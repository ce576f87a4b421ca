//! Many-to-one LSTM regressor from observation series to covariance parameters.
//!
//! One LSTM layer followed by a linear dense head. Gradients are computed by
//! backpropagation through the full sequence and applied with Adam.
//!
//! Gate weights are stored stacked: a `4H × (H + I)` row-major block in gate
//! order forget, input, candidate, output, acting on the concatenation `[h, x]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::binio::{put_f64s, put_len, put_u32, Reader};
use crate::covmat::{
    floor_eigenvalues, lattice_distance, soar, CovarianceMatrix, LorenzRParams, SwRParams, LORENZ_VR_MAX, SW_D_RANGE,
    SW_LENGTH_SCALE, SW_R_PREFACTOR, SW_SHAPE_RANGE,
};
use crate::datagen::{validation_count, CovParams, Dataset, InputStats, ProblemKind};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSTMCOV1";

/// Correlations predicted for Lorenz are clamped to this magnitude.
pub const MAX_CORRELATION: f64 = 0.999;

/// Smallest admissible predicted `v_R`.
pub const MIN_VR: f64 = 1e-6;

/// Eigenvalue floor for the fallback projection of a predicted correlation block.
pub const EIGEN_FLOOR: f64 = 1e-6;

const GATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Candidate = 2,
    Output = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// Stacked gate weights, `4H × (H + I)` row-major.
    pub w: Vec<f64>,
    /// Stacked gate biases, `4H`.
    pub b: Vec<f64>,
    /// Dense head, `O × H` row-major.
    pub wd: Vec<f64>,
    pub bd: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w: vec![0.0; GATES * hidden * (hidden + input)],
            b: vec![0.0; GATES * hidden],
            wd: vec![0.0; output * hidden],
            bd: vec![0.0; output],
        }
    }

    /// Gate weights `U(−k, k)` with `k = 1/√(H + I)`, head weights `U(−1/√H, 1/√H)`,
    /// forget bias 1, other biases 0.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut RandomSource) -> Self {
        let mut p = Self::zeros(input, hidden, output);
        let k = 1.0 / ((hidden + input) as f64).sqrt();
        p.w.iter_mut().for_each(|w| *w = rng.uniform(-k, k));
        let kd = 1.0 / (hidden as f64).sqrt();
        p.wd.iter_mut().for_each(|w| *w = rng.uniform(-kd, kd));
        p.b[..hidden].iter_mut().for_each(|b| *b = 1.0);
        p
    }

    fn zl(&self) -> usize {
        self.hidden + self.input
    }

    pub fn gate_weights(&self, g: Gate) -> &[f64] {
        let n = self.hidden * self.zl();
        &self.w[g as usize * n..(g as usize + 1) * n]
    }

    pub fn gate_bias(&self, g: Gate) -> &[f64] {
        let h = self.hidden;
        &self.b[g as usize * h..(g as usize + 1) * h]
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len() + self.wd.len() + self.bd.len()
    }

    /// Named tensors in checkpoint order with their `(rows, cols)` shapes.
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        let (h, zl) = (self.hidden, self.zl());
        let names_w = ["W_f", "W_i", "W_c", "W_o"];
        let names_b = ["b_f", "b_i", "b_c", "b_o"];
        let gates = [Gate::Forget, Gate::Input, Gate::Candidate, Gate::Output];
        let mut out = Vec::with_capacity(10);
        for (n, g) in names_w.iter().zip(gates) {
            out.push((*n, h, zl, self.gate_weights(g)));
        }
        for (n, g) in names_b.iter().zip(gates) {
            out.push((*n, h, 1, self.gate_bias(g)));
        }
        out.push(("W_d", self.output, h, &self.wd[..]));
        out.push(("b_d", self.output, 1, &self.bd[..]));
        out
    }

    fn slices(&self) -> [&[f64]; 4] {
        [&self.w, &self.b, &self.wd, &self.bd]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w, &mut self.b, &mut self.wd, &mut self.bd]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.slices().into_iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.slices_mut().into_iter().flatten()
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    fn same_shape(&self, o: &LstmParams) -> Result<()> {
        if (self.input, self.hidden, self.output) != (o.input, o.hidden, o.output) {
            return Err(Error::ConfigMismatch(format!(
                "parameter shapes differ: ({}, {}, {}) vs ({}, {}, {})",
                self.input, self.hidden, self.output, o.input, o.hidden, o.output
            )));
        }
        Ok(())
    }

    fn add_scaled(&mut self, o: &LstmParams, s: f64) {
        for (a, b) in self.iter_mut().zip(o.iter()) {
            *a += s * b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|x| *x *= s);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Post-activation gate values of one cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub o: Vec<f64>,
}

/// Writes activated gates into `gates` and the new cell, `tanh(cell)` and hidden states.
fn cell_step(
    p: &LstmParams,
    z: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c: &mut [f64],
    tc: &mut [f64],
    h: &mut [f64],
) {
    let (hd, zl) = (p.hidden, p.zl());
    for (r, g) in gates.iter_mut().enumerate() {
        *g = p.b[r] + dot(&p.w[r * zl..(r + 1) * zl], z);
    }
    for k in 0..hd {
        let f = sigmoid(gates[k]);
        let i = sigmoid(gates[hd + k]);
        let g = gates[2 * hd + k].tanh();
        let o = sigmoid(gates[3 * hd + k]);
        gates[k] = f;
        gates[hd + k] = i;
        gates[2 * hd + k] = g;
        gates[3 * hd + k] = o;
        c[k] = f * c_prev[k] + i * g;
        tc[k] = c[k].tanh();
        h[k] = o * tc[k];
    }
}

/// One LSTM step on input `x` from state `(h_prev, c_prev)`; returns `(h, C, gates)`.
pub fn lstm_cell_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>, GateRecord)> {
    if x.len() != p.input {
        return Err(Error::dims(p.input, x.len()));
    }
    if h_prev.len() != p.hidden || c_prev.len() != p.hidden {
        return Err(Error::dims(p.hidden, h_prev.len().min(c_prev.len())));
    }
    let hd = p.hidden;
    let mut z = h_prev.to_vec();
    z.extend_from_slice(x);
    let mut gates = vec![0.0; GATES * hd];
    let (mut c, mut tc, mut h) = (vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]);
    cell_step(p, &z, c_prev, &mut gates, &mut c, &mut tc, &mut h);
    let rec = GateRecord {
        f: gates[..hd].to_vec(),
        i: gates[hd..2 * hd].to_vec(),
        c_tilde: gates[2 * hd..3 * hd].to_vec(),
        o: gates[3 * hd..].to_vec(),
    };
    Ok((h, c, rec))
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LstmActivations {
    pub steps: usize,
    /// `[h_{t−1}, x_t]` per step, `T × (H + I)`.
    pub z: Vec<f64>,
    /// Activated gates per step, `T × 4H`, order f, i, c̃, o.
    pub gates: Vec<f64>,
    /// Cell states `C_0 … C_T`, `(T + 1) × H`.
    pub cell: Vec<f64>,
    /// `tanh(C_t)` per step, `T × H`.
    pub tanh_cell: Vec<f64>,
    pub h_last: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl LstmActivations {
    pub fn gate(&self, t: usize, g: Gate, hidden: usize) -> &[f64] {
        let base = t * GATES * hidden + g as usize * hidden;
        &self.gates[base..base + hidden]
    }
}

fn check_seq(seq: &[f64], p: &LstmParams) -> Result<usize> {
    if seq.is_empty() {
        return Err(Error::EmptyInput("input sequence"));
    }
    if !seq.len().is_multiple_of(p.input) {
        return Err(Error::dims(p.input, seq.len() % p.input));
    }
    Ok(seq.len() / p.input)
}

/// Runs the whole row-major sequence from zero state and applies the head to `h_T`.
pub fn forward_many_to_one(seq: &[f64], p: &LstmParams) -> Result<LstmActivations> {
    let steps = check_seq(seq, p)?;
    let (hd, zl) = (p.hidden, p.zl());
    let mut a = LstmActivations {
        steps,
        z: vec![0.0; steps * zl],
        gates: vec![0.0; steps * GATES * hd],
        cell: vec![0.0; (steps + 1) * hd],
        tanh_cell: vec![0.0; steps * hd],
        h_last: vec![0.0; hd],
        prediction: vec![0.0; p.output],
    };
    let mut h = vec![0.0; hd];
    for t in 0..steps {
        let z = &mut a.z[t * zl..(t + 1) * zl];
        z[..hd].copy_from_slice(&h);
        z[hd..].copy_from_slice(&seq[t * p.input..(t + 1) * p.input]);
        let (prev, next) = a.cell.split_at_mut((t + 1) * hd);
        cell_step(
            p,
            &a.z[t * zl..(t + 1) * zl],
            &prev[t * hd..],
            &mut a.gates[t * GATES * hd..(t + 1) * GATES * hd],
            &mut next[..hd],
            &mut a.tanh_cell[t * hd..(t + 1) * hd],
            &mut h,
        );
    }
    for o in 0..p.output {
        a.prediction[o] = p.bd[o] + dot(&p.wd[o * hd..(o + 1) * hd], &h);
    }
    a.h_last = h;
    Ok(a)
}

/// Prediction only.
pub fn predict(seq: &[f64], p: &LstmParams) -> Result<Vec<f64>> {
    Ok(forward_many_to_one(seq, p)?.prediction)
}

/// Mean of squared componentwise differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dims(target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("prediction"));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Loss and exact gradients for one sequence, using a cached forward pass.
pub fn backward_from(a: &LstmActivations, target: &[f64], p: &LstmParams) -> Result<(f64, LstmParams)> {
    let loss = mse_loss(&a.prediction, target)?;
    let (hd, zl) = (p.hidden, p.zl());
    let mut g = LstmParams::zeros(p.input, hd, p.output);
    let scale = 2.0 / p.output as f64;
    let mut dh = vec![0.0; hd];
    for o in 0..p.output {
        let dy = scale * (a.prediction[o] - target[o]);
        g.bd[o] = dy;
        axpy(&mut g.wd[o * hd..(o + 1) * hd], dy, &a.h_last);
        axpy(&mut dh, dy, &p.wd[o * hd..(o + 1) * hd]);
    }
    let mut dc = vec![0.0; hd];
    let mut da = vec![0.0; GATES * hd];
    let mut dz = vec![0.0; zl];
    for t in (0..a.steps).rev() {
        let gates = &a.gates[t * GATES * hd..(t + 1) * GATES * hd];
        let c_prev = &a.cell[t * hd..(t + 1) * hd];
        let tc = &a.tanh_cell[t * hd..(t + 1) * hd];
        for k in 0..hd {
            let (f, i, gc, o) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
            let d_o = dh[k] * tc[k];
            let d_c = dc[k] + dh[k] * o * (1.0 - tc[k] * tc[k]);
            da[k] = d_c * c_prev[k] * f * (1.0 - f);
            da[hd + k] = d_c * gc * i * (1.0 - i);
            da[2 * hd + k] = d_c * i * (1.0 - gc * gc);
            da[3 * hd + k] = d_o * o * (1.0 - o);
            dc[k] = d_c * f;
        }
        let z = &a.z[t * zl..(t + 1) * zl];
        dz.iter_mut().for_each(|x| *x = 0.0);
        for (r, &d) in da.iter().enumerate() {
            g.b[r] += d;
            axpy(&mut g.w[r * zl..(r + 1) * zl], d, z);
            axpy(&mut dz, d, &p.w[r * zl..(r + 1) * zl]);
        }
        dh.copy_from_slice(&dz[..hd]);
    }
    Ok((loss, g))
}

/// Loss and gradients of `mse_loss(forward_many_to_one(seq), target)`.
pub fn backward(seq: &[f64], target: &[f64], p: &LstmParams) -> Result<(f64, LstmParams)> {
    if target.len() != p.output {
        return Err(Error::dims(p.output, target.len()));
    }
    backward_from(&forward_many_to_one(seq, p)?, target, p)
}

/// A normalised training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Mean loss and mean gradient over a batch; per-sample work runs in parallel and is
/// summed in batch order.
pub fn batch_gradient(batch: &[&Example], p: &LstmParams) -> Result<(f64, LstmParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let parts: Vec<(f64, LstmParams)> = batch
        .par_iter()
        .map(|e| backward(&e.x, &e.y, p))
        .collect::<Result<_>>()?;
    let mut it = parts.into_iter();
    let (mut loss, mut grad) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        grad.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

/// Rescales `g` so its global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(g: &mut LstmParams, max_norm: f64) -> f64 {
    let n = g.norm();
    if n > max_norm && n > 0.0 {
        g.scale(max_norm / n);
    }
    n
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: LstmParams,
    pub v: LstmParams,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(p: &LstmParams, lr: f64) -> Self {
        let z = LstmParams::zeros(p.input, p.hidden, p.output);
        Self {
            m: z.clone(),
            v: z,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. On a non-finite result nothing is modified.
pub fn adam_step(p: &mut LstmParams, g: &LstmParams, s: &mut AdamState) -> Result<()> {
    p.same_shape(g)?;
    p.same_shape(&s.m)?;
    let step = s.step + 1;
    let c1 = 1.0 - s.beta1.powf(step as f64);
    let c2 = 1.0 - s.beta2.powf(step as f64);
    let mut next_p = p.clone();
    let mut next_m = s.m.clone();
    let mut next_v = s.v.clone();
    for (((pi, gi), mi), vi) in next_p
        .iter_mut()
        .zip(g.iter())
        .zip(next_m.iter_mut())
        .zip(next_v.iter_mut())
    {
        *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
        *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *pi -= s.lr * mhat / (vhat.sqrt() + s.eps);
    }
    if !next_p.is_finite() || !next_v.is_finite() {
        return Err(Error::NonFinite(format!("Adam update at step {step}")));
    }
    *p = next_p;
    s.m = next_m;
    s.v = next_v;
    s.step = step;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Validation fraction `ρ`.
    pub val_fraction: f64,
    pub patience: usize,
    pub hidden: usize,
    /// Number of leading series rows fed to the network; `None` uses the whole series.
    pub input_steps: Option<usize>,
    pub lr: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 32,
            val_fraction: 0.1,
            patience: 10,
            hidden: 200,
            input_steps: None,
            lr: 1e-3,
            clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must lie in (0,1), got {}",
                self.val_fraction
            )));
        }
        if self.patience == 0 || self.batch == 0 || self.epochs == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "epochs, batch, patience and hidden must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

/// Tracks the best validation loss and how long it has not improved.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records a validation loss; returns true when it is a new minimum.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Weights with the lowest validation loss.
    pub params: LstmParams,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mini-batch Adam training from `params` with early stopping on `validate`.
///
/// `validate` is called once per epoch (numbered from 1) with the current weights.
pub fn fit<V>(
    mut params: LstmParams,
    train: &[Example],
    cfg: &TrainConfig,
    rng: &mut RandomSource,
    mut validate: V,
) -> Result<FitOutcome>
where
    V: FnMut(&LstmParams, usize) -> Result<f64>,
{
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = params.clone();
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = batch_gradient(&batch, &params)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss diverged in epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            if let Some(c) = cfg.clip {
                clip_global_norm(&mut grad, c);
            }
            adam_step(&mut params, &grad, &mut adam)?;
        }
        let train_loss = total / train.len() as f64;
        let val = validate(&params, epoch)?;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("validation loss diverged in epoch {epoch}")));
        }
        curve.push(EpochLoss {
            epoch,
            train: train_loss,
            val,
        });
        info!("epoch {epoch}: train {train_loss:.6e} val {val:.6e}");
        if stopper.observe(epoch, val) {
            best = params.clone();
        }
        if stopper.should_stop() {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(FitOutcome {
        params: best,
        curve,
        best_epoch: stopper.best().0,
        stopped_early,
    })
}

/// Mean loss over `set`.
pub fn evaluate(set: &[Example], p: &LstmParams) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let losses: Vec<f64> = set
        .par_iter()
        .map(|e| mse_loss(&predict(&e.x, p)?, &e.y))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / set.len() as f64)
}

/// A network together with everything needed to apply it to raw series.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: ProblemKind,
    /// Series rows consumed.
    pub input_steps: usize,
    pub params: LstmParams,
    /// Statistics of the first `input_steps × obs_dim` series entries.
    pub stats: InputStats,
}

impl TrainedModel {
    pub fn obs_dim(&self) -> usize {
        self.params.input
    }

    fn example(&self, series: &[f64], params: &[f64]) -> Result<Example> {
        let n = self.input_steps * self.obs_dim();
        if series.len() < n {
            return Err(Error::dims(n, series.len()));
        }
        Ok(Example {
            x: self.stats.normalize(&series[..n])?,
            y: self.kind.normalize_params(params),
        })
    }

    /// Raw (denormalised, unclamped) parameter prediction.
    pub fn predict_raw(&self, series: &[f64]) -> Result<Vec<f64>> {
        let n = self.input_steps * self.obs_dim();
        if series.len() < n {
            return Err(Error::dims(n, series.len()));
        }
        let z = predict(&self.stats.normalize(&series[..n])?, &self.params)?;
        Ok(self.kind.denormalize_params(&z))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Normalised examples of `samples` for `model`'s input window.
pub fn examples_for(model: &TrainedModel, samples: &[crate::datagen::DatasetSample]) -> Result<Vec<Example>> {
    samples
        .par_iter()
        .map(|s| model.example(&s.series, &s.params))
        .collect()
}

/// Trains on the leading `1 − ρ` of the dataset, validating on the rest.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, rng: &mut RandomSource) -> Result<TrainOutcome> {
    const MIN_SAMPLES: usize = 10;
    cfg.validate()?;
    if dataset.len() < MIN_SAMPLES {
        return Err(Error::DatasetTooSmall {
            found: dataset.len(),
            min: MIN_SAMPLES,
        });
    }
    let steps = cfg.input_steps.unwrap_or(dataset.series_len);
    if steps == 0 || steps > dataset.series_len {
        return Err(Error::Config(format!(
            "input steps {steps} must lie in [1, {}]",
            dataset.series_len
        )));
    }
    let nv = validation_count(dataset.len(), cfg.val_fraction).max(1);
    let (train_s, val_s) = dataset.samples.split_at(dataset.len() - nv);
    let n_in = steps * dataset.obs_dim;
    let stats = InputStats::compute(train_s.iter().map(|s| s.series.as_slice()), n_in)?;
    let params = LstmParams::init(dataset.obs_dim, cfg.hidden, dataset.param_dim, rng);
    let mut model = TrainedModel {
        kind: dataset.kind,
        input_steps: steps,
        params,
        stats,
    };
    let train_ex = examples_for(&model, train_s)?;
    let val_ex = examples_for(&model, val_s)?;
    info!(
        "training {} samples ({} validation), {} steps × {} channels, hidden {}",
        train_ex.len(),
        val_ex.len(),
        steps,
        dataset.obs_dim,
        cfg.hidden
    );
    let out = fit(model.params.clone(), &train_ex, cfg, rng, |p, _| evaluate(&val_ex, p))?;
    model.params = out.params;
    Ok(TrainOutcome {
        model,
        curve: out.curve,
        best_epoch: out.best_epoch,
        stopped_early: out.stopped_early,
    })
}

/// Covariance predicted for a series.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub params: CovParams,
    pub matrix: CovarianceMatrix,
    /// The clamped prediction was not SPD and was projected by eigenvalue flooring.
    pub fallback: bool,
}

/// Forward pass, denormalisation, clamping into the admissible ranges and assembly of `R`.
pub fn predict_covariance(series: &[f64], model: &TrainedModel) -> Result<Prediction> {
    let raw = model.predict_raw(series)?;
    params_to_covariance(model.kind, &raw)
}

/// Clamps raw parameters and builds the covariance, falling back to eigenvalue flooring
/// of the correlation block when the clamped parameters are not SPD.
pub fn params_to_covariance(kind: ProblemKind, raw: &[f64]) -> Result<Prediction> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predicted covariance parameters".into()));
    }
    match kind {
        ProblemKind::Lorenz => {
            let mut p = LorenzRParams::from_slice(raw)?;
            for r in [&mut p.r0, &mut p.r1, &mut p.r2] {
                *r = r.clamp(-MAX_CORRELATION, MAX_CORRELATION);
            }
            p.v_r = p.v_r.clamp(MIN_VR, LORENZ_VR_MAX);
            match crate::covmat::spd_from_lorenz_params(&p) {
                Ok(matrix) => Ok(Prediction {
                    params: CovParams::Lorenz(p),
                    matrix,
                    fallback: false,
                }),
                Err(Error::NotPositiveDefinite { .. }) => {
                    warn!("predicted Lorenz correlations not positive definite; flooring eigenvalues");
                    #[rustfmt::skip]
                    let c = DMatrix::from_row_slice(3, 3, &[
                        1.0, p.r0, p.r1,
                        p.r0, 1.0, p.r2,
                        p.r1, p.r2, 1.0,
                    ]);
                    let floored = floor_eigenvalues(&c, EIGEN_FLOOR)?.into_matrix();
                    let d: Vec<f64> = (0..3).map(|i| floored[(i, i)].sqrt()).collect();
                    let corr =
                        DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { floored[(i, j)] / (d[i] * d[j]) });
                    p.r0 = corr[(0, 1)];
                    p.r1 = corr[(0, 2)];
                    p.r2 = corr[(1, 2)];
                    let matrix = CovarianceMatrix::new(corr * p.v_r)?;
                    Ok(Prediction {
                        params: CovParams::Lorenz(p),
                        matrix,
                        fallback: true,
                    })
                }
                Err(e) => Err(e),
            }
        }
        ProblemKind::ShallowWater => {
            let mut p = SwRParams::from_slice(raw)?;
            p.d.iter_mut().for_each(|d| *d = d.clamp(SW_D_RANGE.0, SW_D_RANGE.1));
            p.r = p.r.clamp(SW_SHAPE_RANGE.0, SW_SHAPE_RANGE.1);
            match crate::covmat::build_sw_covariance(&p, SW_LENGTH_SCALE) {
                Ok(matrix) => Ok(Prediction {
                    params: CovParams::ShallowWater(p),
                    matrix,
                    fallback: false,
                }),
                Err(Error::NotPositiveDefinite { .. }) => {
                    warn!("predicted shallow-water covariance not positive definite; flooring eigenvalues");
                    let side = p.side()?;
                    let n = side * side;
                    let mut corr = DMatrix::identity(n, n);
                    for i in 0..n {
                        for j in 0..i {
                            let v = soar(p.r * lattice_distance(side, i, j), SW_LENGTH_SCALE)?;
                            corr[(i, j)] = v;
                            corr[(j, i)] = v;
                        }
                    }
                    let floored = floor_eigenvalues(&corr, EIGEN_FLOOR)?.into_matrix();
                    let sd: Vec<f64> = p.d.iter().map(|d| d.sqrt()).collect();
                    let m = DMatrix::from_fn(n, n, |i, j| SW_R_PREFACTOR * sd[i] * sd[j] * floored[(i, j)]);
                    Ok(Prediction {
                        matrix: CovarianceMatrix::new(crate::covmat::symmetrize(&m)?)?,
                        params: CovParams::ShallowWater(p),
                        fallback: true,
                    })
                }
                Err(e) => Err(e),
            }
        }
    }
}

const MAX_CHECKPOINT_DIM: usize = 1 << 26;

pub fn write_checkpoint(m: &TrainedModel, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_len(w, m.input_steps)?;
    put_len(w, m.params.hidden)?;
    put_len(w, m.params.output)?;
    put_u32(w, m.kind.code())?;
    put_len(w, m.stats.mean.len())?;
    put_f64s(w, &m.stats.mean)?;
    put_len(w, m.stats.std.len())?;
    put_f64s(w, &m.stats.std)?;
    for (_, rows, cols, data) in m.params.tensors() {
        put_len(w, rows)?;
        put_len(w, cols)?;
        put_f64s(w, data)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<TrainedModel> {
    let mut rd = Reader::new(r);
    let mut magic = [0u8; 8];
    rd.bytes(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::VersionMismatch {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let input_steps = rd.u32("input length")? as usize;
    let hidden = rd.u32("hidden size")? as usize;
    let output = rd.u32("output length")? as usize;
    let kind_at = rd.offset();
    let kind = ProblemKind::from_code(rd.u32("problem kind")?).map_err(|e| Error::Format {
        offset: kind_at,
        msg: e.to_string(),
    })?;
    if hidden == 0 || output == 0 || input_steps == 0 || hidden > MAX_CHECKPOINT_DIM || output > MAX_CHECKPOINT_DIM {
        return rd.fail("invalid network dimensions");
    }
    let mean = rd.f64_array("normalisation means", MAX_CHECKPOINT_DIM)?;
    let std = rd.f64_array("normalisation deviations", MAX_CHECKPOINT_DIM)?;
    if mean.len() != std.len() || mean.is_empty() || mean.len() % input_steps != 0 {
        return rd.fail("normalisation block does not match input length");
    }
    let input = mean.len() / input_steps;
    let mut p = LstmParams::zeros(input, hidden, output);
    let shapes: Vec<(usize, usize)> = p.tensors().iter().map(|(_, r, c, _)| (*r, *c)).collect();
    let mut data = Vec::with_capacity(shapes.len());
    for (rows, cols) in shapes {
        let at = rd.offset();
        let (r, c) = (rd.u32("tensor rows")? as usize, rd.u32("tensor cols")? as usize);
        if (r, c) != (rows, cols) {
            return Err(Error::Format {
                offset: at,
                msg: format!("tensor shape {r}×{c}, expected {rows}×{cols}"),
            });
        }
        data.push(rd.f64s(r * c, "tensor data")?);
    }
    rd.expect_eof()?;
    let mut it = data.into_iter();
    let gate_w: Vec<f64> = (0..GATES).flat_map(|_| it.next().expect("four gate tensors")).collect();
    let gate_b: Vec<f64> = (0..GATES).flat_map(|_| it.next().expect("four bias tensors")).collect();
    p.w = gate_w;
    p.b = gate_b;
    p.wd = it.next().expect("head weights");
    p.bd = it.next().expect("head bias");
    Ok(TrainedModel {
        kind,
        input_steps,
        params: p,
        stats: InputStats { mean, std },
    })
}

pub fn save_checkpoint(m: &TrainedModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(m, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
