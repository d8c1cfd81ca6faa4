//! Disruption-risk features, labels, the LSTM predictor and the heuristic
//! indicator.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, ScenarioConfig, TrainSection};
use crate::error::{FrescoError, Result};
use crate::geo::linear_to_db;
use crate::model::{FeatureRow, MissionId, WorldState, FEATURES};

/// Fixed normalization constants, so features do not depend on the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub battery_max: f64,
    pub snr_db_max: f64,
    pub max_distance: f64,
    /// Missions per serving UAV at full load.
    pub serving_cap: f64,
    pub snr_min_db: f64,
    pub serving_floor: f64,
    pub battery_margin_scale: f64,
    pub snr_margin_db_scale: f64,
}

impl FeatureNorm {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        let f = &cfg.features;
        FeatureNorm {
            battery_max: f.battery_max,
            snr_db_max: f.snr_db_max,
            max_distance: cfg.max_distance(),
            serving_cap: cfg.scenario.num_mus.div_ceil(cfg.num_serving().max(1)) as f64,
            snr_min_db: cfg.radio.snr_min_db,
            serving_floor: cfg.energy.serving_floor,
            battery_margin_scale: f.battery_margin_scale,
            snr_margin_db_scale: f.snr_margin_db_scale,
        }
    }
}

fn unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Current observation row of a paired mission, or `None` if unpaired.
pub fn observe(w: &WorldState, mission: MissionId, norm: &FeatureNorm) -> Option<FeatureRow> {
    let j = *w.pairs.get(&mission)?;
    let m = w.missions.get(mission)?;
    let u = &w.uavs[j];
    let snr_db = w.mu_snr.get(&mission).map_or(0.0, |&g| linear_to_db(g));
    Some([
        unit(u.energy / norm.battery_max),
        unit(snr_db / norm.snr_db_max),
        unit(m.mu.distance_to(&u.mover) / norm.max_distance),
        unit(u.served.len() as f64 / norm.serving_cap),
        m.remaining_fraction(),
    ])
}

/// Last `window` observation rows, oldest first; a short history is padded
/// by repeating its oldest row.
pub fn extract_features(w: &WorldState, mission: MissionId, window: usize, norm: &FeatureNorm) -> Result<Vec<FeatureRow>> {
    if mission >= w.missions.len() {
        return Err(FrescoError::Argument(format!("unknown mission {mission}")));
    }
    if window == 0 {
        return Err(FrescoError::Argument("feature window must be positive".into()));
    }
    let hist: Vec<FeatureRow> = match w.history.get(&mission) {
        Some(h) if !h.is_empty() => h.clone(),
        _ => vec![observe(w, mission, norm)
            .ok_or_else(|| FrescoError::Argument(format!("mission {mission} has no observations")))?],
    };
    Ok(pad_window(&hist, window))
}

pub fn pad_window(hist: &[FeatureRow], window: usize) -> Vec<FeatureRow> {
    let tail = &hist[hist.len().saturating_sub(window)..];
    let mut out = vec![tail[0]; window - tail.len()];
    out.extend_from_slice(tail);
    out
}

/// Instantaneous risk from the serving battery and SNR margins.
pub fn heuristic_risk(w: &WorldState, mission: MissionId, norm: &FeatureNorm) -> f64 {
    let Some(&j) = w.pairs.get(&mission) else { return 1.0 };
    let Some(&snr) = w.mu_snr.get(&mission) else { return 1.0 };
    let battery = (w.uavs[j].energy - norm.serving_floor) / norm.battery_margin_scale;
    let link = (linear_to_db(snr) - norm.snr_min_db) / norm.snr_margin_db_scale;
    unit(1.0 - battery.min(link))
}

/// Missions whose risk meets the threshold (inclusive).
pub fn high_risk_set(risks: &BTreeMap<MissionId, f64>, xi_th: f64) -> BTreeSet<MissionId> {
    risks.iter().filter(|(_, &r)| r >= xi_th).map(|(&m, _)| m).collect()
}

/// Per-slot condition of one mission's serving path in a shadow run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathStatus {
    Sustainable,
    /// Paired but failing the sustainability test, or interrupted.
    Unsustainable,
    /// Completed or failed.
    Done,
}

/// `(t, y)` for every slot where the path is sustainable and the whole
/// horizon `[t+1, t+H]` lies inside the record.
pub fn labels_from_status(status: &[PathStatus], horizon: usize) -> Vec<(usize, u8)> {
    let mut out = Vec::new();
    for t in 0..status.len() {
        if status[t] != PathStatus::Sustainable || t + horizon >= status.len() {
            continue;
        }
        let y = status[t + 1..=t + horizon].contains(&PathStatus::Unsustainable);
        out.push((t, u8::from(y)));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<FeatureRow>,
    pub y: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.y > 0.5).count()
    }

    /// Weight on positive samples that balances the two classes.
    pub fn pos_weight(&self) -> f64 {
        let pos = self.positives();
        let neg = self.samples.len() - pos;
        if pos == 0 || neg == 0 {
            1.0
        } else {
            neg as f64 / pos as f64
        }
    }
}

/// LSTM with gates ordered (input, forget, cell, output) and a sigmoid head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    /// `4H × (I + H)`, row-major, columns `[x, h_prev]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            input,
            hidden,
            w: vec![0.0; 4 * hidden * (input + hidden)],
            b: vec![0.0; 4 * hidden],
            w_out: vec![0.0; hidden],
            b_out: 0.0,
        }
    }

    /// Uniform `±scale` initialization.
    pub fn init(input: usize, hidden: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input, hidden);
        for v in p.w.iter_mut().chain(p.b.iter_mut()).chain(p.w_out.iter_mut()) {
            *v = rng.random_range(-scale..=scale);
        }
        p.b_out = rng.random_range(-scale..=scale);
        p
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len() + self.w_out.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check_shape(&self) -> Result<()> {
        let h = self.hidden;
        let ok = self.input == FEATURES
            && h > 0
            && self.w.len() == 4 * h * (self.input + h)
            && self.b.len() == 4 * h
            && self.w_out.len() == h;
        if !ok {
            return Err(FrescoError::Argument(format!(
                "LSTM shape mismatch: input {}, hidden {}, |W| {}, |b| {}, |w_out| {}",
                self.input,
                h,
                self.w.len(),
                self.b.len(),
                self.w_out.len()
            )));
        }
        if !self.iter().all(f64::is_finite) {
            return Err(FrescoError::Argument("LSTM parameters must be finite".into()));
        }
        Ok(())
    }

    /// Flat view: `W`, then `b`, then `w_out`, then `b_out`.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w.iter().chain(&self.b).chain(&self.w_out).copied().chain(std::iter::once(self.b_out))
    }

    pub fn get(&self, idx: usize) -> f64 {
        *self.slot(idx)
    }

    pub fn set(&mut self, idx: usize, v: f64) {
        *self.slot_mut(idx) = v;
    }

    fn slot(&self, mut idx: usize) -> &f64 {
        for part in [&self.w, &self.b, &self.w_out] {
            if idx < part.len() {
                return &part[idx];
            }
            idx -= part.len();
        }
        assert_eq!(idx, 0, "parameter index out of range");
        &self.b_out
    }

    fn slot_mut(&mut self, mut idx: usize) -> &mut f64 {
        for part in [&mut self.w, &mut self.b, &mut self.w_out] {
            if idx < part.len() {
                return &mut part[idx];
            }
            idx -= part.len();
        }
        assert_eq!(idx, 0, "parameter index out of range");
        &mut self.b_out
    }

    fn axpy(&mut self, a: f64, other: &LstmParams) {
        for (x, y) in self.w.iter_mut().zip(&other.w) {
            *x += a * y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += a * y;
        }
        for (x, y) in self.w_out.iter_mut().zip(&other.w_out) {
            *x += a * y;
        }
        self.b_out += a * other.b_out;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Tape {
    /// per step: concatenated `[x, h_prev]`
    xh: Vec<Vec<f64>>,
    /// per step: activated gates `[i, f, g, o]`
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    h_last: Vec<f64>,
    logit: f64,
}

fn run(p: &LstmParams, x: &[FeatureRow], keep: bool) -> Result<Tape> {
    p.check_shape()?;
    if x.is_empty() {
        return Err(FrescoError::Argument("empty feature sequence".into()));
    }
    let (n_in, n_h) = (p.input, p.hidden);
    let cols = n_in + n_h;
    let mut h = vec![0.0; n_h];
    let mut c = vec![0.0; n_h];
    let mut tape = Tape { xh: Vec::new(), gates: Vec::new(), c: Vec::new(), h_last: Vec::new(), logit: 0.0 };
    if keep {
        tape.c.push(c.clone());
    }
    let mut xh = vec![0.0; cols];
    let mut a = vec![0.0; 4 * n_h];
    for row in x {
        xh[..n_in].copy_from_slice(row);
        xh[n_in..].copy_from_slice(&h);
        for (r, out) in a.iter_mut().enumerate() {
            let wr = &p.w[r * cols..(r + 1) * cols];
            *out = p.b[r] + wr.iter().zip(&xh).map(|(w, v)| w * v).sum::<f64>();
        }
        for r in 0..4 * n_h {
            a[r] = if (2 * n_h..3 * n_h).contains(&r) { a[r].tanh() } else { sigmoid(a[r]) };
        }
        for k in 0..n_h {
            c[k] = a[n_h + k] * c[k] + a[k] * a[2 * n_h + k];
            h[k] = a[3 * n_h + k] * c[k].tanh();
        }
        if keep {
            tape.xh.push(xh.clone());
            tape.gates.push(a.clone());
            tape.c.push(c.clone());
        }
    }
    tape.logit = p.b_out + p.w_out.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
    tape.h_last = h;
    Ok(tape)
}

/// Predicted disruption probability for one feature sequence.
pub fn lstm_forward(p: &LstmParams, x: &[FeatureRow]) -> Result<f64> {
    Ok(sigmoid(run(p, x, false)?.logit))
}

/// Weighted binary cross-entropy of one sample.
pub fn sample_loss(p: &LstmParams, s: &Sample, pos_weight: f64) -> Result<f64> {
    let z = run(p, &s.x, false)?.logit;
    Ok(pos_weight * s.y * softplus(-z) + (1.0 - s.y) * softplus(z))
}

/// Loss of one sample and its gradient, accumulated into `grad` with factor `scale`.
pub fn sample_backward(p: &LstmParams, s: &Sample, pos_weight: f64, scale: f64, grad: &mut LstmParams) -> Result<f64> {
    let tape = run(p, &s.x, true)?;
    let z = tape.logit;
    let loss = pos_weight * s.y * softplus(-z) + (1.0 - s.y) * softplus(z);
    let dz = scale * (pos_weight * s.y * (sigmoid(z) - 1.0) + (1.0 - s.y) * sigmoid(z));
    let (n_in, n_h) = (p.input, p.hidden);
    let cols = n_in + n_h;

    grad.b_out += dz;
    let mut dh: Vec<f64> = p.w_out.iter().map(|w| w * dz).collect();
    for (g, h) in grad.w_out.iter_mut().zip(&tape.h_last) {
        *g += dz * h;
    }
    let mut dc = vec![0.0; n_h];
    let mut da = vec![0.0; 4 * n_h];
    for t in (0..tape.gates.len()).rev() {
        let gt = &tape.gates[t];
        let c_prev = &tape.c[t];
        let c_t = &tape.c[t + 1];
        for k in 0..n_h {
            let (i, f, g, o) = (gt[k], gt[n_h + k], gt[2 * n_h + k], gt[3 * n_h + k]);
            let tc = c_t[k].tanh();
            let d_o = dh[k] * tc;
            dc[k] += dh[k] * o * (1.0 - tc * tc);
            da[k] = dc[k] * g * i * (1.0 - i);
            da[n_h + k] = dc[k] * c_prev[k] * f * (1.0 - f);
            da[2 * n_h + k] = dc[k] * i * (1.0 - g * g);
            da[3 * n_h + k] = d_o * o * (1.0 - o);
            dc[k] *= f;
        }
        let xh = &tape.xh[t];
        dh.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..4 * n_h {
            let d = da[r];
            if d == 0.0 {
                continue;
            }
            grad.b[r] += d;
            let wr = &p.w[r * cols..(r + 1) * cols];
            let gr = &mut grad.w[r * cols..(r + 1) * cols];
            for col in 0..cols {
                gr[col] += d * xh[col];
            }
            for k in 0..n_h {
                dh[k] += wr[n_in + k] * d;
            }
        }
    }
    Ok(loss)
}

/// Mean loss over a batch and its gradient.
pub fn batch_gradient(p: &LstmParams, batch: &[&Sample], pos_weight: f64) -> Result<(f64, LstmParams)> {
    let mut grad = LstmParams::zeros(p.input, p.hidden);
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut loss = 0.0;
    for s in batch {
        loss += sample_backward(p, s, pos_weight, scale, &mut grad)?;
    }
    Ok((loss * scale, grad))
}

pub fn dataset_loss(p: &LstmParams, data: &Dataset, pos_weight: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.samples {
        total += sample_loss(p, s, pos_weight)?;
    }
    Ok(total / data.samples.len().max(1) as f64)
}

/// Largest relative gap between analytic and central-difference gradients
/// over the given parameter indices. Gradients smaller than `floor` in both
/// forms are compared absolutely against `floor`.
pub fn gradient_check(p: &LstmParams, samples: &[Sample], indices: &[usize], step: f64, floor: f64) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let (_, grad) = batch_gradient(p, &refs, 1.0)?;
    let mut probe = p.clone();
    let mut worst = 0.0f64;
    for &idx in indices {
        let orig = p.get(idx);
        probe.set(idx, orig + step);
        let up = mean_loss(&probe, &refs)?;
        probe.set(idx, orig - step);
        let down = mean_loss(&probe, &refs)?;
        probe.set(idx, orig);
        let numeric = (up - down) / (2.0 * step);
        let analytic = grad.get(idx);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn mean_loss(p: &LstmParams, batch: &[&Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        total += sample_loss(p, s, 1.0)?;
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Analytic gradient of the mean loss, exposed for tests and tooling.
pub fn analytic_gradient(p: &LstmParams, samples: &[Sample]) -> Result<LstmParams> {
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(batch_gradient(p, &refs, 1.0)?.1)
}

struct Adam {
    m: LstmParams,
    v: LstmParams,
    t: i32,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn step(&mut self, p: &mut LstmParams, g: &LstmParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_B1.powi(self.t);
        let c2 = 1.0 - ADAM_B2.powi(self.t);
        for idx in 0..p.len() {
            let gi = g.get(idx);
            let m = ADAM_B1 * self.m.get(idx) + (1.0 - ADAM_B1) * gi;
            let v = ADAM_B2 * self.v.get(idx) + (1.0 - ADAM_B2) * gi * gi;
            self.m.set(idx, m);
            self.v.set(idx, v);
            let upd = lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
            p.set(idx, p.get(idx) - upd);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: LstmParams,
    /// Full training-set loss after each epoch.
    pub loss_trace: Vec<f64>,
    pub pos_weight: f64,
}

/// Mini-batch training with seeded shuffling.
pub fn lstm_train(data: &Dataset, hyper: &TrainSection) -> Result<TrainOutcome> {
    if data.samples.is_empty() {
        return Err(FrescoError::Argument("training set is empty".into()));
    }
    if hyper.batch_size == 0 || !(hyper.learning_rate >= 0.0) {
        return Err(FrescoError::Argument("batch size must be positive and learning rate non-negative".into()));
    }
    let mut p = LstmParams::init(FEATURES, hyper.hidden, hyper.init_scale, hyper.seed);
    let pos_weight = data.pos_weight();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut adam = Adam {
        m: LstmParams::zeros(p.input, p.hidden),
        v: LstmParams::zeros(p.input, p.hidden),
        t: 0,
    };
    let mut trace = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (_, g) = batch_gradient(&p, &batch, pos_weight)?;
            match hyper.optimizer {
                OptimizerKind::Sgd => p.axpy(-hyper.learning_rate, &g),
                OptimizerKind::Adam => adam.step(&mut p, &g, hyper.learning_rate),
            }
        }
        trace.push(dataset_loss(&p, data, pos_weight)?);
    }
    Ok(TrainOutcome { params: p, loss_trace: trace, pos_weight })
}
