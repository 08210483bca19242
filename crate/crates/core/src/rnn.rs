//! Stateful recurrent classifier: a time-distributed dense layer with
//! parametric ReLU units, stacked LSTM layers and a sigmoid output unit.
//!
//! All trainable values live in one flat `f64` vector so the optimizer,
//! checkpointing and gradient checks treat them uniformly. Matrices are
//! stored input-major: row `j` of a weight matrix holds the outgoing
//! weights of input `j`, which lets the dense layer skip absent (zero)
//! inputs.
//!
//! LSTM gates use the usual formulation, gate blocks ordered
//! input, forget, candidate, output:
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)      f = σ(W_f x + U_f h + b_f)
//! g = tanh(W_g x + U_g h + b_g)   o = σ(W_o x + U_o h + b_o)
//! c' = f ⊙ c + i ⊙ g              h' = o ⊙ tanh(c')
//! ```
//!
//! Padding rows leave a lane's state untouched, so a lane whose data ends
//! inside a bucket keeps its final state frozen until the next reset.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::SampleRow;
use crate::sequencer::{Batch, BatchPlan};

pub const PROB_CLAMP: f64 = 1e-7;
pub const CHECKPOINT_MAGIC: &str = "sensorseq-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub dense_units: usize,
    pub lstm_layers: usize,
    pub lstm_units: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small sizes suited to a laptop core.
    pub fn desk(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            dense_units: 16,
            lstm_layers: 2,
            lstm_units: 32,
            seed,
        }
    }

    /// 50 PReLU units and two 500-unit LSTM layers.
    pub fn full(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            dense_units: 50,
            lstm_layers: 2,
            lstm_units: 500,
            seed,
        }
    }

    fn check(&self) -> Result<(), RnnError> {
        if self.input_dim == 0 || self.dense_units == 0 || self.lstm_layers == 0 || self.lstm_units == 0 {
            return Err(RnnError::BadConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RnnError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    DivergenceDetected {
        epoch: usize,
        batch: usize,
        params: Box<ModelParams>,
    },
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LstmLayout {
    w_in: Range<usize>,
    w_rec: Range<usize>,
    bias: Range<usize>,
    input: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    dense_w: Range<usize>,
    dense_b: Range<usize>,
    dense_alpha: Range<usize>,
    lstm: Vec<LstmLayout>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    len: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, h) = (cfg.dense_units, cfg.lstm_units);
        let dense_w = take(cfg.input_dim * d);
        let dense_b = take(d);
        let dense_alpha = take(d);
        let lstm = (0..cfg.lstm_layers)
            .map(|k| {
                let input = if k == 0 { d } else { h };
                LstmLayout {
                    w_in: take(input * 4 * h),
                    w_rec: take(h * 4 * h),
                    bias: take(4 * h),
                    input,
                }
            })
            .collect();
        let out_w = take(h);
        let out_b = take(1);
        Self {
            dense_w,
            dense_b,
            dense_alpha,
            lstm,
            out_w,
            out_b,
            len: at,
        }
    }
}

/// Every trainable tensor of the network, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub data: Vec<f64>,
    layout: Layout,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal columns via Gram-Schmidt on a Gaussian matrix.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for c in &cols {
            let p = dot(&v, c);
            axpy(-p, c, &mut v);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    // row m, col j
    let mut out = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for (m, v) in c.iter().enumerate() {
            out[m * n + j] = *v;
        }
    }
    out
}

impl ModelParams {
    /// Deterministic initialization: Glorot-uniform input weights,
    /// orthogonal recurrent blocks, forget-gate bias 1, PReLU slopes 0.25.
    pub fn init(config: ModelConfig) -> Result<Self, RnnError> {
        config.check()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut glorot = |r: &Range<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut data[r.clone()] {
                *v = rng.random_range(-limit..limit);
            }
        };
        let (d, h) = (config.dense_units, config.lstm_units);
        glorot(&layout.dense_w, config.input_dim, d, &mut rng);
        for l in &layout.lstm {
            glorot(&l.w_in, l.input, 4 * h, &mut rng);
        }
        glorot(&layout.out_w, h, 1, &mut rng);
        for l in &layout.lstm {
            for gate in 0..4 {
                let q = orthogonal(h, &mut rng);
                for m in 0..h {
                    for j in 0..h {
                        data[l.w_rec.start + m * 4 * h + gate * h + j] = q[m * h + j];
                    }
                }
            }
            for v in &mut data[l.bias.start + h..l.bias.start + 2 * h] {
                *v = 1.0;
            }
        }
        data[layout.dense_alpha.clone()].iter_mut().for_each(|a| *a = 0.25);
        Ok(Self { config, data, layout })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, RnnError> {
        config.check()?;
        let layout = Layout::new(&config);
        Ok(Self {
            config,
            data: vec![0.0; layout.len],
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let cfg = &self.config;
        let (d, h) = (cfg.dense_units, cfg.lstm_units);
        let g = |name: String, range: &Range<usize>, rows: usize, cols: usize| ParamGroup {
            name,
            range: range.clone(),
            rows,
            cols,
        };
        let mut out = vec![
            g("dense.w".into(), &self.layout.dense_w, cfg.input_dim, d),
            g("dense.b".into(), &self.layout.dense_b, 1, d),
            g("dense.alpha".into(), &self.layout.dense_alpha, 1, d),
        ];
        for (k, l) in self.layout.lstm.iter().enumerate() {
            out.push(g(format!("lstm{k}.w_in"), &l.w_in, l.input, 4 * h));
            out.push(g(format!("lstm{k}.w_rec"), &l.w_rec, h, 4 * h));
            out.push(g(format!("lstm{k}.b"), &l.bias, 1, 4 * h));
        }
        out.push(g("out.w".into(), &self.layout.out_w, 1, h));
        out.push(g("out.b".into(), &self.layout.out_b, 1, 1));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_checkpoint(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "{CHECKPOINT_MAGIC}\ninput_dim={}\ndense_units={}\nlstm_layers={}\nlstm_units={}\nseed={}\n",
            c.input_dim, c.dense_units, c.lstm_layers, c.lstm_units, c.seed
        );
        for g in self.groups() {
            let _ = writeln!(s, "param {} {} {}", g.name, g.rows, g.cols);
            for row in self.data[g.range].chunks(g.cols) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, RnnError> {
        let bad = |m: &str| RnnError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header"));
        }
        let mut header = HashMap::new();
        for _ in 0..5 {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            header.insert(k.to_string(), v.parse::<u64>().map_err(|_| bad(line))?);
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(k));
        let config = ModelConfig {
            input_dim: get("input_dim")? as usize,
            dense_units: get("dense_units")? as usize,
            lstm_layers: get("lstm_layers")? as usize,
            lstm_units: get("lstm_units")? as usize,
            seed: get("seed")?,
        };
        let mut params = Self::zeros(config)?;
        for g in params.groups() {
            let line = lines.next().ok_or_else(|| bad("missing param block"))?;
            let expect = format!("param {} {} {}", g.name, g.rows, g.cols);
            if line != expect {
                return Err(bad(&format!("expected `{expect}`, got `{line}`")));
            }
            let mut at = g.range.start;
            for _ in 0..g.rows {
                let row = lines.next().ok_or_else(|| bad("truncated values"))?;
                for tok in row.split_whitespace() {
                    if at >= g.range.end {
                        return Err(bad("too many values"));
                    }
                    params.data[at] = tok.parse().map_err(|_| bad(tok))?;
                    at += 1;
                }
            }
            if at != g.range.end {
                return Err(bad(&format!("group {} short", g.name)));
            }
        }
        Ok(params)
    }
}

/// Hidden and cell vectors of one lane, one entry per LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LaneState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            h: vec![vec![0.0; cfg.lstm_units]; cfg.lstm_layers],
            c: vec![vec![0.0; cfg.lstm_units]; cfg.lstm_layers],
        }
    }

    fn reset(&mut self) {
        self.h.iter_mut().chain(self.c.iter_mut()).for_each(|v| v.fill(0.0));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub lanes: Vec<LaneState>,
}

impl LstmState {
    pub fn zeros(cfg: &ModelConfig, lanes: usize) -> Self {
        Self {
            lanes: vec![LaneState::zeros(cfg); lanes],
        }
    }
}

/// Activations of one step of one lane.
#[derive(Debug, Clone)]
struct StepBuf {
    active: bool,
    z: Vec<f64>,
    a: Vec<f64>,
    gates: Vec<Vec<f64>>,
    tc: Vec<Vec<f64>>,
    state: LaneState,
    p: f64,
}

impl StepBuf {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            active: false,
            z: vec![0.0; cfg.dense_units],
            a: vec![0.0; cfg.dense_units],
            gates: vec![vec![0.0; 4 * cfg.lstm_units]; cfg.lstm_layers],
            tc: vec![vec![0.0; cfg.lstm_units]; cfg.lstm_layers],
            state: LaneState::zeros(cfg),
            p: 0.5,
        }
    }
}

impl ModelParams {
    fn output(&self, h_top: &[f64]) -> f64 {
        let w = &self.data[self.layout.out_w.clone()];
        sigmoid(self.data[self.layout.out_b.start] + dot(w, h_top))
    }

    /// One time step from `prev` into `buf`. Padding rows copy the state.
    fn step(&self, x: &[f32], padding: bool, prev: &LaneState, buf: &mut StepBuf) {
        let cfg = &self.config;
        let (d, h) = (cfg.dense_units, cfg.lstm_units);
        buf.active = !padding;
        if padding {
            buf.state.clone_from(prev);
            buf.p = self.output(&prev.h[cfg.lstm_layers - 1]);
            return;
        }
        let w = &self.data[self.layout.dense_w.clone()];
        buf.z.copy_from_slice(&self.data[self.layout.dense_b.clone()]);
        for (j, xj) in x.iter().enumerate() {
            if *xj != 0.0 {
                axpy(f64::from(*xj), &w[j * d..(j + 1) * d], &mut buf.z);
            }
        }
        let alpha = &self.data[self.layout.dense_alpha.clone()];
        for k in 0..d {
            let z = buf.z[k];
            buf.a[k] = if z > 0.0 { z } else { alpha[k] * z };
        }
        for (k, l) in self.layout.lstm.iter().enumerate() {
            let (lower, upper) = buf.state.h.split_at_mut(k);
            let input: &[f64] = if k == 0 { &buf.a } else { &lower[k - 1] };
            let pre = &mut buf.gates[k];
            pre.copy_from_slice(&self.data[l.bias.clone()]);
            let w_in = &self.data[l.w_in.clone()];
            for (j, v) in input.iter().enumerate() {
                if *v != 0.0 {
                    axpy(*v, &w_in[j * 4 * h..(j + 1) * 4 * h], pre);
                }
            }
            let w_rec = &self.data[l.w_rec.clone()];
            for (m, v) in prev.h[k].iter().enumerate() {
                if *v != 0.0 {
                    axpy(*v, &w_rec[m * 4 * h..(m + 1) * 4 * h], pre);
                }
            }
            for v in &mut pre[0..2 * h] {
                *v = sigmoid(*v);
            }
            for v in &mut pre[2 * h..3 * h] {
                *v = v.tanh();
            }
            for v in &mut pre[3 * h..4 * h] {
                *v = sigmoid(*v);
            }
            let c = &mut buf.state.c[k];
            let hk = &mut upper[0];
            let tc = &mut buf.tc[k];
            for m in 0..h {
                let cm = pre[h + m] * prev.c[k][m] + pre[m] * pre[2 * h + m];
                c[m] = cm;
                tc[m] = cm.tanh();
                hk[m] = pre[3 * h + m] * tc[m];
            }
        }
        buf.p = self.output(&buf.state.h[cfg.lstm_layers - 1]);
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Cross-entropy of one prediction with clamped probability.
pub fn cross_entropy(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Weighted mean cross-entropy normalized by `max(Σw, 1)`. Rows without a
/// label contribute nothing.
pub fn loss<I>(items: I) -> f64
where
    I: IntoIterator<Item = (f64, Option<u8>, f64)>,
{
    let (mut total, mut wsum) = (0.0, 0.0);
    for (p, y, w) in items {
        if let Some(y) = y {
            total += w * cross_entropy(p, y);
            wsum += w;
        }
    }
    total / wsum.max(1.0)
}

struct LaneCache {
    start: LaneState,
    steps: Vec<StepBuf>,
}

/// Reusable activation storage for training.
pub struct Workspace {
    lanes: Vec<LaneCache>,
    grad: Vec<f64>,
}

impl Workspace {
    pub fn new(cfg: &ModelConfig, lanes: usize, steps: usize) -> Self {
        Self {
            lanes: (0..lanes)
                .map(|_| LaneCache {
                    start: LaneState::zeros(cfg),
                    steps: (0..steps).map(|_| StepBuf::new(cfg)).collect(),
                })
                .collect(),
            grad: Vec::new(),
        }
    }

    fn ensure(&mut self, cfg: &ModelConfig, lanes: usize, steps: usize) {
        if self.lanes.len() != lanes || self.lanes.first().is_some_and(|l| l.steps.len() != steps) {
            *self = Self::new(cfg, lanes, steps);
        }
    }
}

impl ModelParams {
    fn check_batch(&self, batch: &Batch, state: &LstmState) -> Result<(), RnnError> {
        if state.lanes.len() != batch.lanes.len() {
            return Err(RnnError::ShapeMismatch(format!(
                "state has {} lanes, batch has {}",
                state.lanes.len(),
                batch.lanes.len()
            )));
        }
        let steps = batch.steps();
        for lane in &batch.lanes {
            if lane.len() != steps {
                return Err(RnnError::ShapeMismatch("ragged batch".into()));
            }
            if let Some(r) = lane.iter().find(|r| r.x.len() != self.config.input_dim) {
                return Err(RnnError::ShapeMismatch(format!(
                    "row width {} != input_dim {}",
                    r.x.len(),
                    self.config.input_dim
                )));
            }
        }
        for s in &state.lanes {
            if s.h.len() != self.config.lstm_layers || s.h.iter().any(|v| v.len() != self.config.lstm_units) {
                return Err(RnnError::ShapeMismatch("state dimensions".into()));
            }
        }
        Ok(())
    }

    fn forward_lane(&self, rows: &[SampleRow], reset: bool, state: &mut LaneState, cache: &mut LaneCache) {
        if reset {
            state.reset();
        }
        cache.start.clone_from(state);
        for t in 0..rows.len() {
            let (before, after) = cache.steps.split_at_mut(t);
            let prev = before.last().map_or(&cache.start, |b| &b.state);
            self.step(&rows[t].x, rows[t].is_padding(), prev, &mut after[0]);
        }
        if let Some(last) = cache.steps[..rows.len()].last() {
            state.clone_from(&last.state);
        }
    }

    /// Probabilities for every lane and step, carrying `state` across.
    /// Lanes flagged in `reset_mask` start from zeros.
    pub fn forward(&self, batch: &Batch, state: &mut LstmState) -> Result<Vec<Vec<f64>>, RnnError> {
        self.check_batch(batch, state)?;
        let mut ws = Workspace::new(&self.config, 1, batch.steps());
        let mut out = Vec::with_capacity(batch.lanes.len());
        for (u, rows) in batch.lanes.iter().enumerate() {
            self.forward_lane(rows, batch.reset_mask[u], &mut state.lanes[u], &mut ws.lanes[0]);
            out.push(ws.lanes[0].steps.iter().map(|s| s.p).collect());
        }
        Ok(out)
    }

    /// Loss of a batch without touching the caller's state.
    pub fn batch_loss(&self, batch: &Batch, state: &LstmState) -> Result<f64, RnnError> {
        let mut st = state.clone();
        let probs = self.forward(batch, &mut st)?;
        Ok(loss(batch.lanes.iter().zip(&probs).flat_map(|(rows, ps)| {
            rows.iter().zip(ps).map(|(r, p)| (*p, r.y, r.w))
        })))
    }

    fn backward_lane(&self, rows: &[SampleRow], cache: &LaneCache, norm: f64, grad: &mut [f64]) {
        let cfg = &self.config;
        let (d, h, layers) = (cfg.dense_units, cfg.lstm_units, cfg.lstm_layers);
        let Some(last) = rows.iter().rposition(|r| r.y.is_some() && r.w != 0.0) else {
            return;
        };
        let lay = &self.layout;
        let mut dh_next = vec![vec![0.0; h]; layers];
        let mut dc_next = vec![vec![0.0; h]; layers];
        let mut dh_above = vec![0.0; h];
        let mut dpre = vec![0.0; 4 * h];
        let mut d_input = vec![0.0; h.max(d)];
        let out_w = &self.data[lay.out_w.clone()];
        for t in (0..=last).rev() {
            let buf = &cache.steps[t];
            if !buf.active {
                continue;
            }
            let prev = if t == 0 { &cache.start } else { &cache.steps[t - 1].state };
            let row = &rows[t];
            let p = buf.p;
            let dlogit = match row.y {
                Some(y) if row.w != 0.0 && p > PROB_CLAMP && p < 1.0 - PROB_CLAMP => row.w * (p - f64::from(y)) / norm,
                _ => 0.0,
            };
            let h_top = &buf.state.h[layers - 1];
            if dlogit != 0.0 {
                axpy(dlogit, h_top, &mut grad[lay.out_w.clone()]);
                grad[lay.out_b.start] += dlogit;
            }
            for (m, v) in dh_above.iter_mut().enumerate() {
                *v = dlogit * out_w[m];
            }
            for k in (0..layers).rev() {
                let l = &lay.lstm[k];
                let gates = &buf.gates[k];
                let tc = &buf.tc[k];
                let c_prev = &prev.c[k];
                for m in 0..h {
                    let dh = dh_above[m] + dh_next[k][m];
                    let (i, f, g, o) = (gates[m], gates[h + m], gates[2 * h + m], gates[3 * h + m]);
                    let dc = dc_next[k][m] + dh * o * (1.0 - tc[m] * tc[m]);
                    dpre[m] = dc * g * i * (1.0 - i);
                    dpre[h + m] = dc * c_prev[m] * f * (1.0 - f);
                    dpre[2 * h + m] = dc * i * (1.0 - g * g);
                    dpre[3 * h + m] = dh * tc[m] * o * (1.0 - o);
                    dc_next[k][m] = dc * f;
                }
                axpy(1.0, &dpre, &mut grad[l.bias.clone()]);
                let input: &[f64] = if k == 0 { &buf.a } else { &buf.state.h[k - 1] };
                let w_in = &self.data[l.w_in.clone()];
                let g_in = &mut grad[l.w_in.clone()];
                for (j, v) in input.iter().enumerate() {
                    let row_w = j * 4 * h..(j + 1) * 4 * h;
                    if *v != 0.0 {
                        axpy(*v, &dpre, &mut g_in[row_w.clone()]);
                    }
                    d_input[j] = dot(&w_in[row_w], &dpre);
                }
                let w_rec = &self.data[l.w_rec.clone()];
                let g_rec = &mut grad[l.w_rec.clone()];
                for m in 0..h {
                    let row_w = m * 4 * h..(m + 1) * 4 * h;
                    let hv = prev.h[k][m];
                    if hv != 0.0 {
                        axpy(hv, &dpre, &mut g_rec[row_w.clone()]);
                    }
                    dh_next[k][m] = dot(&w_rec[row_w], &dpre);
                }
                if k > 0 {
                    dh_above.copy_from_slice(&d_input[..h]);
                }
            }
            // dense + PReLU
            let alpha = &self.data[lay.dense_alpha.clone()];
            let mut dz = vec![0.0; d];
            for k in 0..d {
                let z = buf.z[k];
                if z > 0.0 {
                    dz[k] = d_input[k];
                } else {
                    dz[k] = d_input[k] * alpha[k];
                    grad[lay.dense_alpha.start + k] += d_input[k] * z;
                }
            }
            axpy(1.0, &dz, &mut grad[lay.dense_b.clone()]);
            let g_w = &mut grad[lay.dense_w.clone()];
            for (j, xj) in row.x.iter().enumerate() {
                if *xj != 0.0 {
                    axpy(f64::from(*xj), &dz, &mut g_w[j * d..(j + 1) * d]);
                }
            }
        }
    }

    /// Forward + truncated backpropagation through the batch's steps. The
    /// state entering the batch is treated as a constant. Returns the
    /// normalized loss and the gradient (borrowed from the workspace).
    pub fn loss_and_gradient<'w>(
        &self,
        batch: &Batch,
        state: &mut LstmState,
        ws: &'w mut Workspace,
    ) -> Result<(f64, &'w [f64]), RnnError> {
        self.check_batch(batch, state)?;
        ws.ensure(&self.config, batch.lanes.len(), batch.steps());
        for (u, rows) in batch.lanes.iter().enumerate() {
            self.forward_lane(rows, batch.reset_mask[u], &mut state.lanes[u], &mut ws.lanes[u]);
        }
        let items = batch.lanes.iter().zip(&ws.lanes).flat_map(|(rows, c)| {
            rows.iter().zip(&c.steps).map(|(r, s)| (s.p, r.y, r.w))
        });
        let wsum: f64 = batch.lanes.iter().flatten().filter(|r| r.y.is_some()).map(|r| r.w).sum();
        let norm = wsum.max(1.0);
        let value = loss(items);
        ws.grad.clear();
        ws.grad.resize(self.data.len(), 0.0);
        let mut grad = std::mem::take(&mut ws.grad);
        for (rows, cache) in batch.lanes.iter().zip(&ws.lanes) {
            self.backward_lane(rows, cache, norm, &mut grad);
        }
        ws.grad = grad;
        Ok((value, &ws.grad))
    }

    /// Gradient of the batch loss with a fresh workspace.
    pub fn gradient(&self, batch: &Batch, state: &LstmState) -> Result<Vec<f64>, RnnError> {
        let mut st = state.clone();
        let mut ws = Workspace::new(&self.config, batch.lanes.len(), batch.steps());
        let (_, g) = self.loss_and_gradient(batch, &mut st, &mut ws)?;
        Ok(g.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Shuffles bucket order each epoch when set (seed + epoch).
    pub shuffle_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            adam: AdamConfig::default(),
            shuffle_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub wall_seconds: f64,
    pub valid_loss: Option<f64>,
    pub valid_auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub last: ModelParams,
    /// Parameters of the epoch with the best validation AUC (or the last
    /// epoch when no validation is available).
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains over the plan's batches in order, resetting lane states where
/// marked. `validate` runs after every epoch.
pub fn train<F>(
    plan: &BatchPlan,
    params: ModelParams,
    config: &TrainConfig,
    mut validate: F,
) -> Result<TrainOutcome, RnnError>
where
    F: FnMut(&ModelParams) -> Option<Validation>,
{
    let lanes = plan.config.batch_size;
    let mut params = params;
    let mut adam = AdamState::new(config.adam, params.len());
    let mut state = LstmState::zeros(&params.config, lanes);
    let mut ws = Workspace::new(&params.config, lanes, plan.config.sequence_length);
    let mut metrics = Vec::new();
    let mut best = params.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let (mut total, mut wsum) = (0.0, 0.0);
        for (i, (batch, _, _)) in plan.iter(config.shuffle_seed.map(|s| s + epoch as u64)).enumerate() {
            let bw: f64 = batch.lanes.iter().flatten().filter(|r| r.y.is_some()).map(|r| r.w).sum();
            let (value, grad) = params.loss_and_gradient(batch, &mut state, &mut ws)?;
            if !value.is_finite() {
                return Err(RnnError::DivergenceDetected {
                    epoch,
                    batch: i,
                    params: Box::new(params),
                });
            }
            total += value * bw.max(1.0);
            wsum += bw.max(1.0);
            if bw > 0.0 {
                adam.step(&mut params.data, grad);
            }
        }
        if !params.is_finite() {
            return Err(RnnError::DivergenceDetected {
                epoch,
                batch: plan.batch_count(),
                params: Box::new(params),
            });
        }
        let wall_seconds = started.elapsed().as_secs_f64();
        let v = validate(&params);
        let auc = v.and_then(|v| v.auc);
        if auc.is_some_and(|a| a > best_auc) || (auc.is_none() && best_auc == f64::NEG_INFINITY) {
            best_auc = auc.unwrap_or(f64::NEG_INFINITY);
            best = params.clone();
            best_epoch = Some(epoch);
        }
        metrics.push(EpochMetrics {
            epoch,
            train_loss: if wsum > 0.0 { total / wsum } else { 0.0 },
            wall_seconds,
            valid_loss: v.map(|v| v.loss),
            valid_auc: auc,
        });
    }
    if best_epoch.is_none() || best_auc == f64::NEG_INFINITY {
        best = params.clone();
        best_epoch = config.epochs.checked_sub(1);
    }
    Ok(TrainOutcome {
        last: params,
        best,
        best_epoch,
        metrics,
    })
}

/// Sample-by-sample inference with one recurrent state per user.
pub struct OnlinePredictor<'p> {
    params: &'p ModelParams,
    states: HashMap<String, LaneState>,
    scratch: StepBuf,
}

impl<'p> OnlinePredictor<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            states: HashMap::new(),
            scratch: StepBuf::new(&params.config),
        }
    }

    /// Feeds one sample of its user and returns the probability. Unknown
    /// users start from a zero state.
    pub fn predict(&mut self, sample: &SampleRow) -> Result<f64, RnnError> {
        if sample.x.len() != self.params.config.input_dim {
            return Err(RnnError::ShapeMismatch(format!(
                "row width {} != input_dim {}",
                sample.x.len(),
                self.params.config.input_dim
            )));
        }
        let cfg = self.params.config;
        let state = self
            .states
            .entry(sample.user_id.to_string())
            .or_insert_with(|| LaneState::zeros(&cfg));
        self.params.step(&sample.x, sample.is_padding(), state, &mut self.scratch);
        std::mem::swap(state, &mut self.scratch.state);
        Ok(self.scratch.p)
    }

    pub fn state(&self, user: &str) -> Option<&LaneState> {
        self.states.get(user)
    }

    pub fn users(&self) -> usize {
        self.states.len()
    }
}

/// Probabilities for one user's whole row stream from a zero state.
pub fn predict_stream(params: &ModelParams, rows: &[SampleRow]) -> Vec<f64> {
    let mut state = LaneState::zeros(&params.config);
    let mut buf = StepBuf::new(&params.config);
    rows.iter()
        .map(|r| {
            params.step(&r.x, r.is_padding(), &state, &mut buf);
            std::mem::swap(&mut state, &mut buf.state);
            buf.p
        })
        .collect()
}
