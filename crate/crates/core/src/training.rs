//! Denoising score matching on small ReLU perceptrons, trained separately on
//! each cell of a geometric time partition.
//!
//! A network sees the features `(x, t, 1/sqrt(σ_t² + c))` and its output is
//! divided by `σ_t`, so every interval regresses an `O(1)` target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::SplineDensity;
use crate::oracle::{clip_norm, ScoreOracle};
use crate::quadrature::{normal_pdf, GaussHermite, GaussLegendre};
use crate::rng::{fill_std_normal, std_normal, RngStream};
use crate::schedule::{BetaSchedule, NoiseState, TimeGrid};
use crate::score::ScoreModel;
use crate::{Error, Result};

/// `∇ log N(x_t; m_t x_0, σ_t² I) = -(x_t - m_t x_0) / σ_t²`.
pub fn conditional_score(x_t: &[f64], x_0: &[f64], s: &NoiseState) -> Vec<f64> {
    let inv = 1.0 / (s.sigma * s.sigma);
    x_t.iter().zip(x_0).map(|(xt, x0)| -(xt - s.m * x0) * inv).collect()
}

/// How the time and noise expectations of the denoising loss are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Scheme {
    /// Gauss–Legendre panels in `t`, tensor Gauss–Hermite in the noise.
    ExpectationQuadrature { t_nodes: usize, gh_nodes: usize },
    /// `M` draws with `t ~ Unif[t_lo, t_hi]`, `λ ≡ 1`.
    UniformT { draws: usize },
    /// `M` draws with `t ~ μ ∝ 1/t` and `λ(t) = t log(t_hi/t_lo) / (t_hi - t_lo)`.
    WeightedT { draws: usize },
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::UniformT { draws: 8192 }
    }
}

/// Importance weight that turns `t ~ μ ∝ 1/t` draws into uniform-`t` averages.
pub fn weighted_lambda(t: f64, t_lo: f64, t_hi: f64) -> f64 {
    t * (t_hi / t_lo).ln() / (t_hi - t_lo)
}

/// Draws `t` from the scheme's time law and returns `(t, λ(t))`.
fn draw_time<R: Rng + ?Sized>(scheme: &Scheme, t_lo: f64, t_hi: f64, rng: &mut R) -> (f64, f64) {
    let u: f64 = rng.random();
    match scheme {
        Scheme::WeightedT { .. } => {
            let t = t_lo * (t_hi / t_lo).powf(u);
            (t, weighted_lambda(t, t_lo, t_hi))
        }
        _ => (t_lo + (t_hi - t_lo) * u, 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub value: f64,
    /// Monte Carlo standard error; zero for the quadrature scheme.
    pub std_err: f64,
}

/// `(1/n) Σ_i avg_t E[λ(t) ‖s(x_t, t) - ∇ log p_t(x_t | x_{0,i})‖²]` with the
/// time average taken over `[t_lo, t_hi]`.
pub fn empirical_loss(
    s: &dyn ScoreModel,
    data: &[Vec<f64>],
    scheme: &Scheme,
    schedule: &BetaSchedule,
    (t_lo, t_hi): (f64, f64),
    stream: &RngStream,
) -> Result<f64> {
    Ok(loss_estimate(s, data, scheme, schedule, (t_lo, t_hi), stream)?.value)
}

pub fn loss_estimate(
    s: &dyn ScoreModel,
    data: &[Vec<f64>],
    scheme: &Scheme,
    schedule: &BetaSchedule,
    (t_lo, t_hi): (f64, f64),
    stream: &RngStream,
) -> Result<LossEstimate> {
    if data.is_empty() {
        return Err(Error::Config("empirical loss needs data".into()));
    }
    if !(t_lo > 0.0 && t_lo < t_hi) {
        return Err(Error::Config(format!("invalid loss interval [{t_lo}, {t_hi}]")));
    }
    let d = data[0].len();
    let mut out = vec![0.0; d];
    let mut x = vec![0.0; d];
    match scheme {
        Scheme::UniformT { draws } | Scheme::WeightedT { draws } => {
            if *draws == 0 {
                return Err(Error::Config("sampled schemes need at least one draw".into()));
            }
            let mut rng = stream.rng();
            let mut xi = vec![0.0; d];
            let (mut sum, mut sum2) = (0.0, 0.0);
            for _ in 0..*draws {
                let i = rng.random_range(0..data.len());
                let (t, lambda) = draw_time(scheme, t_lo, t_hi, &mut rng);
                let st = schedule.noise_state(t)?;
                fill_std_normal(&mut rng, &mut xi);
                for k in 0..d {
                    x[k] = st.m * data[i][k] + st.sigma * xi[k];
                }
                s.score_into(&x, &st, &mut out);
                let v = lambda * out.iter().zip(&xi).map(|(o, z)| (o + z / st.sigma).powi(2)).sum::<f64>();
                sum += v;
                sum2 += v * v;
            }
            let n = *draws as f64;
            let mean = sum / n;
            let var = (sum2 / n - mean * mean).max(0.0);
            Ok(LossEstimate { value: mean, std_err: (var / n).sqrt() })
        }
        Scheme::ExpectationQuadrature { t_nodes, gh_nodes } => {
            let gl = GaussLegendre::new(*t_nodes);
            let gh = GaussHermite::new(*gh_nodes);
            let panels = log_panels(t_lo, t_hi);
            let mut total = 0.0;
            let mut idx = vec![0usize; d];
            for x0 in data {
                for w in panels.windows(2) {
                    for (t, wt) in gl.mapped(w[0], w[1]) {
                        let st = schedule.noise_state(t)?;
                        let mut acc = 0.0;
                        idx.iter_mut().for_each(|v| *v = 0);
                        'cells: loop {
                            let mut wz = 1.0;
                            let mut err = 0.0;
                            for k in 0..d {
                                let z = gh.nodes[idx[k]];
                                wz *= gh.weights[idx[k]];
                                x[k] = st.m * x0[k] + st.sigma * z;
                            }
                            s.score_into(&x, &st, &mut out);
                            for k in 0..d {
                                err += (out[k] + gh.nodes[idx[k]] / st.sigma).powi(2);
                            }
                            acc += wz * err;
                            for k in 0..d {
                                idx[k] += 1;
                                if idx[k] < gh.nodes.len() {
                                    continue 'cells;
                                }
                                idx[k] = 0;
                            }
                            break;
                        }
                        total += wt * acc;
                    }
                }
            }
            Ok(LossEstimate { value: total / ((t_hi - t_lo) * data.len() as f64), std_err: 0.0 })
        }
    }
}

/// Breakpoints of `[t_lo, t_hi]` with consecutive ratio at most 2.
fn log_panels(t_lo: f64, t_hi: f64) -> Vec<f64> {
    let n = ((t_hi / t_lo).log2().ceil() as usize).max(1);
    let r = (t_hi / t_lo).powf(1.0 / n as f64);
    let mut p: Vec<f64> = (0..n).map(|i| t_lo * r.powi(i as i32)).collect();
    p.push(t_hi);
    p
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Fully connected ReLU perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer sizes including input and output.
    pub sizes: Vec<usize>,
    /// Row-major `sizes[i+1] × sizes[i]` matrices.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-normal hidden layers, zero biases, output layer scaled down by 10.
    pub fn init(sizes: &[usize], stream: &RngStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = stream.rng();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (li, w) in sizes.windows(2).enumerate() {
            let last = li + 2 == sizes.len();
            let scale = (2.0 / w[0] as f64).sqrt() * if last { 0.1 } else { 1.0 };
            weights.push((0..w[0] * w[1]).map(|_| scale * std_normal(&mut rng)).collect());
            biases.push(vec![0.0; w[1]]);
        }
        Ok(Self { sizes: sizes.to_vec(), weights, biases })
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn layer(&self, li: usize, input: &[f64], out: &mut Vec<f64>, relu: bool) {
        let (n_in, n_out) = (self.sizes[li], self.sizes[li + 1]);
        let w = &self.weights[li];
        out.clear();
        out.extend_from_slice(&self.biases[li]);
        for (r, o) in out.iter_mut().enumerate().take(n_out) {
            let row = &w[r * n_in..(r + 1) * n_in];
            *o += dot(row, input);
            if relu {
                *o = o.max(0.0);
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let (mut h, mut z) = (Vec::new(), Vec::new());
        self.forward_into(input, &mut h, &mut z).to_vec()
    }

    /// Forward pass through caller-owned scratch buffers; returns the output.
    pub fn forward_into<'a>(&self, input: &[f64], h: &'a mut Vec<f64>, z: &'a mut Vec<f64>) -> &'a [f64] {
        h.clear();
        h.extend_from_slice(input);
        let last = self.weights.len() - 1;
        for li in 0..self.weights.len() {
            self.layer(li, h, z, li < last);
            std::mem::swap(h, z);
        }
        h
    }

    /// Forward pass keeping every activation (post-ReLU for hidden layers).
    fn forward_cached(&self, input: &[f64], acts: &mut Vec<Vec<f64>>) {
        let last = self.weights.len() - 1;
        acts.resize(self.weights.len() + 1, Vec::new());
        acts[0].clear();
        acts[0].extend_from_slice(input);
        for li in 0..self.weights.len() {
            let (done, rest) = acts.split_at_mut(li + 1);
            self.layer(li, &done[li], &mut rest[0], li < last);
        }
    }

    /// Accumulates `∂(g · output)/∂θ` into `grads`.
    fn backward(&self, acts: &[Vec<f64>], g_out: &[f64], grads: &mut Mlp, delta: &mut Vec<f64>, prev: &mut Vec<f64>) {
        delta.clear();
        delta.extend_from_slice(g_out);
        for li in (0..self.weights.len()).rev() {
            let n_in = self.sizes[li];
            let input = &acts[li];
            let gw = &mut grads.weights[li];
            for (r, &dr) in delta.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                grads.biases[li][r] += dr;
                let row = &mut gw[r * n_in..(r + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += dr * a;
                }
            }
            if li == 0 {
                break;
            }
            prev.clear();
            prev.resize(n_in, 0.0);
            let w = &self.weights[li];
            for (r, &dr) in delta.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
                    *p += dr * wv;
                }
            }
            // ReLU derivative from the stored post-activation
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(delta, prev);
        }
    }

    fn zeros_like(&self) -> Mlp {
        Mlp {
            sizes: self.sizes.clone(),
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn axpy(&mut self, a: f64, other: &Mlp) {
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            w.iter_mut().zip(g).for_each(|(x, y)| *x += a * y);
        }
        for (b, g) in self.biases.iter_mut().zip(&other.biases) {
            b.iter_mut().zip(g).for_each(|(x, y)| *x += a * y);
        }
    }

    /// One Adam step at iteration `k ≥ 1` with moment buffers `m`, `v`.
    fn adam_step(&mut self, grads: &Mlp, m: &mut Mlp, v: &mut Mlp, step: f64, k: i32) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        let c1 = 1.0 - B1.powi(k);
        let c2 = 1.0 - B2.powi(k);
        let params = self.weights.iter_mut().chain(self.biases.iter_mut());
        let rest = grads.weights.iter().chain(&grads.biases).zip(m.weights.iter_mut().chain(m.biases.iter_mut())).zip(v.weights.iter_mut().chain(v.biases.iter_mut()));
        for (p, ((g, mm), vv)) in params.zip(rest) {
            for i in 0..p.len() {
                mm[i] = B1 * mm[i] + (1.0 - B1) * g[i];
                vv[i] = B2 * vv[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= step * (mm[i] / c1) / ((vv[i] / c2).sqrt() + 1e-8);
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Network input `(x, m_t, 1/sqrt(σ_t² + c))`; `m_t ∈ (0, 1]` encodes time
/// without the raw scale of `t`.
pub fn features(x: &[f64], s: &NoiseState, feature_c: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(x);
    out.push(s.m);
    out.push(1.0 / (s.sigma * s.sigma + feature_c).sqrt());
}

/// Width of the `features` vector for inputs of dimension `dim`.
pub fn feature_width(dim: usize) -> usize {
    dim + 2
}

/// A single network used as a score on all of time (no clipping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet {
    pub mlp: Mlp,
    pub feature_c: f64,
}

impl ScoreNet {
    pub fn init(dim: usize, widths: &[usize], feature_c: f64, stream: &RngStream) -> Result<Self> {
        let mut sizes = vec![feature_width(dim)];
        sizes.extend_from_slice(widths);
        sizes.push(dim);
        Ok(Self { mlp: Mlp::init(&sizes, stream)?, feature_c })
    }
}

impl ScoreModel for ScoreNet {
    fn dim(&self) -> usize {
        *self.mlp.sizes.last().expect("sizes")
    }

    fn score_into(&self, x: &[f64], state: &NoiseState, out: &mut [f64]) {
        let mut f = Vec::with_capacity(feature_width(x.len()));
        features(x, state, self.feature_c, &mut f);
        let y = self.mlp.forward(&f);
        for (o, v) in out.iter_mut().zip(y) {
            *o = v / state.sigma;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchMode {
    /// Exactly one network per time: cells are `[t_i, t_{i+1})`, the last one closed.
    Hard,
    /// Linear partition of unity over a band around every interior knot.
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain minibatch gradient steps.
    Sgd,
    /// Adam with `β₁ = 0.9`, `β₂ = 0.999`; moments restart after every revert.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    #[serde(default = "default_method")]
    pub method: Method,
    pub step_size: f64,
    /// Minibatch steps per interval.
    pub iterations: usize,
    pub batch: usize,
    /// Steps between evaluations of the full interval objective.
    pub eval_every: usize,
    /// Evaluations without improvement before reverting to the best
    /// parameters and halving the step.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for Optimizer {
    fn default() -> Self {
        Self { method: Method::Adam, step_size: 2e-3, iterations: 1500, batch: 512, eval_every: 100, patience: 3 }
    }
}

fn default_patience() -> usize {
    3
}

fn default_method() -> Method {
    Method::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub widths: Vec<usize>,
    pub n_data: usize,
    pub scheme: Scheme,
    pub t_lo: f64,
    pub t_hi: f64,
    /// Ratio of the geometric interval partition, in `(1, 2]`.
    pub interval_ratio: f64,
    pub clip_mult: f64,
    pub optimizer: Optimizer,
    pub switch_mode: SwitchMode,
    pub feature_c: f64,
    /// Start each interval from the network of the interval above it.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 64],
            n_data: 1024,
            scheme: Scheme::default(),
            t_lo: 1e-4,
            t_hi: 10.0,
            interval_ratio: 2.0,
            clip_mult: 2.0,
            optimizer: Optimizer::default(),
            switch_mode: SwitchMode::Hard,
            feature_c: 1e-2,
            warm_start: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_lo >= crate::schedule::T_FLOOR && self.t_lo < self.t_hi) {
            return Err(Error::Config(format!("need floor ≤ t_lo < t_hi, got [{}, {}]", self.t_lo, self.t_hi)));
        }
        if let Scheme::UniformT { draws: 0 } | Scheme::WeightedT { draws: 0 } = self.scheme {
            return Err(Error::Config("sampled schemes need M ≥ 1".into()));
        }
        if let Scheme::ExpectationQuadrature { t_nodes, gh_nodes } = self.scheme {
            if t_nodes == 0 || gh_nodes == 0 {
                return Err(Error::Config("quadrature scheme needs nodes".into()));
            }
        }
        if self.optimizer.batch == 0 || self.optimizer.eval_every == 0 || !(self.optimizer.step_size > 0.0) {
            return Err(Error::Config("optimizer needs positive batch, eval_every and step size".into()));
        }
        if !(self.clip_mult > 0.0) {
            return Err(Error::Config("clip_mult must be positive".into()));
        }
        Ok(())
    }

    /// Geometric interval partition of `[t_lo, t_hi]`.
    pub fn intervals(&self) -> Result<TimeGrid> {
        let first = self.t_lo * self.interval_ratio;
        if first >= self.t_hi {
            return TimeGrid::uniform(self.t_lo, self.t_hi, 1);
        }
        TimeGrid::geometric(self.t_lo, self.t_hi, first, self.interval_ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalNet {
    pub t_lo: f64,
    pub t_hi: f64,
    pub mlp: Mlp,
    /// Accepted objective values at every evaluation; non-increasing.
    pub loss_trace: Vec<f64>,
    pub step_halvings: u32,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Piecewise-in-time score built from per-interval networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedScore {
    pub dim: usize,
    pub intervals: Vec<IntervalNet>,
    pub switch_mode: SwitchMode,
    pub clip_mult: f64,
    pub n_data: usize,
    pub feature_c: f64,
    pub training_loss_trace: Vec<f64>,
}

impl TrainedScore {
    /// Norm cap `clip_mult · sqrt(log n) / σ_t` applied to every output.
    pub fn clip_cap(&self, sigma: f64) -> f64 {
        self.clip_mult * (self.n_data.max(2) as f64).ln().sqrt() / sigma
    }

    fn locate(&self, t: f64) -> usize {
        let k = self.intervals.partition_point(|iv| iv.t_lo <= t);
        k.saturating_sub(1).min(self.intervals.len() - 1)
    }

    fn net_output(&self, k: usize, feats: &[f64], sigma: f64, out: &mut [f64]) {
        SCRATCH.with(|cell| {
            let (h, z) = &mut *cell.borrow_mut();
            let y = self.intervals[k].mlp.forward_into(feats, h, z);
            for (o, v) in out.iter_mut().zip(y) {
                *o = v / sigma;
            }
        })
    }

    /// Time-averaged final objective over `[t_lo, t_hi]`.
    pub fn final_loss(&self) -> f64 {
        let span = self.intervals.last().map(|i| i.t_hi).unwrap_or(1.0) - self.intervals.first().map(|i| i.t_lo).unwrap_or(0.0);
        self.intervals.iter().map(|iv| (iv.t_hi - iv.t_lo) * iv.loss_trace.last().copied().unwrap_or(f64::NAN)).sum::<f64>() / span
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        if t.intervals.is_empty() {
            return Err(Error::Config("trained score has no intervals".into()));
        }
        if t.intervals.windows(2).any(|w| w[0].t_hi != w[1].t_lo) {
            return Err(Error::Config("trained intervals leave a gap".into()));
        }
        Ok(t)
    }
}

impl ScoreModel for TrainedScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, x: &[f64], state: &NoiseState, out: &mut [f64]) {
        let mut f = Vec::with_capacity(feature_width(x.len()));
        features(x, state, self.feature_c, &mut f);
        let t = state.t;
        let k = self.locate(t);
        self.net_output(k, &f, state.sigma, out);
        if self.switch_mode == SwitchMode::Ramp {
            let iv = &self.intervals[k];
            let gap = iv.t_hi - iv.t_lo;
            // band half-width around a knot: a quarter of the smaller adjacent cell
            let neighbour = if k > 0 && t < iv.t_lo + 0.25 * gap {
                let prev = &self.intervals[k - 1];
                let half = 0.25 * gap.min(prev.t_hi - prev.t_lo);
                (t < iv.t_lo + half).then(|| (k - 1, ((t - (iv.t_lo - half)) / (2.0 * half)).clamp(0.0, 1.0)))
            } else if k + 1 < self.intervals.len() && t > iv.t_hi - 0.25 * gap {
                let next = &self.intervals[k + 1];
                let half = 0.25 * gap.min(next.t_hi - next.t_lo);
                (t > iv.t_hi - half).then(|| (k + 1, ((iv.t_hi + half - t) / (2.0 * half)).clamp(0.0, 1.0)))
            } else {
                None
            };
            if let Some((j, w_self)) = neighbour {
                let mut other = vec![0.0; out.len()];
                self.net_output(j, &f, state.sigma, &mut other);
                for (o, v) in out.iter_mut().zip(other) {
                    *o = w_self * *o + (1.0 - w_self) * v;
                }
            }
        }
        clip_norm(out, self.clip_cap(state.sigma));
    }
}

/// One fixed draw `(x_0 index, t, ξ, λ)` of the interval objective.
struct Draw {
    i: usize,
    state: NoiseState,
    lambda: f64,
    xi: Vec<f64>,
}

fn make_draws(
    data: &[Vec<f64>],
    scheme: &Scheme,
    schedule: &BetaSchedule,
    (t_lo, t_hi): (f64, f64),
    stream: &RngStream,
) -> Result<Vec<Draw>> {
    let d = data[0].len();
    match scheme {
        Scheme::UniformT { draws } | Scheme::WeightedT { draws } => {
            let mut rng = stream.rng();
            (0..*draws)
                .map(|_| {
                    let i = rng.random_range(0..data.len());
                    let (t, lambda) = draw_time(scheme, t_lo, t_hi, &mut rng);
                    let mut xi = vec![0.0; d];
                    fill_std_normal(&mut rng, &mut xi);
                    Ok(Draw { i, state: schedule.noise_state(t)?, lambda, xi })
                })
                .collect()
        }
        Scheme::ExpectationQuadrature { t_nodes, gh_nodes } => {
            // every data point × quadrature node, weights folded into λ
            let gl = GaussLegendre::new(*t_nodes);
            let gh = GaussHermite::new(*gh_nodes);
            let panels = log_panels(t_lo, t_hi);
            let mut out = Vec::new();
            let n_gh = gh.nodes.len().pow(d as u32);
            for i in 0..data.len() {
                for w in panels.windows(2) {
                    for (t, wt) in gl.mapped(w[0], w[1]) {
                        let state = schedule.noise_state(t)?;
                        for c in 0..n_gh {
                            let mut rem = c;
                            let mut wz = 1.0;
                            let mut xi = vec![0.0; d];
                            for v in xi.iter_mut() {
                                let q = rem % gh.nodes.len();
                                rem /= gh.nodes.len();
                                *v = gh.nodes[q];
                                wz *= gh.weights[q];
                            }
                            // objective is a mean over draws, so rescale by the count
                            let count = (data.len() * (panels.len() - 1) * gl.nodes.len() * n_gh) as f64;
                            let lambda = wt * wz * count / ((t_hi - t_lo) * data.len() as f64);
                            out.push(Draw { i, state, lambda, xi });
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

struct Workspace {
    feats: Vec<f64>,
    x: Vec<f64>,
    acts: Vec<Vec<f64>>,
    g_out: Vec<f64>,
    delta: Vec<f64>,
    prev: Vec<f64>,
}

impl Workspace {
    fn new() -> Self {
        Self { feats: Vec::new(), x: Vec::new(), acts: Vec::new(), g_out: Vec::new(), delta: Vec::new(), prev: Vec::new() }
    }

    fn input(&mut self, x0: &[f64], dr: &Draw, feature_c: f64) {
        self.x.clear();
        self.x.extend(x0.iter().zip(&dr.xi).map(|(a, z)| dr.state.m * a + dr.state.sigma * z));
        features(&self.x, &dr.state, feature_c, &mut self.feats);
    }
}

/// `λ ‖net/σ + ξ/σ‖²` for one draw.
fn draw_loss(mlp: &Mlp, data: &[Vec<f64>], dr: &Draw, feature_c: f64, ws: &mut Workspace) -> f64 {
    ws.input(&data[dr.i], dr, feature_c);
    let y = mlp.forward_into(&ws.feats, &mut ws.delta, &mut ws.prev);
    let s = dr.state.sigma;
    dr.lambda * y.iter().zip(&dr.xi).map(|(o, z)| ((o + z) / s).powi(2)).sum::<f64>()
}

fn objective(mlp: &Mlp, data: &[Vec<f64>], draws: &[Draw], feature_c: f64) -> f64 {
    let mut ws = Workspace::new();
    draws.iter().map(|dr| draw_loss(mlp, data, dr, feature_c, &mut ws)).sum::<f64>() / draws.len() as f64
}

/// Step halvings after which a non-finite objective counts as divergence.
const MAX_HALVINGS: u32 = 30;

/// Trains one network on the fixed-draw objective of `[t_lo, t_hi]`.
///
/// Minibatch SGD or Adam steps; every `eval_every` steps the full objective
/// is evaluated. After `patience` evaluations without improvement, or on a
/// non-finite value, the best parameters are restored and the step halves.
/// The trace records the best value, so it never increases.
fn train_interval(
    mut mlp: Mlp,
    data: &[Vec<f64>],
    schedule: &BetaSchedule,
    cfg: &TrainConfig,
    (t_lo, t_hi): (f64, f64),
    interval: usize,
    stream: &RngStream,
) -> Result<IntervalNet> {
    let draws = make_draws(data, &cfg.scheme, schedule, (t_lo, t_hi), &stream.split(0))?;
    let opt = &cfg.optimizer;
    let mut best = objective(&mlp, data, &draws, cfg.feature_c);
    let mut trace = vec![best];
    if !best.is_finite() {
        return Err(Error::Training { interval, trace });
    }
    // the loss scales like 1/σ²; precondition with the interval's smallest σ²
    let sigma_lo = schedule.noise_state(t_lo)?.sigma;
    let precond = sigma_lo * sigma_lo;
    let mut step = opt.step_size;
    let mut halvings = 0;
    let mut stale = 0;
    let mut checkpoint = mlp.clone();
    let mut grads = mlp.zeros_like();
    let (mut moment1, mut moment2, mut adam_k) = (mlp.zeros_like(), mlp.zeros_like(), 0);
    let mut ws = Workspace::new();
    let mut rng = stream.split(1).rng();
    for it in 0..opt.iterations {
        grads.weights.iter_mut().chain(grads.biases.iter_mut()).for_each(|v| v.iter_mut().for_each(|g| *g = 0.0));
        for _ in 0..opt.batch {
            let dr = &draws[rng.random_range(0..draws.len())];
            ws.input(&data[dr.i], dr, cfg.feature_c);
            let feats = std::mem::take(&mut ws.feats);
            mlp.forward_cached(&feats, &mut ws.acts);
            ws.feats = feats;
            let y = ws.acts.last().expect("output");
            let s = dr.state.sigma;
            let scale = 2.0 * dr.lambda * precond / (s * s * opt.batch as f64);
            ws.g_out.clear();
            ws.g_out.extend(y.iter().zip(&dr.xi).map(|(o, z)| scale * (o + z)));
            let g_out = std::mem::take(&mut ws.g_out);
            mlp.backward(&ws.acts, &g_out, &mut grads, &mut ws.delta, &mut ws.prev);
            ws.g_out = g_out;
        }
        match opt.method {
            Method::Sgd => mlp.axpy(-step, &grads),
            Method::Adam => {
                adam_k += 1;
                mlp.adam_step(&grads, &mut moment1, &mut moment2, step, adam_k);
            }
        }
        if (it + 1) % opt.eval_every == 0 || it + 1 == opt.iterations {
            let l = if mlp.is_finite() { objective(&mlp, data, &draws, cfg.feature_c) } else { f64::NAN };
            if !l.is_finite() && halvings >= MAX_HALVINGS {
                trace.push(l);
                return Err(Error::Training { interval, trace });
            }
            if l < best {
                best = l;
                checkpoint = mlp.clone();
                stale = 0;
            } else {
                stale += 1;
            }
            if !l.is_finite() || stale >= opt.patience.max(1) {
                stale = 0;
                mlp = checkpoint.clone();
                moment1 = mlp.zeros_like();
                moment2 = mlp.zeros_like();
                adam_k = 0;
                step *= 0.5;
                halvings += 1;
            }
            trace.push(best);
        }
    }
    Ok(IntervalNet { t_lo, t_hi, mlp: checkpoint, loss_trace: trace, step_halvings: halvings })
}

/// Trains interval-switched networks on the given samples of `p_0`.
/// Intervals are processed from the largest times downwards.
pub fn train_on_data(data: &[Vec<f64>], schedule: &BetaSchedule, cfg: &TrainConfig, stream: &RngStream) -> Result<TrainedScore> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training needs data".into()));
    }
    let dim = data[0].len();
    let grid = cfg.intervals()?;
    let cells: Vec<(f64, f64)> = grid.cells().collect();
    let mut nets: Vec<Option<IntervalNet>> = vec![None; cells.len()];
    let mut warm: Option<Mlp> = None;
    for (k, &(lo, hi)) in cells.iter().enumerate().rev() {
        let init = match (&warm, cfg.warm_start) {
            (Some(m), true) => m.clone(),
            _ => ScoreNet::init(dim, &cfg.widths, cfg.feature_c, &stream.split2(1, k as u64))?.mlp,
        };
        let net = train_interval(init, data, schedule, cfg, (lo, hi), k, &stream.split2(2, k as u64))?;
        warm = Some(net.mlp.clone());
        nets[k] = Some(net);
    }
    let intervals: Vec<IntervalNet> = nets.into_iter().map(|n| n.expect("trained")).collect();
    let training_loss_trace = intervals.iter().rev().flat_map(|iv| iv.loss_trace.iter().copied()).collect();
    Ok(TrainedScore {
        dim,
        intervals,
        switch_mode: cfg.switch_mode,
        clip_mult: cfg.clip_mult,
        n_data: data.len(),
        feature_c: cfg.feature_c,
        training_loss_trace,
    })
}

/// Draws `cfg.n_data` samples from `density` and trains on them.
pub fn train(density: &SplineDensity, schedule: &BetaSchedule, cfg: &TrainConfig) -> Result<TrainedScore> {
    let stream = RngStream::new(cfg.seed);
    let data = density.sample(cfg.n_data, &stream.split(0));
    train_on_data(&data, schedule, cfg, &stream.split(1))
}

/// Number of x nodes used by the Vincent-gap quadrature.
pub const VINCENT_NODES: usize = 2048;

/// `[L_den(a) - L_den(b)] - [L_exp(a) - L_exp(b)]` at a fixed `t` in 1D.
///
/// Both losses share one composite Gauss–Legendre rule in `x`; the inner
/// integral over `x_0` of the denoising loss is evaluated independently of
/// the oracle's `∇p_t`, so the gap measures the equivalence and nothing else.
pub fn vincent_gap(a: &dyn ScoreModel, b: &dyn ScoreModel, oracle: &ScoreOracle, t: f64) -> Result<f64> {
    if oracle.dim() != 1 {
        return Err(Error::Dimension { expected: 1, got: oracle.dim() });
    }
    let st = oracle.state(t)?;
    let p0 = &oracle.density;
    // inner nodes over x_0 ∈ [-1, 1], split at knots and at width σ/(2m)
    let mut breaks: Vec<f64> = p0.atoms.iter().flat_map(|at| at.knots(0)).filter(|k| k.abs() < 1.0).collect();
    breaks.extend([-1.0, 1.0]);
    breaks.sort_by(|x, y| x.partial_cmp(y).expect("finite knots"));
    breaks.dedup();
    let max_w = 0.5 * st.sigma / st.m;
    let gl_in = GaussLegendre::new(20);
    let mut inner = Vec::new();
    for w in breaks.windows(2) {
        let n = ((w[1] - w[0]) / max_w).ceil().max(1.0) as usize;
        let h = (w[1] - w[0]) / n as f64;
        for p in 0..n {
            let lo = w[0] + h * p as f64;
            for (y, wy) in gl_in.mapped(lo, lo + h) {
                inner.push((y, wy * p0.eval(&[y])));
            }
        }
    }
    let gl = GaussLegendre::new(32);
    let radius = st.m + 10.0 * st.sigma;
    let panels = VINCENT_NODES / 32;
    let h = 2.0 * radius / panels as f64;
    let (mut den_a, mut den_b, mut exp_a, mut exp_b) = (0.0, 0.0, 0.0, 0.0);
    let (mut sa, mut sb) = ([0.0], [0.0]);
    for p in 0..panels {
        let lo = -radius + h * p as f64;
        for (x, wx) in gl.mapped(lo, lo + h) {
            // P_k = ∫ p_0(y) φ_σ(x - m y) c(x, y)^k dy with c the conditional score
            let (mut p0m, mut p1m, mut p2m) = (0.0, 0.0, 0.0);
            for &(y, wy) in &inner {
                let r = x - st.m * y;
                let k = wy * normal_pdf(r / st.sigma) / st.sigma;
                let c = -r / (st.sigma * st.sigma);
                p0m += k;
                p1m += k * c;
                p2m += k * c * c;
            }
            a.score_into(&[x], &st, &mut sa);
            b.score_into(&[x], &st, &mut sb);
            den_a += wx * (sa[0] * sa[0] * p0m - 2.0 * sa[0] * p1m + p2m);
            den_b += wx * (sb[0] * sb[0] * p0m - 2.0 * sb[0] * p1m + p2m);
            let mut g = [0.0];
            let pt = oracle.density_and_grad(&[x], &st, &mut g);
            let so = if pt > 0.0 { g[0] / pt } else { 0.0 };
            exp_a += wx * pt * (sa[0] - so).powi(2);
            exp_b += wx * pt * (sb[0] - so).powi(2);
        }
    }
    Ok((den_a - den_b) - (exp_a - exp_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{random_density, DensitySpec};
    use crate::score::FnScore;

    fn state(t: f64) -> NoiseState {
        BetaSchedule::default().noise_state(t).unwrap()
    }

    #[test]
    fn conditional_score_examples() {
        let s = state(0.3);
        assert_eq!(conditional_score(&[s.m * 0.7], &[0.7], &s), vec![0.0]);
        // σ² = 1/2 at t = ln 2 / 2
        let s = state(0.5 * 2f64.ln());
        let v = conditional_score(&[1.0], &[0.0], &s)[0];
        assert!((v + 2.0).abs() < 1e-12);
        let logp = |x: f64| -0.5 * x * x / (s.sigma * s.sigma);
        let fd = (logp(1.0 + 1e-6) - logp(1.0 - 1e-6)) / 2e-6;
        assert!((fd - v).abs() < 1e-6);
    }

    #[test]
    fn conditional_score_matches_finite_differences() {
        let mut rng = RngStream::new(4).rng();
        for _ in 0..100 {
            let t = rng.random_range(0.01..3.0);
            let s = state(t);
            let x0 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let logp = |z: &[f64]| -> f64 {
                z.iter().zip(&x0).map(|(a, b)| -0.5 * ((a - s.m * b) / s.sigma).powi(2)).sum::<f64>()
                    - 2.0 * s.sigma.ln()
            };
            let c = conditional_score(&x, &x0, &s);
            for k in 0..2 {
                let (mut xp, mut xm) = (x, x);
                xp[k] += 1e-5;
                xm[k] -= 1e-5;
                let fd = (logp(&xp) - logp(&xm)) / 2e-5;
                assert!((fd - c[k]).abs() <= 1e-6 * (1.0 + c[k].abs()), "fd {fd} vs {}", c[k]);
            }
        }
    }

    #[test]
    fn loss_vanishes_for_the_conditional_score() {
        let x0 = vec![0.4];
        let s = FnScore { dim: 1, f: |x: &[f64], st: &NoiseState, out: &mut [f64]| out[0] = -(x[0] - st.m * 0.4) / (st.sigma * st.sigma) };
        let sched = BetaSchedule::default();
        for scheme in [Scheme::UniformT { draws: 500 }, Scheme::WeightedT { draws: 500 }, Scheme::ExpectationQuadrature { t_nodes: 4, gh_nodes: 8 }] {
            let l = empirical_loss(&s, &[x0.clone()], &scheme, &sched, (0.01, 1.0), &RngStream::new(1)).unwrap();
            assert!(l.abs() < 1e-18, "{scheme:?}: {l}");
        }
    }

    #[test]
    fn weighted_time_law_reproduces_uniform_average() {
        let (lo, hi) = (1e-3, 10.0);
        let mut rng = RngStream::new(9).rng();
        let n = 1_000_000;
        let s = Scheme::WeightedT { draws: n };
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let (t, l) = draw_time(&s, lo, hi, &mut rng);
            assert!((lo..=hi).contains(&t));
            sum += l;
            sum2 += l * l;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let net = ScoreNet::init(1, &[8], 1e-2, &RngStream::new(2)).unwrap();
        let data: Vec<Vec<f64>> = (0..7).map(|i| vec![-0.9 + 0.3 * i as f64]).collect();
        let mut rev = data.clone();
        rev.reverse();
        let sched = BetaSchedule::default();
        let q = Scheme::ExpectationQuadrature { t_nodes: 3, gh_nodes: 6 };
        let a = empirical_loss(&net, &data, &q, &sched, (0.1, 1.0), &RngStream::new(0)).unwrap();
        let b = empirical_loss(&net, &rev, &q, &sched, (0.1, 1.0), &RngStream::new(0)).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
        let m = Scheme::UniformT { draws: 20_000 };
        let a = loss_estimate(&net, &data, &m, &sched, (0.1, 1.0), &RngStream::new(3)).unwrap();
        let b = loss_estimate(&net, &rev, &m, &sched, (0.1, 1.0), &RngStream::new(4)).unwrap();
        assert!((a.value - b.value).abs() <= 4.0 * (a.std_err.hypot(b.std_err)));
    }

    #[test]
    fn quadrature_and_monte_carlo_losses_agree() {
        let net = ScoreNet::init(1, &[16, 16], 1e-2, &RngStream::new(5)).unwrap();
        let data: Vec<Vec<f64>> = vec![vec![-0.5], vec![0.2], vec![0.9]];
        let sched = BetaSchedule::default();
        let q = empirical_loss(&net, &data, &Scheme::ExpectationQuadrature { t_nodes: 8, gh_nodes: 60 }, &sched, (0.2, 2.0), &RngStream::new(0))
            .unwrap();
        let mc = loss_estimate(&net, &data, &Scheme::UniformT { draws: 1_000_000 }, &sched, (0.2, 2.0), &RngStream::new(6)).unwrap();
        assert!((q - mc.value).abs() <= 3.0 * mc.std_err, "quadrature {q} mc {} ± {}", mc.value, mc.std_err);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mlp = Mlp::init(&[3, 5, 4, 2], &RngStream::new(8)).unwrap();
        let input = [0.3, -0.7, 1.1];
        let g_out = [0.6, -1.3];
        let f = |m: &Mlp| m.forward(&input).iter().zip(&g_out).map(|(a, b)| a * b).sum::<f64>();
        let mut grads = mlp.zeros_like();
        let mut acts = Vec::new();
        mlp.forward_cached(&input, &mut acts);
        mlp.backward(&acts, &g_out, &mut grads, &mut Vec::new(), &mut Vec::new());
        for li in 0..mlp.weights.len() {
            for k in 0..mlp.weights[li].len() {
                let (mut p, mut m) = (mlp.clone(), mlp.clone());
                p.weights[li][k] += 1e-6;
                m.weights[li][k] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - grads.weights[li][k]).abs() < 1e-6, "layer {li} weight {k}");
            }
            for k in 0..mlp.biases[li].len() {
                let (mut p, mut m) = (mlp.clone(), mlp.clone());
                p.biases[li][k] += 1e-6;
                m.biases[li][k] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - grads.biases[li][k]).abs() < 1e-6, "layer {li} bias {k}");
            }
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            widths: vec![16, 16],
            n_data: 256,
            scheme: Scheme::UniformT { draws: 2048 },
            t_lo: 0.5,
            t_hi: 1.0,
            optimizer: Optimizer { method: Method::Adam, step_size: 0.005, iterations: 400, batch: 32, eval_every: 50, patience: 3 },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_keep_the_initialization() {
        let mut cfg = small_config();
        cfg.optimizer.iterations = 0;
        let density = SplineDensity::uniform(1).unwrap();
        let trained = train(&density, &BetaSchedule::default(), &cfg).unwrap();
        let stream = RngStream::new(cfg.seed).split(1);
        let init = ScoreNet::init(1, &cfg.widths, cfg.feature_c, &stream.split2(1, 0)).unwrap();
        assert_eq!(trained.intervals.len(), 1);
        assert_eq!(trained.intervals[0].mlp, init.mlp);
    }

    #[test]
    fn training_is_deterministic_and_monotone() {
        let cfg = small_config();
        let density = SplineDensity::uniform(1).unwrap();
        let a = train(&density, &BetaSchedule::default(), &cfg).unwrap();
        let b = train(&density, &BetaSchedule::default(), &cfg).unwrap();
        assert_eq!(a.training_loss_trace, b.training_loss_trace);
        assert_eq!(a, b);
        for iv in &a.intervals {
            assert!(iv.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        }
        assert!(a.training_loss_trace.last() < a.training_loss_trace.first());
    }

    #[test]
    fn trained_uniform_score_is_close_to_the_oracle() {
        let cfg = TrainConfig { n_data: 4096, scheme: Scheme::UniformT { draws: 8192 }, ..small_config() };
        let cfg = TrainConfig { optimizer: Optimizer { iterations: 1500, ..cfg.optimizer.clone() }, ..cfg };
        let density = SplineDensity::uniform(1).unwrap();
        let sched = BetaSchedule::default();
        let trained = train(&density, &sched, &cfg).unwrap();
        let oracle = ScoreOracle::new(density, sched);
        let s = oracle.state(1.0).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..401 {
            let x = -3.0 + 6.0 * i as f64 / 400.0;
            let p = oracle.p_t(&[x], 1.0).unwrap();
            let e = trained.score_at(&[x], &s)[0] - oracle.score(&[x], 1.0, None).unwrap()[0];
            num += p * e * e;
            den += p;
        }
        let rms = (num / den).sqrt();
        assert!(rms < 0.1, "p_t-weighted RMS {rms}");
    }

    #[test]
    fn outputs_respect_the_clip() {
        let mut cfg = small_config();
        cfg.optimizer.iterations = 0;
        cfg.clip_mult = 0.01;
        let trained = train(&SplineDensity::uniform(1).unwrap(), &BetaSchedule::default(), &cfg).unwrap();
        let mut rng = RngStream::new(1).rng();
        for _ in 0..200 {
            let s = state(rng.random_range(0.5..1.0));
            let x = [rng.random_range(-30.0..30.0)];
            let v = trained.score_at(&x, &s);
            assert!(v[0].abs() <= trained.clip_cap(s.sigma) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn ramp_switch_is_continuous_in_time() {
        let mut cfg = small_config();
        cfg.t_lo = 0.25;
        cfg.optimizer.iterations = 0;
        cfg.warm_start = false;
        cfg.switch_mode = SwitchMode::Ramp;
        let ramp = train(&SplineDensity::uniform(1).unwrap(), &BetaSchedule::default(), &cfg).unwrap();
        assert_eq!(ramp.intervals.len(), 2);
        let sched = BetaSchedule::default();
        let at = |t: f64| ramp.score_at(&[0.3], &sched.noise_state(t).unwrap())[0];
        let jump = (at(0.5 + 1e-9) - at(0.5 - 1e-9)).abs();
        assert!(jump < 1e-6, "jump {jump}");
        let hard = TrainedScore { switch_mode: SwitchMode::Hard, ..ramp.clone() };
        let hat = |t: f64| hard.score_at(&[0.3], &sched.noise_state(t).unwrap())[0];
        assert!((hat(0.5 + 1e-9) - hat(0.5 - 1e-9)).abs() > 1e-6);
    }

    #[test]
    fn json_roundtrip() {
        let mut cfg = small_config();
        cfg.optimizer.iterations = 10;
        let trained = train(&SplineDensity::uniform(1).unwrap(), &BetaSchedule::default(), &cfg).unwrap();
        assert_eq!(TrainedScore::from_json(&trained.to_json().unwrap()).unwrap(), trained);
    }

    #[test]
    fn clipped_residuals_have_gaussian_tails() {
        // ‖s - c‖ ≤ cap + ‖ξ‖/σ, so the 1e-3 upper quantile sits below cap + z/σ
        let mut cfg = small_config();
        cfg.optimizer.iterations = 0;
        let trained = train(&SplineDensity::uniform(1).unwrap(), &BetaSchedule::default(), &cfg).unwrap();
        let mut rng = RngStream::new(12).rng();
        let s = state(0.7);
        let mut r: Vec<f64> = (0..100_000)
            .map(|_| {
                let x0 = rng.random_range(-1.0..1.0);
                let z = std_normal(&mut rng);
                let x = s.m * x0 + s.sigma * z;
                (trained.score_at(&[x], &s)[0] + z / s.sigma).abs() * s.sigma
            })
            .collect();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = r[(0.999 * r.len() as f64) as usize];
        let envelope = trained.clip_cap(s.sigma) * s.sigma + 3.29 * 1.1;
        assert!(q <= envelope, "quantile {q} envelope {envelope}");
    }

    #[test]
    fn vincent_gap_vanishes() {
        let oracle = ScoreOracle::new(SplineDensity::uniform(1).unwrap(), BetaSchedule::default());
        let a = ScoreNet::init(1, &[16, 16], 1e-2, &RngStream::new(1)).unwrap();
        let b = ScoreNet::init(1, &[16, 16], 1e-2, &RngStream::new(2)).unwrap();
        assert_eq!(vincent_gap(&a, &a, &oracle, 0.3).unwrap(), 0.0);
        let g = vincent_gap(&a, &b, &oracle, 0.3).unwrap();
        assert!(g.abs() <= 1e-5, "gap {g}");
        let spec = DensitySpec { seed: 5, dim: 1, n_atoms: 6, max_k: 3, order_l: 2, decay_s: 1.0, amplitude: 1.5 };
        let oracle = ScoreOracle::new(random_density(&spec).unwrap(), BetaSchedule::default());
        let g = vincent_gap(&a, &b, &oracle, 0.05).unwrap();
        assert!(g.abs() <= 1e-5, "gap {g}");
    }
}
