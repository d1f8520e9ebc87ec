//! Config-driven runs: oracle property suites, training, generation, rate
//! scans and network verification. Every run yields a manifest plus a CSV and
//! a JSON report; identical configs give byte-identical CSVs.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bspline::{random_density, DensitySpec, SplineAtom, SplineDensity};
use crate::manifold::SubspaceModel;
use crate::metrics::{girsanov_from_nodes, integrate_nodes, node_score_errors, tv_histogram, ProjectedReference};
use crate::oracle::{Corruption, ScoreOracle};
use crate::quadrature::{normal_cdf, normal_pdf, GaussLegendre};
use crate::relu_net::{self, DiffusedNetConfig, ReluNetwork};
use crate::rng::RngStream;
use crate::sampler::{forward_sample, generate, SampleBatch};
use crate::schedule::{BetaSchedule, TimeGrid};
use crate::score::ScoreModel;
use crate::training::{train_on_data, ScoreNet, TrainConfig, TrainedScore};
use crate::{Error, Result};

/// Version of the CSV/JSON report layout.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DensitySource {
    Random(DensitySpec),
    Uniform { dim: usize },
    /// A density previously written with `SplineDensity::to_json`.
    File { path: PathBuf },
}

impl DensitySource {
    pub fn load(&self) -> Result<SplineDensity> {
        match self {
            DensitySource::Random(spec) => random_density(spec),
            DensitySource::Uniform { dim } => SplineDensity::uniform(*dim),
            DensitySource::File { path } => SplineDensity::from_json(&std::fs::read_to_string(path)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridChoice {
    Refined,
    Uniform,
}

/// Backward-sampler time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub kind: GridChoice,
    pub steps: usize,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { kind: GridChoice::Refined, steps: 512, t_lo: 1e-3, t_hi: 10.0 }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid> {
        match self.kind {
            GridChoice::Refined => TimeGrid::refined(self.t_lo, self.t_hi, self.steps),
            GridChoice::Uniform => TimeGrid::uniform(self.t_lo, self.t_hi, self.steps),
        }
    }

    /// Coarse geometric grid over the same span for time integrals.
    pub fn metric_grid(&self) -> Result<TimeGrid> {
        if 2.0 * self.t_lo >= self.t_hi {
            return TimeGrid::uniform(self.t_lo, self.t_hi, 1);
        }
        TimeGrid::geometric(self.t_lo, self.t_hi, 2.0 * self.t_lo, 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_generate: usize,
    pub n_reference: usize,
    pub tv_bins: usize,
    /// Forward draws per time node of the score-error integrals.
    pub mc_count: usize,
    /// Bootstrap replicates of the fitted slope.
    pub bootstrap: usize,
    /// Independent data sets (and trainings) per scan point; metrics are
    /// averaged over them.
    pub replicates: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_generate: 20_000, n_reference: 100_000, tv_bins: 50, mc_count: 256, bootstrap: 200, replicates: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleCheckConfig {
    pub gradient_points: usize,
    pub bounds_points: usize,
    pub clip_points: usize,
    pub vincent_pairs: usize,
    pub vincent_times: Vec<f64>,
    /// Inject a density scale and a score offset; every suite that can see
    /// them must then fail.
    pub corrupt: bool,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self { gradient_points: 500, bounds_points: 200, clip_points: 100, vincent_pairs: 5, vincent_times: vec![0.05, 0.3, 1.0], corrupt: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetVerifyConfig {
    pub eps_ladder: Vec<f64>,
    pub clip_dim: usize,
    /// Include the diffused-basis network (the slowest construction).
    pub diffused: bool,
}

impl Default for NetVerifyConfig {
    fn default() -> Self {
        Self { eps_ladder: vec![0.1, 0.01, 0.001], clip_dim: 3, diffused: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifoldConfig {
    pub ambient_dim: usize,
    /// Seed of the orthonormalized embedding matrix.
    pub a_seed: u64,
    pub intrinsic: DensitySpec,
    /// Full-dimensional comparison density.
    pub full: DensitySpec,
    pub n_list: Vec<usize>,
    /// Samples of the oracle-score baseline row; the planar oracle is costly.
    pub n_baseline: usize,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 2,
            a_seed: 1,
            intrinsic: default_density_spec(1),
            full: DensitySpec { n_atoms: 24, ..default_density_spec(2) },
            n_list: vec![128, 256, 512, 1024, 2048],
            n_baseline: 5000,
        }
    }
}

fn default_density_spec(dim: usize) -> DensitySpec {
    DensitySpec { seed: 11, dim, n_atoms: 12, max_k: 4, order_l: 2, decay_s: 1.0, amplitude: 3.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub density: DensitySource,
    pub schedule: BetaSchedule,
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub samples: SampleConfig,
    /// Training-set sizes of a rate scan, strictly increasing.
    pub n_list: Vec<usize>,
    pub oracle_check: OracleCheckConfig,
    pub net_verify: NetVerifyConfig,
    pub manifold: ManifoldConfig,
    /// Trained score used by `generate`; the exact oracle when absent.
    pub score_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            density: DensitySource::Random(default_density_spec(1)),
            schedule: BetaSchedule::default(),
            grid: GridConfig::default(),
            train: TrainConfig { t_lo: 1e-3, ..TrainConfig::default() },
            samples: SampleConfig::default(),
            n_list: vec![128, 256, 512, 1024, 2048, 4096, 8192],
            oracle_check: OracleCheckConfig::default(),
            net_verify: NetVerifyConfig::default(),
            manifold: ManifoldConfig::default(),
            score_path: None,
            out_dir: None,
        }
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1]) && v.first().is_none_or(|&n| n > 0)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate(self.grid.t_hi)?;
        self.train.validate()?;
        self.grid.build()?;
        if !strictly_increasing(&self.n_list) || !strictly_increasing(&self.manifold.n_list) {
            return Err(Error::Config("n_list must be strictly increasing and positive".into()));
        }
        if self.manifold.n_baseline == 0 {
            return Err(Error::Config("manifold.n_baseline must be positive".into()));
        }
        if self.train.t_lo > self.grid.t_lo || self.train.t_hi < self.grid.t_hi {
            return Err(Error::Config(format!(
                "training range [{}, {}] must cover the sampler grid [{}, {}]",
                self.train.t_lo, self.train.t_hi, self.grid.t_lo, self.grid.t_hi
            )));
        }
        let s = &self.samples;
        if s.n_generate == 0 || s.n_reference == 0 || s.tv_bins == 0 || s.mc_count < 2 || s.replicates == 0 {
            return Err(Error::Config("sample counts and replicates must be positive and mc_count ≥ 2".into()));
        }
        if self.net_verify.eps_ladder.iter().any(|&e| !(e > 0.0 && e < 0.5)) {
            return Err(Error::Config("eps ladder entries must lie in (0, 1/2)".into()));
        }
        Ok(())
    }

    /// Short digest of the config, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).unwrap_or_default();
        Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets the leaf at a dotted path (`train.optimizer.iterations`); the value is
/// parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, key) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*key).ok_or_else(|| Error::Config(format!("unknown config key `{}`", parts[..=i].join("."))))?
            }
            Value::Array(items) => {
                let idx: usize = key.parse().map_err(|_| Error::Config(format!("`{key}` is not an index in `{path}`")))?;
                let slot = items.get_mut(idx).ok_or_else(|| Error::Config(format!("index {idx} out of range in `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("`{}` is not a table", parts[..i].join(".")))),
        };
    }
    Err(Error::Config("empty override path".into()))
}

fn lookup<'a>(root: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(root, |cur, key| match cur {
        Value::Object(map) => map.get(key),
        Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => None,
    })
}

/// Config from an optional JSON file (missing fields take defaults) with
/// `key=value` overrides applied in order. Overrides naming fields that do
/// not survive deserialization are rejected.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base: RunConfig = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)?;
    let check = serde_json::to_value(&cfg)?;
    for (k, _) in overrides {
        if lookup(&check, k).is_none() {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Formats an optional number for CSV; absent values are empty cells.
fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn csv_header(command: &str, cfg_hash: &str) -> String {
    format!("# difflab-report v{REPORT_SCHEMA} command={command} config={cfg_hash}\n")
}

// ---------------------------------------------------------------- oracle check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub suite: String,
    pub index: usize,
    pub x: Vec<f64>,
    pub t: f64,
    pub value: f64,
    pub reference: f64,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub suite: String,
    pub checks: usize,
    pub failures: usize,
    pub max_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub suites: Vec<SuiteSummary>,
    #[serde(skip)]
    pub checks: Vec<CheckRow>,
    pub pass: bool,
}

impl OracleCheckReport {
    pub fn to_csv(&self, cfg_hash: &str) -> String {
        let mut s = csv_header("oracle-check", cfg_hash);
        s.push_str("suite,index,x,t,value,reference,error,tolerance,pass\n");
        for r in &self.checks {
            let x: Vec<String> = r.x.iter().map(|v| format!("{v}")).collect();
            s.push_str(&format!("{},{},{},{},{},{},{},{},{}\n", r.suite, r.index, x.join(" "), r.t, r.value, r.reference, r.error, r.tolerance, r.pass));
        }
        s
    }
}

fn summarize(suite: &str, rows: &[CheckRow]) -> SuiteSummary {
    let failures = rows.iter().filter(|r| !r.pass).count();
    let max_error = rows.iter().map(|r| r.error).fold(0.0, f64::max);
    SuiteSummary { suite: suite.into(), checks: rows.len(), failures, max_error, pass: failures == 0 && !rows.is_empty() }
}

fn random_x<R: Rng>(rng: &mut R, dim: usize, r: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-r..r)).collect()
}

/// Score versus centered differences of `log p_t`, plus the order-0 atom
/// against its error-function closed form.
fn gradient_suite(oracle: &ScoreOracle, points: usize, stream: &RngStream) -> Result<Vec<CheckRow>> {
    const TOL: f64 = 1e-3;
    let mut rng = stream.rng();
    let d = oracle.dim();
    let mut rows = Vec::new();
    for i in 0..points {
        let x = random_x(&mut rng, d, 1.5);
        let t = 10f64.powf(rng.random_range(-2.5..0.5));
        let s = oracle.score(&x, t, None)?;
        let h = 1e-4 * oracle.state(t)?.sigma;
        for k in 0..d {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let fd = (oracle.p_t(&xp, t)?.ln() - oracle.p_t(&xm, t)?.ln()) / (2.0 * h);
            let error = (s[k] - fd).abs() / fd.abs().max(1.0);
            rows.push(CheckRow { suite: "gradient".into(), index: i, x: x.clone(), t, value: s[k], reference: fd, error, tolerance: TOL, pass: error <= TOL });
        }
    }
    // two unit order-0 atoms tile [-1, 1]; their diffused sum is a difference of Φ
    let left = SplineAtom::new(vec![0], vec![-1], 0)?;
    let right = SplineAtom::new(vec![0], vec![0], 0)?;
    let unit = ScoreOracle::new(SplineDensity::uniform(1)?, oracle.schedule.clone());
    for &t in &[1e-4, 0.01, 0.1, 1.0, 5.0] {
        let st = unit.state(t)?;
        for j in 0..41 {
            let x = -2.0 + 0.1 * j as f64;
            let quad = unit.diffused_basis(&left, &[x], t)?.e1 + unit.diffused_basis(&right, &[x], t)?.e1;
            let closed = (normal_cdf((x + st.m) / st.sigma) - normal_cdf((x - st.m) / st.sigma)) / st.m;
            let error = (quad - closed).abs();
            rows.push(CheckRow { suite: "gradient".into(), index: points + j, x: vec![x], t, value: quad, reference: closed, error, tolerance: 1e-8, pass: error <= 1e-8 });
        }
    }
    Ok(rows)
}

fn bounds_suite(oracle: &ScoreOracle, points: usize, stream: &RngStream) -> Result<Vec<CheckRow>> {
    let mut rng = stream.rng();
    let mut rows = Vec::new();
    for i in 0..points {
        let x = random_x(&mut rng, oracle.dim(), 3.0);
        let t = 10f64.powf(rng.random_range(-3.0..1.0));
        let b = oracle.density_bounds_check(&x, t)?;
        // distance outside the envelope in log units
        let error = (b.lower / b.p).ln().max((b.p / b.upper).ln()).max(0.0);
        rows.push(CheckRow { suite: "bounds".into(), index: i, x, t, value: b.p, reference: b.upper, error, tolerance: 0.0, pass: b.pass });
    }
    Ok(rows)
}

/// Windowed diffused-basis quadrature versus an unwindowed reference over
/// the whole atom support, and the clipped score against its norm cap.
fn clip_suite(oracle: &ScoreOracle, points: usize, stream: &RngStream) -> Result<Vec<CheckRow>> {
    let mut rng = stream.rng();
    let gl = GaussLegendre::new(16);
    let tol = oracle.config.clip_eps;
    let r = oracle.density.domain_halfwidth;
    let mut rows = Vec::new();
    if oracle.density.atoms.is_empty() || oracle.dim() != 1 {
        return Ok(rows);
    }
    for i in 0..points {
        let atom = &oracle.density.atoms[rng.random_range(0..oracle.density.atoms.len())];
        let x = rng.random_range(-1.5..1.5);
        let t = 10f64.powf(rng.random_range(-3.0..0.0));
        let st = oracle.state(t)?;
        let e1 = oracle.diffused_basis(atom, &[x], t)?.e1;
        let panel = 0.25 * st.sigma / st.m;
        let mut wide = 0.0;
        for w in atom.knots(0).windows(2) {
            let (a, b) = (w[0].max(-r), w[1].min(r));
            if b <= a {
                continue;
            }
            let pieces = ((b - a) / panel).ceil().max(1.0) as usize;
            let hw = (b - a) / pieces as f64;
            for p in 0..pieces {
                let lo = a + hw * p as f64;
                wide += gl.integrate(lo, lo + hw, |y| atom.axis_value(0, y) * normal_pdf((x - st.m * y) / st.sigma) / st.sigma);
            }
        }
        let error = (e1 - wide).abs();
        rows.push(CheckRow { suite: "clip_tail".into(), index: i, x: vec![x], t, value: e1, reference: wide, error, tolerance: tol, pass: error <= tol + 1e-12 });
        let clip_mult = 0.05;
        let v = oracle.score(&[x], t, Some(clip_mult))?;
        let cap = clip_mult * (1.0 / tol).ln().sqrt() / st.sigma;
        let excess = (v[0].abs() / cap - 1.0).max(0.0);
        rows.push(CheckRow { suite: "clip_tail".into(), index: points + i, x: vec![x], t, value: v[0], reference: cap, error: excess, tolerance: 1e-12, pass: excess <= 1e-12 });
    }
    Ok(rows)
}

fn vincent_suite(oracle: &ScoreOracle, pairs: usize, times: &[f64], feature_c: f64, stream: &RngStream) -> Result<Vec<CheckRow>> {
    const TOL: f64 = 1e-5;
    let mut rows = Vec::new();
    if oracle.dim() != 1 {
        return Ok(rows);
    }
    for p in 0..pairs {
        let a = ScoreNet::init(1, &[16, 16], feature_c, &stream.split2(p as u64, 0))?;
        let b = ScoreNet::init(1, &[16, 16], feature_c, &stream.split2(p as u64, 1))?;
        for &t in times {
            let gap = crate::training::vincent_gap(&a, &b, oracle, t)?;
            rows.push(CheckRow { suite: "vincent".into(), index: p, x: vec![], t, value: gap, reference: 0.0, error: gap.abs(), tolerance: TOL, pass: gap.abs() <= TOL });
        }
    }
    Ok(rows)
}

/// Gradient consistency, density bounds, clip tails and the Vincent gap.
pub fn cmd_oracle_check(cfg: &RunConfig) -> Result<OracleCheckReport> {
    let density = cfg.density.load()?;
    let mut oracle = ScoreOracle::new(density, cfg.schedule.clone());
    if cfg.oracle_check.corrupt {
        oracle = oracle.corrupted(Corruption { density_scale: 1e6, score_offset: 0.5 });
    }
    let oc = &cfg.oracle_check;
    let master = RngStream::new(cfg.seed).split(100);
    let suites = [
        ("gradient", gradient_suite(&oracle, oc.gradient_points, &master.split(0))?),
        ("bounds", bounds_suite(&oracle, oc.bounds_points, &master.split(1))?),
        ("clip_tail", clip_suite(&oracle, oc.clip_points, &master.split(2))?),
        ("vincent", vincent_suite(&oracle, oc.vincent_pairs, &oc.vincent_times, cfg.train.feature_c, &master.split(3))?),
    ];
    let summaries: Vec<SuiteSummary> = suites.iter().map(|(n, r)| summarize(n, r)).collect();
    let pass = summaries.iter().all(|s| s.pass);
    Ok(OracleCheckReport { suites: summaries, checks: suites.into_iter().flat_map(|(_, r)| r).collect(), pass })
}

// ---------------------------------------------------------------- train / generate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trained: TrainedScore,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self, cfg_hash: &str) -> String {
        let mut s = csv_header("train", cfg_hash);
        s.push_str("interval,t_lo,t_hi,initial_loss,final_loss,evaluations,step_halvings\n");
        for (i, iv) in self.trained.intervals.iter().enumerate() {
            let first = iv.loss_trace.first().copied();
            let last = iv.loss_trace.last().copied();
            s.push_str(&format!("{i},{},{},{},{},{},{}\n", iv.t_lo, iv.t_hi, cell(first), cell(last), iv.loss_trace.len(), iv.step_halvings));
        }
        s
    }
}

/// Trains interval-switched networks on `train.n_data` samples of the density.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let density = cfg.density.load()?;
    let master = RngStream::new(cfg.seed).split(200);
    let data = density.sample(cfg.train.n_data, &master.split(0));
    let trained = train_on_data(&data, &cfg.schedule, &cfg.train, &master.split(1))?;
    let final_loss = trained.final_loss();
    Ok(TrainReport { trained, final_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub source: String,
    pub count: usize,
    pub resets: usize,
    pub w1: f64,
    pub w1_sliced: bool,
    pub tv_hist: f64,
    #[serde(skip)]
    pub batch: Option<SampleBatch>,
}

impl GenerateReport {
    pub fn to_csv(&self, cfg_hash: &str) -> String {
        let mut s = csv_header("generate", cfg_hash);
        s.push_str("source,count,resets,w1,w1_sliced,tv_hist\n");
        s.push_str(&format!("{},{},{},{},{},{}\n", self.source, self.count, self.resets, self.w1, self.w1_sliced, self.tv_hist));
        s
    }
}

/// Runs the backward sampler with the trained score at `score_path` (or the
/// exact oracle) and measures the batch against a fresh sample of `p_0`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateReport> {
    let density = cfg.density.load()?;
    let grid = cfg.grid.build()?;
    let master = RngStream::new(cfg.seed).split(300);
    let oracle = ScoreOracle::new(density.clone(), cfg.schedule.clone());
    let trained = match &cfg.score_path {
        Some(p) => Some(TrainedScore::from_json(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let (score, source): (&dyn ScoreModel, String) = match &trained {
        Some(t) => (t, "trained".into()),
        None => (&oracle, "oracle".into()),
    };
    if score.dim() != density.dim {
        return Err(Error::Dimension { expected: density.dim, got: score.dim() });
    }
    let batch = generate(score, &cfg.schedule, &grid, cfg.samples.n_generate, &master.split(0), &cfg.hash())?;
    let reference = density.sample(cfg.samples.n_reference, &master.split(1));
    let w = ProjectedReference::new(&reference)?.w1(&batch.points)?;
    let tv = tv_histogram(&batch.points, &reference, cfg.samples.tv_bins)?;
    Ok(GenerateReport { source, count: batch.len(), resets: batch.resets, w1: w.value, w1_sliced: w.sliced, tv_hist: tv, batch: Some(batch) })
}

// ---------------------------------------------------------------- rate scans

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// Exact score, no training; excluded from the fit.
    Oracle,
    Trained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub kind: RowKind,
    pub n: usize,
    pub status: RowStatus,
    /// Replicates that completed.
    pub replicates: usize,
    pub w1: Option<f64>,
    /// Standard deviation of W1 across replicates.
    pub w1_sd: Option<f64>,
    pub tv: Option<f64>,
    pub score_error: Option<f64>,
    pub score_error_se: Option<f64>,
    pub girsanov_kl: Option<f64>,
    pub girsanov_tv: Option<f64>,
    pub train_loss: Option<f64>,
    pub resets: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheorySlopes {
    /// `-s / (2s + d)`.
    pub tv: f64,
    /// `-(s + 1) / (2s + d)`.
    pub w1: f64,
}

impl TheorySlopes {
    pub fn new(s: f64, d: usize) -> Self {
        let den = 2.0 * s + d as f64;
        Self { tv: -s / den, w1: -(s + 1.0) / den }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub dim: usize,
    /// Dimension entering the reference exponents.
    pub theory_dim: usize,
    pub smoothness: f64,
    pub rows: Vec<RateRow>,
    /// Least-squares slope of `log W1` against `log n` over trained rows.
    pub fitted_slope: Option<f64>,
    /// Percentile bootstrap 95% interval, resampling generated batches.
    pub slope_ci: Option<(f64, f64)>,
    /// `W1(first n) / W1(last n)`.
    pub w1_ratio: Option<f64>,
    pub theory_slopes: TheorySlopes,
    pub incomplete: bool,
}

impl RateReport {
    fn csv_rows(&self, prefix: &str, out: &mut String) {
        for r in &self.rows {
            let kind = match r.kind {
                RowKind::Oracle => "oracle",
                RowKind::Trained => "trained",
            };
            let status = match r.status {
                RowStatus::Ok => "ok",
                RowStatus::Diverged => "diverged",
            };
            out.push_str(&format!(
                "{prefix}{kind},{},{status},{},{},{},{},{},{},{},{},{},{}\n",
                r.n,
                r.replicates,
                cell(r.w1),
                cell(r.w1_sd),
                cell(r.tv),
                cell(r.score_error),
                cell(r.score_error_se),
                cell(r.girsanov_kl),
                cell(r.girsanov_tv),
                cell(r.train_loss),
                r.resets.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
    }

    fn csv_footer(&self, prefix: &str, out: &mut String) {
        let (lo, hi) = self.slope_ci.map_or((None, None), |(a, b)| (Some(a), Some(b)));
        out.push_str(&format!("# {prefix}fitted_slope={} ci_lo={} ci_hi={} w1_ratio={} incomplete={}\n", cell(self.fitted_slope), cell(lo), cell(hi), cell(self.w1_ratio), self.incomplete));
        out.push_str(&format!("# {prefix}reference_slopes tv={} w1={} (s={}, d={})\n", self.theory_slopes.tv, self.theory_slopes.w1, self.smoothness, self.theory_dim));
    }

    pub fn to_csv(&self, cfg_hash: &str) -> String {
        let mut s = csv_header("rate-scan", cfg_hash);
        s.push_str("kind,n,status,replicates,w1,w1_sd,tv,score_error,score_error_se,girsanov_kl,girsanov_tv,train_loss,resets\n");
        self.csv_rows("", &mut s);
        self.csv_footer("", &mut s);
        s
    }
}

type PointSampler<'a> = Box<dyn Fn(f64, usize, &RngStream) -> Result<Vec<Vec<f64>>> + Sync + 'a>;

/// A ground truth for a scan: its exact score and its forward marginals.
struct Problem<'a> {
    dim: usize,
    theory_dim: usize,
    smoothness: f64,
    truth: &'a dyn ScoreModel,
    /// Draws from `p_t`; `t = 0` gives the data law.
    sample_t: PointSampler<'a>,
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// One data set, one training, one generated batch.
struct Replicate {
    w1: f64,
    tv: f64,
    score_error: f64,
    score_error_se: f64,
    girsanov_kl: f64,
    girsanov_tv: f64,
    train_loss: f64,
    resets: usize,
    points: Vec<Vec<f64>>,
}

struct PointResult {
    row: RateRow,
    /// Generated batches of the completed replicates.
    batches: Vec<Vec<Vec<f64>>>,
}

/// `None` when training or sampling diverged.
fn scan_replicate(p: &Problem, cfg: &RunConfig, n: usize, reference: &ProjectedReference, ref_points: &[Vec<f64>], stream: &RngStream) -> Result<Option<Replicate>> {
    let grid = cfg.grid.build()?;
    let data = (p.sample_t)(0.0, n, &stream.split(0))?;
    let train_cfg = TrainConfig { n_data: n, ..cfg.train.clone() };
    let trained = match train_on_data(&data, &cfg.schedule, &train_cfg, &stream.split(1)) {
        Ok(t) => t,
        Err(Error::Training { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let batch = match generate(&trained, &cfg.schedule, &grid, cfg.samples.n_generate, &stream.split(2), &cfg.hash()) {
        Ok(b) => b,
        Err(Error::NonFinite { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let nodes = node_score_errors(&trained, p.truth, &cfg.schedule, &cfg.grid.metric_grid()?, cfg.samples.mc_count, &stream.split(3), |t, c, s| (p.sample_t)(t, c, s))?;
    let se = integrate_nodes(&nodes, |_| 1.0);
    let g = girsanov_from_nodes(&nodes, &cfg.schedule);
    Ok(Some(Replicate {
        w1: reference.w1(&batch.points)?.value,
        tv: tv_histogram(&batch.points, ref_points, cfg.samples.tv_bins)?,
        score_error: se.value,
        score_error_se: se.std_err,
        girsanov_kl: g.kl,
        girsanov_tv: g.tv,
        train_loss: trained.final_loss(),
        resets: batch.resets,
        points: batch.points,
    }))
}

fn mean_of(reps: &[Replicate], f: impl Fn(&Replicate) -> f64) -> Option<f64> {
    (!reps.is_empty()).then(|| reps.iter().map(&f).sum::<f64>() / reps.len() as f64)
}

/// Replicates are independent data sets and trainings; the row holds their
/// means. Any divergence marks the row diverged.
fn scan_point(p: &Problem, cfg: &RunConfig, n: usize, reference: &ProjectedReference, ref_points: &[Vec<f64>], stream: &RngStream) -> Result<PointResult> {
    let mut reps = Vec::new();
    for r in 0..cfg.samples.replicates {
        if let Some(rep) = scan_replicate(p, cfg, n, reference, ref_points, &stream.split(r as u64))? {
            reps.push(rep);
        }
    }
    let w1 = mean_of(&reps, |r| r.w1);
    let w1_sd = (reps.len() >= 2).then(|| {
        let m = w1.unwrap_or(0.0);
        (reps.iter().map(|r| (r.w1 - m).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt()
    });
    let se_se = (!reps.is_empty()).then(|| reps.iter().map(|r| r.score_error_se.powi(2)).sum::<f64>().sqrt() / reps.len() as f64);
    let row = RateRow {
        kind: RowKind::Trained,
        n,
        status: if reps.len() == cfg.samples.replicates { RowStatus::Ok } else { RowStatus::Diverged },
        replicates: reps.len(),
        w1,
        w1_sd,
        tv: mean_of(&reps, |r| r.tv),
        score_error: mean_of(&reps, |r| r.score_error),
        score_error_se: se_se,
        girsanov_kl: mean_of(&reps, |r| r.girsanov_kl),
        girsanov_tv: mean_of(&reps, |r| r.girsanov_tv),
        train_loss: mean_of(&reps, |r| r.train_loss),
        resets: (!reps.is_empty()).then(|| reps.iter().map(|r| r.resets).sum()),
    };
    Ok(PointResult { row, batches: reps.into_iter().map(|r| r.points).collect() })
}

fn run_scan(p: &Problem, cfg: &RunConfig, n_list: &[usize], n_baseline: usize, stream: &RngStream) -> Result<RateReport> {
    if n_list.len() < 4 {
        return Err(Error::Config(format!("a rate scan needs at least 4 values of n, got {}", n_list.len())));
    }
    let grid = cfg.grid.build()?;
    let ref_points = (p.sample_t)(0.0, cfg.samples.n_reference, &stream.split(0))?;
    let reference = ProjectedReference::new(&ref_points)?;
    let base = generate(p.truth, &cfg.schedule, &grid, n_baseline, &stream.split(1), &cfg.hash())?;
    let mut rows = vec![RateRow {
        kind: RowKind::Oracle,
        n: 0,
        status: RowStatus::Ok,
        replicates: 1,
        w1: Some(reference.w1(&base.points)?.value),
        w1_sd: None,
        tv: Some(tv_histogram(&base.points, &ref_points, cfg.samples.tv_bins)?),
        score_error: Some(0.0),
        score_error_se: Some(0.0),
        girsanov_kl: Some(0.0),
        girsanov_tv: Some(0.0),
        train_loss: None,
        resets: Some(base.resets),
    }];
    let results: Vec<PointResult> = n_list
        .par_iter()
        .map(|&n| scan_point(p, cfg, n, &reference, &ref_points, &stream.split2(2, n as u64)))
        .collect::<Result<_>>()?;
    let incomplete = results.iter().any(|r| r.row.status != RowStatus::Ok);
    let done: Vec<(f64, &[Vec<Vec<f64>>], f64)> = results
        .iter()
        .filter(|r| r.row.status == RowStatus::Ok)
        .filter_map(|r| Some(((r.row.n as f64).ln(), r.batches.as_slice(), r.row.w1?)))
        .filter(|(_, _, w)| *w > 0.0)
        .collect();
    let (fitted_slope, slope_ci, w1_ratio) = if done.len() >= 2 {
        let xs: Vec<f64> = done.iter().map(|d| d.0).collect();
        let ys: Vec<f64> = done.iter().map(|d| d.2.ln()).collect();
        let slope = ols_slope(&xs, &ys);
        let mut boot: Vec<f64> = (0..cfg.samples.bootstrap)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream.split2(3, b as u64).rng();
                let ys = done
                    .iter()
                    .map(|(_, batches, _)| {
                        let mut total = 0.0;
                        for pts in batches.iter() {
                            let re: Vec<Vec<f64>> = (0..pts.len()).map(|_| pts[rng.random_range(0..pts.len())].clone()).collect();
                            total += reference.w1(&re)?.value;
                        }
                        Ok((total / batches.len() as f64).ln())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(ols_slope(&xs, &ys))
            })
            .collect::<Result<_>>()?;
        boot.sort_by(f64::total_cmp);
        let ci = (!boot.is_empty()).then(|| (percentile(&boot, 0.025), percentile(&boot, 0.975)));
        (Some(slope), ci, Some(done[0].2 / done[done.len() - 1].2))
    } else {
        (None, None, None)
    };
    rows.extend(results.into_iter().map(|r| r.row));
    Ok(RateReport {
        dim: p.dim,
        theory_dim: p.theory_dim,
        smoothness: p.smoothness,
        rows,
        fitted_slope,
        slope_ci,
        w1_ratio,
        theory_slopes: TheorySlopes::new(p.smoothness, p.theory_dim),
        incomplete: incomplete || fitted_slope.is_none(),
    })
}

/// For every `n`: draw data, train, generate, measure W1/TV against a
/// reference sample of `p_0` and log the score-error and Girsanov integrals;
/// then fit the log-log W1 slope with a bootstrap interval.
pub fn cmd_rate_scan(cfg: &RunConfig) -> Result<RateReport> {
    let density = cfg.density.load()?;
    let oracle = ScoreOracle::new(density.clone(), cfg.schedule.clone());
    let problem = Problem {
        dim: density.dim,
        theory_dim: density.dim,
        smoothness: density.nominal_smoothness,
        truth: &oracle,
        sample_t: Box::new(|t, count, s| Ok(forward_sample(&density, &cfg.schedule, t, count, s)?.points)),
    };
    run_scan(&problem, cfg, &cfg.n_list, cfg.samples.n_generate, &RngStream::new(cfg.seed).split(400))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldReport {
    pub manifold: RateReport,
    pub full: RateReport,
    /// `true` when the subspace slope is more negative than the full one.
    pub steeper: bool,
    pub a: Vec<Vec<f64>>,
    pub intrinsic: SplineDensity,
}

impl ManifoldReport {
    pub fn to_csv(&self, cfg_hash: &str) -> String {
        let mut s = csv_header("manifold-scan", cfg_hash);
        s.push_str("setting,kind,n,status,replicates,w1,w1_sd,tv,score_error,score_error_se,girsanov_kl,girsanov_tv,train_loss,resets\n");
        self.manifold.csv_rows("manifold,", &mut s);
        self.full.csv_rows("full,", &mut s);
        self.manifold.csv_footer("manifold ", &mut s);
        self.full.csv_footer("full ", &mut s);
        s.push_str(&format!("# steeper={}\n", self.steeper));
        s
    }
}

/// Matched rate scans for data on a random line in the plane and for a
/// full-dimensional planar density of the same nominal smoothness.
pub fn cmd_manifold_scan(cfg: &RunConfig) -> Result<ManifoldReport> {
    let mc = &cfg.manifold;
    let model = SubspaceModel::random(mc.ambient_dim, random_density(&mc.intrinsic)?, cfg.schedule.clone(), mc.a_seed)?;
    let full_density = random_density(&mc.full)?;
    if full_density.dim != mc.ambient_dim {
        return Err(Error::Dimension { expected: mc.ambient_dim, got: full_density.dim });
    }
    let master = RngStream::new(cfg.seed).split(500);
    let sub = Problem {
        dim: mc.ambient_dim,
        theory_dim: model.intrinsic_dim(),
        smoothness: model.intrinsic.nominal_smoothness,
        truth: &model,
        sample_t: Box::new(|t, count, s| Ok(model.sample(t, count, s)?.points)),
    };
    let full_oracle = ScoreOracle::new(full_density.clone(), cfg.schedule.clone());
    let full = Problem {
        dim: mc.ambient_dim,
        theory_dim: full_density.dim,
        smoothness: full_density.nominal_smoothness,
        truth: &full_oracle,
        sample_t: Box::new(|t, count, s| Ok(forward_sample(&full_density, &cfg.schedule, t, count, s)?.points)),
    };
    let manifold = run_scan(&sub, cfg, &mc.n_list, mc.n_baseline, &master.split(0))?;
    let full = run_scan(&full, cfg, &mc.n_list, mc.n_baseline, &master.split(1))?;
    let steeper = match (manifold.fitted_slope, full.fitted_slope) {
        (Some(a), Some(b)) => a < b,
        _ => false,
    };
    Ok(ManifoldReport { manifold, full, steeper, a: model.a.clone(), intrinsic: model.intrinsic.clone() })
}

// ---------------------------------------------------------------- net verify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetRow {
    pub construction: String,
    pub eps: Option<f64>,
    pub valid: bool,
    pub target: f64,
    pub measured: f64,
    pub depth: usize,
    pub max_width: usize,
    pub nonzeros: usize,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub identity: String,
    pub value: f64,
    pub expected: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetVerifyReport {
    pub networks: Vec<NetRow>,
    pub identities: Vec<IdentityRow>,
    pub pass: bool,
    #[serde(skip)]
    pub ledgers: Vec<(String, ReluNetwork)>,
}

impl NetVerifyReport {
    pub fn to_csv(&self, cfg_hash: &str) -> String {
        let mut s = csv_header("net-verify", cfg_hash);
        s.push_str("construction,eps,valid,target,measured,depth,max_width,nonzeros,max_abs\n");
        for r in &self.networks {
            s.push_str(&format!("{},{},{},{},{},{},{},{},{}\n", r.construction, cell(r.eps), r.valid, r.target, r.measured, r.depth, r.max_width, r.nonzeros, r.max_abs));
        }
        for r in &self.identities {
            s.push_str(&format!("# identity {} value={} expected={} pass={}\n", r.identity, r.value, r.expected, r.pass));
        }
        s
    }

    /// Constructions whose certificate failed, as `name@eps`.
    pub fn failures(&self) -> Vec<String> {
        let mut f: Vec<String> = self.networks.iter().filter(|r| !r.valid).map(|r| format!("{}@{}", r.construction, cell(r.eps))).collect();
        f.extend(self.identities.iter().filter(|r| !r.pass).map(|r| r.identity.clone()));
        f
    }
}

fn net_row(name: &str, eps: Option<f64>, net: &ReluNetwork) -> NetRow {
    let (valid, target, measured) = match &net.certificate {
        Some(c) => (c.valid, c.target_eps, c.measured_sup_error),
        None => (false, f64::NAN, f64::NAN),
    };
    NetRow {
        construction: name.into(),
        eps,
        valid,
        target,
        measured,
        depth: net.ledger.depth,
        max_width: net.ledger.max_width(),
        nonzeros: net.ledger.nonzeros,
        max_abs: net.ledger.max_abs,
    }
}

/// Builds every constructive network across the eps ladder, records the
/// certificates and ledgers, and checks the exact structural identities.
pub fn cmd_net_verify(cfg: &RunConfig) -> Result<NetVerifyReport> {
    let nv = &cfg.net_verify;
    let mut built: Vec<(String, Option<f64>, ReluNetwork)> = Vec::new();
    let d = nv.clip_dim.max(1);
    let clip = relu_net::build_clip(&vec![-1.0; d], &vec![1.0; d])?;
    let (phi1, phi2) = relu_net::build_switch(0.2, 0.7)?;
    built.push((format!("clip_d{d}"), None, clip.clone()));
    built.push(("switch_phi1".into(), None, phi1.clone()));
    built.push(("switch_phi2".into(), None, phi2.clone()));
    let atom = SplineAtom::new(vec![1], vec![0], 2)?;
    let dcfg = DiffusedNetConfig { schedule: cfg.schedule.clone(), ..DiffusedNetConfig::default() };
    let per_eps: Vec<Vec<(String, Option<f64>, ReluNetwork)>> = nv
        .eps_ladder
        .par_iter()
        .map(|&eps| -> Result<Vec<(String, Option<f64>, ReluNetwork)>> {
            let e = Some(eps);
            let (m_net, s_net) = relu_net::build_m_sigma_nets(&cfg.schedule, eps)?;
            let mut v = vec![
                ("mult_x1x2".to_string(), e, relu_net::build_mult(&[1, 1], 1.0, eps)?),
                ("mult_x1sq_x2".to_string(), e, relu_net::build_mult(&[2, 1], 1.0, eps)?),
                ("power_3".to_string(), e, relu_net::build_power(3, eps)?),
                ("inv".to_string(), e, relu_net::build_inv(eps)?),
                ("root".to_string(), e, relu_net::build_root(eps)?),
                ("exp".to_string(), e, relu_net::build_exp(eps)?),
                ("m_t".to_string(), e, m_net),
                ("sigma_t".to_string(), e, s_net),
            ];
            if nv.diffused {
                v.push(("diffused_basis_k1_j0_l2".to_string(), e, relu_net::build_diffused_basis_net_1d(&atom, eps, &dcfg)?));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    built.extend(per_eps.into_iter().flatten());

    let mut identities = vec![IdentityRow {
        identity: format!("clip_nonzeros_7d_d{d}"),
        value: clip.ledger.nonzeros as f64,
        expected: (7 * d) as f64,
        pass: clip.ledger.nonzeros == 7 * d,
    }];
    let cat = relu_net::concat(&[clip.clone(), clip.clone(), clip.clone()])?;
    identities.push(IdentityRow {
        identity: "concat_depth_sum".into(),
        value: cat.ledger.depth as f64,
        expected: (3 * clip.ledger.depth) as f64,
        pass: cat.ledger.depth == 3 * clip.ledger.depth,
    });
    let dev = (0..=10_000)
        .map(|i| {
            let t = -1.0 + 3.0 * i as f64 / 10_000.0;
            (phi1.eval_scalar(&[t]) + phi2.eval_scalar(&[t]) - 1.0).abs()
        })
        .fold(0.0, f64::max);
    identities.push(IdentityRow { identity: "switch_partition_deviation".into(), value: dev, expected: 0.0, pass: dev <= 1e-12 });
    let mult = relu_net::build_mult(&[1, 1, 1], 2.0, 1e-2)?;
    let mut rng = RngStream::new(cfg.seed).split(600).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        x[rng.random_range(0..3)] = 0.0;
        worst = worst.max(mult.eval_scalar(&x).abs());
    }
    identities.push(IdentityRow { identity: "mult_zero_propagation".into(), value: worst, expected: 0.0, pass: worst == 0.0 });

    let networks: Vec<NetRow> = built.iter().map(|(n, e, net)| net_row(n, *e, net)).collect();
    let pass = networks.iter().all(|r| r.valid) && identities.iter().all(|r| r.pass);
    let ledgers = built.into_iter().map(|(n, e, net)| (format!("{n}@{}", cell(e)), net)).collect();
    Ok(NetVerifyReport { networks, identities, pass, ledgers })
}

// ---------------------------------------------------------------- outputs

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    OracleCheck,
    Train,
    Generate,
    RateScan,
    NetVerify,
    ManifoldScan,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::OracleCheck => "oracle-check",
            Command::Train => "train",
            Command::Generate => "generate",
            Command::RateScan => "rate-scan",
            Command::NetVerify => "net-verify",
            Command::ManifoldScan => "manifold-scan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub command: String,
    pub crate_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Command-specific reproduction data (embedding matrix, densities).
    pub extra: Value,
}

/// Everything a run produces; `write` lays it out in a directory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub command: Command,
    pub pass: bool,
    pub manifest: Manifest,
    pub csv: String,
    pub json: Value,
    /// Human-readable one-line results.
    pub summary: Vec<String>,
    /// Additional `(file name, contents)` pairs.
    pub files: Vec<(String, String)>,
}

impl RunOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        std::fs::write(dir.join("report.csv"), &self.csv)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.json)?)?;
        for (name, contents) in &self.files {
            std::fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn scan_summary(label: &str, r: &RateReport) -> Vec<String> {
    let mut out: Vec<String> = r
        .rows
        .iter()
        .map(|row| match row.kind {
            RowKind::Oracle => format!("{label}oracle baseline: W1 {} TV {}", fmt_opt(row.w1), fmt_opt(row.tv)),
            RowKind::Trained => format!(
                "{label}n={}: W1 {} TV {} score-err {} girsanov-TV {} loss {}",
                row.n,
                fmt_opt(row.w1),
                fmt_opt(row.tv),
                fmt_opt(row.score_error),
                fmt_opt(row.girsanov_tv),
                fmt_opt(row.train_loss)
            ),
        })
        .collect();
    let ci = r.slope_ci.map(|(a, b)| format!("[{a:.4}, {b:.4}]")).unwrap_or_else(|| "n/a".into());
    out.push(format!("{label}fitted W1 slope {} (95% CI {ci}), W1 ratio first/last {}", fmt_opt(r.fitted_slope), fmt_opt(r.w1_ratio)));
    out.push(format!("{label}reference exponents: tv {:.4}, w1 {:.4}", r.theory_slopes.tv, r.theory_slopes.w1));
    out
}

/// Runs one command and assembles its outputs.
pub fn run(command: Command, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut extra = Value::Null;
    let mut files = Vec::new();
    let (pass, csv, json, summary) = match command {
        Command::OracleCheck => {
            let r = cmd_oracle_check(cfg)?;
            let summary = r.suites.iter().map(|s| format!("{}: {} ({} checks, {} failures, max error {:.3e})", s.suite, if s.pass { "PASS" } else { "FAIL" }, s.checks, s.failures, s.max_error)).collect();
            (r.pass, r.to_csv(&hash), serde_json::to_value(&r)?, summary)
        }
        Command::Train => {
            let r = cmd_train(cfg)?;
            files.push(("trained_score.json".to_string(), r.trained.to_json()?));
            let summary = vec![format!("trained {} intervals on n={}, final loss {:.4}", r.trained.intervals.len(), r.trained.n_data, r.final_loss)];
            let json = serde_json::json!({ "final_loss": r.final_loss, "intervals": r.trained.intervals.len(), "n_data": r.trained.n_data });
            (r.final_loss.is_finite(), r.to_csv(&hash), json, summary)
        }
        Command::Generate => {
            let r = cmd_generate(cfg)?;
            if let Some(b) = &r.batch {
                files.push(("samples.csv".to_string(), b.to_csv()));
            }
            let summary = vec![format!("{} score: {} samples, W1 {:.4}{}, TV {:.4}, resets {}", r.source, r.count, r.w1, if r.w1_sliced { " (sliced)" } else { "" }, r.tv_hist, r.resets)];
            (true, r.to_csv(&hash), serde_json::to_value(&r)?, summary)
        }
        Command::RateScan => {
            let r = cmd_rate_scan(cfg)?;
            let pass = !r.incomplete && r.slope_ci.is_some_and(|(_, hi)| hi < 0.0);
            (pass, r.to_csv(&hash), serde_json::to_value(&r)?, scan_summary("", &r))
        }
        Command::NetVerify => {
            let r = cmd_net_verify(cfg)?;
            for (name, net) in &r.ledgers {
                files.push((format!("ledger_{}.json", name.replace('@', "_eps")), serde_json::to_string(&net.ledger)?));
            }
            let mut summary: Vec<String> = r.networks.iter().map(|n| format!("{} eps={}: {} (measured {:.3e}, target {:.3e}, S={})", n.construction, cell(n.eps), if n.valid { "valid" } else { "INVALID" }, n.measured, n.target, n.nonzeros)).collect();
            summary.extend(r.identities.iter().map(|i| format!("{}: {} (value {}, expected {})", i.identity, if i.pass { "ok" } else { "FAILED" }, i.value, i.expected)));
            (r.pass, r.to_csv(&hash), serde_json::to_value(&r)?, summary)
        }
        Command::ManifoldScan => {
            let r = cmd_manifold_scan(cfg)?;
            extra = serde_json::json!({ "a": r.a, "intrinsic": r.intrinsic });
            let mut summary = scan_summary("manifold ", &r.manifold);
            summary.extend(scan_summary("full ", &r.full));
            summary.push(format!("manifold slope steeper than full: {}", r.steeper));
            let pass = r.steeper && !r.manifold.incomplete && !r.full.incomplete;
            (pass, r.to_csv(&hash), serde_json::to_value(&r)?, summary)
        }
    };
    let manifest = Manifest {
        schema: REPORT_SCHEMA,
        command: command.name().into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash,
        seed: cfg.seed,
        config: cfg.clone(),
        extra,
    };
    Ok(RunOutput { command, pass, manifest, csv, json, summary, files })
}
