//! Forward noising and the backward generative SDE
//! `dY = β (Y + 2 s(Y, T̄ - τ)) dτ + sqrt(2β) dB`, discretized with the score
//! frozen on each grid cell so that every cell transition is an exact Gaussian.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bspline::SplineDensity;
use crate::rng::{fill_std_normal, RngStream};
use crate::schedule::{BetaSchedule, TimeGrid};
use crate::score::ScoreModel;
use crate::{Error, Result};

/// Terminal points with `‖y‖_∞` at or above this value are reset to the origin.
pub const RESET_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Forward { t: f64 },
    Backward { config_hash: String },
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub t: f64,
    pub provenance: Provenance,
    /// Terminal resets applied by the backward sampler.
    pub resets: usize,
}

impl SampleBatch {
    pub fn new(dim: usize, points: Vec<Vec<f64>>, t: f64, provenance: Provenance) -> Self {
        Self { dim, points, t, provenance, resets: 0 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reset_fraction(&self) -> f64 {
        if self.points.is_empty() {
            0.0
        } else {
            self.resets as f64 / self.points.len() as f64
        }
    }

    /// Short hex digest identifying the batch origin.
    pub fn provenance_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.provenance).unwrap_or_default());
        h.update(self.t.to_le_bytes());
        hex16(&h.finalize())
    }

    /// One row per point; the first line is a comment with the provenance hash.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# difflab-samples v1 provenance={} t={}\n", self.provenance_hash(), self.t);
        let header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// `x_t = m_t x_0 + σ_t ξ` with `x_0 ~ p_0`.
pub fn forward_sample(density: &SplineDensity, schedule: &BetaSchedule, t: f64, count: usize, stream: &RngStream) -> Result<SampleBatch> {
    let s = schedule.noise_state(t)?;
    let mut points = density.sample(count, &stream.split(0));
    let mut rng = stream.split(1).rng();
    let mut xi = vec![0.0; density.dim];
    for p in points.iter_mut() {
        fill_std_normal(&mut rng, &mut xi);
        for (v, z) in p.iter_mut().zip(&xi) {
            *v = s.m * *v + s.sigma * z;
        }
    }
    Ok(SampleBatch::new(density.dim, points, t, Provenance::Forward { t }))
}

/// Gaussian law of one backward cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStep {
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Exact transition of `dY = β₀ (Y + 2c) dτ + sqrt(2β₀) dB` over forward times
/// `t_from < t_to` with the score frozen at `c`: with `Δ = β₀ (t_to - t_from)`,
/// mean `e^Δ (y + 2c) - 2c` and standard deviation `sqrt(e^{2Δ} - 1)`.
pub fn backward_step(y: &[f64], t_from: f64, t_to: f64, beta0: f64, score_value: &[f64]) -> GaussianStep {
    debug_assert!(t_from < t_to);
    let delta = beta0 * (t_to - t_from);
    let growth = delta.exp();
    let mean = y.iter().zip(score_value).map(|(v, c)| growth * (v + 2.0 * c) - 2.0 * c).collect();
    GaussianStep { mean, std: (2.0 * delta).exp_m1().sqrt() }
}

/// Runs the backward SDE from `N(0, I)` at `grid.t_hi` down to `grid.t_lo`,
/// querying the score at the upper knot of every cell, and applies the
/// terminal reset rule. Trajectory `i` draws from `stream.split(i)`.
pub fn generate(
    score: &dyn ScoreModel,
    schedule: &BetaSchedule,
    grid: &TimeGrid,
    count: usize,
    stream: &RngStream,
    config_hash: &str,
) -> Result<SampleBatch> {
    let dim = score.dim();
    let cells: Vec<(f64, f64)> = grid.cells().rev().collect();
    let states = cells.iter().map(|&(_, hi)| schedule.noise_state(hi)).collect::<Result<Vec<_>>>()?;
    let run = |i: usize| -> std::result::Result<(Vec<f64>, bool), usize> {
        let mut rng = stream.split(i as u64).rng();
        let mut y = vec![0.0; dim];
        fill_std_normal(&mut rng, &mut y);
        let mut c = vec![0.0; dim];
        let mut xi = vec![0.0; dim];
        for (step, (&(lo, hi), st)) in cells.iter().zip(&states).enumerate() {
            score.score_into(&y, st, &mut c);
            let delta = schedule.beta(hi) * (hi - lo);
            let growth = delta.exp();
            let sd = (2.0 * delta).exp_m1().sqrt();
            fill_std_normal(&mut rng, &mut xi);
            for k in 0..dim {
                y[k] = growth * (y[k] + 2.0 * c[k]) - 2.0 * c[k] + sd * xi[k];
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(step);
            }
        }
        let reset = y.iter().any(|v| v.abs() >= RESET_RADIUS);
        if reset {
            y.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok((y, reset))
    };
    let results: Vec<_> = (0..count).into_par_iter().map(run).collect();
    let mut points = Vec::with_capacity(count);
    let mut resets = 0;
    for r in results {
        match r {
            Ok((y, reset)) => {
                resets += reset as usize;
                points.push(y);
            }
            Err(step) => return Err(Error::NonFinite { step }),
        }
    }
    let mut batch = SampleBatch::new(dim, points, grid.t_lo, Provenance::Backward { config_hash: config_hash.to_string() });
    batch.resets = resets;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::normal_cdf;
    use crate::rng::std_normal;
    use crate::score::{standard_normal_score, FnScore};
    use crate::schedule::NoiseState;

    fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sample.len() as f64;
        sample
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn forward_at_zero_follows_the_density() {
        let spec = crate::bspline::DensitySpec { seed: 3, dim: 1, n_atoms: 5, max_k: 2, order_l: 2, decay_s: 1.0, amplitude: 1.5 };
        let d = crate::bspline::random_density(&spec).unwrap();
        let b = forward_sample(&d, &BetaSchedule::default(), 0.0, 10_000, &RngStream::new(1)).unwrap();
        let mut xs: Vec<f64> = b.points.iter().map(|p| p[0]).collect();
        let ks = ks_statistic(&mut xs, |x| d.cdf_1d(x));
        // 5% critical value 1.36/sqrt(n)
        assert!(ks < 1.36 / 100.0, "KS {ks}");
    }

    #[test]
    fn forward_stationary_moments_and_determinism() {
        let d = SplineDensity::uniform(1).unwrap();
        let sched = BetaSchedule::default();
        let n = 20_000;
        let b = forward_sample(&d, &sched, 50.0, n, &RngStream::new(2)).unwrap();
        let mean = b.points.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let var = b.points.iter().map(|p| (p[0] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
        assert_eq!(b, forward_sample(&d, &sched, 50.0, n, &RngStream::new(2)).unwrap());
    }

    #[test]
    fn step_with_zero_score() {
        let g = backward_step(&[0.0], 0.1, 0.3, 1.0, &[0.0]);
        assert_eq!(g.mean, vec![0.0]);
        assert!((g.std - ((0.4f64).exp() - 1.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn small_step_matches_euler() {
        let (y, c, dt) = (0.7, -0.4, 1e-6);
        let g = backward_step(&[y], 1.0, 1.0 + dt, 1.0, &[c]);
        assert!((g.mean[0] - (y + (y + 2.0 * c) * dt)).abs() < 1e-9);
        assert!((g.std - (2.0 * dt).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn step_preserves_the_standard_normal() {
        let mut rng = RngStream::new(5).rng();
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let y = std_normal(&mut rng);
            // the frozen-score step inflates the variance by 2Δ² ≈ 2e-4 here
            let g = backward_step(&[y], 0.0, 0.01, 1.0, &[-y]);
            let v = g.mean[0] + g.std * std_normal(&mut rng);
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        // SE of the sample variance of N(0,1) is sqrt(2/n)
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn stationary_score_gives_truncated_normal() {
        let grid = TimeGrid::uniform(1e-3, 5.0, 2000).unwrap();
        let b = generate(&standard_normal_score(1), &BetaSchedule::default(), &grid, 10_000, &RngStream::new(3), "t").unwrap();
        // reset points sit exactly at 0; the others follow N(0,1) restricted to (-2, 2)
        let mut xs: Vec<f64> = b.points.iter().map(|p| p[0]).filter(|&v| v != 0.0).collect();
        assert_eq!(xs.len() + b.resets, b.len());
        let mass = normal_cdf(2.0) - normal_cdf(-2.0);
        let ks = ks_statistic(&mut xs, |x| (normal_cdf(x) - normal_cdf(-2.0)) / mass);
        assert!(ks < 1.36 / (xs.len() as f64).sqrt(), "KS {ks}");
        assert!(b.points.iter().all(|p| p[0].abs() < RESET_RADIUS));
        assert!((b.reset_fraction() - (1.0 - mass)).abs() < 0.01);
    }

    #[test]
    fn empty_batch_and_nonfinite_abort() {
        let grid = TimeGrid::uniform(0.1, 1.0, 10).unwrap();
        let b = generate(&standard_normal_score(2), &BetaSchedule::default(), &grid, 0, &RngStream::new(0), "").unwrap();
        assert!(b.is_empty());
        let bad = FnScore { dim: 1, f: |_: &[f64], s: &NoiseState, out: &mut [f64]| out[0] = if s.t < 0.5 { f64::NAN } else { 0.0 } };
        match generate(&bad, &BetaSchedule::default(), &grid, 4, &RngStream::new(0), "") {
            Err(Error::NonFinite { step }) => assert_eq!(step, 6),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn csv_has_provenance_header() {
        let b = SampleBatch::new(2, vec![vec![0.5, -1.0]], 0.0, Provenance::Reference);
        let csv = b.to_csv();
        assert!(csv.starts_with("# difflab-samples v1 provenance="));
        assert_eq!(csv.lines().nth(1), Some("x0,x1"));
        assert_eq!(csv.lines().count(), 3);
    }
}
