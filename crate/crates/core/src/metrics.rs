//! Distances between sample batches and time-integrated score errors.

use serde::{Deserialize, Serialize};

use crate::oracle::ScoreOracle;
use crate::quadrature::GaussLegendre;
use crate::rng::{std_normal, RngStream};
use crate::sampler::forward_sample;
use crate::schedule::TimeGrid;
use crate::score::ScoreModel;
use crate::{Error, Result};

/// Number of projection directions of the sliced distance.
pub const SLICES: usize = 64;
/// Histograms cover `[-HIST_RADIUS, HIST_RADIUS]^d`.
pub const HIST_RADIUS: f64 = 2.0;
/// Gauss–Legendre nodes per time-grid cell in the score-error integrals.
const T_NODES_PER_CELL: usize = 2;

/// Exact W1 between two 1D empirical measures, `∫ |F_a - F_b|`.
/// For equal sizes this is the mean gap between order statistics.
pub fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    w1_sorted(&a, &b)
}

/// [`w1_1d`] for inputs already sorted ascending.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => break,
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    total
}

/// Fixed unit directions: evenly spaced half-circle angles in 2D, seeded
/// Gaussian directions in higher dimension.
pub fn slice_directions(dim: usize) -> Vec<Vec<f64>> {
    if dim == 2 {
        return (0..SLICES)
            .map(|k| {
                let th = std::f64::consts::PI * k as f64 / SLICES as f64;
                vec![th.cos(), th.sin()]
            })
            .collect();
    }
    let mut rng = RngStream::new(0x51_1ce5).rng();
    (0..SLICES)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| std_normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W1 {
    pub value: f64,
    /// True when the value is the sliced average over projections.
    pub sliced: bool,
}

fn check_dims(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    let da = a.first().map(Vec::len);
    let db = b.first().map(Vec::len);
    match (da, db) {
        (Some(x), Some(y)) if x != y => Err(Error::Dimension { expected: x, got: y }),
        (Some(x), _) | (None, Some(x)) => Ok(x),
        (None, None) => Ok(0),
    }
}

/// W1 in 1D, sliced W1 in higher dimension.
pub fn w1_empirical(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<W1> {
    let d = check_dims(a, b)?;
    if d <= 1 {
        let xa: Vec<f64> = a.iter().map(|p| p[0]).collect();
        let xb: Vec<f64> = b.iter().map(|p| p[0]).collect();
        return Ok(W1 { value: w1_1d(&xa, &xb), sliced: false });
    }
    let dirs = slice_directions(d);
    let proj = |pts: &[Vec<f64>], u: &[f64]| -> Vec<f64> { pts.iter().map(|p| p.iter().zip(u).map(|(x, y)| x * y).sum()).collect() };
    let total: f64 = dirs.iter().map(|u| w1_1d(&proj(a, u), &proj(b, u))).sum();
    Ok(W1 { value: total / dirs.len() as f64, sliced: true })
}

/// A reference batch projected on the slicing directions and sorted once,
/// for repeated W1 evaluations against the same reference.
#[derive(Debug, Clone)]
pub struct ProjectedReference {
    pub dim: usize,
    dirs: Vec<Vec<f64>>,
    sorted: Vec<Vec<f64>>,
}

fn project_sorted(points: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = points.iter().map(|p| p.iter().zip(u).map(|(x, y)| x * y).sum()).collect();
    v.sort_by(f64::total_cmp);
    v
}

impl ProjectedReference {
    pub fn new(reference: &[Vec<f64>]) -> Result<Self> {
        let dim = check_dims(reference, reference)?;
        let dirs = if dim <= 1 { vec![vec![1.0]] } else { slice_directions(dim) };
        let sorted = dirs.iter().map(|u| project_sorted(reference, u)).collect();
        Ok(Self { dim, dirs, sorted })
    }

    /// Same value as [`w1_empirical`] against the stored reference.
    pub fn w1(&self, points: &[Vec<f64>]) -> Result<W1> {
        if let Some(p) = points.first() {
            if p.len() != self.dim {
                return Err(Error::Dimension { expected: self.dim, got: p.len() });
            }
        }
        let total: f64 = self.dirs.iter().zip(&self.sorted).map(|(u, r)| w1_sorted(&project_sorted(points, u), r)).sum();
        Ok(W1 { value: total / self.dirs.len() as f64, sliced: self.dim > 1 })
    }
}

fn bin_index(p: &[f64], bins: usize) -> usize {
    let width = 2.0 * HIST_RADIUS / bins as f64;
    let mut idx = 0;
    for &v in p {
        if !(v >= -HIST_RADIUS && v < HIST_RADIUS) {
            // single overflow cell after all regular ones
            return bins.pow(p.len() as u32);
        }
        let k = (((v + HIST_RADIUS) / width) as usize).min(bins - 1);
        idx = idx * bins + k;
    }
    idx
}

/// `½ Σ |p̂ - q̂|` over a shared grid of `bins` cells per axis on
/// `[-2, 2]^d`, with one extra cell collecting everything outside.
pub fn tv_histogram(a: &[Vec<f64>], b: &[Vec<f64>], bins: usize) -> Result<f64> {
    let d = check_dims(a, b)?;
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(0.0);
    }
    let cells = bins.pow(d as u32) + 1;
    let mut ha = vec![0.0; cells];
    let mut hb = vec![0.0; cells];
    for p in a {
        ha[bin_index(p, bins)] += 1.0;
    }
    for p in b {
        hb[bin_index(p, bins)] += 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    Ok(0.5 * ha.iter().zip(&hb).map(|(x, y)| (x / na - y / nb).abs()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub w1: f64,
    pub w1_sliced: bool,
    pub tv_hist: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub bins: usize,
}

pub fn distance_report(a: &[Vec<f64>], b: &[Vec<f64>], bins: usize) -> Result<DistanceReport> {
    let w = w1_empirical(a, b)?;
    Ok(DistanceReport { w1: w.value, w1_sliced: w.sliced, tv_hist: tv_histogram(a, b, bins)?, n_a: a.len(), n_b: b.len(), bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

/// Monte Carlo estimate of `E_{p_t} ‖ŝ - s°‖²` at one quadrature node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeError {
    pub t: f64,
    /// Gauss–Legendre weight of the node.
    pub weight: f64,
    pub mean: f64,
    /// Variance of `mean`.
    pub variance: f64,
}

/// Per-node squared score errors over the grid span: Gauss–Legendre nodes in
/// every grid cell, `mc_count` draws of `x ~ p_t` per node from `draw`.
pub fn node_score_errors(
    shat: &dyn ScoreModel,
    truth: &dyn ScoreModel,
    schedule: &crate::schedule::BetaSchedule,
    grid: &TimeGrid,
    mc_count: usize,
    stream: &RngStream,
    draw: impl Fn(f64, usize, &RngStream) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<NodeError>> {
    if mc_count < 2 {
        return Err(Error::Config("score error needs at least two draws per node".into()));
    }
    if shat.dim() != truth.dim() {
        return Err(Error::Dimension { expected: truth.dim(), got: shat.dim() });
    }
    let gl = GaussLegendre::new(T_NODES_PER_CELL);
    let d = truth.dim();
    let mut s_hat = vec![0.0; d];
    let mut s_true = vec![0.0; d];
    let mut out = Vec::new();
    for (lo, hi) in grid.cells() {
        for (t, weight) in gl.mapped(lo, hi) {
            let st = schedule.noise_state(t)?;
            let points = draw(t, mc_count, &stream.split(out.len() as u64))?;
            let (mut sum, mut sum2) = (0.0, 0.0);
            for x in &points {
                shat.score_into(x, &st, &mut s_hat);
                truth.score_into(x, &st, &mut s_true);
                let e: f64 = s_hat.iter().zip(&s_true).map(|(a, b)| (a - b).powi(2)).sum();
                sum += e;
                sum2 += e * e;
            }
            let n = points.len() as f64;
            let mean = sum / n;
            out.push(NodeError { t, weight, mean, variance: (sum2 / n - mean * mean).max(0.0) / n });
        }
    }
    Ok(out)
}

/// `Σ w_i λ(t_i) mean_i` with its standard error.
pub fn integrate_nodes(nodes: &[NodeError], lambda: impl Fn(f64) -> f64) -> Estimate {
    let (mut value, mut var) = (0.0, 0.0);
    for n in nodes {
        let w = n.weight * lambda(n.t);
        value += w * n.mean;
        var += w * w * n.variance;
    }
    Estimate { value, std_err: var.sqrt() }
}

/// Girsanov KL bound `∫ β_t E ‖ŝ - s°‖² dt` from node errors, with Pinsker's TV.
pub fn girsanov_from_nodes(nodes: &[NodeError], schedule: &crate::schedule::BetaSchedule) -> GirsanovBound {
    let e = integrate_nodes(nodes, |t| schedule.beta(t));
    GirsanovBound { kl: e.value, kl_std_err: e.std_err, tv: (0.5 * e.value.max(0.0)).sqrt() }
}

fn oracle_nodes(shat: &dyn ScoreModel, oracle: &ScoreOracle, grid: &TimeGrid, mc_count: usize, stream: &RngStream) -> Result<Vec<NodeError>> {
    node_score_errors(shat, oracle, &oracle.schedule, grid, mc_count, stream, |t, count, s| {
        Ok(forward_sample(&oracle.density, &oracle.schedule, t, count, s)?.points)
    })
}

/// `∫_{T_}^{T̄} E_{p_t} ‖ŝ(x, t) - ∇ log p_t(x)‖² dt`.
pub fn score_error_integral(shat: &dyn ScoreModel, oracle: &ScoreOracle, grid: &TimeGrid, mc_count: usize, stream: &RngStream) -> Result<Estimate> {
    Ok(integrate_nodes(&oracle_nodes(shat, oracle, grid, mc_count, stream)?, |_| 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GirsanovBound {
    /// `∫ β_t E_{p_t} ‖ŝ - s°‖² dt`, a bound on the KL divergence of the outputs.
    pub kl: f64,
    pub kl_std_err: f64,
    /// Pinsker: `sqrt(KL / 2)`.
    pub tv: f64,
}

/// Path-space KL bound for drifts differing by `2β(ŝ - s°)` under diffusion
/// `sqrt(2β)`, converted to total variation by Pinsker's inequality.
pub fn girsanov_bound(shat: &dyn ScoreModel, oracle: &ScoreOracle, grid: &TimeGrid, mc_count: usize, stream: &RngStream) -> Result<GirsanovBound> {
    Ok(girsanov_from_nodes(&oracle_nodes(shat, oracle, grid, mc_count, stream)?, &oracle.schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::SplineDensity;
    use crate::quadrature::normal_cdf;
    use crate::rng::std_normal;
    use crate::schedule::BetaSchedule;
    use crate::score::{FnScore, OffsetScore};
    use proptest::prelude::*;
    use rand::Rng;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    /// Optimal matching cost over all permutations.
    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        fn rec(a: &[f64], b: &mut Vec<f64>, k: usize, acc: f64, best: &mut f64) {
            if k == a.len() {
                *best = best.min(acc);
                return;
            }
            for i in k..b.len() {
                b.swap(k, i);
                rec(a, b, k + 1, acc + (a[k] - b[k]).abs(), best);
                b.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        rec(a, &mut b.to_vec(), 0, 0.0, &mut best);
        best / a.len() as f64
    }

    #[test]
    fn w1_examples() {
        let a = pts(&[0.3, -1.0, 2.0]);
        assert_eq!(w1_empirical(&a, &a).unwrap().value, 0.0);
        assert_eq!(w1_empirical(&pts(&[0.0, 0.0]), &pts(&[1.0, 1.0])).unwrap().value, 1.0);
        let v = w1_empirical(&pts(&[0.0, 1.0, 2.0]), &pts(&[0.0, 1.0, 3.0])).unwrap().value;
        assert!((v - brute_force(&[0.0, 1.0, 2.0], &[0.0, 1.0, 3.0])).abs() < 1e-15);
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(w1_empirical(&pts(&[0.0]), &[vec![0.0, 1.0]]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unequal_sizes_use_the_cdf_integral() {
        // {0, 1} vs {0, 0.5, 1}: ∫|F_a - F_b| = 0.5·(1/6) + 0.5·(1/6)
        assert!((w1_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]) - 1.0 / 6.0).abs() < 1e-15);
        // replicating a batch does not change the measure
        let a = [0.2, -0.4, 1.3];
        let b: Vec<f64> = a.iter().chain(&a).copied().collect();
        assert!(w1_1d(&a, &b).abs() < 1e-15);
    }

    #[test]
    fn sliced_w1_of_a_shift() {
        // a shift by v moves every projection by <u, v>; the mean |<u, v>| over
        // the half circle is 2|v|/π for the evenly spaced directions
        let mut rng = RngStream::new(1).rng();
        let a: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 0.3, p[1]]).collect();
        let w = w1_empirical(&a, &b).unwrap();
        assert!(w.sliced);
        let expected: f64 = slice_directions(2).iter().map(|u| (0.3 * u[0]).abs()).sum::<f64>() / SLICES as f64;
        assert!((w.value - expected).abs() < 1e-12);
        assert!((expected - 0.6 / std::f64::consts::PI).abs() < 1e-3);
        let r = ProjectedReference::new(&b).unwrap();
        assert_eq!(r.w1(&a).unwrap().value, w.value);
    }

    #[test]
    fn tv_examples() {
        let a = pts(&[0.1, 0.5, -0.3]);
        assert_eq!(tv_histogram(&a, &a, 50).unwrap(), 0.0);
        assert_eq!(tv_histogram(&pts(&[-1.5, -1.2]), &pts(&[1.0, 1.7]), 50).unwrap(), 1.0);
        assert_eq!(tv_histogram(&pts(&[-1.5]), &pts(&[7.0]), 50).unwrap(), 1.0);
    }

    #[test]
    fn tv_between_shifted_normals() {
        let mut rng = RngStream::new(2).rng();
        let n = 100_000;
        let a: Vec<Vec<f64>> = (0..n).map(|_| vec![std_normal(&mut rng)]).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| vec![0.5 + std_normal(&mut rng)]).collect();
        let exact = 2.0 * normal_cdf(0.25) - 1.0;
        assert!((exact - 0.197_412_6).abs() < 1e-6);
        let tv = tv_histogram(&a, &b, 100).unwrap();
        assert!((tv - exact).abs() < 0.02, "tv {tv} exact {exact}");
    }

    fn uniform_oracle() -> ScoreOracle {
        ScoreOracle::new(SplineDensity::uniform(1).unwrap(), BetaSchedule::default())
    }

    #[test]
    fn exact_score_has_zero_error_and_shift_gives_plug_in_value() {
        let oracle = uniform_oracle();
        let grid = TimeGrid::geometric(0.01, 2.0, 0.02, 2.0).unwrap();
        let e = score_error_integral(&oracle, &oracle, &grid, 64, &RngStream::new(0)).unwrap();
        assert_eq!(e.value, 0.0);
        let shifted = OffsetScore { base: &oracle, offset: vec![0.3] };
        let e = score_error_integral(&shifted, &oracle, &grid, 64, &RngStream::new(0)).unwrap();
        let exact = 0.09 * (2.0 - 0.01);
        assert!((e.value - exact).abs() <= 3.0 * e.std_err + 1e-12, "{e:?} vs {exact}");
        let g = girsanov_bound(&shifted, &oracle, &grid, 64, &RngStream::new(0)).unwrap();
        assert!((g.kl - exact).abs() < 1e-12);
        assert!((g.tv - 0.3 * ((2.0 - 0.01) / 2.0f64).sqrt()).abs() < 1e-12);
        assert_eq!(girsanov_bound(&oracle, &oracle, &grid, 64, &RngStream::new(0)).unwrap().tv, 0.0);
    }

    #[test]
    fn zero_score_error_matches_quadrature() {
        let oracle = uniform_oracle();
        let grid = TimeGrid::geometric(0.05, 1.0, 0.1, 2.0).unwrap();
        let zero = FnScore { dim: 1, f: |_: &[f64], _: &crate::schedule::NoiseState, o: &mut [f64]| o[0] = 0.0 };
        let mc = score_error_integral(&zero, &oracle, &grid, 4000, &RngStream::new(7)).unwrap();
        // ∫∫ s°² p_t dx dt by Gauss–Legendre in both variables
        let gl = GaussLegendre::new(64);
        let mut quad = 0.0;
        for (lo, hi) in grid.cells() {
            for (t, wt) in GaussLegendre::new(8).mapped(lo, hi) {
                let s = oracle.state(t).unwrap();
                let r = s.m + 8.0 * s.sigma;
                let mut inner = 0.0;
                for k in 0..16 {
                    let a = -r + 2.0 * r * k as f64 / 16.0;
                    inner += gl.integrate(a, a + 2.0 * r / 16.0, |x| {
                        let p = oracle.p_t(&[x], t).unwrap();
                        let sc = oracle.score(&[x], t, None).unwrap()[0];
                        p * sc * sc
                    });
                }
                quad += wt * inner;
            }
        }
        assert!((mc.value - quad).abs() <= 0.05 * quad, "mc {} quad {quad}", mc.value);
    }

    proptest! {
        #[test]
        fn w1_matches_exhaustive_matching(a in prop::collection::vec(-3.0f64..3.0, 1..7), seed in 0u64..1000) {
            let mut rng = RngStream::new(seed).rng();
            let b: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = w1_1d(&a, &b);
            prop_assert!((w - brute_force(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_permutation_invariant(a in prop::collection::vec(-3.0f64..3.0, 2..40), shift in -1.0f64..1.0) {
            let b: Vec<f64> = a.iter().map(|x| x * 0.7 + shift).collect();
            let mut ra = a.clone();
            ra.reverse();
            let (pa, pb, pra) = (pts(&a), pts(&b), pts(&ra));
            prop_assert!((w1_empirical(&pa, &pb).unwrap().value - w1_empirical(&pra, &pb).unwrap().value).abs() < 1e-12);
            prop_assert_eq!(tv_histogram(&pa, &pb, 20).unwrap(), tv_histogram(&pra, &pb, 20).unwrap());
            let tv = tv_histogram(&pa, &pb, 20).unwrap();
            prop_assert!((0.0..=1.0).contains(&tv));
        }
    }
}
