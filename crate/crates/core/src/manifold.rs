//! Data on a linear subspace `V = image(A)` of the ambient space and the
//! induced split of the score into an intrinsic part and a Gaussian part.

use serde::{Deserialize, Serialize};

use crate::bspline::SplineDensity;
use crate::oracle::ScoreOracle;
use crate::rng::{fill_std_normal, std_normal, RngStream};
use crate::sampler::{Provenance, SampleBatch};
use crate::schedule::{BetaSchedule, NoiseState};
use crate::score::ScoreModel;
use crate::{Error, Result};

/// Tolerance on `AᵀA = I`.
pub const ORTHONORMAL_TOL: f64 = 1e-12;

/// `x = A z` with `z ~ q` on `[-1, 1]^{d'}`; `a` is row-major `d × d'`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceModel {
    pub ambient_dim: usize,
    pub a: Vec<Vec<f64>>,
    pub intrinsic: SplineDensity,
    pub schedule: BetaSchedule,
    #[serde(skip)]
    oracle: Option<ScoreOracle>,
}

impl SubspaceModel {
    pub fn new(a: Vec<Vec<f64>>, intrinsic: SplineDensity, schedule: BetaSchedule) -> Result<Self> {
        let d = a.len();
        let dp = intrinsic.dim;
        if d == 0 || a.iter().any(|row| row.len() != dp) {
            return Err(Error::Dimension { expected: dp, got: a.first().map_or(0, Vec::len) });
        }
        if dp > d {
            return Err(Error::Config(format!("intrinsic dimension {dp} exceeds ambient {d}")));
        }
        for i in 0..dp {
            for j in 0..dp {
                let g: f64 = (0..d).map(|r| a[r][i] * a[r][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (g - target).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Construction(format!("AᵀA[{i}][{j}] = {g}, columns are not orthonormal")));
                }
            }
        }
        let oracle = Some(ScoreOracle::new(intrinsic.clone(), schedule.clone()));
        Ok(Self { ambient_dim: d, a, intrinsic, schedule, oracle })
    }

    /// Orthonormalized seeded Gaussian `d × d'` matrix (modified Gram–Schmidt).
    pub fn random(ambient_dim: usize, intrinsic: SplineDensity, schedule: BetaSchedule, seed: u64) -> Result<Self> {
        let dp = intrinsic.dim;
        if dp > ambient_dim {
            return Err(Error::Config(format!("intrinsic dimension {dp} exceeds ambient {ambient_dim}")));
        }
        let mut rng = RngStream::new(seed).split(0x5_0bce).rng();
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dp);
        while cols.len() < dp {
            let mut v: Vec<f64> = (0..ambient_dim).map(|_| std_normal(&mut rng)).collect();
            // two passes keep the columns orthogonal to rounding
            for _ in 0..2 {
                for c in &cols {
                    let dot: f64 = v.iter().zip(c).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                cols.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let a = (0..ambient_dim).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
        Self::new(a, intrinsic, schedule)
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic.dim
    }

    fn oracle(&self) -> &ScoreOracle {
        self.oracle.as_ref().expect("subspace model built through new()")
    }

    /// Rebuilds the cached intrinsic oracle after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.a, self.intrinsic, self.schedule)
    }

    /// `Aᵀ x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.intrinsic.dim).map(|j| x.iter().zip(&self.a).map(|(xi, row)| xi * row[j]).sum()).collect()
    }

    /// `A z`.
    pub fn embed(&self, z: &[f64]) -> Vec<f64> {
        self.a.iter().map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    /// `P⊥ x = x - A Aᵀ x`.
    pub fn orthogonal_part(&self, x: &[f64]) -> Vec<f64> {
        let back = self.embed(&self.project(x));
        x.iter().zip(&back).map(|(a, b)| a - b).collect()
    }

    /// Exact `p_t(x) = q_t(Aᵀx) · N(P⊥x; 0, σ_t² I)` restricted to `V⊥`.
    pub fn p_t(&self, x: &[f64], t: f64) -> Result<f64> {
        let s = self.oracle().state(t)?;
        let w = self.orthogonal_part(x);
        let codim = (self.ambient_dim - self.intrinsic.dim) as f64;
        let r2: f64 = w.iter().map(|v| v * v).sum();
        let gauss = (-0.5 * r2 / (s.sigma * s.sigma)).exp() / (2.0 * std::f64::consts::PI * s.sigma * s.sigma).powf(codim / 2.0);
        Ok(self.oracle().p_t(&self.project(x), t)? * gauss)
    }

    /// `(A s_q(Aᵀx, t), -P⊥x / σ_t²)`; the first lies in `V`, the second in `V⊥`.
    pub fn score_parts(&self, x: &[f64], state: &NoiseState) -> (Vec<f64>, Vec<f64>) {
        let mut sq = vec![0.0; self.intrinsic.dim];
        self.oracle().score_into(&self.project(x), state, &mut sq);
        let inv_var = 1.0 / (state.sigma * state.sigma);
        let ortho = self.orthogonal_part(x).into_iter().map(|v| -v * inv_var).collect();
        (self.embed(&sq), ortho)
    }

    /// `m_t A z + σ_t ξ` with `z ~ q` and full-dimensional `ξ`.
    pub fn sample(&self, t: f64, count: usize, stream: &RngStream) -> Result<SampleBatch> {
        let s = self.schedule.noise_state(t)?;
        let zs = self.intrinsic.sample(count, &stream.split(0));
        let mut rng = stream.split(1).rng();
        let mut xi = vec![0.0; self.ambient_dim];
        let points = zs
            .iter()
            .map(|z| {
                fill_std_normal(&mut rng, &mut xi);
                self.embed(z).iter().zip(&xi).map(|(v, e)| s.m * v + s.sigma * e).collect()
            })
            .collect();
        Ok(SampleBatch::new(self.ambient_dim, points, t, Provenance::Forward { t }))
    }
}

impl ScoreModel for SubspaceModel {
    fn dim(&self) -> usize {
        self.ambient_dim
    }

    fn score_into(&self, x: &[f64], state: &NoiseState, out: &mut [f64]) {
        let (v, w) = self.score_parts(x, state);
        for ((o, a), b) in out.iter_mut().zip(&v).zip(&w) {
            *o = a + b;
        }
    }
}

pub fn subspace_sample(model: &SubspaceModel, t: f64, count: usize, stream: &RngStream) -> Result<SampleBatch> {
    model.sample(t, count, stream)
}

/// The full score `∇ log p_t(x)` assembled from its two orthogonal parts.
pub fn decomposed_score(model: &SubspaceModel, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if x.len() != model.ambient_dim {
        return Err(Error::Dimension { expected: model.ambient_dim, got: x.len() });
    }
    let s = model.oracle().state(t)?;
    Ok(model.score_at(x, &s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{random_density, DensitySpec};
    use crate::quadrature::GaussLegendre;
    use rand::Rng;

    fn model(seed: u64) -> SubspaceModel {
        let spec = DensitySpec { seed, dim: 1, n_atoms: 8, max_k: 4, order_l: 2, decay_s: 1.0, amplitude: 1.5 };
        SubspaceModel::random(2, random_density(&spec).unwrap(), BetaSchedule::default(), seed).unwrap()
    }

    /// `∫ q(z) N(x; m A z, σ² I) dz` by Gauss–Legendre on panels aligned with
    /// every dyadic knot of the intrinsic density.
    fn brute_p_t(m: &SubspaceModel, x: &[f64], t: f64) -> f64 {
        let s = m.schedule.noise_state(t).unwrap();
        let gl = GaussLegendre::new(16);
        let panels = 64;
        let two_pi_var = 2.0 * std::f64::consts::PI * s.sigma * s.sigma;
        let col: Vec<f64> = m.a.iter().map(|r| r[0]).collect();
        (0..panels)
            .map(|i| {
                let a = -1.0 + 2.0 * i as f64 / panels as f64;
                gl.integrate(a, a + 2.0 / panels as f64, |z| {
                    let r2: f64 = x.iter().zip(&col).map(|(xi, c)| (xi - s.m * c * z).powi(2)).sum();
                    m.intrinsic.eval(&[z]) * (-0.5 * r2 / (s.sigma * s.sigma)).exp() / two_pi_var
                })
            })
            .sum()
    }

    #[test]
    fn random_columns_are_orthonormal() {
        for seed in 0..20 {
            let m = model(seed);
            let g: f64 = m.a.iter().map(|r| r[0] * r[0]).sum();
            assert!((g - 1.0).abs() <= ORTHONORMAL_TOL);
        }
        let spec = DensitySpec { dim: 2, ..DensitySpec::default() };
        let m = SubspaceModel::random(5, random_density(&spec).unwrap(), BetaSchedule::default(), 3).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let g: f64 = m.a.iter().map(|r| r[i] * r[j]).sum();
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() <= ORTHONORMAL_TOL);
            }
        }
        let bad = vec![vec![1.0], vec![1.0]];
        assert!(SubspaceModel::new(bad, m.intrinsic.clone(), BetaSchedule::default()).is_err());
    }

    #[test]
    fn clean_samples_lie_in_the_subspace() {
        let m = model(1);
        let b = subspace_sample(&m, 0.0, 500, &RngStream::new(2)).unwrap();
        for p in &b.points {
            assert!(m.orthogonal_part(p).iter().all(|v| v.abs() <= 1e-12));
        }
    }

    #[test]
    fn late_samples_are_standard_normal() {
        let m = model(1);
        let b = subspace_sample(&m, 50.0, 40_000, &RngStream::new(3)).unwrap();
        let n = b.len() as f64;
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let c: f64 = b.points.iter().map(|p| p[i] * p[j]).sum::<f64>() / n;
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((c - target).abs() < 0.03, "cov[{i}][{j}] = {c}");
        }
        let mean: f64 = b.points.iter().map(|p| p[0]).sum::<f64>() / n;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn exact_density_matches_ambient_quadrature() {
        let m = model(4);
        for (x, t) in [([0.3, -0.2], 0.1), ([1.0, 0.5], 0.5), ([-0.4, 0.9], 2.0)] {
            let a = m.p_t(&x, t).unwrap();
            let b = brute_p_t(&m, &x, t);
            assert!((a - b).abs() <= 1e-9 * b.max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn decomposed_score_matches_finite_differences() {
        let m = model(5);
        let mut rng = RngStream::new(6).rng();
        for _ in 0..100 {
            let t = 0.05 * (40.0f64).powf(rng.random::<f64>());
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let s = decomposed_score(&m, &x, t).unwrap();
            let h = 1e-4 * m.schedule.noise_state(t).unwrap().sigma;
            let fd: Vec<f64> = (0..2)
                .map(|i| {
                    let (mut xp, mut xm) = (x, x);
                    xp[i] += h;
                    xm[i] -= h;
                    (brute_p_t(&m, &xp, t).ln() - brute_p_t(&m, &xm, t).ln()) / (2.0 * h)
                })
                .collect();
            let err = ((s[0] - fd[0]).powi(2) + (s[1] - fd[1]).powi(2)).sqrt();
            let norm = (fd[0] * fd[0] + fd[1] * fd[1]).sqrt();
            assert!(err <= 1e-3 * norm.max(1e-3), "x {x:?} t {t}: {s:?} vs {fd:?}");
        }
    }

    #[test]
    fn parts_are_orthogonal_and_in_plane_points_have_no_normal_part() {
        let m = model(7);
        let mut rng = RngStream::new(8).rng();
        for _ in 0..200 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let st = m.schedule.noise_state(rng.random_range(0.01..3.0)).unwrap();
            let (v, w) = m.score_parts(&x, &st);
            let dot = v[0] * w[0] + v[1] * w[1];
            let scale = (v[0].hypot(v[1]) * w[0].hypot(w[1])).max(1.0);
            assert!(dot.abs() <= 1e-10 * scale);
        }
        let x = m.embed(&[0.4]);
        let (_, w) = m.score_parts(&x, &m.schedule.noise_state(0.2).unwrap());
        assert!(w.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn late_score_is_minus_x() {
        let m = model(9);
        for x in [[0.5, -1.0], [2.0, 1.0]] {
            let s = decomposed_score(&m, &x, 30.0).unwrap();
            assert!((s[0] + x[0]).abs() < 1e-6 && (s[1] + x[1]).abs() < 1e-6, "{s:?}");
        }
    }
}
