//! Exact `p_t`, `∇p_t` and score for spline densities via the diffused
//! B-spline basis.
//!
//! For an atom `M_{k,j}` the Gaussian convolution factorizes over axes into
//! `D(x) = ∫ N_l(2^k y - j) φ_σ(x - m y) dy` and its companion
//! `G(x) = ∫ N_l(2^k y - j) (x - m y)/σ² φ_σ(x - m y) dy = -∂D/∂x`.
//! Each 1-axis integral is restricted to the clipping window
//! `x/m ± (σ C / m) sqrt(log 1/ε)` intersected with the atom support and the
//! box, split at spline knots and at bounded standardized width, and
//! integrated by Gauss–Legendre. The constant baseline uses the closed form
//! in terms of the normal CDF.

use serde::{Deserialize, Serialize};

use crate::bspline::{SplineAtom, SplineDensity};
use crate::quadrature::{normal_mass, normal_pdf, GaussLegendre};
use crate::schedule::{BetaSchedule, NoiseState, T_FLOOR};
use crate::score::ScoreModel;
use crate::{Error, Result};

/// Maximum standardized width `m Δy / σ` of one quadrature panel.
const MAX_PANEL_WIDTH: f64 = 8.0;
const MAX_DIM: usize = 3;
/// Lighter rules for panels of small standardized width, where the Gaussian
/// factor is nearly polynomial: `(max width, nodes)`, narrowest first.
const NARROW_RULES: [(f64, usize); 2] = [(0.5, 8), (2.0, 16)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub quad_nodes: usize,
    /// Radius constant `C` of the clipping window; `None` selects `2 sqrt(l + d + 2)`.
    pub clip_const: Option<f64>,
    pub clip_eps: f64,
    pub t_floor: f64,
    pub p_floor: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { quad_nodes: 32, clip_const: None, clip_eps: 1e-12, t_floor: T_FLOOR, p_floor: 1e-300 }
    }
}

/// `E^(1)` and `E^(2)` of one atom at `(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedBasisEval {
    pub e1: f64,
    pub e2: Vec<f64>,
    pub t: f64,
    pub x: Vec<f64>,
}

/// Deliberate corruption used to check that the property suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub density_scale: f64,
    pub score_offset: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self { density_scale: 1.0, score_offset: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOracle {
    pub density: SplineDensity,
    pub schedule: BetaSchedule,
    pub config: OracleConfig,
    pub clip_const: f64,
    pub corruption: Corruption,
    gl: GaussLegendre,
    narrow: Vec<(f64, GaussLegendre)>,
}

/// Outcome of the two-sided exponential envelope test on `p_t(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsCheck {
    pub pass: bool,
    pub p: f64,
    pub lower: f64,
    pub upper: f64,
    /// `p / upper`; above 1 means the upper envelope was violated.
    pub ratio: f64,
}

impl ScoreOracle {
    pub fn new(density: SplineDensity, schedule: BetaSchedule) -> Self {
        Self::with_config(density, schedule, OracleConfig::default())
    }

    pub fn with_config(density: SplineDensity, schedule: BetaSchedule, config: OracleConfig) -> Self {
        let l = density.atoms.iter().map(|a| a.order_l).max().unwrap_or(0);
        let clip_const = config.clip_const.unwrap_or_else(|| 2.0 * ((l as usize + density.dim + 2) as f64).sqrt());
        let gl = GaussLegendre::new(config.quad_nodes);
        let narrow = NARROW_RULES
            .iter()
            .filter(|&&(_, n)| n < config.quad_nodes)
            .map(|&(w, n)| (w, GaussLegendre::new(n)))
            .collect();
        Self { density, schedule, config, clip_const, corruption: Corruption::default(), gl, narrow }
    }

    pub fn corrupted(mut self, corruption: Corruption) -> Self {
        self.corruption = corruption;
        self
    }

    pub fn dim(&self) -> usize {
        self.density.dim
    }

    pub fn state(&self, t: f64) -> Result<NoiseState> {
        if !(t >= self.config.t_floor) {
            return Err(Error::Domain(format!("t = {t} is below the oracle floor {}", self.config.t_floor)));
        }
        self.schedule.noise_state(t)
    }

    /// Half-width of the clipping window in standardized units.
    fn window_halfwidth(&self) -> f64 {
        self.clip_const * (1.0 / self.config.clip_eps).ln().sqrt()
    }

    /// `(D, G)` of one atom along one axis.
    fn atom_axis(&self, atom: &SplineAtom, axis: usize, x: f64, s: &NoiseState) -> (f64, f64) {
        let (m, sigma) = (s.m, s.sigma);
        let half = self.window_halfwidth() * sigma / m;
        let (sup_lo, sup_hi) = atom.support(axis);
        let r = self.density.domain_halfwidth;
        let lo = (x / m - half).max(sup_lo).max(-r);
        let hi = (x / m + half).min(sup_hi).min(r);
        if !(hi > lo) {
            return (0.0, 0.0);
        }
        let inv_s = 1.0 / sigma;
        let max_panel = MAX_PANEL_WIDTH * sigma / m;
        let (mut d, mut g) = (0.0, 0.0);
        let mut integrate = |a: f64, b: f64| {
            let pieces = ((b - a) / max_panel).ceil().max(1.0) as usize;
            let h = (b - a) / pieces as f64;
            let width = m * h * inv_s;
            let gl = self.narrow.iter().find(|(w, _)| width <= *w).map_or(&self.gl, |(_, r)| r);
            for p in 0..pieces {
                let a0 = a + h * p as f64;
                for (y, w) in gl.mapped(a0, a0 + h) {
                    let z = (x - m * y) * inv_s;
                    let v = w * atom.axis_value(axis, y) * normal_pdf(z) * inv_s;
                    d += v;
                    g += v * z * inv_s;
                }
            }
        };
        let knots = atom.knots(axis);
        let mut a = lo;
        for &kn in knots.iter().filter(|&&kn| kn > lo && kn < hi) {
            integrate(a, kn);
            a = kn;
        }
        integrate(a, hi);
        (d, g)
    }

    /// `(D, G)` of the constant `1[|y| ≤ r]` along one axis.
    fn baseline_axis(&self, x: f64, s: &NoiseState) -> (f64, f64) {
        let (m, sigma) = (s.m, s.sigma);
        let r = self.density.domain_halfwidth;
        if m * r / sigma < 0.5 {
            // the box is narrow on the noise scale; the Φ difference would cancel
            let gl = &self.gl;
            let (mut d, mut g) = (0.0, 0.0);
            for (y, w) in gl.mapped(-r, r) {
                let z = (x - m * y) / sigma;
                let v = w * normal_pdf(z) / sigma;
                d += v;
                g += v * z / sigma;
            }
            return (d, g);
        }
        let a = (x - m * r) / sigma;
        let b = (x + m * r) / sigma;
        (normal_mass(a, b) / m, (normal_pdf(a) - normal_pdf(b)) / (m * sigma))
    }

    /// `E^(1)` and `E^(2)` for one atom (tensor product over axes).
    pub fn diffused_basis(&self, atom: &SplineAtom, x: &[f64], t: f64) -> Result<DiffusedBasisEval> {
        let s = self.state(t)?;
        let dim = x.len();
        if atom.dim() != dim {
            return Err(Error::Dimension { expected: atom.dim(), got: dim });
        }
        let axes: Vec<(f64, f64)> = (0..dim).map(|i| self.atom_axis(atom, i, x[i], &s)).collect();
        let e1 = axes.iter().map(|a| a.0).product();
        let e2 = (0..dim)
            .map(|i| {
                s.sigma * axes[i].1 * axes.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, a)| a.0).product::<f64>()
            })
            .collect();
        Ok(DiffusedBasisEval { e1, e2, t, x: x.to_vec() })
    }

    /// `p_t(x)` and `∇p_t(x)` for a valid state.
    pub fn density_and_grad(&self, x: &[f64], s: &NoiseState, grad: &mut [f64]) -> f64 {
        let dim = self.density.dim;
        debug_assert!(dim <= MAX_DIM);
        let mut dd = [0.0; MAX_DIM];
        let mut gg = [0.0; MAX_DIM];
        for i in 0..dim {
            let (d, g) = self.baseline_axis(x[i], s);
            dd[i] = d;
            gg[i] = g;
        }
        let b = self.density.baseline;
        let mut p = b * dd[..dim].iter().product::<f64>();
        for i in 0..dim {
            grad[i] = -b * gg[i] * prod_except(&dd[..dim], i);
        }
        for (atom, alpha) in self.density.atoms.iter().zip(&self.density.alphas) {
            let mut zero = false;
            for i in 0..dim {
                let (d, g) = self.atom_axis(atom, i, x[i], s);
                dd[i] = d;
                gg[i] = g;
                zero |= d == 0.0 && g == 0.0;
            }
            if zero {
                continue;
            }
            p += alpha * dd[..dim].iter().product::<f64>();
            for i in 0..dim {
                grad[i] -= alpha * gg[i] * prod_except(&dd[..dim], i);
            }
        }
        let scale = self.corruption.density_scale / self.density.normalizer;
        for g in grad.iter_mut().take(dim) {
            *g *= scale;
        }
        (p * scale).max(0.0)
    }

    pub fn p_t(&self, x: &[f64], t: f64) -> Result<f64> {
        let s = self.state(t)?;
        let mut g = vec![0.0; x.len()];
        Ok(self.density_and_grad(x, &s, &mut g))
    }

    pub fn grad_p_t(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let s = self.state(t)?;
        let mut g = vec![0.0; x.len()];
        self.density_and_grad(x, &s, &mut g);
        Ok(g)
    }

    /// `∇ log p_t(x)`; with `clipped`, the norm is capped at
    /// `clip_mult · sqrt(log 1/ε) / σ_t`.
    pub fn score(&self, x: &[f64], t: f64, clipped: Option<f64>) -> Result<Vec<f64>> {
        let s = self.state(t)?;
        let mut out = vec![0.0; x.len()];
        self.score_state(x, &s, &mut out);
        if let Some(clip_mult) = clipped {
            let cap = clip_mult * (1.0 / self.config.clip_eps).ln().sqrt() / s.sigma;
            clip_norm(&mut out, cap);
        }
        Ok(out)
    }

    fn score_state(&self, x: &[f64], s: &NoiseState, out: &mut [f64]) {
        let p = self.density_and_grad(x, s, out).max(self.config.p_floor);
        for o in out.iter_mut() {
            *o = *o / p + self.corruption.score_offset;
        }
    }

    /// Exact constant of the two-sided envelope
    /// `K⁻¹ exp(-d r₊²/σ²) ≤ p_t(x) ≤ K exp(-r₊²/(2σ²))`, `r = ‖x‖_∞ - m_t`:
    /// `K = C_f · max(2^{d/2}, (π/2)^{d/2} e^{4d})`.
    pub fn envelope_constant(&self) -> f64 {
        let d = self.density.dim as f64;
        let c_f = self.density.c_f;
        let upper = c_f * 2f64.powf(d / 2.0);
        let lower = c_f * (std::f64::consts::FRAC_PI_2).powf(d / 2.0) * (4.0 * d).exp();
        upper.max(lower)
    }

    /// Envelope `(lower, upper)` at `(x, t)`.
    pub fn envelope(&self, x: &[f64], s: &NoiseState) -> (f64, f64) {
        let k = self.envelope_constant();
        let d = self.density.dim as f64;
        let norm_inf = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let r = (norm_inf - s.m).max(0.0) / s.sigma;
        ((-d * r * r).exp() / k, k * (-0.5 * r * r).exp())
    }

    pub fn check_value(&self, p: f64, x: &[f64], s: &NoiseState) -> BoundsCheck {
        let (lower, upper) = self.envelope(x, s);
        BoundsCheck { pass: p >= lower && p <= upper, p, lower, upper, ratio: p / upper }
    }

    pub fn density_bounds_check(&self, x: &[f64], t: f64) -> Result<BoundsCheck> {
        let s = self.state(t)?;
        let mut g = vec![0.0; x.len()];
        let p = self.density_and_grad(x, &s, &mut g);
        Ok(self.check_value(p, x, &s))
    }
}

impl ScoreModel for ScoreOracle {
    fn dim(&self) -> usize {
        self.density.dim
    }

    fn score_into(&self, x: &[f64], state: &NoiseState, out: &mut [f64]) {
        self.score_state(x, state, out)
    }
}

fn prod_except(v: &[f64], skip: usize) -> f64 {
    v.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, x)| x).product()
}

pub(crate) fn clip_norm(v: &mut [f64], cap: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > cap {
        let s = cap / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{random_density, DensitySpec};
    use crate::quadrature::normal_cdf;
    use crate::rng::RngStream;
    use rand::Rng;

    fn random_oracle(seed: u64) -> ScoreOracle {
        let d = random_density(&DensitySpec { seed, n_atoms: 10, ..Default::default() }).unwrap();
        ScoreOracle::new(d, BetaSchedule::default())
    }

    /// `D` of the order-0 atom covering `[-1, 1]`, by the error function.
    fn erf_uniform_atom(x: f64, m: f64, sigma: f64) -> f64 {
        (normal_cdf((x + m) / sigma) - normal_cdf((x - m) / sigma)) / (2.0 * m)
    }

    #[test]
    fn order_zero_atom_matches_erf_closed_form() {
        // N_0(y/2 + 1/2)... use k=0 wide atom: N_0(2^0 y - j) on [j, j+1]; two
        // adjacent unit atoms cover [-1, 1]
        let o = ScoreOracle::new(crate::bspline::SplineDensity::uniform(1).unwrap(), BetaSchedule::default());
        let left = SplineAtom::new(vec![0], vec![-1], 0).unwrap();
        let right = SplineAtom::new(vec![0], vec![0], 0).unwrap();
        for &t in &[1e-4, 0.01, 0.1, 1.0, 5.0] {
            let s = o.state(t).unwrap();
            for i in 0..41 {
                let x = -2.0 + 0.1 * i as f64;
                let e = o.diffused_basis(&left, &[x], t).unwrap().e1 + o.diffused_basis(&right, &[x], t).unwrap().e1;
                let closed = 2.0 * erf_uniform_atom(x, s.m, s.sigma);
                assert!((e - closed).abs() < 1e-8, "t={t} x={x} quad={e} erf={closed}");
            }
        }
    }

    #[test]
    fn narrow_rules_match_full_rule() {
        let o = random_oracle(7);
        let mut reference = o.clone();
        reference.narrow.clear();
        let mut rng = RngStream::new(8).rng();
        for _ in 0..300 {
            let t = 10f64.powf(rng.gen_range(-3.0..1.0));
            let x = rng.gen_range(-3.0..3.0);
            let s = o.state(t).unwrap();
            let (mut g1, mut g2) = ([0.0], [0.0]);
            let p1 = o.density_and_grad(&[x], &s, &mut g1);
            let p2 = reference.density_and_grad(&[x], &s, &mut g2);
            assert!((p1 - p2).abs() <= 1e-12 * p2.abs().max(1e-3), "t={t} x={x}: {p1} vs {p2}");
            assert!((g1[0] - g2[0]).abs() <= 1e-11 * (g2[0].abs() + p2), "t={t} x={x}: {} vs {}", g1[0], g2[0]);
        }
    }

    #[test]
    fn far_atom_is_clipped() {
        let o = random_oracle(1);
        let atom = SplineAtom::new(vec![3], vec![4], 3).unwrap(); // support [0.5, 1]
        let e = o.diffused_basis(&atom, &[-0.9], 1e-3).unwrap();
        assert!(e.e1 <= o.config.clip_eps);
        // wide trapezoid reference agrees
        let s = o.state(1e-3).unwrap();
        let h = 1e-6;
        let wide: f64 = (0..1_000_000).map(|i| {
            let y = -1.0 + (i as f64 + 0.5) * 2.0 * h;
            atom.axis_value(0, y) * normal_pdf((-0.9 - s.m * y) / s.sigma) / s.sigma * 2.0 * h
        }).sum();
        assert!((e.e1 - wide).abs() <= o.config.clip_eps);
    }

    #[test]
    fn large_time_limit() {
        let o = random_oracle(2);
        let atom = o.density.atoms[0].clone();
        let mass = atom.mass_in_box(1.0);
        let x = 0.7;
        let e = o.diffused_basis(&atom, &[x], 40.0).unwrap();
        assert!((e.e1 - mass * normal_pdf(x)).abs() < 1e-6);
    }

    #[test]
    fn uniform_small_time_and_stationary_values() {
        let u = ScoreOracle::new(crate::bspline::SplineDensity::uniform(1).unwrap(), BetaSchedule::default());
        assert!((u.p_t(&[0.0], 1e-8).unwrap() - 0.5).abs() < 1e-4);
        let o = random_oracle(3);
        assert!((o.p_t(&[0.0], 50.0).unwrap() - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn mass_is_conserved() {
        let o = random_oracle(4);
        let gl = GaussLegendre::new(64);
        for &t in &[0.01, 0.1, 1.0] {
            let panels = 400;
            let mut mass = 0.0;
            for p in 0..panels {
                let a = -10.0 + 20.0 * p as f64 / panels as f64;
                mass += gl.integrate(a, a + 20.0 / panels as f64, |x| o.p_t(&[x], t).unwrap());
            }
            assert!((mass - 1.0).abs() < 1e-6, "t={t} mass={mass}");
        }
    }

    #[test]
    fn stationary_score_is_minus_x() {
        let o = random_oracle(5);
        for &x in &[0.3, -1.2, 2.5] {
            let s = o.score(&[x], 50.0, None).unwrap();
            assert!((s[0] + x).abs() < 1e-5);
        }
    }

    #[test]
    fn symmetric_density_has_zero_score_at_origin() {
        let atoms = vec![
            SplineAtom::new(vec![2], vec![-3], 3).unwrap(),
            SplineAtom::new(vec![2], vec![-1], 3).unwrap(),
        ];
        // supports [-0.75, 0.25] and [-0.25, 0.75] mirror each other
        let d = crate::bspline::SplineDensity::new(1, atoms, vec![0.4, 0.4], 1.0, 1.0).unwrap();
        let o = ScoreOracle::new(d, BetaSchedule::default());
        for &t in &[1e-3, 0.05, 0.5, 3.0] {
            assert!(o.score(&[0.0], t, None).unwrap()[0].abs() < 1e-9);
        }
    }

    #[test]
    fn score_matches_finite_difference() {
        let o = random_oracle(6);
        let h = 1e-5;
        let (x, t) = (0.2, 0.05);
        let lp = |x: f64| o.p_t(&[x], t).unwrap().ln();
        let fd = (lp(x + h) - lp(x - h)) / (2.0 * h);
        let s = o.score(&[x], t, None).unwrap()[0];
        assert!((s - fd).abs() <= 1e-4 * fd.abs(), "score {s} fd {fd}");
    }

    #[test]
    fn score_matches_finite_difference_2d() {
        let d = random_density(&DensitySpec { dim: 2, n_atoms: 6, max_k: 3, ..Default::default() }).unwrap();
        let o = ScoreOracle::new(d, BetaSchedule::default());
        let mut rng = RngStream::new(9).rng();
        let h = 1e-5;
        for _ in 0..40 {
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let t = 10f64.powf(rng.random_range(-2.5..0.5));
            let s = o.score(&x, t, None).unwrap();
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (o.p_t(&xp, t).unwrap().ln() - o.p_t(&xm, t).unwrap().ln()) / (2.0 * h);
                assert!((s[i] - fd).abs() <= 1e-3 * fd.abs().max(1.0), "x={x:?} t={t} s={s:?} fd={fd}");
            }
        }
    }

    #[test]
    fn bounds_hold_and_falsifier_fails() {
        let o = random_oracle(7);
        let mut rng = RngStream::new(1).rng();
        for _ in 0..200 {
            let x = [rng.random_range(-3.0..3.0)];
            let t = 10f64.powf(rng.random_range(-3.0..1.0));
            assert!(o.density_bounds_check(&x, t).unwrap().pass);
        }
        // inside [-m_t, m_t] the envelope is the flat pair K⁻¹, K
        let s = o.state(0.1).unwrap();
        let (lo, hi) = o.envelope(&[0.5 * s.m], &s);
        assert!((lo * hi - 1.0).abs() < 1e-12);
        let bad = o.clone().corrupted(Corruption { density_scale: 1e6, score_offset: 0.0 });
        assert!(!bad.density_bounds_check(&[0.0], 0.1).unwrap().pass);
    }

    #[test]
    fn clipped_score_respects_cap() {
        let o = random_oracle(8);
        let t = 1e-3;
        let s = o.state(t).unwrap();
        let cap = 0.01 * (1.0 / o.config.clip_eps).ln().sqrt() / s.sigma;
        let v = o.score(&[1.05], t, Some(0.01)).unwrap();
        assert!(v[0].abs() <= cap * (1.0 + 1e-12));
    }

    #[test]
    fn floor_is_enforced() {
        let o = random_oracle(9);
        assert!(matches!(o.p_t(&[0.0], 1e-11), Err(Error::Domain(_))));
    }
}
