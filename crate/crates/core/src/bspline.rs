//! Cardinal B-splines, tensor-product atoms and spline-superposition densities
//! used as ground truth `p_0` on `[-1, 1]^d`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::quadrature::GaussLegendre;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Number of grid points used for positivity and `C_f` scans.
pub const SCAN_POINTS: usize = 10_000;

fn binom(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Cardinal B-spline `N_l` of order `l`, supported on `[0, l+1)`, evaluated by
/// the truncated-power formula. The half farther from the origin is mirrored
/// to keep the alternating sum short.
pub fn cardinal_bspline(order_l: u32, x: f64) -> f64 {
    let span = (order_l + 1) as f64;
    if !(0.0..span).contains(&x) {
        return 0.0;
    }
    let x = if order_l > 0 && x > 0.5 * span { span - x } else { x };
    let mut acc = 0.0;
    for i in 0..=order_l + 1 {
        let z = x - i as f64;
        if z < 0.0 {
            break;
        }
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * binom(order_l + 1, i) * z.powi(order_l as i32);
    }
    (acc / factorial(order_l)).max(0.0)
}

/// Peak value of `N_l`, attained at the center of its support.
pub fn cardinal_peak(order_l: u32) -> f64 {
    if order_l == 0 {
        1.0
    } else {
        cardinal_bspline(order_l, 0.5 * (order_l + 1) as f64)
    }
}

/// Tensor-product atom `M_{k,j}(x) = Π_i N_l(2^{k_i} x_i - j_i)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineAtom {
    pub k: Vec<u32>,
    pub j: Vec<i64>,
    pub order_l: u32,
}

impl SplineAtom {
    pub fn new(k: Vec<u32>, j: Vec<i64>, order_l: u32) -> Result<Self> {
        if k.len() != j.len() || k.is_empty() {
            return Err(Error::Construction("atom needs matching nonempty k and j".into()));
        }
        Ok(Self { k, j, order_l })
    }

    pub fn dim(&self) -> usize {
        self.k.len()
    }

    pub fn scale(&self, axis: usize) -> f64 {
        (2.0f64).powi(self.k[axis] as i32)
    }

    /// 1-axis factor `N_l(2^k y - j)`.
    pub fn axis_value(&self, axis: usize, y: f64) -> f64 {
        cardinal_bspline(self.order_l, self.scale(axis) * y - self.j[axis] as f64)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = 1.0;
        for (i, &xi) in x.iter().enumerate() {
            v *= self.axis_value(i, xi);
            if v == 0.0 {
                break;
            }
        }
        v
    }

    /// Support `[j 2^{-k}, (j+l+1) 2^{-k}]` along `axis`.
    pub fn support(&self, axis: usize) -> (f64, f64) {
        let h = 1.0 / self.scale(axis);
        (self.j[axis] as f64 * h, (self.j[axis] + self.order_l as i64 + 1) as f64 * h)
    }

    /// Knot positions along `axis` (the polynomial breakpoints).
    pub fn knots(&self, axis: usize) -> Vec<f64> {
        let h = 1.0 / self.scale(axis);
        (0..=self.order_l as i64 + 1).map(|i| (self.j[axis] + i) as f64 * h).collect()
    }

    /// `∫ 1[|y| ≤ r] N_l(2^k y - j) dy` along one axis, exact.
    pub fn axis_mass(&self, axis: usize, r: f64) -> f64 {
        let gl = GaussLegendre::new(self.order_l as usize / 2 + 2);
        let mut acc = 0.0;
        for w in self.knots(axis).windows(2) {
            let (a, b) = (w[0].max(-r), w[1].min(r));
            if b > a {
                acc += gl.integrate(a, b, |y| self.axis_value(axis, y));
            }
        }
        acc
    }

    /// Mass of the atom restricted to the box `[-r, r]^d`.
    pub fn mass_in_box(&self, r: f64) -> f64 {
        (0..self.dim()).map(|a| self.axis_mass(a, r)).product()
    }
}

fn default_halfwidth() -> f64 {
    1.0
}

/// `p_0(x) = (baseline + Σ α_i M_i(x)) / normalizer` on `[-1, 1]^d`, zero outside.
#[derive(Debug, Serialize, Deserialize)]
pub struct SplineDensity {
    pub dim: usize,
    pub atoms: Vec<SplineAtom>,
    pub alphas: Vec<f64>,
    pub baseline: f64,
    #[serde(default = "default_halfwidth")]
    pub domain_halfwidth: f64,
    pub normalizer: f64,
    pub nominal_smoothness: f64,
    /// `max(sup p_0, 1 / inf p_0)` from a dense grid scan.
    pub c_f: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(skip)]
    clamp_count: AtomicU64,
    #[serde(skip)]
    inverse_cdf: OnceLock<InverseCdf>,
}

impl Clone for SplineDensity {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            atoms: self.atoms.clone(),
            alphas: self.alphas.clone(),
            baseline: self.baseline,
            domain_halfwidth: self.domain_halfwidth,
            normalizer: self.normalizer,
            nominal_smoothness: self.nominal_smoothness,
            c_f: self.c_f,
            seed: self.seed,
            clamp_count: AtomicU64::new(0),
            inverse_cdf: OnceLock::new(),
        }
    }
}

impl PartialEq for SplineDensity {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.atoms == other.atoms
            && self.alphas.iter().map(|a| a.to_bits()).eq(other.alphas.iter().map(|a| a.to_bits()))
            && self.baseline.to_bits() == other.baseline.to_bits()
            && self.normalizer.to_bits() == other.normalizer.to_bits()
            && self.c_f.to_bits() == other.c_f.to_bits()
            && self.seed == other.seed
    }
}

impl SplineDensity {
    /// Builds and normalizes a density, rejecting any superposition that is
    /// not strictly positive on a dense grid of the box.
    pub fn new(dim: usize, atoms: Vec<SplineAtom>, alphas: Vec<f64>, baseline: f64, nominal_smoothness: f64) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::Construction(format!("unsupported dimension {dim}")));
        }
        if atoms.len() != alphas.len() {
            return Err(Error::Construction("atoms and alphas differ in length".into()));
        }
        if atoms.iter().any(|a| a.dim() != dim) {
            return Err(Error::Construction("atom dimension differs from density dimension".into()));
        }
        if !(baseline >= 0.0) {
            return Err(Error::Construction("baseline must be nonnegative".into()));
        }
        let r = 1.0f64;
        let box_volume = (2.0 * r).powi(dim as i32);
        let normalizer = baseline * box_volume
            + atoms.iter().zip(&alphas).map(|(a, al)| al * a.mass_in_box(r)).sum::<f64>();
        if !(normalizer > 0.0 && normalizer.is_finite()) {
            return Err(Error::Construction(format!("normalizer {normalizer} is not positive")));
        }
        let mut d = Self {
            dim,
            atoms,
            alphas,
            baseline,
            domain_halfwidth: r,
            normalizer,
            nominal_smoothness,
            c_f: 1.0,
            seed: None,
            clamp_count: AtomicU64::new(0),
            inverse_cdf: OnceLock::new(),
        };
        let (lo, hi) = d.grid_extrema();
        if !(lo > 0.0) {
            return Err(Error::Construction(format!("density is not strictly positive on the grid (min {lo})")));
        }
        d.c_f = hi.max(1.0 / lo);
        Ok(d)
    }

    pub fn uniform(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new(), 1.0, f64::INFINITY)
    }

    fn unnormalized(&self, x: &[f64]) -> f64 {
        self.baseline + self.atoms.iter().zip(&self.alphas).map(|(a, al)| al * a.eval(x)).sum::<f64>()
    }

    pub fn in_support(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() <= self.domain_halfwidth)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        if !self.in_support(x) {
            return 0.0;
        }
        let v = self.unnormalized(x) / self.normalizer;
        if v < 0.0 {
            self.clamp_count.fetch_add(1, Ordering::Relaxed);
            return 0.0;
        }
        v
    }

    /// How many evaluations were clamped at zero so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    /// Regular scan grid with about [`SCAN_POINTS`] points covering the box.
    pub fn scan_grid(&self) -> Vec<Vec<f64>> {
        let per_axis = (SCAN_POINTS as f64).powf(1.0 / self.dim as f64).round() as usize;
        let r = self.domain_halfwidth;
        let ticks: Vec<f64> = (0..per_axis).map(|i| -r + 2.0 * r * i as f64 / (per_axis - 1) as f64).collect();
        let mut pts = vec![Vec::new()];
        for _ in 0..self.dim {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    ticks.iter().map(move |&t| {
                        let mut q = p.clone();
                        q.push(t);
                        q
                    })
                })
                .collect();
        }
        pts
    }

    /// `(min, max)` of the normalized density over [`Self::scan_grid`].
    pub fn grid_extrema(&self) -> (f64, f64) {
        self.scan_grid().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let v = self.unnormalized(p) / self.normalizer;
            (lo.min(v), hi.max(v))
        })
    }

    /// Upper bound on `p_0` valid everywhere (used as rejection envelope).
    pub fn envelope(&self) -> f64 {
        let peak = self.atoms.iter().zip(&self.alphas).filter(|(_, al)| **al > 0.0).map(|(a, al)| al * cardinal_peak(a.order_l).powi(self.dim as i32)).sum::<f64>();
        (self.baseline + peak) / self.normalizer
    }

    /// Draws `count` points from `p_0`: inverse CDF in 1D, rejection otherwise.
    pub fn sample(&self, count: usize, stream: &RngStream) -> Vec<Vec<f64>> {
        let mut rng = stream.rng();
        if self.dim == 1 {
            let inv = self.inverse_cdf.get_or_init(|| InverseCdf::build(self));
            (0..count).map(|_| vec![inv.quantile(self, rng.random::<f64>())]).collect()
        } else {
            let env = self.envelope();
            let r = self.domain_halfwidth;
            let mut out = Vec::with_capacity(count);
            let mut x = vec![0.0; self.dim];
            while out.len() < count {
                for v in x.iter_mut() {
                    *v = rng.random_range(-r..r);
                }
                if rng.random::<f64>() * env <= self.eval(&x) {
                    out.push(x.clone());
                }
            }
            out
        }
    }

    /// 1D cumulative distribution function.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        assert_eq!(self.dim, 1);
        let inv = self.inverse_cdf.get_or_init(|| InverseCdf::build(self));
        inv.cdf(self, x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a serialized density and checks that its stored normalizer is
    /// consistent with the atoms.
    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        if d.domain_halfwidth != 1.0 {
            return Err(Error::Construction("only the [-1,1]^d domain is supported".into()));
        }
        let rebuilt = Self::new(d.dim, d.atoms.clone(), d.alphas.clone(), d.baseline, d.nominal_smoothness)?;
        if (rebuilt.normalizer - d.normalizer).abs() > 1e-12 * d.normalizer {
            return Err(Error::Construction("stored normalizer disagrees with atoms".into()));
        }
        Ok(d)
    }
}

/// Piecewise-polynomial CDF table for 1D densities.
#[derive(Debug)]
struct InverseCdf {
    breaks: Vec<f64>,
    cum: Vec<f64>,
    gl: GaussLegendre,
}

impl InverseCdf {
    fn build(d: &SplineDensity) -> Self {
        let r = d.domain_halfwidth;
        let mut breaks: Vec<f64> = d.atoms.iter().flat_map(|a| a.knots(0)).filter(|k| k.abs() < r).collect();
        breaks.push(-r);
        breaks.push(r);
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup();
        let max_l = d.atoms.iter().map(|a| a.order_l).max().unwrap_or(0);
        let gl = GaussLegendre::new(max_l as usize / 2 + 2);
        let mut cum = vec![0.0];
        for w in breaks.windows(2) {
            let m = gl.integrate(w[0], w[1], |y| d.eval(&[y]));
            cum.push(cum.last().unwrap() + m);
        }
        Self { breaks, cum, gl }
    }

    fn cdf(&self, d: &SplineDensity, x: f64) -> f64 {
        if x <= self.breaks[0] {
            return 0.0;
        }
        if x >= *self.breaks.last().unwrap() {
            return 1.0;
        }
        let i = self.breaks.partition_point(|&b| b <= x) - 1;
        self.cum[i] + self.gl.integrate(self.breaks[i], x, |y| d.eval(&[y]))
    }

    fn quantile(&self, d: &SplineDensity, u: f64) -> f64 {
        let total = *self.cum.last().unwrap();
        let target = u * total;
        let i = (self.cum.partition_point(|&c| c <= target)).clamp(1, self.cum.len() - 1) - 1;
        let (mut lo, mut hi) = (self.breaks[i], self.breaks[i + 1]);
        let base = self.cum[i];
        let mut x = 0.5 * (lo + hi);
        for _ in 0..60 {
            let f = base + self.gl.integrate(self.breaks[i], x, |y| d.eval(&[y])) - target;
            if f.abs() < 1e-15 {
                break;
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let dens = d.eval(&[x]);
            let newton = x - f / dens;
            x = if dens > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-14 {
                break;
            }
        }
        x
    }
}

/// Parameters of the random density generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySpec {
    pub seed: u64,
    pub dim: usize,
    pub n_atoms: usize,
    pub max_k: u32,
    pub order_l: u32,
    /// Coefficient magnitudes decay as `2^{-k·decay_s}`.
    pub decay_s: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    1.5
}

impl Default for DensitySpec {
    fn default() -> Self {
        Self { seed: 7, dim: 1, n_atoms: 12, max_k: 4, order_l: 3, decay_s: 1.0, amplitude: default_amplitude() }
    }
}

/// Random spline density with atoms at mixed resolutions, all supported inside
/// the box, and nonnegative coefficients `α = amplitude · u · 2^{-k s}`,
/// `u ~ U(0, 1)`. Deterministic in `seed`.
pub fn random_density(spec: &DensitySpec) -> Result<SplineDensity> {
    let DensitySpec { seed, dim, n_atoms, max_k, order_l, decay_s, amplitude } = *spec;
    if !(1..=2).contains(&dim) {
        return Err(Error::Config(format!("random densities support d in {{1,2}}, got {dim}")));
    }
    if !(amplitude >= 0.0) {
        return Err(Error::Config("amplitude must be nonnegative".into()));
    }
    // smallest level whose atoms fit in [-1, 1]
    let k_min = (0..=max_k).find(|&k| (1i64 << (k + 1)) >= order_l as i64 + 1).ok_or_else(|| {
        Error::Config(format!("max_k {max_k} too small for order {order_l} atoms inside [-1,1]"))
    })?;
    let mut rng = RngStream::new(seed).split(0).rng();
    let mut atoms = Vec::with_capacity(n_atoms);
    let mut alphas = Vec::with_capacity(n_atoms);
    for _ in 0..n_atoms {
        let k = rng.random_range(k_min..=max_k);
        let lo = -(1i64 << k);
        let hi = (1i64 << k) - order_l as i64 - 1;
        let j: Vec<i64> = (0..dim).map(|_| rng.random_range(lo..=hi)).collect();
        atoms.push(SplineAtom::new(vec![k; dim], j, order_l)?);
        let u: f64 = rng.random();
        alphas.push(amplitude * u * (2.0f64).powf(-(k as f64) * decay_s));
    }
    let mut d = SplineDensity::new(dim, atoms, alphas, 1.0, decay_s)?;
    d.seed = Some(seed);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn order_zero_is_indicator() {
        assert_eq!(cardinal_bspline(0, 0.5), 1.0);
        assert_eq!(cardinal_bspline(0, 1.5), 0.0);
        assert_eq!(cardinal_bspline(0, -0.1), 0.0);
    }

    #[test]
    fn linear_hat_matches_numeric_convolution() {
        // (N0 * N0)(1) by trapezoid rule, step 1e-4
        let h = 1e-4;
        let n = 20_000;
        let conv: f64 = (0..=n)
            .map(|i| {
                let y = -0.5 + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * cardinal_bspline(0, y) * cardinal_bspline(0, 1.0 - y)
            })
            .sum::<f64>()
            * h;
        assert!((conv - 1.0).abs() < 1e-3);
        assert!((cardinal_bspline(1, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_mass() {
        let gl = GaussLegendre::new(8);
        for l in 0..6u32 {
            let m: f64 = (0..=l).map(|i| gl.integrate(i as f64, i as f64 + 1.0, |x| cardinal_bspline(l, x))).sum();
            assert!((m - 1.0).abs() < 1e-9, "l={l} mass={m}");
        }
    }

    #[test]
    fn cubic_symmetry_and_peak() {
        for i in 0..100 {
            let x = 0.04 * i as f64;
            assert!((cardinal_bspline(3, x) - cardinal_bspline(3, 4.0 - x)).abs() < 1e-14);
        }
        assert!((cardinal_peak(3) - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn atom_mass_scales_with_level() {
        let a = SplineAtom::new(vec![2, 1], vec![-1, 0], 3).unwrap();
        assert!((a.mass_in_box(10.0) - 2f64.powi(-3)).abs() < 1e-9);
    }

    #[test]
    fn outside_support_is_zero() {
        let d = random_density(&DensitySpec::default()).unwrap();
        assert_eq!(d.eval(&[1.5]), 0.0);
        assert_eq!(d.eval(&[-1.0 - 1e-12]), 0.0);
    }

    #[test]
    fn uniform_density_value() {
        let d = SplineDensity::uniform(1).unwrap();
        assert_eq!(d.eval(&[0.0]), 0.5);
        let d2 = random_density(&DensitySpec { n_atoms: 0, dim: 2, ..Default::default() }).unwrap();
        assert!((d2.eval(&[0.3, -0.2]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn random_density_integrates_to_one() {
        let d = random_density(&DensitySpec { n_atoms: 20, ..Default::default() }).unwrap();
        let gl = GaussLegendre::new(2048);
        let mass = gl.integrate(-1.0, 1.0, |x| d.eval(&[x]));
        assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
    }

    #[test]
    fn random_density_2d_integrates_to_one() {
        let d = random_density(&DensitySpec { dim: 2, n_atoms: 10, max_k: 3, ..Default::default() }).unwrap();
        let gl = GaussLegendre::new(16);
        // panels at the finest knot spacing make the rule exact
        let panels = 16;
        let mut mass = 0.0;
        for a in 0..panels {
            for b in 0..panels {
                let (x0, y0) = (-1.0 + 2.0 * a as f64 / panels as f64, -1.0 + 2.0 * b as f64 / panels as f64);
                let h = 2.0 / panels as f64;
                for (x, wx) in gl.mapped(x0, x0 + h) {
                    for (y, wy) in gl.mapped(y0, y0 + h) {
                        mass += wx * wy * d.eval(&[x, y]);
                    }
                }
            }
        }
        assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
    }

    #[test]
    fn determinism_and_roundtrip() {
        let spec = DensitySpec::default();
        let a = random_density(&spec).unwrap();
        let b = random_density(&spec).unwrap();
        assert_eq!(a, b);
        let back = SplineDensity::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn lower_bound_on_grid() {
        for seed in 0..10 {
            let d = random_density(&DensitySpec { seed, ..Default::default() }).unwrap();
            let (lo, _) = d.grid_extrema();
            assert!(lo >= d.baseline / d.normalizer - 1e-12);
            assert!(d.c_f >= 1.0);
        }
    }

    #[test]
    fn rejects_negative_superposition() {
        let atom = SplineAtom::new(vec![1], vec![-2], 3).unwrap();
        let r = SplineDensity::new(1, vec![atom], vec![-5.0], 1.0, 1.0);
        assert!(matches!(r, Err(Error::Construction(_))));
    }

    #[test]
    fn smoothness_proxy_grows_with_resolution() {
        // steepest slope of the generated density increases with max_k
        let slope = |max_k: u32| {
            let d = random_density(&DensitySpec { max_k, n_atoms: 30, seed: 3, decay_s: 0.5, ..Default::default() }).unwrap();
            let h = 1e-4;
            (0..2000).map(|i| {
                let x = -0.99 + 1.98 * i as f64 / 2000.0;
                ((d.eval(&[x + h]) - d.eval(&[x - h])) / (2.0 * h)).abs()
            }).fold(0.0, f64::max)
        };
        let s: Vec<f64> = [2, 4, 6].iter().map(|&k| slope(k)).collect();
        assert!(s[0] < s[1] && s[1] < s[2], "{s:?}");
    }

    #[test]
    fn inverse_cdf_roundtrip() {
        let d = random_density(&DensitySpec::default()).unwrap();
        for i in 1..50 {
            let u = i as f64 / 50.0;
            let inv = d.inverse_cdf.get_or_init(|| InverseCdf::build(&d));
            let x = inv.quantile(&d, u);
            assert!((d.cdf_1d(x) - u).abs() < 1e-10, "u={u} x={x} F={}", d.cdf_1d(x));
        }
    }

    proptest! {
        #[test]
        fn density_is_nonnegative(seed in 0u64..200, x in -1.2f64..1.2) {
            let d = random_density(&DensitySpec { seed, n_atoms: 8, ..Default::default() }).unwrap();
            prop_assert!(d.eval(&[x]) >= 0.0);
        }
    }
}
