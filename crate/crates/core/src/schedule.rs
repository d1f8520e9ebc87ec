//! Forward Ornstein–Uhlenbeck noise schedule.
//!
//! `dX = -β_t X dt + sqrt(2 β_t) dB`, so `X_t | X_0 ~ N(m_t X_0, σ_t² I)` with
//! `m_t = exp(-∫₀ᵗ β)` and `σ_t² = 1 - m_t²`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest time at which scores are evaluated; below it σ_t underflows.
pub const T_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BetaKind {
    Constant { beta0: f64 },
    /// `β_t = Σ c_i t^i` on `[0, horizon]`, held at its horizon value afterwards.
    Polynomial { coefficients: Vec<f64>, horizon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub kind: BetaKind,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseState {
    pub t: f64,
    pub m: f64,
    pub sigma: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self::constant(1.0).expect("unit schedule")
    }
}

const BOUND_CHECK_POINTS: usize = 10_000;

impl BetaSchedule {
    pub fn constant(beta0: f64) -> Result<Self> {
        if !(beta0 > 0.0 && beta0.is_finite()) {
            return Err(Error::Config(format!("constant beta must be positive, got {beta0}")));
        }
        Ok(Self { kind: BetaKind::Constant { beta0 }, beta_lo: beta0, beta_hi: beta0 })
    }

    /// Polynomial schedule; `beta_lo`/`beta_hi` are measured on a dense grid of
    /// `[0, horizon]` and the schedule is rejected unless it stays positive.
    pub fn polynomial(coefficients: Vec<f64>, horizon: f64) -> Result<Self> {
        if coefficients.is_empty() || !(horizon > 0.0) {
            return Err(Error::Config("polynomial schedule needs coefficients and a positive horizon".into()));
        }
        let kind = BetaKind::Polynomial { coefficients, horizon };
        let mut s = Self { kind, beta_lo: f64::INFINITY, beta_hi: f64::NEG_INFINITY };
        for i in 0..=BOUND_CHECK_POINTS {
            let b = s.beta(horizon * i as f64 / BOUND_CHECK_POINTS as f64);
            s.beta_lo = s.beta_lo.min(b);
            s.beta_hi = s.beta_hi.max(b);
        }
        if !(s.beta_lo > 0.0) || !s.beta_hi.is_finite() {
            return Err(Error::Config(format!("polynomial beta leaves (0, inf): min {}", s.beta_lo)));
        }
        Ok(s)
    }

    /// Re-checks `beta_lo ≤ β_t ≤ beta_hi` on a dense grid of `[0, horizon]`.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.beta_lo > 0.0 && self.beta_lo <= self.beta_hi) {
            return Err(Error::Config("need 0 < beta_lo <= beta_hi".into()));
        }
        for i in 0..=BOUND_CHECK_POINTS {
            let b = self.beta(horizon * i as f64 / BOUND_CHECK_POINTS as f64);
            if b < self.beta_lo * (1.0 - 1e-12) || b > self.beta_hi * (1.0 + 1e-12) {
                return Err(Error::Config(format!("beta {b} outside [{}, {}]", self.beta_lo, self.beta_hi)));
            }
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        match &self.kind {
            BetaKind::Constant { beta0 } => *beta0,
            BetaKind::Polynomial { coefficients, horizon } => horner(coefficients, t.min(*horizon)),
        }
    }

    /// `∫₀ᵗ β_s ds`, analytic in the coefficients.
    pub fn integral(&self, t: f64) -> f64 {
        match &self.kind {
            BetaKind::Constant { beta0 } => beta0 * t,
            BetaKind::Polynomial { coefficients, horizon } => {
                let tc = t.min(*horizon);
                let mut acc = 0.0;
                for (i, c) in coefficients.iter().enumerate().rev() {
                    acc = acc * tc + c / (i + 1) as f64;
                }
                acc *= tc;
                if t > *horizon {
                    acc += horner(coefficients, *horizon) * (t - horizon);
                }
                acc
            }
        }
    }

    pub fn noise_state(&self, t: f64) -> Result<NoiseState> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("time must be finite and nonnegative, got {t}")));
        }
        Ok(self.state_unchecked(t))
    }

    pub(crate) fn state_unchecked(&self, t: f64) -> NoiseState {
        let i = self.integral(t);
        let m = (-i).exp();
        let sigma = (-(-2.0 * i).exp_m1()).sqrt();
        NoiseState { t, m, sigma }
    }
}

fn horner(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, ci| acc * t + ci)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GridKind {
    Uniform { eta: f64 },
    Geometric { ratio: f64 },
    /// Geometric refinement on `[t_lo, t_switch]`, uniform with step `eta` above.
    Refined { ratio: f64, t_switch: f64, eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_lo: f64,
    pub t_hi: f64,
    pub knots: Vec<f64>,
    pub kind: GridKind,
}

impl TimeGrid {
    pub fn uniform(t_lo: f64, t_hi: f64, steps: usize) -> Result<Self> {
        check_interval(t_lo, t_hi)?;
        if steps == 0 {
            return Err(Error::Config("uniform grid needs at least one step".into()));
        }
        let eta = (t_hi - t_lo) / steps as f64;
        let mut knots: Vec<f64> = (0..steps).map(|i| t_lo + eta * i as f64).collect();
        knots.push(t_hi);
        Ok(Self { t_lo, t_hi, knots, kind: GridKind::Uniform { eta } })
    }

    /// Knots `t_lo, t_first, t_first·r, t_first·r², …` capped exactly at `t_hi`.
    pub fn geometric(t_lo: f64, t_hi: f64, t_first: f64, ratio: f64) -> Result<Self> {
        check_interval(t_lo, t_hi)?;
        if !(t_lo < t_first && t_first < t_hi) {
            return Err(Error::Config(format!("need t_lo < t_first < t_hi, got {t_lo}, {t_first}, {t_hi}")));
        }
        if !(ratio > 1.0 && ratio <= 2.0) {
            return Err(Error::Config(format!("geometric ratio must lie in (1, 2], got {ratio}")));
        }
        let mut knots = vec![t_lo];
        let mut k = 0i32;
        loop {
            let t = t_first * ratio.powi(k);
            if t >= t_hi * (1.0 - 1e-12) {
                break;
            }
            knots.push(t);
            k += 1;
        }
        knots.push(t_hi);
        Ok(Self { t_lo, t_hi, knots, kind: GridKind::Geometric { ratio } })
    }

    /// Sampler default: `steps` cells, a quarter of them geometric on
    /// `[t_lo, t_switch]`, the rest uniform up to `t_hi`.
    pub fn refined(t_lo: f64, t_hi: f64, steps: usize) -> Result<Self> {
        check_interval(t_lo, t_hi)?;
        if steps < 4 {
            return Err(Error::Config("refined grid needs at least 4 steps".into()));
        }
        let t_switch = 1.0f64.min(0.5 * t_hi);
        if t_switch <= t_lo {
            return Self::uniform(t_lo, t_hi, steps);
        }
        let n_geo = steps / 4;
        let n_uni = steps - n_geo;
        let ratio = (t_switch / t_lo).powf(1.0 / n_geo as f64);
        let mut knots: Vec<f64> = (0..n_geo).map(|i| t_lo * ratio.powi(i as i32)).collect();
        let eta = (t_hi - t_switch) / n_uni as f64;
        knots.extend((0..n_uni).map(|i| t_switch + eta * i as f64));
        knots.push(t_hi);
        Ok(Self { t_lo, t_hi, knots, kind: GridKind::Refined { ratio, t_switch, eta } })
    }

    pub fn cells(&self) -> impl DoubleEndedIterator<Item = (f64, f64)> + '_ {
        self.knots.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn n_cells(&self) -> usize {
        self.knots.len() - 1
    }

    /// Index of the cell containing `t`, with the last cell closed on the right.
    pub fn cell_index(&self, t: f64) -> Option<usize> {
        if t < self.t_lo || t > self.t_hi {
            return None;
        }
        let idx = self.knots.partition_point(|&k| k <= t);
        Some(idx.saturating_sub(1).min(self.n_cells() - 1))
    }
}

fn check_interval(t_lo: f64, t_hi: f64) -> Result<()> {
    if !(t_lo > 0.0 && t_lo < t_hi && t_hi.is_finite()) {
        return Err(Error::Config(format!("need 0 < t_lo < t_hi, got [{t_lo}, {t_hi}]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_beta_at_zero() {
        let s = BetaSchedule::default().noise_state(0.0).unwrap();
        assert_eq!((s.m, s.sigma), (1.0, 0.0));
    }

    #[test]
    fn unit_beta_at_ln2_matches_ode() {
        let sched = BetaSchedule::default();
        let t = std::f64::consts::LN_2;
        let s = sched.noise_state(t).unwrap();
        // independent path: explicit Euler on dm/dt = -β m
        let h = 1e-6;
        let steps = (t / h).round() as usize;
        let h = t / steps as f64;
        let mut m = 1.0;
        for _ in 0..steps {
            m -= h * m;
        }
        assert!((m - 0.5).abs() < 1e-6);
        assert!((s.m - 0.5).abs() < 1e-12);
        assert!((s.sigma - 0.75f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stationary_limit() {
        let s = BetaSchedule::default().noise_state(50.0).unwrap();
        assert!(s.m < 1e-20);
        assert!((s.sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_time_is_domain_error() {
        assert!(matches!(BetaSchedule::default().noise_state(-1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn pythagorean_and_monotone() {
        let sched = BetaSchedule::polynomial(vec![0.5, 0.3, -0.01], 10.0).unwrap();
        let mut prev = sched.noise_state(0.0).unwrap();
        for i in 1..5000 {
            let s = sched.noise_state(i as f64 * 0.004).unwrap();
            assert!((s.m * s.m + s.sigma * s.sigma - 1.0).abs() < 1e-10);
            assert!(s.m <= prev.m && s.sigma >= prev.sigma);
            prev = s;
        }
    }

    #[test]
    fn polynomial_integral_matches_quadrature() {
        let sched = BetaSchedule::polynomial(vec![1.0, 0.2, 0.05], 4.0).unwrap();
        for &t in &[0.3, 2.0, 4.0, 7.5] {
            let n = 200_000;
            let h = t / n as f64;
            let num: f64 = (0..n).map(|i| sched.beta((i as f64 + 0.5) * h) * h).sum();
            assert!((num - sched.integral(t)).abs() < 1e-8, "t={t}");
        }
        assert!(sched.validate(20.0).is_ok());
    }

    #[test]
    fn sigma_small_time_scaling() {
        let sched = BetaSchedule::default();
        for i in 1..=1000 {
            let t = 1e-4 * i as f64;
            let s = sched.noise_state(t).unwrap();
            let r = s.sigma / (2.0 * t).sqrt();
            assert!((0.9..=1.0).contains(&r), "t={t} ratio={r}");
        }
    }

    #[test]
    fn geometric_grid_knots() {
        let g = TimeGrid::geometric(1e-4, 10.0, 0.01, 2.0).unwrap();
        assert_eq!(g.knots.len(), 2 + (10.0f64 / 0.01).log2().ceil() as usize);
        assert_eq!(g.knots.len(), 12);
        assert_eq!(&g.knots[..4], &[1e-4, 0.01, 0.02, 0.04]);
        assert_eq!(*g.knots.last().unwrap(), 10.0);
        for w in g.knots[1..].windows(2) {
            let r = w[1] / w[0];
            assert!(r > 1.0 && r <= 2.0);
        }
    }

    #[test]
    fn grid_errors() {
        assert!(TimeGrid::geometric(0.5, 0.4, 0.45, 2.0).is_err());
        assert!(TimeGrid::geometric(1e-4, 10.0, 0.01, 2.5).is_err());
        assert!(TimeGrid::geometric(1e-4, 10.0, 0.01, 1.0).is_err());
    }

    #[test]
    fn refined_grid_is_increasing() {
        let g = TimeGrid::refined(1e-4, 10.0, 512).unwrap();
        assert_eq!(g.n_cells(), 512);
        assert!(g.knots.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.knots[0], 1e-4);
        assert_eq!(*g.knots.last().unwrap(), 10.0);
        assert_eq!(g.cell_index(1e-4), Some(0));
        assert_eq!(g.cell_index(10.0), Some(511));
    }
}
