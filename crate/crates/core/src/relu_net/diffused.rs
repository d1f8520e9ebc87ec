//! Network for the 1-axis diffused B-spline basis
//! `D(x, t) = ∫ 1[|y| ≤ 1] N_l(2^k y - j) φ_σ(x - m y) dy` with inputs `(x, σ, m)`.
//!
//! The B-spline is written as truncated powers `(2^k y - j')_+^l`; after the
//! substitution `u = (x - m y)/σ` each piece becomes
//! `(-1)^l / (sqrt(2π) m^{l+1}) Σ_{l'} C(l,l') (2^k σ)^{l'} (j' m - 2^k x)^{l-l'} [T_{l'}(u_lo) - T_{l'}(u_hi)]`
//! with `T_{l'}(u) = Σ_s (-1)^s u^{l'+2s+1} / (s! 2^s (l'+2s+1))`, the termwise
//! antiderivative of `u^{l'} e^{-u²/2}`. The arguments `u` are clipped to
//! `[-U, U]` with `U = sqrt(2 log(4/eps))`.

use super::approx::{build_inv_range, clip_net, mult_tree, power_net, yarotsky_iterations};
use super::combinators::{affine, concat, identity, select_parallel};
use super::{box_grid, ErrorCertificate, ReluNetwork, CERT_GRID_POINTS};
use crate::bspline::{cardinal_peak, SplineAtom, SplineDensity};
use crate::oracle::ScoreOracle;
use crate::schedule::BetaSchedule;
use crate::{Error, Result};

/// Acceptance slack between the network and the exact basis, in units of eps.
pub const DIFFUSED_CERT_FACTOR: f64 = 10.0;
/// Each refinement divides the internal accuracy by this factor.
const REFINE_DIVISOR: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedNetConfig {
    pub schedule: BetaSchedule,
    /// Lower end of the time range; `None` uses `eps`.
    pub t_min: Option<f64>,
    pub t_max: f64,
    /// The network is accurate for `|x| ≤ x_range`.
    pub x_range: f64,
    pub max_attempts: u32,
}

impl Default for DiffusedNetConfig {
    fn default() -> Self {
        Self { schedule: BetaSchedule::default(), t_min: None, t_max: 1.0, x_range: 2.0, max_attempts: 4 }
    }
}

fn binom(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// `∫₀^∞ u^p e^{-u²/2} du`.
fn half_moment(p: u32) -> f64 {
    let g = libm::tgamma((p as f64 + 1.0) / 2.0);
    2f64.powf((p as f64 - 1.0) / 2.0) * g
}

struct Piece {
    /// `j'` of the truncated power `(2^k y - j')_+^l`.
    shift: i64,
    /// B-spline coefficient `(-1)^i C(l+1, i) / l!`.
    gamma: f64,
    lo: usize,
    hi: usize,
}

struct Plan {
    k: u32,
    l: u32,
    pieces: Vec<Piece>,
    /// Integration limits `b` (in units of `2^{-k}`) whose `u` values are needed.
    bounds: Vec<f64>,
    u_max: f64,
    taylor_terms: u32,
    sigma_lo: f64,
    sigma_hi: f64,
    m_lo: f64,
}

fn plan(atom: &SplineAtom, eps: f64, inner: f64, cfg: &DiffusedNetConfig) -> Result<Plan> {
    if atom.dim() != 1 {
        return Err(Error::Dimension { expected: 1, got: atom.dim() });
    }
    let (k, l, j) = (atom.k[0], atom.order_l, atom.j[0]);
    let scale = 2f64.powi(k as i32);
    let (box_lo, box_hi) = (-scale, scale);
    let top = (j + l as i64 + 1) as f64;
    let hi_b = top.min(box_hi);
    let mut bounds: Vec<f64> = Vec::new();
    let index = |b: f64, bounds: &mut Vec<f64>| -> usize {
        if let Some(p) = bounds.iter().position(|&v| v == b) {
            p
        } else {
            bounds.push(b);
            bounds.len() - 1
        }
    };
    let mut pieces = Vec::new();
    for i in 0..=l {
        let shift = j + i as i64;
        let lo_b = (shift as f64).max(box_lo);
        if lo_b >= hi_b {
            continue;
        }
        let gamma = if i % 2 == 0 { 1.0 } else { -1.0 } * binom(l + 1, i) / factorial(l);
        let lo = index(lo_b, &mut bounds);
        let hi = index(hi_b, &mut bounds);
        pieces.push(Piece { shift, gamma, lo, hi });
    }
    let t_min = cfg.t_min.unwrap_or(eps);
    let s_lo = cfg.schedule.noise_state(t_min)?;
    let s_hi = cfg.schedule.noise_state(cfg.t_max)?;
    let u_max = (2.0 * (4.0 / eps).ln()).sqrt();
    // Taylor remainder of e^{-u²/2} on |u| ≤ U: (U²/2)^S / S!
    let half = 0.5 * u_max * u_max;
    let mut taylor_terms = 1u32;
    while half.powi(taylor_terms as i32) / factorial(taylor_terms) > 0.1 * inner && taylor_terms < 200 {
        taylor_terms += 1;
    }
    Ok(Plan { k, l, pieces, bounds, u_max, taylor_terms, sigma_lo: s_lo.sigma, sigma_hi: s_hi.sigma, m_lo: s_hi.m })
}

fn assemble(p: &Plan, cfg: &DiffusedNetConfig, inner: f64) -> Result<ReluNetwork> {
    let (k, l) = (p.k, p.l);
    let scale = 2f64.powi(k as i32);
    let nb = p.bounds.len();
    let n_pow = (l + 2 * p.taylor_terms - 1) as usize;
    let lin_range = cfg.x_range + 1.0;

    // stage 1: (x, σ, m) ↦ (x - m b 2^{-k} for each b, 1/σ, 1/m, x, σ, m)
    let lin = affine(
        nb,
        2,
        (0..nb).flat_map(|i| [(i as u32, 0, 1.0), (i as u32, 1, -p.bounds[i] / scale)]).collect(),
        vec![0.0; nb],
    )?;
    let inv_sigma = build_inv_range(p.sigma_lo, 1.0, inner)?.without_certificate();
    let inv_m = build_inv_range(p.m_lo, 1.0, inner * p.m_lo.powi(l as i32 + 2))?.without_certificate();
    let stage1 = select_parallel(
        3,
        vec![(vec![0, 2], lin), (vec![1], inv_sigma), (vec![2], inv_m), (vec![0, 1, 2], identity(3, 1)?)],
    )?;
    let (i_isig, i_im, i_x, i_s, i_m) = (nb, nb + 1, nb + 2, nb + 3, nb + 4);
    let w1 = nb + 5;

    // stage 2: v_b = clip(u_b, -U, U) / U with u_b = (x - m b 2^{-k}) / σ
    let inv_sigma_max = 1.0 / p.sigma_lo;
    let m_prod = yarotsky_iterations(inner / (lin_range * inv_sigma_max));
    let mut blocks = Vec::new();
    for b in 0..nb {
        let prod = mult_tree(&[1, 1], &[lin_range, inv_sigma_max], m_prod)?;
        let clip = clip_net(&[-p.u_max], &[p.u_max])?.scale_output(1.0 / p.u_max)?;
        blocks.push((vec![b, i_isig], concat(&[prod, clip])?));
    }
    blocks.push((vec![i_im, i_x, i_s, i_m], identity(4, 1)?));
    let stage2 = select_parallel(w1, blocks)?;

    // stage 3: powers v_b^1 .. v_b^N
    let coef_sum: f64 = (0..=l)
        .flat_map(|lp| (0..p.taylor_terms).map(move |s| (lp, s)))
        .map(|(lp, s)| {
            let n = lp + 2 * s + 1;
            p.u_max.powi(n as i32) / (factorial(s) * 2f64.powi(s as i32) * n as f64)
        })
        .fold(0.0, f64::max);
    let m_pow = yarotsky_iterations(inner / (coef_sum * (n_pow * n_pow) as f64));
    let mut blocks = Vec::new();
    for b in 0..nb {
        blocks.push((vec![b], power_net(n_pow, m_pow)?));
    }
    blocks.push((vec![nb, nb + 1, nb + 2, nb + 3], identity(4, 1)?));
    let stage3 = select_parallel(nb + 4, blocks)?;
    let (p_im, p_x, p_s, p_m) = (nb * n_pow, nb * n_pow + 1, nb * n_pow + 2, nb * n_pow + 3);
    let w3 = nb * n_pow + 4;

    // stage 4 (affine): T_{l'}(u_lo) - T_{l'}(u_hi) per (piece, l'); c_i = j' m - 2^k x; carry σ, 1/m
    let mut trip = Vec::new();
    let mut row = 0u32;
    for pc in &p.pieces {
        for lp in 0..=l {
            for s in 0..p.taylor_terms {
                let n = lp + 2 * s + 1;
                let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
                let c = sign * p.u_max.powi(n as i32) / (factorial(s) * 2f64.powi(s as i32) * n as f64);
                let col = |b: usize| (b * n_pow + n as usize - 1) as u32;
                // alternate the two limits so equal powers cancel exactly
                trip.push((row, col(pc.lo), c));
                trip.push((row, col(pc.hi), -c));
            }
            row += 1;
        }
    }
    let n_t = row as usize;
    for pc in &p.pieces {
        trip.push((row, p_m as u32, pc.shift as f64));
        trip.push((row, p_x as u32, -scale));
        row += 1;
    }
    trip.push((row, p_s as u32, 1.0));
    trip.push((row + 1, p_im as u32, 1.0));
    let w4 = row as usize + 2;
    let stage4 = affine(w4, w3, trip, vec![0.0; w4])?;
    let (q_s, q_im) = (w4 - 2, w4 - 1);

    // stage 5: products T·c^{l-l'}·σ^{l'}·(1/m)^{l+1}
    let inv_m_max = 1.0 / p.m_lo;
    let mut blocks = Vec::new();
    let mut out_coef = Vec::new();
    let norm = if l % 2 == 0 { 1.0 } else { -1.0 } / (2.0 * std::f64::consts::PI).sqrt();
    for (pi, pc) in p.pieces.iter().enumerate() {
        let c_range = (pc.shift.unsigned_abs() as f64 + scale * cfg.x_range)
            .min(scale * p.sigma_hi * p.u_max + (l + 1) as f64 + 1.0);
        for lp in 0..=l {
            let t_range = 2.0 * half_moment(lp) + 0.25;
            let alpha = [1, l - lp, lp, l + 1];
            let ranges = [t_range, c_range, 1.0, inv_m_max];
            let used: Vec<usize> = (0..4).filter(|&i| alpha[i] > 0).collect();
            let a: Vec<u32> = used.iter().map(|&i| alpha[i]).collect();
            let r: Vec<f64> = used.iter().map(|&i| ranges[i]).collect();
            let cols = [pi * (l as usize + 1) + lp as usize, n_t + pi, q_s, q_im];
            let sel: Vec<usize> = used.iter().map(|&i| cols[i]).collect();
            let coef = norm * pc.gamma * binom(l, lp) * scale.powi(lp as i32);
            let total: f64 = a.iter().zip(&r).map(|(&e, c)| c.powi(e as i32)).product();
            let m_mult = yarotsky_iterations(inner / (total * coef.abs().max(1.0) * (2 * l + 2) as f64));
            blocks.push((sel, mult_tree(&a, &r, m_mult)?));
            out_coef.push(coef);
        }
    }
    let stage5 = select_parallel(w4, blocks)?;
    let n_out = out_coef.len();
    let stage6 = affine(1, n_out, out_coef.iter().enumerate().map(|(i, &c)| (0, i as u32, c)).collect(), vec![0.0])?;
    let bound = output_bound_from(l, p.m_lo);
    let final_clip = clip_net(&[0.0], &[bound])?;
    concat(&[stage1, stage2, stage3, stage4, stage5, stage6, final_clip])
}

fn output_bound_from(l: u32, m_lo: f64) -> f64 {
    cardinal_peak(l) / m_lo
}

/// Upper bound on the network output (and on the exact basis) over the
/// configured time range: `max N_l / m_{t_max}`.
pub fn diffused_output_bound(atom: &SplineAtom, cfg: &DiffusedNetConfig) -> Result<f64> {
    let m_lo = cfg.schedule.noise_state(cfg.t_max)?.m;
    Ok(output_bound_from(atom.order_l, m_lo))
}

/// 1-axis diffused basis network with inputs `(x, σ, m)`, certified against
/// the quadrature oracle on a `(x, t)` grid of at least 10⁴ points with
/// target `DIFFUSED_CERT_FACTOR · eps`. Internal accuracies are tightened
/// until the scan passes or `max_attempts` is reached.
pub fn build_diffused_basis_net_1d(atom: &SplineAtom, eps: f64, cfg: &DiffusedNetConfig) -> Result<ReluNetwork> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Construction(format!("eps must lie in (0, 1/2), got {eps}")));
    }
    let t_min = cfg.t_min.unwrap_or(eps);
    if !(t_min > 0.0 && t_min < cfg.t_max) {
        return Err(Error::Construction("need 0 < t_min < t_max".into()));
    }
    let oracle = ScoreOracle::new(SplineDensity::uniform(1)?, cfg.schedule.clone());
    let domain = vec![(-cfg.x_range, cfg.x_range), (t_min, cfg.t_max)];
    let grid = box_grid(&domain, CERT_GRID_POINTS);
    let exact: Vec<f64> = grid
        .iter()
        .map(|g| oracle.diffused_basis(atom, &[g[0]], g[1]).map(|e| e.e1))
        .collect::<Result<_>>()?;
    let states: Vec<_> = grid.iter().map(|g| cfg.schedule.state_unchecked(g[1])).collect();
    let target = DIFFUSED_CERT_FACTOR * eps;
    let mut inner = eps;
    let mut attempt = 0;
    loop {
        let p = plan(atom, eps, inner, cfg)?;
        let net = assemble(&p, cfg, inner)?;
        let err = grid
            .iter()
            .zip(&states)
            .zip(&exact)
            .map(|((g, s), e)| (net.eval_scalar(&[g[0], s.sigma, s.m]) - e).abs())
            .fold(0.0, f64::max);
        attempt += 1;
        let cert = ErrorCertificate::new(target, domain.clone(), grid.len(), err).with_note(format!(
            "target is {DIFFUSED_CERT_FACTOR}·eps; internal accuracy {inner:.3e}, U = {:.3}, {} Taylor terms",
            p.u_max, p.taylor_terms
        ));
        if cert.valid || attempt >= cfg.max_attempts {
            return Ok(net.with_certificate(cert));
        }
        inner /= REFINE_DIVISOR;
    }
}
