use super::combinators::{affine, concat, identity, select_parallel};
use super::{box_grid, grid_sup_error, ErrorCertificate, Layer, ReluNetwork, CERT_GRID_POINTS};
use crate::schedule::{BetaKind, BetaSchedule};
use crate::{Error, Result};

/// Largest sawtooth depth; beyond it the interpolation error is below f64 resolution.
const MAX_ITERATIONS: u32 = 26;
/// Extra sawtooth levels tried when a grid scan misses the target.
const REFINE_ATTEMPTS: u32 = 6;
/// Ratio of consecutive knots in the piecewise reciprocal and root constructions.
const KNOT_RATIO: f64 = 1.5;

/// Smallest `m ≥ 1` with `2^{-2m-2} ≤ target`.
pub fn yarotsky_iterations(target: f64) -> u32 {
    let mut m = 1;
    while m < MAX_ITERATIONS && sawtooth_error(m) > target {
        m += 1;
    }
    m
}

fn sawtooth_error(m: u32) -> f64 {
    0.25 * 4f64.powi(-(m as i32))
}

/// Certificate target for constructions that are exact up to rounding.
const EXACT_TARGET: f64 = 1e-12;

/// Exact `min(b, max(x, a))` per coordinate: `ReLU(x - a) - ReLU(x - b) + a`.
/// Certified on the box widened by one unit beyond `[a, b]`.
pub fn build_clip(a: &[f64], b: &[f64]) -> Result<ReluNetwork> {
    let net = clip_net(a, b)?;
    let domain: Vec<(f64, f64)> = a.iter().zip(b).map(|(&lo, &hi)| (lo - 1.0, hi + 1.0)).collect();
    let err = box_grid(&domain, CERT_GRID_POINTS)
        .iter()
        .map(|x| {
            let y = net.eval(x);
            (0..x.len()).map(|i| (y[i] - x[i].clamp(a[i], b[i])).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let n = box_grid(&domain, CERT_GRID_POINTS).len();
    Ok(net.with_certificate(ErrorCertificate::new(EXACT_TARGET, domain, n, err)))
}

pub(crate) fn clip_net(a: &[f64], b: &[f64]) -> Result<ReluNetwork> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Construction("clip bounds must be nonempty and of equal length".into()));
    }
    if let Some(i) = (0..a.len()).find(|&i| !(a[i] <= b[i])) {
        return Err(Error::Construction(format!("clip bound a[{i}] = {} exceeds b[{i}] = {}", a[i], b[i])));
    }
    let d = a.len();
    let mut t1 = Vec::with_capacity(2 * d);
    let mut b1 = Vec::with_capacity(2 * d);
    let mut t2 = Vec::with_capacity(2 * d);
    for i in 0..d {
        let (r, i) = (2 * i as u32, i);
        t1.push((r, i as u32, 1.0));
        t1.push((r + 1, i as u32, 1.0));
        b1.push(-a[i]);
        b1.push(-b[i]);
        t2.push((i as u32, r, 1.0));
        t2.push((i as u32, r + 1, -1.0));
    }
    let layers = vec![Layer::new(2 * d, d, t1, b1)?, Layer::new(d, 2 * d, t2, a.to_vec())?];
    ReluNetwork::from_layers(layers)
}

/// Partition of unity `(φ₁, φ₂)` for switching between two time windows:
/// `φ₁ = 0` for `t ≥ t_hi1`, `φ₂ = 0` for `t ≤ t_lo2`, linear in between.
pub fn build_switch(t_lo2: f64, t_hi1: f64) -> Result<(ReluNetwork, ReluNetwork)> {
    if !(t_lo2 < t_hi1) {
        return Err(Error::Construction(format!("switch needs t_lo2 < t_hi1, got {t_lo2} >= {t_hi1}")));
    }
    let width = t_hi1 - t_lo2;
    let build = |falling: bool| -> Result<ReluNetwork> {
        let l1 = Layer::new(2, 1, vec![(0, 0, 1.0), (1, 0, 1.0)], vec![-t_lo2, -t_hi1])?;
        // clip(t) - t_lo2 = h0 - h1; t_hi1 - clip(t) = width - (h0 - h1)
        let l2 = if falling {
            Layer::new(1, 2, vec![(0, 0, -1.0), (0, 1, 1.0)], vec![width])?
        } else {
            Layer::new(1, 2, vec![(0, 0, 1.0), (0, 1, -1.0)], vec![0.0])?
        };
        let l3 = Layer::new(1, 1, vec![(0, 0, 1.0 / width)], vec![0.0])?;
        ReluNetwork::from_layers(vec![l1, l2, l3])
    };
    let domain = vec![(t_lo2 - 1.0, t_hi1 + 1.0)];
    let ramp = |t: f64| ((t - t_lo2) / width).clamp(0.0, 1.0);
    let falling = build(true)?;
    let rising = build(false)?;
    let (e1, n) = grid_sup_error(&falling, &domain, CERT_GRID_POINTS, |t| 1.0 - ramp(t[0]));
    let (e2, _) = grid_sup_error(&rising, &domain, CERT_GRID_POINTS, |t| ramp(t[0]));
    Ok((
        falling.with_certificate(ErrorCertificate::new(EXACT_TARGET, domain.clone(), n, e1)),
        rising.with_certificate(ErrorCertificate::new(EXACT_TARGET, domain, n, e2)),
    ))
}

/// `a·b` for `|a|, |b| ≤ 1` via `((a+b)/2)² - ((a-b)/2)²`, each square by the
/// `m`-level sawtooth interpolant (error in `[0, 2^{-2m-2}]`). Inputs are
/// pre-multiplied by `scale_a`, `scale_b`; the output by `out_scale`.
///
/// Both square branches see bit-identical values when either input is zero,
/// and the output layer alternates their terms, so the product is exactly 0.
pub fn mult2_unit(m: u32, scale_a: f64, scale_b: f64, out_scale: f64) -> Result<ReluNetwork> {
    let m = m.max(1);
    let (ha, hb) = (0.5 * scale_a, 0.5 * scale_b);
    let l1 = Layer::new(
        4,
        2,
        vec![(0, 0, ha), (0, 1, hb), (1, 0, -ha), (1, 1, -hb), (2, 0, ha), (2, 1, -hb), (3, 0, -ha), (3, 1, hb)],
        vec![0.0; 4],
    )?;
    // per branch o ∈ {0, 3}: (ReLU(g), ReLU(g - 1/2), ReLU(f)) with f ≥ 0
    let mut t2 = Vec::new();
    let mut b2 = Vec::new();
    for (o, p) in [(0u32, 0u32), (3, 2)] {
        t2.extend([(o, p, 1.0), (o, p + 1, 1.0), (o + 1, p, 1.0), (o + 1, p + 1, 1.0), (o + 2, p, 1.0), (o + 2, p + 1, 1.0)]);
        b2.extend([0.0, -0.5, 0.0]);
    }
    let mut layers = vec![l1, Layer::new(6, 4, t2, b2)?];
    for s in 1..m {
        let q = 4f64.powi(-(s as i32));
        let mut t = Vec::new();
        let mut b = Vec::new();
        for o in [0u32, 3] {
            // g_s = 2 r0 - 4 r1; f_s = f_{s-1} - g_s / 4^s
            t.extend([
                (o, o, 2.0),
                (o, o + 1, -4.0),
                (o + 1, o, 2.0),
                (o + 1, o + 1, -4.0),
                (o + 2, o + 2, 1.0),
                (o + 2, o, -2.0 * q),
                (o + 2, o + 1, 4.0 * q),
            ]);
            b.extend([0.0, -0.5, 0.0]);
        }
        layers.push(Layer::new(6, 6, t, b)?);
    }
    let q = 4f64.powi(-(m as i32));
    let c = out_scale;
    let last = vec![
        (0, 2, c),
        (0, 5, -c),
        (0, 0, -2.0 * q * c),
        (0, 3, 2.0 * q * c),
        (0, 1, 4.0 * q * c),
        (0, 4, -4.0 * q * c),
    ];
    layers.push(Layer::new(1, 6, last, vec![0.0])?);
    ReluNetwork::from_layers(layers)
}

/// `(v, v², ..., vⁿ)` for `|v| ≤ 1` by repeated doubling; each new power is
/// one sawtooth product of two known powers. Error of `v^k` is at most
/// `(k-1) 2^{-2m-2}`.
pub(crate) fn power_net(n: usize, m: u32) -> Result<ReluNetwork> {
    if n == 0 {
        return Err(Error::Construction("power network needs n ≥ 1".into()));
    }
    let mut net = identity(1, 1)?;
    let mut have = 1;
    while have < n {
        let new = (2 * have).min(n);
        let mut blocks = vec![((0..have).collect(), identity(have, (m + 2) as usize)?)];
        for j in have + 1..=new {
            blocks.push((vec![have - 1, j - have - 1], mult2_unit(m, 1.0, 1.0, 1.0)?));
        }
        net = concat(&[net, select_parallel(have, blocks)?])?;
        have = new;
    }
    Ok(net)
}

/// Certified power network on `[-1, 1]` with every output within `eps`.
pub fn build_power(n: usize, eps: f64) -> Result<ReluNetwork> {
    let m0 = yarotsky_iterations(eps / (n.max(2) - 1) as f64);
    refine(m0, |m| power_net(n, m), |net| {
        let (err, pts) = vec_sup_error(net, &[(-1.0, 1.0)], |x| (1..=n).map(|k| x[0].powi(k as i32)).collect());
        ErrorCertificate::new(eps, vec![(-1.0, 1.0)], pts, err)
    })
}

fn vec_sup_error(net: &ReluNetwork, domain: &[(f64, f64)], f: impl Fn(&[f64]) -> Vec<f64>) -> (f64, usize) {
    let grid = box_grid(domain, CERT_GRID_POINTS);
    let mut err: f64 = 0.0;
    for x in &grid {
        for (a, b) in net.eval(x).iter().zip(f(x)) {
            err = err.max((a - b).abs());
        }
    }
    (err, grid.len())
}

/// Builds with `m0` sawtooth levels and adds levels until the certificate
/// holds or the refinement budget is spent; the last attempt is returned
/// with its (possibly invalid) certificate.
fn refine(
    m0: u32,
    mut build: impl FnMut(u32) -> Result<ReluNetwork>,
    mut check: impl FnMut(&ReluNetwork) -> ErrorCertificate,
) -> Result<ReluNetwork> {
    let mut m = m0;
    loop {
        let net = build(m)?;
        let cert = check(&net);
        if cert.valid || m >= (m0 + REFINE_ATTEMPTS).min(MAX_ITERATIONS) {
            return Ok(net.with_certificate(cert));
        }
        m += 1;
    }
}

/// Product tree for `Π x_i^{α_i}` with coordinates clipped to `[-C_i, C_i]`
/// and normalized before multiplication.
pub(crate) fn mult_tree(alpha: &[u32], ranges: &[f64], m: u32) -> Result<ReluNetwork> {
    let factors: Vec<usize> = alpha.iter().enumerate().flat_map(|(i, &a)| std::iter::repeat_n(i, a as usize)).collect();
    let degree = factors.len();
    let inputs = alpha.len();
    let lo: Vec<f64> = factors.iter().map(|&i| -ranges[i]).collect();
    let hi: Vec<f64> = factors.iter().map(|&i| ranges[i]).collect();
    let clip = clip_net(&lo, &hi)?;
    // route the inputs to their factor slots
    let clip = {
        let mut layers = clip.layers;
        let l0 = &layers[0];
        let trip = l0.triplets.iter().map(|&(r, c, w)| (r, factors[c as usize] as u32, w)).collect();
        layers[0] = Layer::new(l0.rows, inputs, trip, l0.bias.clone())?;
        ReluNetwork::from_layers(layers)?
    };
    let mut nets = vec![clip];
    let mut scales: Vec<f64> = factors.iter().map(|&i| 1.0 / ranges[i]).collect();
    let total: f64 = factors.iter().map(|&i| ranges[i]).product();
    let mut count = degree;
    while count > 1 {
        let mut blocks = Vec::new();
        let mut next_scales = Vec::new();
        for p in 0..count / 2 {
            let last = count == 2;
            let out = if last { total } else { 1.0 };
            blocks.push((vec![2 * p, 2 * p + 1], mult2_unit(m, scales[2 * p], scales[2 * p + 1], out)?));
            next_scales.push(1.0);
        }
        if count % 2 == 1 {
            blocks.push((vec![count - 1], identity(1, (m + 2) as usize)?));
            next_scales.push(scales[count - 1]);
        }
        nets.push(select_parallel(count, blocks)?);
        scales = next_scales;
        count = count.div_ceil(2);
    }
    // the sawtooth squares overshoot by at most 2^{-2m-2}; clamp to the exact bound
    nets.push(clip_net(&[-total], &[total])?);
    concat(&nets)
}

/// `Π x_i^{α_i}` on `Π [-C_i, C_i]`; inputs are clipped first, so the output
/// is bounded by `Π C_i^{α_i}` everywhere and vanishes when any factor is 0.
pub fn build_mult_ranges(alpha: &[u32], ranges: &[f64], eps: f64) -> Result<ReluNetwork> {
    let degree: u32 = alpha.iter().sum();
    if degree < 2 {
        return Err(Error::Construction(format!("monomial degree must be at least 2, got {degree}")));
    }
    if alpha.len() != ranges.len() || ranges.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::Construction("ranges must be positive, one per input".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Construction("eps must be positive".into()));
    }
    let total: f64 = alpha.iter().zip(ranges).map(|(&a, c)| c.powi(a as i32)).product();
    let m0 = yarotsky_iterations(eps / (total * (degree - 1) as f64));
    let domain: Vec<(f64, f64)> = ranges.iter().map(|&c| (-c, c)).collect();
    refine(m0, |m| mult_tree(alpha, ranges, m), |net| {
        let (err, pts) = super::grid_sup_error(net, &domain, CERT_GRID_POINTS, |x| {
            x.iter().zip(alpha).map(|(v, &a)| v.powi(a as i32)).product()
        });
        ErrorCertificate::new(eps, domain.clone(), pts, err)
    })
}

/// `Π x_i^{α_i}` on `[-C, C]^I`.
pub fn build_mult(alpha: &[u32], range_c: f64, eps: f64) -> Result<ReluNetwork> {
    if !(range_c >= 1.0) {
        return Err(Error::Construction(format!("range C must be at least 1, got {range_c}")));
    }
    build_mult_ranges(alpha, &vec![range_c; alpha.len()], eps)
}

#[derive(Clone, Copy)]
enum Local {
    Inv,
    Root,
}

/// Knots `lo · 1.5^i` up to the first one at or above `hi`.
fn geometric_knots(lo: f64, hi: f64) -> Vec<f64> {
    let mut knots = vec![lo];
    while *knots.last().unwrap() < hi {
        let next = knots.last().unwrap() * KNOT_RATIO;
        knots.push(next);
    }
    if knots.len() == 1 {
        knots.push(lo * KNOT_RATIO);
    }
    knots
}

fn binom_half(n: usize) -> f64 {
    (0..n).fold(1.0, |acc, i| acc * (0.5 - i as f64) / (i + 1) as f64)
}

/// Degree and per-power error budget of the local expansions.
fn local_plan(kind: Local, lo: f64, hi: f64, eps: f64) -> (usize, f64) {
    match kind {
        // remainder of one piece ≤ 2^{-l} / x_{i-1}
        Local::Inv => {
            let l = (2.0 / (eps * lo)).log2().ceil().max(1.0) as usize;
            // Σ_i (1/x_{i-1}) ≤ 3 / lo over a ratio-1.5 grid
            (l, eps * lo / (6.0 * l as f64))
        }
        // remainder of one piece ≤ sqrt(x_{i-1}) 2^{-l}
        Local::Root => {
            let top = hi * KNOT_RATIO;
            let l = (2.0 * top.sqrt() / eps).log2().ceil().max(1.0) as usize;
            (l, eps / (2.0 * 6.0 * top.sqrt() * l as f64))
        }
    }
}

/// Sum of local expansions on geometric intervals:
/// `f(lo) + Σ_i P_i(v_i)`, `v_i = 2 (clip(x; x_{i-1}, x_i) / x_{i-1} - 1) ∈ [0, 1]`,
/// where `P_i` is the degree-`l` Taylor polynomial of `f(x) - f(x_{i-1})`
/// plus a linear term that makes the piece exact at `x_i`.
fn geometric_taylor(kind: Local, lo: f64, hi: f64, degree: usize, m: u32) -> Result<ReluNetwork> {
    let knots = geometric_knots(lo, hi);
    let n_int = knots.len() - 1;
    let mut t1 = Vec::new();
    let mut b1 = Vec::new();
    let mut t2 = Vec::new();
    for i in 0..n_int {
        let (a, b) = (knots[i], knots[i + 1]);
        let r = 2 * i as u32;
        t1.extend([(r, 0, 1.0), (r + 1, 0, 1.0)]);
        b1.extend([-a, -b]);
        // clip - a = h0 - h1
        t2.extend([(i as u32, r, 2.0 / a), (i as u32, r + 1, -2.0 / a)]);
    }
    let stage_a = ReluNetwork::from_layers(vec![Layer::new(2 * n_int, 1, t1, b1)?, Layer::new(n_int, 2 * n_int, t2, vec![0.0; n_int])?])?;
    let blocks = (0..n_int).map(|i| Ok((vec![i], power_net(degree, m)?))).collect::<Result<Vec<_>>>()?;
    let stage_b = select_parallel(n_int, blocks)?;
    let mut trip = Vec::new();
    for i in 0..n_int {
        let (a, b) = (knots[i], knots[i + 1]);
        let mut at_one = 0.0;
        for n in 1..=degree {
            let c = match kind {
                Local::Inv => (-0.5f64).powi(n as i32) / a,
                Local::Root => a.sqrt() * binom_half(n) * 0.5f64.powi(n as i32),
            };
            at_one += c;
            trip.push((0, (i * degree + n - 1) as u32, c));
        }
        let exact = match kind {
            Local::Inv => 1.0 / b - 1.0 / a,
            Local::Root => b.sqrt() - a.sqrt(),
        };
        trip.push((0, (i * degree) as u32, exact - at_one));
    }
    let base = match kind {
        Local::Inv => 1.0 / lo,
        Local::Root => lo.sqrt(),
    };
    let stage_c = affine(1, n_int * degree, trip, vec![base])?;
    concat(&[stage_a, stage_b, stage_c])
}

fn log_grid_sup(net: &ReluNetwork, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> (f64, usize) {
    let n = CERT_GRID_POINTS;
    let (a, b) = (lo.ln(), hi.ln());
    let err = (0..n)
        .map(|i| {
            let x = (a + (b - a) * i as f64 / (n - 1) as f64).exp();
            (net.eval_scalar(&[x]) - f(x)).abs()
        })
        .fold(0.0, f64::max);
    (err, n)
}

fn build_local(kind: Local, lo: f64, hi: f64, eps: f64) -> Result<ReluNetwork> {
    if !(lo > 0.0 && lo < hi && eps > 0.0) {
        return Err(Error::Construction(format!("need 0 < lo < hi and eps > 0, got [{lo}, {hi}], eps {eps}")));
    }
    let (degree, per_power) = local_plan(kind, lo, hi, eps);
    let m0 = yarotsky_iterations(per_power / degree.max(2) as f64);
    let f = move |x: f64| match kind {
        Local::Inv => 1.0 / x,
        Local::Root => x.sqrt(),
    };
    refine(m0, |m| geometric_taylor(kind, lo, hi, degree, m), |net| {
        let (err, pts) = log_grid_sup(net, lo, hi, f);
        ErrorCertificate::new(eps, vec![(lo, hi)], pts, err).with_note("log-spaced grid")
    })
}

/// `1/x` on `[lo, hi]` within `eps`; constant outside.
pub fn build_inv_range(lo: f64, hi: f64, eps: f64) -> Result<ReluNetwork> {
    build_local(Local::Inv, lo, hi, eps)
}

/// `1/x` on `[eps, 1/eps]` within `eps`.
pub fn build_inv(eps: f64) -> Result<ReluNetwork> {
    check_unit_eps(eps)?;
    build_inv_range(eps, 1.0 / eps, eps)
}

/// `sqrt(x)` on `[lo, hi]` within `eps`; constant outside.
pub fn build_root_range(lo: f64, hi: f64, eps: f64) -> Result<ReluNetwork> {
    build_local(Local::Root, lo, hi, eps)
}

/// `sqrt(x)` on `[eps, 1/eps]` within `eps`.
pub fn build_root(eps: f64) -> Result<ReluNetwork> {
    check_unit_eps(eps)?;
    build_root_range(eps, 1.0 / eps, eps)
}

fn check_unit_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Construction(format!("eps must lie in (0, 1), got {eps}")));
    }
    Ok(())
}

/// Taylor polynomial of `e^{-x}` on `[0, A]`, `A = log(3/eps)`, after clipping
/// the input to `[0, A]`; degree `k - 1` with `k = max(2eA, ⌈log₂ 3/eps⌉)`.
fn exp_net(eps: f64, m: u32) -> Result<ReluNetwork> {
    let a = (3.0 / eps).ln();
    let k = exp_terms(eps);
    let l1 = Layer::new(2, 1, vec![(0, 0, 1.0), (1, 0, 1.0)], vec![0.0, -a])?;
    let l2 = Layer::new(1, 2, vec![(0, 0, 1.0 / a), (0, 1, -1.0 / a)], vec![0.0])?;
    let clip = ReluNetwork::from_layers(vec![l1, l2])?;
    let n = k - 1;
    let powers = power_net(n, m)?;
    let mut coef = 1.0;
    let mut trip = Vec::with_capacity(n);
    for i in 1..=n {
        coef *= -a / i as f64;
        trip.push((0, (i - 1) as u32, coef));
    }
    concat(&[clip, powers, affine(1, n, trip, vec![1.0])?])
}

fn exp_terms(eps: f64) -> usize {
    let a = (3.0 / eps).ln();
    ((2.0 * std::f64::consts::E * a).ceil()).max((3.0 / eps).log2().ceil()).max(2.0) as usize
}

/// `e^{-x}` on `[0, ∞)` within `eps`; output at most `eps` beyond `log(3/eps)`.
pub fn build_exp(eps: f64) -> Result<ReluNetwork> {
    check_unit_eps(eps)?;
    let a = (3.0 / eps).ln();
    // Σ_i A^i/i! · (i-1) e_m ≤ A e^A e_m = 3A e_m / eps
    let m0 = yarotsky_iterations(eps * eps / (9.0 * a));
    let domain = vec![(0.0, 2.0 * a + 2.0)];
    refine(m0, |m| exp_net(eps, m), |net| {
        let (err, pts) = super::grid_sup_error(net, &domain, CERT_GRID_POINTS, |x| (-x[0]).exp());
        ErrorCertificate::new(eps, domain.clone(), pts, err)
    })
}

/// Network for `t ↦ ∫₀ᵗ β` on `[0, t_cap]`, constant afterwards.
fn integral_net(schedule: &BetaSchedule, t_cap: f64, eps: f64) -> Result<ReluNetwork> {
    match &schedule.kind {
        BetaKind::Constant { beta0 } => {
            let c = clip_net(&[0.0], &[t_cap])?;
            c.scale_output(*beta0)
        }
        BetaKind::Polynomial { coefficients, horizon } => {
            let tp = horizon.min(t_cap);
            let deg = coefficients.len();
            // P(v·tp) = Σ c_i tp^{i+1} v^{i+1} / (i+1)
            let coefs: Vec<f64> =
                coefficients.iter().enumerate().map(|(i, c)| c * tp.powi(i as i32 + 1) / (i + 1) as f64).collect();
            let scale: f64 = coefs.iter().map(|c| c.abs()).sum::<f64>() * deg as f64;
            let m = yarotsky_iterations(eps / scale.max(1.0));
            let mut blocks = vec![(vec![0], concat(&[clip_net(&[0.0], &[tp])?.scale_output(1.0 / tp)?, power_net(deg, m)?])?)];
            let tail = t_cap > tp;
            if tail {
                let w = clip_net(&[tp], &[t_cap])?.shift_output(-tp);
                blocks.push((vec![0], w));
            }
            let net = select_parallel(1, blocks)?;
            let mut trip: Vec<(u32, u32, f64)> = coefs.iter().enumerate().map(|(i, &c)| (0, i as u32, c)).collect();
            if tail {
                trip.push((0, deg as u32, schedule.beta(*horizon)));
            }
            concat(&[net, affine(1, net_out(deg, tail), trip, vec![0.0])?])
        }
    }
}

fn net_out(deg: usize, tail: bool) -> usize {
    deg + usize::from(tail)
}

/// Networks for `m_t` (all `t ≥ 0`) and `σ_t` (`t ≥ eps`), each within `eps`.
/// `m` is `exp(-∫β)` through the exponential network; `σ` is the root network
/// applied to `1 - exp(-2∫β)`.
pub fn build_m_sigma_nets(schedule: &BetaSchedule, eps: f64) -> Result<(ReluNetwork, ReluNetwork)> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Construction(format!("eps must lie in (0, 1/2), got {eps}")));
    }
    let t_cap = (4.0 / eps).ln() / schedule.beta_lo;
    let horizon = 3.0 * t_cap;
    let m_domain = vec![(0.0, horizon)];
    let integral = integral_net(schedule, t_cap, eps / 8.0)?;
    let m_net = concat(&[integral.clone(), build_exp(eps / 4.0)?.without_certificate()])?;
    let (err, pts) = super::grid_sup_error(&m_net, &m_domain, CERT_GRID_POINTS, |t| schedule.state_unchecked(t[0]).m);
    let m_net = m_net.with_certificate(ErrorCertificate::new(eps, m_domain, pts, err));

    // σ² ≥ 1 - exp(-2 β_lo eps) for t ≥ eps; keep half of it as the root floor
    let root_lo = 0.5 * -(-2.0 * schedule.beta_lo * eps).exp_m1();
    let exp_eps = 0.25 * eps * root_lo.sqrt();
    let doubled = integral_net(schedule, t_cap, exp_eps / 8.0)?.scale_output(2.0)?;
    let one_minus = build_exp(exp_eps)?.without_certificate().scale_output(-1.0)?.shift_output(1.0);
    let root = build_root_range(root_lo, 1.0, 0.5 * eps)?.without_certificate();
    let s_net = concat(&[doubled, one_minus, root])?;
    let s_domain = vec![(eps, horizon)];
    let (err, pts) = super::grid_sup_error(&s_net, &s_domain, CERT_GRID_POINTS, |t| schedule.state_unchecked(t[0]).sigma);
    let s_net = s_net.with_certificate(ErrorCertificate::new(eps, s_domain, pts, err));
    Ok((m_net, s_net))
}

impl ReluNetwork {
    pub(crate) fn without_certificate(mut self) -> Self {
        self.certificate = None;
        self
    }
}
