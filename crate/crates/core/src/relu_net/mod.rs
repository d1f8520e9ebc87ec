//! Explicit sparse ReLU networks with size ledgers, structural combinators
//! and constructive approximators.
//!
//! A network with `L` layers computes `A_L ReLU(... ReLU(A_1 x + b_1) ...) + b_L`.
//! Weights are stored as `(row, col, value)` triplets and evaluated in stored
//! order, so two networks with the same triplet order produce bit-identical
//! results.

mod approx;
mod combinators;
mod diffused;

pub use approx::{
    build_clip, build_exp, build_inv, build_inv_range, build_m_sigma_nets, build_mult, build_mult_ranges,
    build_power, build_root, build_root_range, build_switch, mult2_unit, yarotsky_iterations,
};
pub use combinators::{affine, concat, identity, parallel, select_parallel, ParallelMode};
pub use diffused::{build_diffused_basis_net_1d, diffused_output_bound, DiffusedNetConfig, DIFFUSED_CERT_FACTOR};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum number of grid points in a certification scan.
pub const CERT_GRID_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub triplets: Vec<(u32, u32, f64)>,
    pub bias: Vec<f64>,
}

impl Layer {
    /// Zero-valued triplets are dropped; everything else keeps its order.
    pub fn new(rows: usize, cols: usize, triplets: Vec<(u32, u32, f64)>, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != rows {
            return Err(Error::Construction(format!("bias has {} entries for {rows} rows", bias.len())));
        }
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r as usize >= rows || c as usize >= cols) {
            return Err(Error::Construction(format!("triplet ({r}, {c}) outside a {rows}x{cols} matrix")));
        }
        if triplets.iter().any(|t| !t.2.is_finite()) || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Construction("non-finite parameter".into()));
        }
        let triplets = triplets.into_iter().filter(|t| t.2 != 0.0).collect();
        Ok(Self { rows, cols, triplets, bias })
    }

    fn apply(&self, h: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for &(r, c, w) in &self.triplets {
            out[r as usize] += w * h[c as usize];
        }
    }

    fn nonzeros(&self) -> usize {
        self.triplets.len() + self.bias.iter().filter(|b| **b != 0.0).count()
    }

    fn max_abs(&self) -> f64 {
        self.triplets.iter().map(|t| t.2.abs()).chain(self.bias.iter().map(|b| b.abs())).fold(0.0, f64::max)
    }
}

/// `(L, W, S, B)`: depth, widths `(d_in, d_1, ..., d_L)`, nonzero parameters,
/// largest absolute parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub depth: usize,
    pub widths: Vec<usize>,
    pub nonzeros: usize,
    pub max_abs: f64,
}

impl Ledger {
    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }
}

/// Sup error measured on a regular grid of `domain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCertificate {
    pub target_eps: f64,
    pub domain: Vec<(f64, f64)>,
    pub grid_points: usize,
    pub measured_sup_error: f64,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ErrorCertificate {
    pub fn new(target_eps: f64, domain: Vec<(f64, f64)>, grid_points: usize, measured_sup_error: f64) -> Self {
        let valid = measured_sup_error <= target_eps;
        Self { target_eps, domain, grid_points, measured_sup_error, valid, note: None }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluNetwork {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
    pub ledger: Ledger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<ErrorCertificate>,
}

impl ReluNetwork {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Construction("network needs at least one layer".into()))?;
        let input_dim = first.cols;
        for w in layers.windows(2) {
            if w[1].cols != w[0].rows {
                return Err(Error::Dimension { expected: w[0].rows, got: w[1].cols });
            }
        }
        let output_dim = layers.last().map(|l| l.rows).unwrap_or(0);
        let ledger = recount(input_dim, &layers);
        Ok(Self { input_dim, output_dim, layers, ledger, certificate: None })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim, "network input dimension");
        let mut h = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&h, &mut z);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut h, &mut z);
        }
        h
    }

    pub fn eval_scalar(&self, x: &[f64]) -> f64 {
        self.eval(x)[0]
    }

    /// Ledger recomputed from the stored parameters.
    pub fn recount(&self) -> Ledger {
        recount(self.input_dim, &self.layers)
    }

    /// Multiplies the output layer by `c`.
    pub fn scale_output(mut self, c: f64) -> Result<Self> {
        let last = self.layers.last_mut().expect("nonempty");
        for t in last.triplets.iter_mut() {
            t.2 *= c;
        }
        for b in last.bias.iter_mut() {
            *b *= c;
        }
        let layers = std::mem::take(&mut self.layers);
        let rebuilt: Result<Vec<Layer>> =
            layers.into_iter().map(|l| Layer::new(l.rows, l.cols, l.triplets, l.bias)).collect();
        Self::from_layers(rebuilt?)
    }

    /// Adds `c` to every output.
    pub fn shift_output(mut self, c: f64) -> Self {
        let last = self.layers.last_mut().expect("nonempty");
        for b in last.bias.iter_mut() {
            *b += c;
        }
        self.ledger = self.recount();
        self
    }

    pub fn with_certificate(mut self, cert: ErrorCertificate) -> Self {
        self.certificate = Some(cert);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses a network and rejects a ledger that disagrees with the parameters.
    pub fn from_json(s: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(s)?;
        let rebuilt = Self::from_layers(net.layers.clone())?;
        if rebuilt.ledger != net.ledger || rebuilt.input_dim != net.input_dim || rebuilt.output_dim != net.output_dim {
            return Err(Error::Construction("stored ledger does not match the parameters".into()));
        }
        Ok(net)
    }
}

fn recount(input_dim: usize, layers: &[Layer]) -> Ledger {
    let mut widths = vec![input_dim];
    widths.extend(layers.iter().map(|l| l.rows));
    Ledger {
        depth: layers.len(),
        widths,
        nonzeros: layers.iter().map(Layer::nonzeros).sum(),
        max_abs: layers.iter().map(Layer::max_abs).fold(0.0, f64::max),
    }
}

/// Regular grid over a box with at least `min_points` points in total.
pub fn box_grid(domain: &[(f64, f64)], min_points: usize) -> Vec<Vec<f64>> {
    let d = domain.len();
    let mut per_axis = (min_points as f64).powf(1.0 / d as f64).ceil() as usize;
    while per_axis.pow(d as u32) < min_points {
        per_axis += 1;
    }
    let per_axis = per_axis.max(2);
    let mut pts = vec![Vec::with_capacity(d)];
    for &(lo, hi) in domain {
        let mut next = Vec::with_capacity(pts.len() * per_axis);
        for p in &pts {
            for i in 0..per_axis {
                let mut q = p.clone();
                q.push(lo + (hi - lo) * i as f64 / (per_axis - 1) as f64);
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

/// Sup of `|net(x)_0 - f(x)|` over a regular grid of `domain`.
pub fn grid_sup_error(net: &ReluNetwork, domain: &[(f64, f64)], min_points: usize, f: impl Fn(&[f64]) -> f64) -> (f64, usize) {
    let grid = box_grid(domain, min_points);
    let err = grid.iter().map(|x| (net.eval_scalar(x) - f(x)).abs()).fold(0.0, f64::max);
    (err, grid.len())
}

/// Scans the grid and attaches the resulting certificate.
pub fn certify(net: ReluNetwork, target_eps: f64, domain: Vec<(f64, f64)>, f: impl Fn(&[f64]) -> f64) -> ReluNetwork {
    let (err, n) = grid_sup_error(&net, &domain, CERT_GRID_POINTS, f);
    let cert = ErrorCertificate::new(target_eps, domain, n, err);
    net.with_certificate(cert)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ReluNetwork {
        let l1 = Layer::new(2, 1, vec![(0, 0, 1.0), (1, 0, -1.0)], vec![0.0, 0.5]).unwrap();
        let l2 = Layer::new(1, 2, vec![(0, 0, 2.0), (0, 1, 3.0)], vec![-1.0]).unwrap();
        ReluNetwork::from_layers(vec![l1, l2]).unwrap()
    }

    #[test]
    fn evaluates_relu_between_layers_only() {
        let n = tiny();
        // x = -2: hidden (relu(-2), relu(2.5)) = (0, 2.5); out = 7.5 - 1
        assert_eq!(n.eval(&[-2.0]), vec![6.5]);
        // x = 1: hidden (1, 0); out = 2 - 1
        assert_eq!(n.eval(&[1.0]), vec![1.0]);
    }

    #[test]
    fn ledger_counts() {
        let n = tiny();
        assert_eq!(n.ledger.depth, 2);
        assert_eq!(n.ledger.widths, vec![1, 2, 1]);
        assert_eq!(n.ledger.nonzeros, 2 + 1 + 2 + 1);
        assert_eq!(n.ledger.max_abs, 3.0);
        assert_eq!(n.recount(), n.ledger);
    }

    #[test]
    fn json_roundtrip_and_tamper_detection() {
        let n = tiny();
        let s = n.to_json().unwrap();
        assert_eq!(ReluNetwork::from_json(&s).unwrap(), n);
        let mut bad = n.clone();
        bad.ledger.nonzeros += 1;
        assert!(ReluNetwork::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn rejects_mismatched_layers() {
        let l1 = Layer::new(2, 1, vec![], vec![0.0; 2]).unwrap();
        let l2 = Layer::new(1, 3, vec![], vec![0.0]).unwrap();
        assert!(ReluNetwork::from_layers(vec![l1, l2]).is_err());
        assert!(Layer::new(1, 1, vec![(1, 0, 1.0)], vec![0.0]).is_err());
    }

    #[test]
    fn grid_has_enough_points() {
        assert!(box_grid(&[(0.0, 1.0)], 10_000).len() >= 10_000);
        assert!(box_grid(&[(0.0, 1.0); 3], 10_000).len() >= 10_000);
    }
}
