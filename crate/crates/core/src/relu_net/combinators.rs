use super::{Layer, ReluNetwork};
use crate::{Error, Result};

/// One-layer (purely affine) network.
pub fn affine(rows: usize, cols: usize, triplets: Vec<(u32, u32, f64)>, bias: Vec<f64>) -> Result<ReluNetwork> {
    ReluNetwork::from_layers(vec![Layer::new(rows, cols, triplets, bias)?])
}

/// Identity on `R^d` with exactly `depth` layers. For `depth ≥ 2` the signal is
/// carried as the pair `(ReLU(x), ReLU(-x))`.
pub fn identity(d: usize, depth: usize) -> Result<ReluNetwork> {
    if depth == 0 || d == 0 {
        return Err(Error::Construction("identity needs positive depth and dimension".into()));
    }
    if depth == 1 {
        return affine(d, d, (0..d as u32).map(|i| (i, i, 1.0)).collect(), vec![0.0; d]);
    }
    let n = d as u32;
    let mut layers = Vec::with_capacity(depth);
    let split = (0..n).map(|i| (i, i, 1.0)).chain((0..n).map(|i| (n + i, i, -1.0))).collect();
    layers.push(Layer::new(2 * d, d, split, vec![0.0; 2 * d])?);
    for _ in 0..depth - 2 {
        layers.push(Layer::new(2 * d, 2 * d, (0..2 * n).map(|i| (i, i, 1.0)).collect(), vec![0.0; 2 * d])?);
    }
    let merge = (0..n).flat_map(|i| [(i, i, 1.0), (i, n + i, -1.0)]).collect();
    layers.push(Layer::new(d, 2 * d, merge, vec![0.0; d])?);
    ReluNetwork::from_layers(layers)
}

/// Composition `nets[k-1] ∘ ... ∘ nets[0]` with depth `Σ L_i`.
///
/// The last affine map of each inner network is emitted twice with opposite
/// signs, rows interleaved, and the next network reads `ReLU(z) - ReLU(-z)`,
/// so the composition is reproduced bit for bit.
pub fn concat(nets: &[ReluNetwork]) -> Result<ReluNetwork> {
    let (first, rest) = nets.split_first().ok_or_else(|| Error::Construction("concat of no networks".into()))?;
    let mut layers = first.layers.clone();
    let mut out_dim = first.output_dim;
    for g in rest {
        if g.input_dim != out_dim {
            return Err(Error::Dimension { expected: out_dim, got: g.input_dim });
        }
        let last = layers.pop().expect("nonempty");
        let mut trip = Vec::with_capacity(2 * last.triplets.len());
        let mut neg = Vec::with_capacity(last.triplets.len());
        for &(r, c, w) in &last.triplets {
            trip.push((2 * r, c, w));
            neg.push((2 * r + 1, c, -w));
        }
        trip.extend(neg);
        let bias = last.bias.iter().flat_map(|&b| [b, -b]).collect();
        layers.push(Layer::new(2 * last.rows, last.cols, trip, bias)?);
        let g_first = &g.layers[0];
        let trip = g_first.triplets.iter().flat_map(|&(r, c, w)| [(r, 2 * c, w), (r, 2 * c + 1, -w)]).collect();
        layers.push(Layer::new(g_first.rows, 2 * g_first.cols, trip, g_first.bias.clone())?);
        layers.extend(g.layers[1..].iter().cloned());
        out_dim = g.output_dim;
    }
    ReluNetwork::from_layers(layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParallelMode {
    Stack,
    Sum,
}

/// Runs networks side by side on a shared input. Shallower networks are
/// padded with identity blocks; `Sum` appends one summing layer.
pub fn parallel(nets: &[ReluNetwork], mode: ParallelMode) -> Result<ReluNetwork> {
    let first = nets.first().ok_or_else(|| Error::Construction("parallel of no networks".into()))?;
    let d_in = first.input_dim;
    if let Some(n) = nets.iter().find(|n| n.input_dim != d_in) {
        return Err(Error::Dimension { expected: d_in, got: n.input_dim });
    }
    if mode == ParallelMode::Sum {
        if let Some(n) = nets.iter().find(|n| n.output_dim != first.output_dim) {
            return Err(Error::Dimension { expected: first.output_dim, got: n.output_dim });
        }
    }
    let depth = nets.iter().map(|n| n.depth()).max().unwrap_or(0);
    let padded: Vec<ReluNetwork> = nets
        .iter()
        .map(|n| {
            if n.depth() < depth {
                concat(&[n.clone(), identity(n.output_dim, depth - n.depth())?])
            } else {
                Ok(n.clone())
            }
        })
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(depth);
    for li in 0..depth {
        let rows: usize = padded.iter().map(|n| n.layers[li].rows).sum();
        let cols: usize = if li == 0 { d_in } else { padded.iter().map(|n| n.layers[li].cols).sum() };
        let mut trip = Vec::new();
        let mut bias = Vec::with_capacity(rows);
        let (mut r0, mut c0) = (0u32, 0u32);
        for n in &padded {
            let l = &n.layers[li];
            let coff = if li == 0 { 0 } else { c0 };
            trip.extend(l.triplets.iter().map(|&(r, c, w)| (r + r0, c + coff, w)));
            bias.extend_from_slice(&l.bias);
            r0 += l.rows as u32;
            c0 += l.cols as u32;
        }
        layers.push(Layer::new(rows, cols, trip, bias)?);
    }
    let stacked = ReluNetwork::from_layers(layers)?;
    match mode {
        ParallelMode::Stack => Ok(stacked),
        ParallelMode::Sum => {
            let k = first.output_dim;
            let trip = (0..nets.len()).flat_map(|b| (0..k).map(move |i| (i as u32, (b * k + i) as u32, 1.0))).collect();
            let summer = affine(k, nets.len() * k, trip, vec![0.0; k])?;
            concat(&[stacked, summer])
        }
    }
}

/// Stacks blocks that each read a selection of the shared input coordinates.
pub fn select_parallel(input_dim: usize, blocks: Vec<(Vec<usize>, ReluNetwork)>) -> Result<ReluNetwork> {
    let remapped: Vec<ReluNetwork> = blocks
        .into_iter()
        .map(|(idx, net)| {
            if idx.len() != net.input_dim {
                return Err(Error::Dimension { expected: net.input_dim, got: idx.len() });
            }
            if idx.iter().any(|&i| i >= input_dim) {
                return Err(Error::Construction("input selection out of range".into()));
            }
            let mut layers = net.layers;
            let l0 = &layers[0];
            let trip = l0.triplets.iter().map(|&(r, c, w)| (r, idx[c as usize] as u32, w)).collect();
            layers[0] = Layer::new(l0.rows, input_dim, trip, l0.bias.clone())?;
            ReluNetwork::from_layers(layers)
        })
        .collect::<Result<_>>()?;
    parallel(&remapped, ParallelMode::Stack)
}
