//! The score-function interface shared by the oracle, trained networks and the
//! sampler.

use crate::schedule::NoiseState;

/// A (possibly approximate) score `s(x, t) ≈ ∇ log p_t(x)`.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    /// Writes `s(x, t)` into `out`; `state` must correspond to `t`.
    fn score_into(&self, x: &[f64], state: &NoiseState, out: &mut [f64]);

    fn score_at(&self, x: &[f64], state: &NoiseState) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, state, &mut out);
        out
    }
}

/// Wraps a closure `(x, state, out)` as a score model.
pub struct FnScore<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> ScoreModel for FnScore<F>
where
    F: Fn(&[f64], &NoiseState, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, x: &[f64], state: &NoiseState, out: &mut [f64]) {
        (self.f)(x, state, out)
    }
}

/// `base(x, t) + offset`, a constant-vector perturbation of another score.
pub struct OffsetScore<'a, S: ?Sized> {
    pub base: &'a S,
    pub offset: Vec<f64>,
}

impl<S: ScoreModel + ?Sized> ScoreModel for OffsetScore<'_, S> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score_into(&self, x: &[f64], state: &NoiseState, out: &mut [f64]) {
        self.base.score_into(x, state, out);
        for (o, c) in out.iter_mut().zip(&self.offset) {
            *o += c;
        }
    }
}

/// The exact score of `N(0, I)`, which is `-x` for every `t`.
pub fn standard_normal_score(dim: usize) -> FnScore<impl Fn(&[f64], &NoiseState, &mut [f64]) + Sync> {
    FnScore {
        dim,
        f: |x: &[f64], _: &NoiseState, out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = -v;
            }
        },
    }
}
