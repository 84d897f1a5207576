//! Threshold tracking on stationary Gaussian pre-activation streams.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sparling::engine::{Graph, Mode, Tensor};
use sparling::sparsity::{sparse_forward, SparsityState, ThresholdVariant};

/// `rows` draws of a `[rows, C]` tensor, channel `c` from `N(mean, sd)`.
pub fn draw(rows: usize, channels: &[(f64, f64)], rng: &mut impl Rng) -> Tensor<f64> {
    let dists: Vec<Normal<f64>> = channels.iter().map(|&(m, s)| Normal::new(m, s).unwrap()).collect();
    let c = channels.len();
    Tensor::from_fn(vec![rows, c], |i| dists[i % c].sample(rng))
}

/// Fraction of positive layer outputs per channel.
pub fn channel_densities(state: &mut SparsityState, z: Tensor<f64>) -> Vec<f64> {
    let c = state.channels();
    let mut g = Graph::<f64>::inference();
    let id = g.input(z);
    let out = sparse_forward(&mut g, id, state, Mode::Eval).unwrap();
    let v = g.value(out);
    let rows = v.len() / c;
    (0..c)
        .map(|ch| v.data().iter().skip(ch).step_by(c).filter(|x| **x > 0.0).count() as f64 / rows as f64)
        .collect()
}

pub struct Tracked {
    pub state: SparsityState,
    pub updates: usize,
    /// Fraction of positive train-mode outputs per channel over the second
    /// half of the stream.
    pub realized: Vec<f64>,
}

/// Feeds `steps` train-mode batches, each just large enough to pass the
/// accumulation gate, so every step performs one threshold update.
pub fn track(
    delta: f64,
    variant: ThresholdVariant,
    channels: &[(f64, f64)],
    steps: usize,
    rng: &mut impl Rng,
) -> Tracked {
    let mut state = SparsityState::new(channels.len(), delta, variant).unwrap();
    let rows = (state.accumulation_bound() / channels.len() as f64).ceil() as usize;
    let c = channels.len();
    let mut updates = 0;
    let mut positives = vec![0usize; c];
    for step in 0..steps {
        let mut g = Graph::<f64>::inference();
        let id = g.input(draw(rows, channels, rng));
        let out = sparse_forward(&mut g, id, &mut state, Mode::Train).unwrap();
        if step >= steps / 2 {
            for (i, v) in g.value(out).data().iter().enumerate() {
                positives[i % c] += usize::from(*v > 0.0);
            }
        }
        if state.update().unwrap().is_some() {
            updates += 1;
        }
    }
    let seen = (rows * (steps - steps / 2)) as f64;
    Tracked {
        state,
        updates,
        realized: positives.iter().map(|&p| p as f64 / seen).collect(),
    }
}

pub fn relative_error(realized: f64, target: f64) -> f64 {
    (realized - target).abs() / target
}
