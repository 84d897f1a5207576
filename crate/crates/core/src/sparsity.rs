//! Spatial sparsity layer: a ReLU shifted by per-channel thresholds that
//! track the `1 - delta` quantile of the layer input through an
//! exponential moving average.

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Mode, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// How thresholds are fit to the buffered pre-activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdVariant {
    /// One quantile per channel; every channel gets density `delta`.
    #[serde(rename = "mt")]
    PerChannel,
    /// One quantile over all channels jointly; only the average density is
    /// pinned.
    #[serde(rename = "st")]
    Shared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityState {
    pub thresholds: Vec<f64>,
    delta: f64,
    pub momentum: f64,
    pub variant: ThresholdVariant,
    buffer: Vec<f64>,
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// The quantile update waits until `buffered * delta >= ACCUMULATION_FACTOR * C`.
pub const ACCUMULATION_FACTOR: f64 = 10.0;

impl SparsityState {
    pub fn new(channels: usize, delta: f64, variant: ThresholdVariant) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("sparsity layer needs at least one channel".into()));
        }
        check_delta(delta)?;
        Ok(Self {
            thresholds: vec![0.0; channels],
            delta,
            momentum: DEFAULT_MOMENTUM,
            variant,
            buffer: Vec::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.thresholds.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        check_delta(delta)?;
        self.delta = delta;
        Ok(())
    }

    /// Number of buffered pre-activation values awaiting a quantile update.
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Buffered element count at which [`Self::update`] fires.
    pub fn accumulation_bound(&self) -> f64 {
        ACCUMULATION_FACTOR * self.channels() as f64 / self.delta
    }

    pub fn clear_buffer(&mut self) {
        self.buffer.clear();
    }

    /// Appends a `[.., C]` tensor of pre-activations to the buffer.
    pub fn observe<R: Real>(&mut self, z: &Tensor<R>) -> Result<()> {
        if z.channels() != self.channels() {
            return Err(Error::shape(
                "sparsity",
                format!("input has {} channels, layer has {}", z.channels(), self.channels()),
            ));
        }
        self.buffer.extend(z.data().iter().map(|v| v.as_f64()));
        Ok(())
    }

    /// EMA step toward the `1 - delta` quantile of the buffer, once enough
    /// values are buffered. Returns the fitted quantiles when it fires.
    pub fn update(&mut self) -> Result<Option<Vec<f64>>> {
        if (self.buffer.len() as f64) * self.delta < ACCUMULATION_FACTOR * self.channels() as f64 {
            return Ok(None);
        }
        let c = self.channels();
        let q = quantiles_of_rows(&self.buffer, c, 1.0 - self.delta, self.variant)?;
        let mu = self.momentum;
        for (t, q) in self.thresholds.iter_mut().zip(&q) {
            *t = mu * *t + (1.0 - mu) * q;
        }
        self.buffer.clear();
        Ok(Some(q))
    }

    pub fn threshold_tensor<R: Real>(&self) -> Tensor<R> {
        Tensor::from_fn(vec![self.channels()], |i| R::of(self.thresholds[i]))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("density {delta} outside (0, 1]")));
    }
    Ok(())
}

/// `relu(z - t)` with `t` held constant; in train mode `z` is also buffered
/// for the next threshold update.
pub fn sparse_forward<R: Real>(
    graph: &mut Graph<R>,
    z: NodeId,
    state: &mut SparsityState,
    mode: Mode,
) -> Result<NodeId> {
    let thresholds = graph.constant(state.threshold_tensor());
    let out = graph.threshold_relu(z, thresholds)?;
    if mode == Mode::Train {
        state.observe(graph.value(z))?;
    }
    Ok(out)
}

/// Linear-interpolation quantile (the conventional "type 7" definition).
/// Reorders `values`.
pub fn quantile(values: &mut [f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("quantile level {p} outside [0, 1]")));
    }
    let pos = p * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lower, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return Ok(lower);
    }
    let next = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(lower + frac * (next - lower))
}

fn quantiles_of_rows(rows: &[f64], channels: usize, p: f64, variant: ThresholdVariant) -> Result<Vec<f64>> {
    let n = rows.len() / channels;
    match variant {
        ThresholdVariant::PerChannel => {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "per-channel quantile needs at least 2 values per channel, got {n}"
                )));
            }
            let mut column = Vec::with_capacity(n);
            (0..channels)
                .map(|c| {
                    column.clear();
                    column.extend(rows.iter().skip(c).step_by(channels));
                    quantile(&mut column, p)
                })
                .collect()
        }
        ThresholdVariant::Shared => {
            if rows.len() < 2 {
                return Err(Error::InvalidArgument("shared quantile needs at least 2 values".into()));
            }
            let q = quantile(&mut rows.to_vec(), p)?;
            Ok(vec![q; channels])
        }
    }
}

/// Quantile at level `p` of a `[N, .., C]` tensor: per channel for
/// [`ThresholdVariant::PerChannel`], over every entry (repeated per channel)
/// for [`ThresholdVariant::Shared`].
pub fn channel_quantiles<R: Real>(z: &Tensor<R>, p: f64, variant: ThresholdVariant) -> Result<Vec<f64>> {
    let rows: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
    quantiles_of_rows(&rows, z.channels(), p, variant)
}

/// One predicted or true motif: a spatial site, a channel, and a positive
/// activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub value: f64,
}

impl Motif {
    pub fn key(&self) -> (usize, usize, usize) {
        (self.row, self.col, self.channel)
    }
}

/// Sparse view of a `[H, W, C]` activation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    entries: Vec<Motif>,
}

impl MotifMap {
    pub fn new(height: usize, width: usize, channels: usize, mut entries: Vec<Motif>) -> Result<Self> {
        for m in &entries {
            if m.row >= height || m.col >= width || m.channel >= channels {
                return Err(Error::InvalidArgument(format!(
                    "motif {:?} outside [{height}, {width}, {channels}]",
                    m.key()
                )));
            }
            if !(m.value > 0.0) || !m.value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "motif {:?} has non-positive activation {}",
                    m.key(),
                    m.value
                )));
            }
        }
        entries.sort_by_key(Motif::key);
        if entries.windows(2).any(|w| w[0].key() == w[1].key()) {
            return Err(Error::InvalidArgument("duplicate motif site".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            entries,
        })
    }

    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            entries: Vec::new(),
        }
    }

    /// Entries sorted by `(row, col, channel)`.
    pub fn entries(&self) -> &[Motif] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / (self.height * self.width * self.channels) as f64
    }
}

/// One [`MotifMap`] per batch element holding exactly the strictly positive
/// entries of a `[B, H, W, C]` tensor.
pub fn extract_motifs<R: Real>(activations: &Tensor<R>) -> Result<Vec<MotifMap>> {
    let s = activations.shape();
    if s.len() != 4 {
        return Err(Error::shape("extract_motifs", format!("{s:?} is not [B,H,W,C]")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let per = h * w * c;
    Ok(activations
        .data()
        .chunks_exact(per)
        .take(b)
        .map(|sample| {
            let entries = sample
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > R::zero())
                .map(|(i, v)| Motif {
                    row: i / (w * c),
                    col: (i / c) % w,
                    channel: i % c,
                    value: v.as_f64(),
                })
                .collect();
            // Entries come out in (row, col, channel) order and are unique.
            MotifMap {
                height: h,
                width: w,
                channels: c,
                entries,
            }
        })
        .collect())
}
