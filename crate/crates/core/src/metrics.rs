//! Motif-equivalence metrics (false positive, false negative and confusion
//! error), end-to-end edit error, and the entropy bound on a sparse layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::{Motif, MotifMap};

/// Offsets, relative to a true motif's site, of the smallest rectangle
/// covering the motif.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub row_min: i64,
    pub row_max: i64,
    pub col_min: i64,
    pub col_max: i64,
}

impl Footprint {
    /// A square of the given odd side centred on the site.
    pub fn square(side: usize) -> Self {
        let h = (side / 2) as i64;
        Self {
            row_min: -h,
            row_max: h,
            col_min: -h,
            col_max: h,
        }
    }

    pub fn contains(&self, site: (usize, usize), point: (usize, usize)) -> bool {
        let dr = point.0 as i64 - site.0 as i64;
        let dc = point.1 as i64 - site.1 as i64;
        (self.row_min..=self.row_max).contains(&dr) && (self.col_min..=self.col_max).contains(&dc)
    }
}

/// Footprint of each true motif channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintTable {
    per_channel: Vec<Footprint>,
}

impl FootprintTable {
    pub fn new(per_channel: Vec<Footprint>) -> Result<Self> {
        if per_channel.is_empty() {
            return Err(Error::InvalidArgument("footprint table is empty".into()));
        }
        if per_channel
            .iter()
            .any(|f| f.row_min > f.row_max || f.col_min > f.col_max)
        {
            return Err(Error::InvalidArgument("footprint with an empty extent".into()));
        }
        Ok(Self { per_channel })
    }

    pub fn uniform(channels: usize, footprint: Footprint) -> Result<Self> {
        Self::new(vec![footprint; channels])
    }

    pub fn channels(&self) -> usize {
        self.per_channel.len()
    }

    pub fn get(&self, channel: usize) -> Footprint {
        self.per_channel[channel]
    }

    fn covers(&self, truth: &Motif, point: (usize, usize)) -> bool {
        self.per_channel[truth.channel].contains((truth.row, truth.col), point)
    }
}

/// Class of one predicted motif. `Maximal` and `NonMaximal` carry the index
/// (into the truth map's entries) of the true motif whose footprint it
/// matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotifClass {
    FalsePositive,
    Maximal(usize),
    NonMaximal(usize),
}

/// Partitions the predictions, aligned with `pred.entries()`.
///
/// When a prediction lies in several footprints, the lexicographically
/// smallest true motif is chosen. Within one footprint the prediction with
/// the largest activation is maximal; equal activations go to the smallest
/// `(row, col, channel)`.
pub fn classify_predictions(
    pred: &MotifMap,
    truth: &MotifMap,
    footprints: &FootprintTable,
) -> Result<Vec<MotifClass>> {
    check_pair(pred, truth, footprints)?;
    let matched: Vec<Option<usize>> = pred
        .entries()
        .iter()
        .map(|p| {
            truth
                .entries()
                .iter()
                .position(|t| footprints.covers(t, (p.row, p.col)))
        })
        .collect();
    let mut best: Vec<Option<usize>> = vec![None; truth.len()];
    for (i, m) in matched.iter().enumerate() {
        if let Some(t) = *m {
            // Entries are sorted, so a strictly greater value is needed to
            // displace an earlier prediction.
            match best[t] {
                Some(b) if pred.entries()[b].value >= pred.entries()[i].value => {}
                _ => best[t] = Some(i),
            }
        }
    }
    Ok(matched
        .iter()
        .enumerate()
        .map(|(i, m)| match *m {
            None => MotifClass::FalsePositive,
            Some(t) if best[t] == Some(i) => MotifClass::Maximal(t),
            Some(t) => MotifClass::NonMaximal(t),
        })
        .collect())
}

fn check_pair(pred: &MotifMap, truth: &MotifMap, footprints: &FootprintTable) -> Result<()> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "motif metrics",
            format!(
                "prediction is {}x{}, truth is {}x{}",
                pred.height, pred.width, truth.height, truth.width
            ),
        ));
    }
    if truth.channels != footprints.channels() {
        return Err(Error::shape(
            "motif metrics",
            format!(
                "truth has {} channels, footprint table {}",
                truth.channels,
                footprints.channels()
            ),
        ));
    }
    Ok(())
}

/// Dataset-level tallies from which FPE, FNE and CE are computed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifTally {
    pub predicted_channels: usize,
    pub true_channels: usize,
    pub predictions: u64,
    pub false_positives: u64,
    pub non_maximal: u64,
    pub true_sites: u64,
    pub uncovered_sites: u64,
    /// `matches[p][t]`: maximal motifs in predicted channel `p` whose
    /// footprint belongs to true channel `t`.
    pub matches: Vec<Vec<u64>>,
    /// False positives per predicted channel.
    pub false_positives_by_channel: Vec<u64>,
    /// Uncovered true sites per true channel.
    pub uncovered_by_channel: Vec<u64>,
}

impl MotifTally {
    pub fn new(predicted_channels: usize, true_channels: usize) -> Self {
        Self {
            predicted_channels,
            true_channels,
            predictions: 0,
            false_positives: 0,
            non_maximal: 0,
            true_sites: 0,
            uncovered_sites: 0,
            matches: vec![vec![0; true_channels]; predicted_channels],
            false_positives_by_channel: vec![0; predicted_channels],
            uncovered_by_channel: vec![0; true_channels],
        }
    }

    pub fn add(&mut self, pred: &MotifMap, truth: &MotifMap, footprints: &FootprintTable) -> Result<()> {
        if pred.channels != self.predicted_channels || truth.channels != self.true_channels {
            return Err(Error::shape(
                "motif metrics",
                format!(
                    "maps have {}/{} channels, tally expects {}/{}",
                    pred.channels, truth.channels, self.predicted_channels, self.true_channels
                ),
            ));
        }
        let classes = classify_predictions(pred, truth, footprints)?;
        self.predictions += pred.len() as u64;
        for (p, class) in pred.entries().iter().zip(&classes) {
            match *class {
                MotifClass::FalsePositive => {
                    self.false_positives += 1;
                    self.false_positives_by_channel[p.channel] += 1;
                }
                MotifClass::Maximal(t) => self.matches[p.channel][truth.entries()[t].channel] += 1,
                MotifClass::NonMaximal(_) => self.non_maximal += 1,
            }
        }
        for t in truth.entries() {
            self.true_sites += 1;
            if !pred.entries().iter().any(|p| footprints.covers(t, (p.row, p.col))) {
                self.uncovered_sites += 1;
                self.uncovered_by_channel[t.channel] += 1;
            }
        }
        Ok(())
    }

    pub fn maximal(&self) -> u64 {
        self.matches.iter().flatten().sum()
    }

    /// `None` when nothing was predicted.
    pub fn fpe(&self) -> Option<f64> {
        (self.predictions > 0).then(|| self.false_positives as f64 / self.predictions as f64)
    }

    /// `None` when there were no true sites.
    pub fn fne(&self) -> Option<f64> {
        (self.true_sites > 0).then(|| self.uncovered_sites as f64 / self.true_sites as f64)
    }

    /// Confusion error under the best channel permutation, and that
    /// permutation (`sigma[p]` is the true channel aligned with predicted
    /// channel `p`; indices at or above the true channel count are unmatched
    /// padding). `None` when there are no maximal motifs.
    pub fn ce(&self) -> Option<(f64, Vec<usize>)> {
        let total = self.maximal();
        if total == 0 {
            return None;
        }
        let (matched, sigma) = best_alignment(&self.matches);
        Some((1.0 - matched as f64 / total as f64, sigma))
    }

    /// Rows are true channels then "none"; columns are aligned predicted
    /// channels (column `j` holds predicted channel `p` with `sigma[p] == j`)
    /// then "none". Non-maximal motifs are not counted.
    pub fn confusion(&self, sigma: &[usize]) -> Vec<Vec<u64>> {
        let n = self.predicted_channels.max(self.true_channels);
        let mut m = vec![vec![0u64; n + 1]; self.true_channels + 1];
        for (p, row) in self.matches.iter().enumerate() {
            for (t, &count) in row.iter().enumerate() {
                m[t][sigma[p]] += count;
            }
            m[self.true_channels][sigma[p]] += self.false_positives_by_channel[p];
        }
        for (t, &count) in self.uncovered_by_channel.iter().enumerate() {
            m[t][n] += count;
        }
        m
    }
}

/// Maximum-weight matching of predicted to true channels on a count matrix
/// (`counts[p][t]`), padded to a square. Returns the matched total and the
/// assignment of each predicted channel.
pub fn best_alignment(counts: &[Vec<u64>]) -> (u64, Vec<usize>) {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return (0, Vec::new());
    }
    let at = |p: usize, t: usize| if p < rows && t < cols { counts[p][t] as i64 } else { 0 };
    let cost: Vec<Vec<i64>> = (0..n).map(|p| (0..n).map(|t| -at(p, t)).collect()).collect();
    let mut assign = hungarian(&cost);
    let total = assign.iter().enumerate().map(|(p, &t)| at(p, t)).sum::<i64>() as u64;
    assign.truncate(rows);
    (total, assign)
}

/// Minimum-cost perfect assignment on a square matrix (rows to columns),
/// O(n^3) shortest augmenting paths with potentials.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    assign
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalised by the longer length; two empty sequences score 0.
pub fn normalized_edit_distance<T: PartialEq>(truth: &[T], pred: &[T]) -> f64 {
    let longest = truth.len().max(pred.len());
    if longest == 0 {
        return 0.0;
    }
    edit_distance(truth, pred) as f64 / longest as f64
}

/// Mean normalised edit distance over `(truth, prediction)` pairs.
pub fn e2ee<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("end-to-end error needs at least one pair".into()));
    }
    let sum: f64 = pairs.iter().map(|(t, p)| normalized_edit_distance(t, p)).sum();
    Ok(sum / pairs.len() as f64)
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.ln() + (1.0 - p) * (-p).ln_1p()) / std::f64::consts::LN_2
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyBoundInput {
    /// Spatial positions per example.
    pub sites: f64,
    pub channels: f64,
    pub delta: f64,
    /// Bits per nonzero activation.
    pub eta: f64,
}

/// Upper bound, in bits, on the entropy of a sparse layer:
/// `sites * channels * (H(delta) + eta * delta)`.
pub fn entropy_bound(input: &EntropyBoundInput) -> Result<f64> {
    let EntropyBoundInput {
        sites,
        channels,
        delta,
        eta,
    } = *input;
    if !(sites > 0.0 && channels > 0.0 && eta >= 0.0 && delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("entropy bound input {input:?}")));
    }
    Ok(sites * channels * (binary_entropy(delta) + eta * delta))
}

/// Replaces values by the median of their quantile bin, with `2^k` bins of
/// (near) equal population.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileBinner {
    uppers: Vec<f64>,
    medians: Vec<f64>,
}

impl QuantileBinner {
    pub fn fit(values: &[f64], k: u32) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no values to bin".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("binning input".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let bins = 1usize << k.min(30);
        let (mut uppers, mut medians) = (Vec::new(), Vec::new());
        for b in 0..bins {
            let lo = b * n / bins;
            let hi = (b + 1) * n / bins;
            if lo == hi {
                continue;
            }
            let bin = &sorted[lo..hi];
            let mid = bin.len() / 2;
            let median = if bin.len() % 2 == 1 {
                bin[mid]
            } else {
                0.5 * (bin[mid - 1] + bin[mid])
            };
            uppers.push(bin[bin.len() - 1]);
            medians.push(median);
        }
        Ok(Self { uppers, medians })
    }

    pub fn bins(&self) -> usize {
        self.medians.len()
    }

    pub fn apply(&self, v: f64) -> f64 {
        let i = self.uppers.partition_point(|&u| u < v).min(self.medians.len() - 1);
        self.medians[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinningRow {
    pub k: u32,
    pub e2ee: f64,
    pub increase: f64,
}

/// Largest tolerated E2EE increase from binning (0.1 percentage points).
pub const BINNING_TOLERANCE: f64 = 1e-3;

/// Evaluates `evaluate` with each `k` and reports the smallest `k` whose
/// E2EE increase over `baseline` stays below [`BINNING_TOLERANCE`].
pub fn binning_sweep(
    baseline: f64,
    ks: &[u32],
    mut evaluate: impl FnMut(u32) -> Result<f64>,
) -> Result<(Vec<BinningRow>, Option<u32>)> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let e = evaluate(k)?;
        rows.push(BinningRow {
            k,
            e2ee: e,
            increase: e - baseline,
        });
    }
    let eta = rows
        .iter()
        .filter(|r| r.increase < BINNING_TOLERANCE)
        .map(|r| r.k)
        .min();
    Ok((rows, eta))
}

/// Everything reported for one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fpe: Option<f64>,
    pub fne: Option<f64>,
    pub ce: Option<f64>,
    pub e2ee: f64,
    pub accuracy: f64,
    pub density: f64,
    pub permutation: Vec<usize>,
    pub confusion: Vec<Vec<u64>>,
    pub entropy_bound_bits: Option<f64>,
    pub tally: MotifTally,
    pub examples: usize,
}

impl MetricsReport {
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.first().map_or(0, Vec::len);
        let mut out = String::from("true\\pred");
        for j in 0..n {
            if j + 1 == n {
                out.push_str(",none");
            } else {
                out.push_str(&format!(",{j}"));
            }
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            if i + 1 == self.confusion.len() {
                out.push_str("none");
            } else {
                out.push_str(&i.to_string());
            }
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds a report from per-example motif maps and sequences.
pub fn report(
    preds: &[MotifMap],
    truths: &[MotifMap],
    footprints: &FootprintTable,
    sequences: &[(Vec<u8>, Vec<u8>)],
    eta: Option<f64>,
) -> Result<MetricsReport> {
    if preds.len() != truths.len() || preds.len() != sequences.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "report needs equally many predictions ({}), truths ({}) and sequences ({}), at least one",
            preds.len(),
            truths.len(),
            sequences.len()
        )));
    }
    let mut tally = MotifTally::new(preds[0].channels, truths[0].channels);
    for (p, t) in preds.iter().zip(truths) {
        tally.add(p, t, footprints)?;
    }
    let n = tally.predicted_channels.max(tally.true_channels);
    let (ce, permutation) = match tally.ce() {
        Some((ce, sigma)) => (Some(ce), sigma),
        None => (None, (0..tally.predicted_channels).map(|p| p.min(n)).collect()),
    };
    let confusion = tally.confusion(&permutation);
    let cells: usize = preds.iter().map(|p| p.height * p.width * p.channels).sum();
    let density = tally.predictions as f64 / cells as f64;
    let entropy_bound_bits = match eta {
        Some(eta) if density > 0.0 && density < 1.0 => Some(entropy_bound(&EntropyBoundInput {
            sites: (preds[0].height * preds[0].width) as f64,
            channels: preds[0].channels as f64,
            delta: density,
            eta,
        })?),
        _ => None,
    };
    let exact = sequences.iter().filter(|(t, p)| t == p).count();
    Ok(MetricsReport {
        fpe: tally.fpe(),
        fne: tally.fne(),
        ce,
        e2ee: e2ee(sequences)?,
        accuracy: exact as f64 / sequences.len() as f64,
        density,
        permutation,
        confusion,
        entropy_bound_bits,
        tally,
        examples: preds.len(),
    })
}
