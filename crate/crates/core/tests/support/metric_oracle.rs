//! Brute-force motif metrics: footprints expanded into explicit site sets,
//! and every channel permutation tried.

use std::collections::BTreeSet;

use rand::Rng;
use sparling::metrics::{Footprint, FootprintTable};
use sparling::sparsity::{Motif, MotifMap};

pub type Site = (usize, usize);

pub fn footprint_sites(fp: &Footprint, center: Site, height: usize, width: usize) -> BTreeSet<Site> {
    let mut out = BTreeSet::new();
    for dr in fp.row_min..=fp.row_max {
        for dc in fp.col_min..=fp.col_max {
            let (r, c) = (center.0 as i64 + dr, center.1 as i64 + dc);
            if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
                out.insert((r as usize, c as usize));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counts {
    pub predictions: u64,
    pub false_positives: u64,
    pub true_sites: u64,
    pub uncovered: u64,
    /// `(predicted channel, true channel)` of every maximal motif.
    pub maximal: Vec<(usize, usize)>,
}

type Key = (usize, usize, usize);

fn key(m: &Motif) -> Key {
    (m.row, m.col, m.channel)
}

pub fn tally(pred: &MotifMap, truth: &MotifMap, table: &FootprintTable, out: &mut Counts) {
    let (h, w) = (truth.height, truth.width);
    let sets: Vec<(Key, BTreeSet<Site>)> = truth
        .entries()
        .iter()
        .map(|t| (key(t), footprint_sites(&table.get(t.channel), (t.row, t.col), h, w)))
        .collect();
    // u(S): the smallest true motif whose footprint holds the prediction.
    let chosen: Vec<Option<Key>> = pred
        .entries()
        .iter()
        .map(|p| {
            sets.iter()
                .filter(|(_, s)| s.contains(&(p.row, p.col)))
                .map(|(k, _)| *k)
                .min()
        })
        .collect();
    for (i, p) in pred.entries().iter().enumerate() {
        out.predictions += 1;
        let Some(t) = chosen[i] else {
            out.false_positives += 1;
            continue;
        };
        let rivals = pred
            .entries()
            .iter()
            .enumerate()
            .filter(|(j, _)| chosen[*j] == Some(t));
        let beaten = rivals.into_iter().any(|(_, q)| {
            q.value > p.value || (q.value == p.value && key(q) < key(p))
        });
        if !beaten {
            out.maximal.push((p.channel, t.2));
        }
    }
    for (_, set) in &sets {
        out.true_sites += 1;
        if !pred.entries().iter().any(|p| set.contains(&(p.row, p.col))) {
            out.uncovered += 1;
        }
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

pub struct Rates {
    pub fpe: Option<f64>,
    pub fne: Option<f64>,
    pub ce: Option<f64>,
}

pub fn rates(c: &Counts, predicted_channels: usize, true_channels: usize) -> Rates {
    let n = predicted_channels.max(true_channels);
    let ce = (!c.maximal.is_empty()).then(|| {
        let best = permutations(n)
            .iter()
            .map(|sigma| c.maximal.iter().filter(|(p, t)| sigma[*p] == *t).count())
            .max()
            .unwrap();
        1.0 - best as f64 / c.maximal.len() as f64
    });
    Rates {
        fpe: (c.predictions > 0).then(|| c.false_positives as f64 / c.predictions as f64),
        fne: (c.true_sites > 0).then(|| c.uncovered as f64 / c.true_sites as f64),
        ce,
    }
}

/// A random small instance: a few examples on one grid with shared
/// channel counts and footprints.
pub struct Instance {
    pub preds: Vec<MotifMap>,
    pub truths: Vec<MotifMap>,
    pub table: FootprintTable,
}

fn random_map(rng: &mut impl Rng, h: usize, w: usize, c: usize, max: usize) -> MotifMap {
    let mut entries: Vec<Motif> = Vec::new();
    for _ in 0..rng.random_range(0..=max) {
        let m = Motif {
            row: rng.random_range(0..h),
            col: rng.random_range(0..w),
            channel: rng.random_range(0..c),
            // Few distinct values so ties are common.
            value: [0.25, 0.5, 1.0][rng.random_range(0..3)],
        };
        if !entries.iter().any(|e| key(e) == key(&m)) {
            entries.push(m);
        }
    }
    MotifMap::new(h, w, c, entries).unwrap()
}

pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let (cp, ct) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let mut extent = || {
        let lo = rng.random_range(-2..=0);
        (lo, rng.random_range(lo..=2))
    };
    let table = FootprintTable::new(
        (0..ct)
            .map(|_| {
                let (row_min, row_max) = extent();
                let (col_min, col_max) = extent();
                Footprint {
                    row_min,
                    row_max,
                    col_min,
                    col_max,
                }
            })
            .collect(),
    )
    .unwrap();
    let examples = rng.random_range(1..=3);
    Instance {
        preds: (0..examples).map(|_| random_map(rng, h, w, cp, 10)).collect(),
        truths: (0..examples).map(|_| random_map(rng, h, w, ct, 4)).collect(),
        table,
    }
}

pub fn oracle_rates(inst: &Instance) -> Rates {
    let mut c = Counts::default();
    for (p, t) in inst.preds.iter().zip(&inst.truths) {
        tally(p, t, &inst.table, &mut c);
    }
    rates(&c, inst.preds[0].channels, inst.truths[0].channels)
}

/// Textbook dynamic programming Levenshtein distance.
pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn oracle_e2ee(pairs: &[(Vec<u8>, Vec<u8>)]) -> f64 {
    pairs
        .iter()
        .map(|(t, p)| {
            let n = t.len().max(p.len());
            if n == 0 {
                0.0
            } else {
                levenshtein(t, p) as f64 / n as f64
            }
        })
        .sum::<f64>()
        / pairs.len() as f64
}
