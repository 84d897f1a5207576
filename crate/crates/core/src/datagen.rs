//! MicroDigitCircle: a few distinct 5x5 glyphs placed on a jittered circle in
//! a small noisy binary image. The label is the glyph sequence read
//! counterclockwise starting from the smallest id; the true motif map marks
//! each glyph centre in the glyph's channel.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{read_bytes, read_exact, read_u32, write_bytes, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{Footprint, FootprintTable};
use crate::sparsity::{Motif, MotifMap};

pub const GLYPH_SIZE: usize = 5;
const HALF: usize = GLYPH_SIZE / 2;

/// Hand-drawn glyphs; a spec with `K` glyph types uses the first `K`.
pub const GLYPHS: [[&str; GLYPH_SIZE]; 10] = [
    [".###.", "#...#", "#...#", "#...#", ".###."],
    [".##..", "..#..", "..#..", "..#..", ".###."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["..#..", ".#.#.", "#...#", "#####", "....."],
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["#....", "#....", "#....", "#....", "#####"],
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["#...#", "#...#", "#####", "#...#", "#...#"],
    ["#####", "...#.", "..#..", ".#...", "#####"],
];

pub fn glyph_pixel(glyph: usize, row: usize, col: usize) -> bool {
    GLYPHS[glyph][row].as_bytes()[col] == b'#'
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Images are `size x size` with one channel.
    pub size: usize,
    /// Number of glyph types `K`, which is also the true motif channel count.
    pub glyphs: usize,
    pub min_count: usize,
    pub max_count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Circle centre jitter (uniform, pixels, per axis).
    pub center_jitter: f64,
    /// Angular jitter as a fraction of the slot width `2*pi/n`.
    pub angle_jitter: f64,
    /// Background speckle probability before glyphs are drawn.
    pub speckle_rate: f64,
    /// Pixel flip probability after glyphs are drawn.
    pub flip_rate: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            size: 32,
            glyphs: 4,
            min_count: 2,
            max_count: 4,
            radius_min: 8.0,
            radius_max: 11.0,
            center_jitter: 1.0,
            angle_jitter: 0.2,
            speckle_rate: 0.02,
            flip_rate: 0.02,
        }
    }
}

impl DomainSpec {
    pub fn channels(&self) -> usize {
        self.glyphs
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.glyphs == 0 || self.glyphs > GLYPHS.len() {
            return bad(format!("glyph count {} outside 1..={}", self.glyphs, GLYPHS.len()));
        }
        if self.min_count == 0 || self.min_count > self.max_count || self.max_count > self.glyphs {
            return bad(format!(
                "per-image count range {}..={} must be non-empty and within 1..={}",
                self.min_count, self.max_count, self.glyphs
            ));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must satisfy 0 < min <= max".into());
        }
        for (name, rate) in [("speckle_rate", self.speckle_rate), ("flip_rate", self.flip_rate)] {
            if !(0.0..=0.5).contains(&rate) {
                return bad(format!("{name} {rate} outside [0, 0.5]"));
            }
        }
        if !(0.0..0.5).contains(&self.angle_jitter) || self.center_jitter < 0.0 {
            return bad("jitter out of range".into());
        }
        // Rounded glyph centres must keep the whole glyph inside the image.
        let c = self.size as f64 / 2.0;
        let reach = self.center_jitter + self.radius_max + 0.5 + HALF as f64;
        if c - reach < 0.0 || c + reach > (self.size - 1) as f64 {
            return bad(format!("radius {} does not fit a {} image", self.radius_max, self.size));
        }
        // The unjittered arrangement at the smallest radius must already be
        // separated, so rejection sampling of the jitter terminates.
        if self.max_count > 1 {
            let chord = 2.0 * self.radius_min * (std::f64::consts::PI / self.max_count as f64).sin();
            if chord / std::f64::consts::SQRT_2 - 1.0 < self.separation() as f64 {
                return bad(format!(
                    "radius {} too small to separate {} glyphs",
                    self.radius_min, self.max_count
                ));
            }
        }
        Ok(())
    }

    /// Minimum Chebyshev distance between glyph centres: one footprint
    /// diameter, so footprints never overlap.
    pub fn separation(&self) -> usize {
        GLYPH_SIZE
    }

    /// Expected fraction of true motif map entries that are nonzero.
    pub fn min_density(&self) -> f64 {
        let mean = (self.min_count + self.max_count) as f64 / 2.0;
        mean / (self.size * self.size * self.channels()) as f64
    }

    /// Ink bounding box of each glyph, relative to its centre.
    pub fn footprints(&self) -> FootprintTable {
        let per = (0..self.glyphs)
            .map(|g| {
                let ink: Vec<(usize, usize)> = (0..GLYPH_SIZE)
                    .flat_map(|r| (0..GLYPH_SIZE).map(move |c| (r, c)))
                    .filter(|&(r, c)| glyph_pixel(g, r, c))
                    .collect();
                let off = |v: usize| v as i64 - HALF as i64;
                Footprint {
                    row_min: off(ink.iter().map(|p| p.0).min().expect("glyph has ink")),
                    row_max: off(ink.iter().map(|p| p.0).max().expect("glyph has ink")),
                    col_min: off(ink.iter().map(|p| p.1).min().expect("glyph has ink")),
                    col_max: off(ink.iter().map(|p| p.1).max().expect("glyph has ink")),
                }
            })
            .collect();
        FootprintTable::new(per).expect("glyph footprints are non-empty")
    }

    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let mut out = [0u8; 32];
        out.copy_from_slice(Sha256::digest(&bytes).as_slice());
        out
    }
}

/// A glyph placed at an integer centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub glyph: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[S, S, 1]`, entries in {0, 1}.
    pub input: Tensor<f32>,
    /// Glyph ids, counterclockwise from the smallest.
    pub label: Vec<u8>,
    pub truth: MotifMap,
}

/// Orders placements counterclockwise around `(cy, cx)` (in image
/// coordinates, rows growing downward) and rotates the result to start at
/// the smallest glyph id.
pub fn counterclockwise_label(cy: f64, cx: f64, placements: &[Placement]) -> Vec<u8> {
    let angle = |p: &Placement| (-(p.row as f64 - cy)).atan2(p.col as f64 - cx).rem_euclid(TAU);
    let mut order: Vec<&Placement> = placements.iter().collect();
    order.sort_by(|a, b| angle(a).total_cmp(&angle(b)));
    let mut label: Vec<u8> = order.iter().map(|p| p.glyph as u8).collect();
    if let Some(start) = label.iter().enumerate().min_by_key(|(_, g)| **g).map(|(i, _)| i) {
        label.rotate_left(start);
    }
    label
}

fn sample_rng(seed: i64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    rng.set_stream(index);
    rng
}

const MAX_PLACEMENT_TRIES: usize = 100_000;

/// Draws sample `index` of the stream for `seed`. Pure in its arguments.
pub fn generate_one(spec: &DomainSpec, seed: i64, index: u64) -> Result<Sample> {
    let mut rng = sample_rng(seed, index);
    let n = rng.random_range(spec.min_count..=spec.max_count);
    let mut ids: Vec<usize> = (0..spec.glyphs).collect();
    ids.shuffle(&mut rng);
    ids.truncate(n);

    let s = spec.size;
    let half = s as f64 / 2.0;
    let sep = spec.separation();
    let mut found = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let cy = half + rng.random_range(-1.0..=1.0) * spec.center_jitter;
        let cx = half + rng.random_range(-1.0..=1.0) * spec.center_jitter;
        let r = rng.random_range(spec.radius_min..=spec.radius_max);
        let theta0 = rng.random_range(0.0..TAU);
        let slot = TAU / n as f64;
        let places: Vec<Placement> = ids
            .iter()
            .enumerate()
            .map(|(j, &glyph)| {
                let th = theta0 + slot * j as f64 + rng.random_range(-1.0..=1.0) * spec.angle_jitter * slot;
                Placement {
                    glyph,
                    row: (cy - r * th.sin()).round() as usize,
                    col: (cx + r * th.cos()).round() as usize,
                }
            })
            .collect();
        let separated = places.iter().enumerate().all(|(a, p)| {
            places[a + 1..]
                .iter()
                .all(|q| p.row.abs_diff(q.row).max(p.col.abs_diff(q.col)) >= sep)
        });
        if separated {
            found = Some((cy, cx, places));
            break;
        }
    }
    let (cy, cx, places) =
        found.ok_or_else(|| Error::InvalidSpec("no separated placement found".into()))?;

    let mut img: Vec<f32> = (0..s * s)
        .map(|_| if rng.random_bool(spec.speckle_rate) { 1.0 } else { 0.0 })
        .collect();
    for p in &places {
        for dr in 0..GLYPH_SIZE {
            for dc in 0..GLYPH_SIZE {
                if glyph_pixel(p.glyph, dr, dc) {
                    img[(p.row + dr - HALF) * s + p.col + dc - HALF] = 1.0;
                }
            }
        }
    }
    for v in &mut img {
        if rng.random_bool(spec.flip_rate) {
            *v = 1.0 - *v;
        }
    }

    let truth = MotifMap::new(
        s,
        s,
        spec.channels(),
        places
            .iter()
            .map(|p| Motif {
                row: p.row,
                col: p.col,
                channel: p.glyph,
                value: 1.0,
            })
            .collect(),
    )?;
    Ok(Sample {
        input: Tensor::new(vec![s, s, 1], img)?,
        label: counterclockwise_label(cy, cx, &places),
        truth,
    })
}

/// Samples `start..start + count` of the stream for `seed`.
pub fn generate(spec: &DomainSpec, seed: i64, start: u64, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..count as u64).map(|i| generate_one(spec, seed, start + i)).collect()
}

pub const DATASET_MAGIC: &[u8; 4] = b"SPDC";
pub const DATASET_VERSION: u32 = 1;

/// A generated dataset with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub seed: i64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: DomainSpec, seed: i64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("dataset count must be at least 1".into()));
        }
        let samples = generate(&spec, seed, 0, count)?;
        Ok(Self { spec, seed, samples })
    }

    /// ```text
    /// "SPDC" | version u32 | spec_len u32 | spec JSON | sha256(spec JSON)
    ///        | seed i64 | count u32 | record*
    /// record := label_len u8 | label | f32 * S*S | truth_len u16
    ///         | (row u16, col u16, channel u8, value f32) * truth_len
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let spec = serde_json::to_vec(&self.spec)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        write_bytes(w, &spec)?;
        w.write_all(&self.spec.hash())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&[s.label.len() as u8])?;
            w.write_all(&s.label)?;
            for v in s.input.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(s.truth.len() as u16).to_le_bytes())?;
            for m in s.truth.entries() {
                w.write_all(&(m.row as u16).to_le_bytes())?;
                w.write_all(&(m.col as u16).to_le_bytes())?;
                w.write_all(&[m.channel as u8])?;
                w.write_all(&(m.value as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let spec_bytes = read_bytes(r)?;
        let spec: DomainSpec = serde_json::from_slice(&spec_bytes)
            .map_err(|e| Error::Format(format!("dataset spec: {e}")))?;
        let mut hash = [0u8; 32];
        read_exact(r, &mut hash)?;
        if hash != spec.hash() {
            return Err(Error::SpecHashMismatch);
        }
        spec.validate()?;
        let mut seed = [0u8; 8];
        read_exact(r, &mut seed)?;
        let seed = i64::from_le_bytes(seed);
        let count = read_u32(r)? as usize;
        let s = spec.size;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut len = [0u8; 1];
            read_exact(r, &mut len)?;
            let mut label = vec![0u8; len[0] as usize];
            read_exact(r, &mut label)?;
            if label.iter().any(|&g| g as usize >= spec.glyphs) {
                return Err(Error::Format("label symbol outside the alphabet".into()));
            }
            let mut raw = vec![0u8; 4 * s * s];
            read_exact(r, &mut raw)?;
            let img = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let mut n = [0u8; 2];
            read_exact(r, &mut n)?;
            let mut entries = Vec::new();
            for _ in 0..u16::from_le_bytes(n) {
                let mut rec = [0u8; 9];
                read_exact(r, &mut rec)?;
                entries.push(Motif {
                    row: u16::from_le_bytes([rec[0], rec[1]]) as usize,
                    col: u16::from_le_bytes([rec[2], rec[3]]) as usize,
                    channel: rec[4] as usize,
                    value: f32::from_le_bytes([rec[5], rec[6], rec[7], rec[8]]) as f64,
                });
            }
            samples.push(Sample {
                input: Tensor::new(vec![s, s, 1], img)?,
                label,
                truth: MotifMap::new(s, s, spec.channels(), entries)
                    .map_err(|e| Error::Format(e.to_string()))?,
            });
        }
        Ok(Self { spec, seed, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        DomainSpec::default().validate().unwrap();
    }

    #[test]
    fn min_density_closed_form() {
        let spec = DomainSpec::default();
        assert!((spec.min_density() - 3.0 / 4096.0).abs() < 1e-15);
        let doubled = DomainSpec {
            glyphs: 8,
            ..spec.clone()
        };
        assert!((doubled.min_density() - spec.min_density() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn paper_scale_min_density() {
        // 100x100 images, 10 channels, 3 to 6 digits.
        let spec = DomainSpec {
            size: 100,
            glyphs: 10,
            min_count: 3,
            max_count: 6,
            radius_min: 30.0,
            radius_max: 40.0,
            ..DomainSpec::default()
        };
        spec.validate().unwrap();
        let d = spec.min_density();
        assert!((d - 4.5e-5).abs() < 1e-12);
        assert!((1.0 - d - 0.999955).abs() < 1e-9);
    }

    #[test]
    fn deterministic_streams() {
        let spec = DomainSpec::default();
        let a = generate(&spec, 3, 0, 20).unwrap();
        let b = generate(&spec, 3, 0, 20).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 4, 0, 20).unwrap();
        assert_ne!(a, c);
        // Any window of the stream matches the full stream.
        assert_eq!(generate(&spec, 3, 5, 3).unwrap(), a[5..8].to_vec());
    }

    #[test]
    fn fixed_count_gives_distinct_channels() {
        let spec = DomainSpec {
            min_count: 3,
            max_count: 3,
            ..DomainSpec::default()
        };
        for s in generate(&spec, 1, 0, 200).unwrap() {
            assert_eq!(s.truth.len(), 3);
            let mut ch: Vec<usize> = s.truth.entries().iter().map(|m| m.channel).collect();
            ch.sort();
            ch.dedup();
            assert_eq!(ch.len(), 3);
            assert_eq!(s.label.len(), 3);
        }
    }

    #[test]
    fn counterclockwise_worked_example() {
        // Glyphs 1, 3, 0 at 10, 130 and 250 degrees around (16, 16).
        let at = |glyph, deg: f64| {
            let th = deg.to_radians();
            Placement {
                glyph,
                row: (16.0 - 10.0 * th.sin()).round() as usize,
                col: (16.0 + 10.0 * th.cos()).round() as usize,
            }
        };
        let places = [at(1, 10.0), at(3, 130.0), at(0, 250.0)];
        assert_eq!(counterclockwise_label(16.0, 16.0, &places), vec![0, 1, 3]);
        let shuffled = [places[2], places[0], places[1]];
        assert_eq!(counterclockwise_label(16.0, 16.0, &shuffled), vec![0, 1, 3]);
    }

    #[test]
    fn glyph_ink_is_drawn_at_truth_sites() {
        let spec = DomainSpec {
            speckle_rate: 0.0,
            flip_rate: 0.0,
            ..DomainSpec::default()
        };
        for s in generate(&spec, 9, 0, 50).unwrap() {
            let ink: f32 = s.input.data().iter().sum();
            let expected: usize = s
                .truth
                .entries()
                .iter()
                .map(|m| {
                    (0..GLYPH_SIZE * GLYPH_SIZE)
                        .filter(|i| glyph_pixel(m.channel, i / GLYPH_SIZE, i % GLYPH_SIZE))
                        .count()
                })
                .sum();
            assert_eq!(ink as usize, expected);
        }
    }

    #[test]
    fn footprints_are_ink_boxes() {
        let fp = DomainSpec::default().footprints();
        let ring = fp.get(0);
        assert_eq!((ring.row_min, ring.row_max, ring.col_min, ring.col_max), (-2, 2, -2, 2));
        let tri = fp.get(3);
        assert_eq!((tri.row_min, tri.row_max), (-2, 1));
    }

    #[test]
    fn invalid_specs_rejected() {
        let tight = DomainSpec {
            radius_min: 2.0,
            radius_max: 2.0,
            ..DomainSpec::default()
        };
        assert!(matches!(tight.validate(), Err(Error::InvalidSpec(_))));
        let big = DomainSpec {
            radius_max: 20.0,
            ..DomainSpec::default()
        };
        assert!(big.validate().is_err());
        let many = DomainSpec {
            glyphs: 11,
            ..DomainSpec::default()
        };
        assert!(many.validate().is_err());
        assert!(Dataset::generate(DomainSpec::default(), 1, 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let ds = Dataset::generate(DomainSpec::default(), -1, 100).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn dataset_integrity_errors() {
        let ds = Dataset::generate(DomainSpec::default(), 2, 3).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();

        let mut old = buf.clone();
        old[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Dataset::read_from(&mut old.as_slice()),
            Err(Error::Version { found: 0, expected: 1 })
        ));

        // Flip a digit inside the embedded spec JSON ("size":32 -> "size":33).
        let mut tampered = buf.clone();
        let pos = tampered.windows(7).position(|w| w == b"size\":3").unwrap() + 7;
        tampered[pos] = b'3';
        assert!(matches!(
            Dataset::read_from(&mut tampered.as_slice()),
            Err(Error::SpecHashMismatch)
        ));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(Dataset::read_from(&mut &short[..]), Err(Error::Format(_))));

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Dataset::read_from(&mut bad_magic.as_slice()), Err(Error::Format(_))));
    }
}
