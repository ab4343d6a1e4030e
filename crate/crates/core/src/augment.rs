//! Label-preserving sequence augmentation: jitter, scale, time warp and
//! their composition. Every variant is a pure function of (sequence, seed),
//! so an augmented dataset is stored as provenance and regenerated on use.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{interpolate, SkeletonSequence, FEATURES};
use crate::error::{Error, Result};

pub const SCALE_MIN: f64 = 0.75;
pub const SCALE_MAX: f64 = 1.25;
pub const WARP_MIN: f64 = 0.5;
pub const WARP_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Original,
    Jitter,
    Scale,
    TimeWarp,
    Combined,
}

/// Assignment cycle for synthetic variants.
pub const VARIANT_CYCLE: [Technique; 4] =
    [Technique::Jitter, Technique::Scale, Technique::TimeWarp, Technique::Combined];

impl Technique {
    pub fn as_str(self) -> &'static str {
        match self {
            Technique::Original => "original",
            Technique::Jitter => "jitter",
            Technique::Scale => "scale",
            Technique::TimeWarp => "timewarp",
            Technique::Combined => "combined",
        }
    }

    pub fn apply(self, seq: &SkeletonSequence, seed: u64) -> Result<SkeletonSequence> {
        match self {
            Technique::Original => Ok(seq.clone()),
            Technique::Jitter => jitter(seq, seed),
            Technique::Scale => scale(seq, seed),
            Technique::TimeWarp => time_warp(seq, seed),
            Technique::Combined => combined(seq, seed),
        }
    }
}

/// splitmix64 finaliser; used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Population variance of each coordinate axis (x, y, z) over all joints
/// and frames.
pub fn axis_variances(seq: &SkeletonSequence) -> [f64; 3] {
    // Shifted by the first value of each axis so constant input gives exactly 0.
    let shift = [seq.data[0], seq.data[1], seq.data[2]];
    let mut sum = [0.0; 3];
    let mut count = [0usize; 3];
    for (i, v) in seq.data.iter().enumerate() {
        sum[i % 3] += v - shift[i % 3];
        count[i % 3] += 1;
    }
    let mean: Vec<f64> = (0..3).map(|a| sum[a] / count[a] as f64).collect();
    let mut ss = [0.0; 3];
    for (i, v) in seq.data.iter().enumerate() {
        let d = v - shift[i % 3] - mean[i % 3];
        ss[i % 3] += d * d;
    }
    [0, 1, 2].map(|a| ss[a] / count[a] as f64)
}

pub fn jitter(seq: &SkeletonSequence, seed: u64) -> Result<SkeletonSequence> {
    let var = axis_variances(seq);
    let mut rng = rng(seed);
    let dists: Vec<Normal<f64>> = var
        .iter()
        .map(|v| Normal::new(0.0, v.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string())))
        .collect::<Result<_>>()?;
    let data = seq
        .data
        .iter()
        .enumerate()
        .map(|(i, x)| x + dists[i % 3].sample(&mut rng))
        .collect();
    Ok(seq.with_data(data))
}

pub fn draw_scale(seed: u64) -> f64 {
    rng(seed).random_range(SCALE_MIN..=SCALE_MAX)
}

pub fn scale_by(seq: &SkeletonSequence, factor: f64) -> SkeletonSequence {
    seq.with_data(seq.data.iter().map(|x| x * factor).collect())
}

pub fn scale(seq: &SkeletonSequence, seed: u64) -> Result<SkeletonSequence> {
    Ok(scale_by(seq, draw_scale(seed)))
}

pub fn draw_warp(seed: u64) -> f64 {
    rng(seed).random_range(WARP_MIN..=WARP_MAX)
}

/// Output length for warping `len` frames by `v`.
pub fn warped_len(len: usize, v: f64) -> usize {
    ((len as f64 * v).round() as usize).max(2)
}

pub fn time_warp_by(seq: &SkeletonSequence, v: f64) -> Result<SkeletonSequence> {
    if seq.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "time warp needs at least 2 frames, got {}",
            seq.len()
        )));
    }
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::InvalidArgument(format!("warp factor {v} must be positive")));
    }
    let out = interpolate(&seq.data, FEATURES, warped_len(seq.len(), v));
    Ok(seq.with_data(out))
}

pub fn time_warp(seq: &SkeletonSequence, seed: u64) -> Result<SkeletonSequence> {
    time_warp_by(seq, draw_warp(seed))
}

/// Sub-seeds of a combined draw, in application order.
pub fn combined_seeds(seed: u64) -> [u64; 3] {
    [mix_seed(seed, 1), mix_seed(seed, 2), mix_seed(seed, 3)]
}

/// Jitter, then scale by `factor`, then warp by `v`.
pub fn combined_with(seq: &SkeletonSequence, jitter_seed: u64, factor: f64, v: f64) -> Result<SkeletonSequence> {
    let j = jitter(seq, jitter_seed)?;
    time_warp_by(&scale_by(&j, factor), v)
}

pub fn combined(seq: &SkeletonSequence, seed: u64) -> Result<SkeletonSequence> {
    let [sj, ss, sw] = combined_seeds(seed);
    combined_with(seq, sj, draw_scale(ss), draw_warp(sw))
}

/// One entry of an augmented dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    /// Index into the original sequence list.
    pub origin: usize,
    pub technique: Technique,
    pub seed: u64,
    pub subject: u8,
    pub gesture: u8,
    pub finger: u8,
}

impl AugmentedRecord {
    pub fn label14(&self) -> usize {
        self.gesture as usize - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedDataset {
    pub factor: usize,
    pub seed: u64,
    pub records: Vec<AugmentedRecord>,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Regenerates record `i` from its origin.
    pub fn materialize(&self, originals: &[SkeletonSequence], i: usize) -> Result<SkeletonSequence> {
        let r = self
            .records
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("record {i} out of range")))?;
        let origin = originals.get(r.origin).ok_or_else(|| {
            Error::InvalidArgument(format!("record {i} refers to missing origin {}", r.origin))
        })?;
        r.technique.apply(origin, r.seed)
    }

    /// Writes the provenance index plus one little-endian f64 file per record.
    pub fn write_cache(&self, originals: &[SkeletonSequence], dir: &Path) -> Result<()> {
        let records = dir.join("records");
        std::fs::create_dir_all(&records)?;
        std::fs::write(dir.join("provenance.json"), serde_json::to_vec_pretty(self)?)?;
        for i in 0..self.records.len() {
            let seq = self.materialize(originals, i)?;
            let mut buf = Vec::with_capacity(8 + seq.data.len() * 8);
            buf.extend_from_slice(&(seq.len() as u64).to_le_bytes());
            for v in &seq.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            std::fs::write(records.join(format!("{i:06}.bin")), buf)?;
        }
        Ok(())
    }
}

/// Expands `originals` by `factor`: each sequence keeps itself and gains
/// `factor - 1` variants, techniques assigned round-robin over
/// [`VARIANT_CYCLE`].
pub fn augment_dataset(originals: &[SkeletonSequence], factor: usize, seed: u64) -> Result<AugmentedDataset> {
    if factor == 0 {
        return Err(Error::InvalidArgument("augmentation factor must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(originals.len() * factor);
    for (origin, s) in originals.iter().enumerate() {
        let base = AugmentedRecord {
            origin,
            technique: Technique::Original,
            seed: 0,
            subject: s.subject,
            gesture: s.gesture,
            finger: s.finger,
        };
        records.push(base);
        for v in 0..factor - 1 {
            records.push(AugmentedRecord {
                technique: VARIANT_CYCLE[v % VARIANT_CYCLE.len()],
                seed: mix_seed(mix_seed(seed, origin as u64), v as u64 + 1),
                ..base
            });
        }
    }
    Ok(AugmentedDataset { factor, seed, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_from(data: Vec<f64>) -> SkeletonSequence {
        SkeletonSequence::new(data, 3, 2, 1, 1).unwrap()
    }

    fn wavy(frames: usize) -> SkeletonSequence {
        seq_from(
            (0..frames * FEATURES)
                .map(|i| ((i as f64) * 0.37).sin() * (1.0 + (i % 3) as f64))
                .collect(),
        )
    }

    #[test]
    fn jitter_constant_is_identity() {
        let s = seq_from(vec![0.7; 5 * FEATURES]);
        assert_eq!(jitter(&s, 11).unwrap(), s);
    }

    #[test]
    fn jitter_noise_variance_matches_axis_variance() {
        // 200 frames × 22 joints = 4400 samples per axis; three axes pooled
        // against their own targets.
        let s = wavy(500);
        let var = axis_variances(&s);
        let out = jitter(&s, 5).unwrap();
        for a in 0..3 {
            let noise: Vec<f64> = out
                .data
                .iter()
                .zip(&s.data)
                .enumerate()
                .filter(|(i, _)| i % 3 == a)
                .map(|(_, (o, x))| o - x)
                .collect();
            let n = noise.len() as f64;
            assert!(n >= 10_000.0);
            let m = noise.iter().sum::<f64>() / n;
            let sample_var = noise.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n - 1.0);
            // SE of a normal sample variance is σ²·sqrt(2/(n−1)).
            let se = var[a] * (2.0 / (n - 1.0)).sqrt();
            assert!((sample_var - var[a]).abs() < 3.0 * se, "axis {a}: {sample_var} vs {}", var[a]);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let s = wavy(20);
        for t in VARIANT_CYCLE {
            assert_eq!(t.apply(&s, 42).unwrap(), t.apply(&s, 42).unwrap());
        }
        assert_ne!(jitter(&s, 1).unwrap(), jitter(&s, 2).unwrap());
    }

    #[test]
    fn scale_examples() {
        let s = wavy(4);
        assert_eq!(scale_by(&s, 1.0), s);
        let ones = seq_from(vec![1.0; 3 * FEATURES]);
        assert!(scale_by(&ones, 1.25).data.iter().all(|&v| v == 1.25));
    }

    #[test]
    fn scale_draws_are_bounded_with_unit_mean() {
        let draws: Vec<f64> = (0..10_000u64).map(draw_scale).collect();
        assert!(draws.iter().all(|d| (SCALE_MIN..=SCALE_MAX).contains(d)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        let warps: Vec<f64> = (0..1000u64).map(draw_warp).collect();
        assert!(warps.iter().all(|d| (WARP_MIN..=WARP_MAX).contains(d)));
    }

    #[test]
    fn time_warp_examples() {
        let s = wavy(64);
        assert_eq!(time_warp_by(&s, 1.0).unwrap(), s);
        assert_eq!(time_warp_by(&s, 2.0).unwrap().len(), 128);
        assert_eq!(time_warp_by(&s, 0.5).unwrap().len(), 32);
        assert!(time_warp_by(&wavy(1), 1.5).is_err());
        let w = time_warp(&s, 9).unwrap();
        assert_eq!(w.len(), warped_len(64, draw_warp(9)));
        assert_eq!(w.frame(0), s.frame(0));
        assert_eq!(w.frame(w.len() - 1), s.frame(63));
    }

    #[test]
    fn ramp_stays_a_ramp() {
        let frames = 30;
        let s = seq_from(
            (0..frames)
                .flat_map(|t| (0..FEATURES).map(move |c| 2.0 + t as f64 * (0.5 + c as f64)))
                .collect(),
        );
        for seed in 0..20u64 {
            let v = draw_warp(seed);
            let w = time_warp_by(&s, v).unwrap();
            let l = w.len();
            for j in 0..l {
                let t = j as f64 * (frames - 1) as f64 / (l - 1) as f64;
                for c in 0..FEATURES {
                    let expected = 2.0 + t * (0.5 + c as f64);
                    assert!((w.frame(j)[c] - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn combined_degenerate_is_identity_and_length_contract() {
        let s = seq_from(vec![1.5; 10 * FEATURES]);
        assert_eq!(combined_with(&s, 3, 1.0, 1.0).unwrap(), s);
        let w = wavy(40);
        let [_, _, sw] = combined_seeds(17);
        assert_eq!(combined(&w, 17).unwrap().len(), warped_len(40, draw_warp(sw)));
        assert_eq!(combined(&w, 17).unwrap(), combined(&w, 17).unwrap());
    }

    #[test]
    fn augment_counts_and_provenance() {
        let originals: Vec<_> = (0..7u8)
            .map(|i| SkeletonSequence::new(vec![i as f64; 3 * FEATURES], i % 3 + 1, i % 5 + 1, i % 2 + 1, 1).unwrap())
            .collect();
        let aug = augment_dataset(&originals, 40, 3).unwrap();
        assert_eq!(aug.len(), 7 * 40);
        for (o, chunk) in aug.records.chunks(40).enumerate() {
            let count = |t| chunk.iter().filter(|r| r.technique == t).count();
            assert_eq!(count(Technique::Original), 1);
            assert_eq!(count(Technique::Jitter), 10);
            assert_eq!(count(Technique::Scale), 10);
            assert_eq!(count(Technique::TimeWarp), 10);
            assert_eq!(count(Technique::Combined), 9);
            for r in chunk {
                assert_eq!(r.origin, o);
                assert_eq!(r.subject, originals[o].subject);
                assert_eq!(r.gesture, originals[o].gesture);
                assert_eq!(r.finger, originals[o].finger);
            }
        }
        assert_eq!(aug.materialize(&originals, 0).unwrap(), originals[0]);
        let one = augment_dataset(&originals, 1, 3).unwrap();
        assert!(one.records.iter().all(|r| r.technique == Technique::Original));
        assert_eq!(one.len(), 7);
        assert_eq!(augment_dataset(&originals, 40, 3).unwrap(), aug);
        assert!(augment_dataset(&originals, 0, 3).is_err());
    }

    #[test]
    fn cache_writes_every_record() {
        let originals = vec![wavy(5)];
        let aug = augment_dataset(&originals, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        aug.write_cache(&originals, dir.path()).unwrap();
        let back: AugmentedDataset =
            serde_json::from_slice(&std::fs::read(dir.path().join("provenance.json")).unwrap()).unwrap();
        assert_eq!(back, aug);
        let bytes = std::fs::read(dir.path().join("records/000001.bin")).unwrap();
        let frames = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + frames * FEATURES * 8);
    }
}
