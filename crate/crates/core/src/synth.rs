//! Synthetic hand-gesture generator emitting the DHG file layout, and a
//! nearest-centroid baseline used to confirm the generated task is learnable.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::mix_seed;
use crate::dataset::{
    resample_to_window, write_layout, SkeletonSequence, DHG_GESTURES, DHG_SUBJECTS, DHG_TEMPLATE, JOINTS,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub subjects: usize,
    pub trials: usize,
    pub seed: u64,
    /// Per-coordinate Gaussian noise (metres).
    pub noise: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl SynthSpec {
    pub fn new(num_classes: usize, subjects: usize, trials: usize, seed: u64) -> Self {
        Self { num_classes, subjects, trials, seed, noise: 0.002, min_frames: 20, max_frames: 40 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > DHG_GESTURES as usize {
            return Err(Error::InvalidArgument(format!(
                "num_classes {} must be in 1..={DHG_GESTURES}",
                self.num_classes
            )));
        }
        if self.subjects == 0 || self.subjects > DHG_SUBJECTS as usize {
            return Err(Error::InvalidArgument(format!(
                "subjects {} must be in 1..={DHG_SUBJECTS}",
                self.subjects
            )));
        }
        if self.trials == 0 || self.trials > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("trials {} must be positive", self.trials)));
        }
        if self.min_frames < 2 || self.max_frames < self.min_frames {
            return Err(Error::InvalidArgument(format!(
                "frame range {}..={} invalid",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise {} invalid", self.noise)));
        }
        Ok(())
    }
}

type P3 = [f64; 3];

/// Rest pose: wrist, palm centre, then four joints along each of five
/// fingers fanning out in +y.
fn rest_pose() -> [P3; JOINTS] {
    let mut pose = [[0.0; 3]; JOINTS];
    pose[0] = [0.0, -0.04, 0.0];
    pose[1] = [0.0, 0.0, 0.0];
    for f in 0..5 {
        let angle = (f as f64 - 2.0) * 0.3 - if f == 0 { 0.5 } else { 0.0 };
        let (dx, dy) = (angle.sin(), angle.cos());
        let base = [(f as f64 - 2.0) * 0.018, 0.02, 0.0];
        for k in 0..4 {
            let r = 0.022 * k as f64;
            pose[2 + f * 4 + k] = [base[0] + dx * r, base[1] + dy * r, 0.0];
        }
    }
    pose
}

fn is_thumb_or_index(j: usize) -> bool {
    (2..10).contains(&j)
}

fn polyline(points: &[[f64; 2]], u: f64) -> [f64; 2] {
    let segs = points.len() - 1;
    let pos = (u * segs as f64).min(segs as f64 - 1e-12);
    let i = pos.floor() as usize;
    let t = pos - i as f64;
    let (a, b) = (points[i], points[i + 1]);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Pose of a class at normalised time `u ∈ [0, 1]` with motion amplitude `amp`.
fn class_pose(class: usize, u: f64, amp: f64) -> [P3; JOINTS] {
    let rest = rest_pose();
    let palm = rest[1];
    let mut pose = rest;
    let mut shift = [0.0; 3];
    let curl = |pose: &mut [P3; JOINTS], s: f64, only: Option<fn(usize) -> bool>| {
        for j in 2..JOINTS {
            if only.map_or(true, |p| p(j)) {
                for a in 0..3 {
                    pose[j][a] = palm[a] + (rest[j][a] - palm[a]) * s;
                }
                pose[j][2] += (1.0 - s) * 0.03;
            }
        }
    };
    match class {
        0 => curl(&mut pose, 1.0 - 0.7 * amp * u, None),
        1 => shift[2] = -0.06 * amp * (PI * u).sin(),
        2 => curl(&mut pose, 0.3 + 0.7 * u.powf(1.0 / amp.max(0.1)), None),
        3 => curl(&mut pose, 1.0 - 0.8 * amp * (PI * u).sin().abs(), Some(is_thumb_or_index)),
        4 | 5 => {
            let dir = if class == 4 { -1.0 } else { 1.0 };
            let th = dir * 2.0 * PI * u;
            let r = 0.05 * amp;
            shift = [r * th.cos() - r, r * th.sin(), 0.0];
        }
        6..=9 => {
            let d = 0.15 * amp * u;
            shift = match class {
                6 => [d, 0.0, 0.0],
                7 => [-d, 0.0, 0.0],
                8 => [0.0, d, 0.0],
                _ => [0.0, -d, 0.0],
            };
        }
        10..=12 => {
            let s = 0.1 * amp;
            let pts: &[[f64; 2]] = match class {
                10 => &[[0.0, 0.0], [s, -s], [s, 0.0], [0.0, -s]],
                11 => &[[0.0, 0.0], [s * 0.5, -s], [s, 0.0]],
                _ => &[[0.0, 0.0], [s, 0.0], [s * 0.5, 0.0], [s * 0.5, s * 0.5], [s * 0.5, -s * 0.5]],
            };
            let p = polyline(pts, u);
            shift = [p[0], p[1], 0.0];
        }
        _ => shift[0] = 0.04 * amp * (6.0 * PI * u).sin(),
    }
    for p in pose.iter_mut() {
        for a in 0..3 {
            p[a] += shift[a];
        }
    }
    pose
}

/// Generates `num_classes × subjects × trials` sequences with gestures
/// `1..=num_classes` and finger configuration 1. Order: gesture, subject,
/// trial.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SkeletonSequence>> {
    spec.validate()?;
    let subject_params: Vec<(P3, f64)> = (0..spec.subjects)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1_000 + s as u64));
            let offset = [0; 3].map(|_| rng.random_range(-0.01..0.01));
            (offset, rng.random_range(0.9..1.1))
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.num_classes * spec.subjects * spec.trials);
    for class in 0..spec.num_classes {
        for (s, (offset, size)) in subject_params.iter().enumerate() {
            for t in 0..spec.trials {
                let salt = ((class as u64) << 32) | ((s as u64) << 16) | t as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, salt));
                let frames = rng.random_range(spec.min_frames..=spec.max_frames);
                let amp = rng.random_range(0.8..1.2);
                let mut data = Vec::with_capacity(frames * JOINTS * 3);
                for i in 0..frames {
                    let u = i as f64 / (frames - 1) as f64;
                    for p in class_pose(class, u, amp) {
                        for a in 0..3 {
                            data.push(p[a] * size + offset[a] + noise.sample(&mut rng));
                        }
                    }
                }
                out.push(SkeletonSequence::new(data, s as u8 + 1, class as u8 + 1, 1, t as u8 + 1)?);
            }
        }
    }
    Ok(out)
}

/// Generates and writes the dataset under `root` in the DHG layout.
pub fn write_dataset(spec: &SynthSpec, root: &Path) -> Result<Vec<SkeletonSequence>> {
    let seqs = generate(spec)?;
    write_layout(root, &seqs, DHG_TEMPLATE)?;
    Ok(seqs)
}

/// Leave-one-subject-out nearest-centroid accuracy on resampled windows,
/// pooled over all test sequences.
pub fn nearest_centroid_loso(seqs: &[SkeletonSequence], window: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset("no sequences".into()));
    }
    let windows: Vec<Vec<f64>> = seqs
        .iter()
        .map(|s| resample_to_window(s, window).map(|w| w.into_data()))
        .collect::<Result<_>>()?;
    let classes = seqs.iter().map(|s| s.label14()).max().unwrap_or(0) + 1;
    let subjects = crate::dataset::subjects_of(seqs);
    let dim = windows[0].len();
    let mut correct = 0usize;
    for &k in &subjects {
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (s, w) in seqs.iter().zip(&windows) {
            if s.subject != k {
                counts[s.label14()] += 1;
                sums[s.label14()].iter_mut().zip(w).for_each(|(a, b)| *a += b);
            }
        }
        for (s, w) in seqs.iter().zip(&windows) {
            if s.subject != k {
                continue;
            }
            let best = (0..classes)
                .filter(|&c| counts[c] > 0)
                .map(|c| {
                    let d: f64 = sums[c]
                        .iter()
                        .zip(w)
                        .map(|(m, x)| (m / counts[c] as f64 - x).powi(2))
                        .sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c);
            if best == Some(s.label14()) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / seqs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dhg;

    #[test]
    fn counts_and_labels() {
        let seqs = generate(&SynthSpec::new(4, 6, 5, 1)).unwrap();
        assert_eq!(seqs.len(), 120);
        assert!(seqs.iter().all(|s| (20..=40).contains(&s.len())));
        assert_eq!(crate::dataset::subjects_of(&seqs), (1..=6).collect::<Vec<u8>>());
    }

    #[test]
    fn invalid_counts() {
        assert!(generate(&SynthSpec::new(15, 6, 5, 1)).is_err());
        assert!(generate(&SynthSpec::new(4, 0, 5, 1)).is_err());
        assert!(generate(&SynthSpec::new(4, 6, 0, 1)).is_err());
    }

    #[test]
    fn byte_identical_per_seed() {
        let spec = SynthSpec::new(3, 2, 2, 9);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(&spec, a.path()).unwrap();
        write_dataset(&spec, b.path()).unwrap();
        let idx = load_dhg(a.path(), None).unwrap();
        assert_eq!(idx.sequences.len(), 12);
        for s in &idx.sequences {
            let rel = s.relative_path(DHG_TEMPLATE);
            assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap());
        }
        assert_ne!(generate(&spec).unwrap(), generate(&SynthSpec::new(3, 2, 2, 10)).unwrap());
    }

    #[test]
    fn round_trips_through_the_loader() {
        let spec = SynthSpec::new(2, 2, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        let mut written = write_dataset(&spec, dir.path()).unwrap();
        written.sort_by_key(|s| (s.gesture, s.finger, s.subject, s.trial));
        assert_eq!(load_dhg(dir.path(), None).unwrap().sequences, written);
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        for classes in [4, 14] {
            let seqs = generate(&SynthSpec::new(classes, 6, 5, 3)).unwrap();
            let acc = nearest_centroid_loso(&seqs, 16).unwrap();
            assert!(acc > 0.9, "{classes} classes: {acc}");
        }
    }
}
