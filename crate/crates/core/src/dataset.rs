//! Skeleton sequences, the DHG-14/28 gesture taxonomy, file I/O, fixed
//! windows and leave-one-subject-out folds.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::augment::AugmentedDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 22 hand joints × (x, y, z).
pub const FEATURES: usize = 66;
pub const JOINTS: usize = 22;

/// Default on-disk layout, relative to the dataset root.
pub const DHG_TEMPLATE: &str = "gesture_{g}/finger_{f}/subject_{s}/essai_{e}/skeleton_world.txt";

pub const DHG_GESTURES: u8 = 14;
pub const DHG_FINGERS: u8 = 2;
pub const DHG_SUBJECTS: u8 = 20;
pub const DHG_TRIALS: u8 = 5;
pub const DHG_SEQUENCES: usize = 2800;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grain {
    Fine,
    Coarse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GestureInfo {
    pub name: &'static str,
    pub tag: &'static str,
    pub grain: Grain,
}

/// The 14 gestures in label order (label `k` is gesture `k + 1`).
pub const GESTURES: [GestureInfo; 14] = [
    GestureInfo { name: "Grab", tag: "G", grain: Grain::Fine },
    GestureInfo { name: "Tap", tag: "T", grain: Grain::Coarse },
    GestureInfo { name: "Expand", tag: "E", grain: Grain::Fine },
    GestureInfo { name: "Pinch", tag: "P", grain: Grain::Fine },
    GestureInfo { name: "Rotation Clockwise", tag: "R-CW", grain: Grain::Fine },
    GestureInfo { name: "Rotation Counter-clockwise", tag: "R-CCW", grain: Grain::Fine },
    GestureInfo { name: "Swipe Right", tag: "S-R", grain: Grain::Coarse },
    GestureInfo { name: "Swipe Left", tag: "S-L", grain: Grain::Coarse },
    GestureInfo { name: "Swipe Up", tag: "S-U", grain: Grain::Coarse },
    GestureInfo { name: "Swipe Down", tag: "S-D", grain: Grain::Coarse },
    GestureInfo { name: "Swipe X", tag: "S-X", grain: Grain::Coarse },
    GestureInfo { name: "Swipe V", tag: "S-V", grain: Grain::Coarse },
    GestureInfo { name: "Swipe +", tag: "S-+", grain: Grain::Coarse },
    GestureInfo { name: "Shake", tag: "Sh", grain: Grain::Coarse },
];

/// Grain of a zero-based 14-class label.
pub fn grain_of(label: usize) -> Option<Grain> {
    GESTURES.get(label).map(|g| g.grain)
}

/// Collapses a zero-based 28-class label onto its 14-class gesture.
pub fn collapse_28_to_14(label28: usize) -> usize {
    label28 / DHG_FINGERS as usize
}

/// One recorded gesture: frames of 66 world coordinates plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    /// Row-major `[frames, 66]`.
    pub data: Vec<f64>,
    pub subject: u8,
    pub gesture: u8,
    pub finger: u8,
    pub trial: u8,
}

impl SkeletonSequence {
    pub fn new(data: Vec<f64>, subject: u8, gesture: u8, finger: u8, trial: u8) -> Result<Self> {
        if data.is_empty() || data.len() % FEATURES != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values is not a whole number of {FEATURES}-value frames",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "skeleton frames".into() });
        }
        Ok(Self { data, subject, gesture, finger, trial })
    }

    pub fn len(&self) -> usize {
        self.data.len() / FEATURES
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURES..(i + 1) * FEATURES]
    }

    /// Same labels, new frames.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        Self { data, ..self.clone() }
    }

    /// Zero-based 14-class label.
    pub fn label14(&self) -> usize {
        self.gesture as usize - 1
    }

    /// Zero-based 28-class label.
    pub fn label28(&self) -> usize {
        self.label14() * DHG_FINGERS as usize + (self.finger as usize - 1)
    }

    /// Path of this sequence under `template`.
    pub fn relative_path(&self, template: &str) -> PathBuf {
        PathBuf::from(
            template
                .replace("{g}", &self.gesture.to_string())
                .replace("{f}", &self.finger.to_string())
                .replace("{s}", &self.subject.to_string())
                .replace("{e}", &self.trial.to_string()),
        )
    }
}

/// Parses whitespace-separated frames, 66 values per line.
pub fn parse_skeleton<R: Read>(reader: R, source: &str) -> Result<Vec<f64>> {
    let mut data = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let start = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: source.to_string(),
                line: lineno,
                msg: format!("non-numeric token {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: lineno,
                    msg: format!("non-finite value {tok:?}"),
                });
            }
            data.push(v);
        }
        let n = data.len() - start;
        if n != FEATURES {
            return Err(Error::Parse {
                path: source.to_string(),
                line: lineno,
                msg: format!("expected {FEATURES} values, found {n}"),
            });
        }
    }
    if data.is_empty() {
        return Err(Error::Parse {
            path: source.to_string(),
            line: 0,
            msg: "empty skeleton file".into(),
        });
    }
    Ok(data)
}

pub fn parse_skeleton_file(path: &Path) -> Result<Vec<f64>> {
    let f = std::fs::File::open(path)?;
    parse_skeleton(f, &path.display().to_string())
}

/// Writes frames in the same text format `parse_skeleton` reads. Values use
/// the shortest round-trip representation.
pub fn write_skeleton<W: Write>(mut w: W, seq: &SkeletonSequence) -> Result<()> {
    let mut line = String::new();
    for i in 0..seq.len() {
        line.clear();
        for (j, v) in seq.frame(i).iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            write!(line, "{v}").expect("string write");
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Writes every sequence under `root` following `template`.
pub fn write_layout(root: &Path, sequences: &[SkeletonSequence], template: &str) -> Result<()> {
    for seq in sequences {
        let path = root.join(seq.relative_path(template));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        write_skeleton(&mut buf, seq)?;
        std::fs::write(path, buf)?;
    }
    Ok(())
}

/// Result of scanning a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    /// Sorted by (gesture, finger, subject, trial).
    pub sequences: Vec<SkeletonSequence>,
    /// Expected files absent from the label grid spanned by what was found.
    pub missing: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn subjects(&self) -> Vec<u8> {
        subjects_of(&self.sequences)
    }
}

pub fn subjects_of(sequences: &[SkeletonSequence]) -> Vec<u8> {
    sequences
        .iter()
        .map(|s| s.subject)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn template_regex(template: &str) -> Result<Regex> {
    let mut pattern = String::from("^");
    let mut rest = template;
    let mut seen = BTreeSet::new();
    while let Some(open) = rest.find('{') {
        pattern.push_str(&regex::escape(&rest[..open]));
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated placeholder in {template:?}")))?
            + open;
        let key = &rest[open + 1..close];
        if !matches!(key, "g" | "f" | "s" | "e") || !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("bad placeholder {{{key}}} in {template:?}")));
        }
        pattern.push_str(&format!("(?P<{key}>\\d+)"));
        rest = &rest[close + 1..];
    }
    pattern.push_str(&regex::escape(rest));
    pattern.push('$');
    if seen.len() != 4 {
        return Err(Error::Config(format!(
            "template {template:?} must contain {{g}}, {{f}}, {{s}} and {{e}}"
        )));
    }
    Regex::new(&pattern).map_err(|e| Error::Config(e.to_string()))
}

/// Loads every skeleton file under `root` whose relative path matches
/// `template` (default [`DHG_TEMPLATE`]). Labels come from the path.
pub fn load_dhg(root: &Path, template: Option<&str>) -> Result<DatasetIndex> {
    let template = template.unwrap_or(DHG_TEMPLATE);
    let re = template_regex(template)?;
    if !root.is_dir() {
        return Err(Error::EmptyDataset(format!("{} is not a directory", root.display())));
    }
    let mut sequences = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel_str = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let Some(caps) = re.captures(&rel_str) else {
            continue;
        };
        let num = |k: &str| -> Result<u8> {
            caps[k].parse().map_err(|_| Error::Parse {
                path: rel_str.clone(),
                line: 0,
                msg: format!("label {k} out of range"),
            })
        };
        let (g, f, s, e) = (num("g")?, num("f")?, num("s")?, num("e")?);
        if !(1..=DHG_GESTURES).contains(&g)
            || !(1..=DHG_FINGERS).contains(&f)
            || !(1..=DHG_SUBJECTS).contains(&s)
            || e == 0
        {
            return Err(Error::Parse {
                path: rel_str,
                line: 0,
                msg: format!("labels out of range: gesture {g}, finger {f}, subject {s}, trial {e}"),
            });
        }
        let data = parse_skeleton_file(entry.path())?;
        sequences.push(SkeletonSequence::new(data, s, g, f, e)?);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no files matching {template:?} under {}",
            root.display()
        )));
    }
    sequences.sort_by_key(|s| (s.gesture, s.finger, s.subject, s.trial));

    let axis = |f: fn(&SkeletonSequence) -> u8| -> Vec<u8> {
        sequences.iter().map(f).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let (gs, fs, ss, es) = (
        axis(|s| s.gesture),
        axis(|s| s.finger),
        axis(|s| s.subject),
        axis(|s| s.trial),
    );
    let present: BTreeSet<(u8, u8, u8, u8)> = sequences
        .iter()
        .map(|s| (s.gesture, s.finger, s.subject, s.trial))
        .collect();
    let mut missing = Vec::new();
    for &g in &gs {
        for &f in &fs {
            for &s in &ss {
                for &e in &es {
                    if !present.contains(&(g, f, s, e)) {
                        let probe = SkeletonSequence {
                            data: Vec::new(),
                            subject: s,
                            gesture: g,
                            finger: f,
                            trial: e,
                        };
                        missing.push(root.join(probe.relative_path(template)));
                    }
                }
            }
        }
    }
    if sequences.len() != DHG_SEQUENCES {
        log::warn!(
            "loaded {} sequences from {} (full DHG-14/28 has {DHG_SEQUENCES}); {} expected files missing from the observed label grid",
            sequences.len(),
            root.display(),
            missing.len()
        );
        for m in missing.iter().take(20) {
            log::warn!("  missing {}", m.display());
        }
    }
    Ok(DatasetIndex { sequences, missing })
}

/// Linear interpolation of every channel onto `new_len` evenly spaced
/// positions spanning the first to the last frame.
pub(crate) fn interpolate(data: &[f64], channels: usize, new_len: usize) -> Vec<f64> {
    let old_len = data.len() / channels;
    let mut out = Vec::with_capacity(new_len * channels);
    for j in 0..new_len {
        let pos = if new_len == 1 {
            0.0
        } else {
            (j * (old_len - 1)) as f64 / (new_len - 1) as f64
        };
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let a = &data[i0 * channels..(i0 + 1) * channels];
        if frac == 0.0 || i0 + 1 >= old_len {
            out.extend_from_slice(a);
        } else {
            let b = &data[(i0 + 1) * channels..(i0 + 2) * channels];
            out.extend(a.iter().zip(b).map(|(x, y)| x + (y - x) * frac));
        }
    }
    out
}

/// Resamples a sequence onto a `[target, 66]` window.
pub fn resample_to_window(seq: &SkeletonSequence, target: usize) -> Result<Tensor> {
    if seq.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot resample a {}-frame sequence",
            seq.len()
        )));
    }
    if target < 2 {
        return Err(Error::InvalidArgument(format!("window length {target} < 2")));
    }
    Tensor::new(&[target, FEATURES], interpolate(&seq.data, FEATURES, target))
}

/// Index sets of one leave-one-subject-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub held_out: u8,
    /// Augmented records of every other subject.
    pub train: Vec<usize>,
    /// Augmented records of the held-out subject.
    pub validation: Vec<usize>,
    /// Original (un-augmented) sequences of the held-out subject.
    pub test: Vec<usize>,
}

/// One fold per subject. Subjects must be numbered `1..=n` without gaps.
pub fn loocv_folds(originals: &[SkeletonSequence], augmented: &AugmentedDataset) -> Result<Vec<FoldSplit>> {
    let subjects = subjects_of(originals);
    let Some(&max) = subjects.last() else {
        return Err(Error::EmptyDataset("no sequences to fold".into()));
    };
    if let Some(missing) = (1..=max).find(|s| !subjects.contains(s)) {
        return Err(Error::MissingSubject(missing));
    }
    Ok(subjects
        .iter()
        .map(|&k| {
            let (validation, train) = (0..augmented.records.len())
                .partition(|&i| augmented.records[i].subject == k);
            FoldSplit {
                held_out: k,
                train,
                validation,
                test: (0..originals.len()).filter(|&i| originals[i].subject == k).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> SkeletonSequence {
        let data = (0..frames)
            .flat_map(|t| (0..FEATURES).map(move |c| t as f64 * (c as f64 + 1.0) - 3.0))
            .collect();
        SkeletonSequence::new(data, 1, 1, 1, 1).unwrap()
    }

    #[test]
    fn taxonomy_split() {
        let fine = GESTURES.iter().filter(|g| g.grain == Grain::Fine).count();
        assert_eq!(fine, 5);
        assert_eq!(GESTURES.len() - fine, 9);
        let fine_tags: Vec<_> = GESTURES
            .iter()
            .filter(|g| g.grain == Grain::Fine)
            .map(|g| g.tag)
            .collect();
        assert_eq!(fine_tags, ["G", "E", "P", "R-CW", "R-CCW"]);
        assert_eq!(GESTURES[13].tag, "Sh");
    }

    #[test]
    fn label_maps_are_consistent() {
        for g in 1..=14u8 {
            for f in 1..=2u8 {
                let s = SkeletonSequence::new(vec![0.0; FEATURES], 1, g, f, 1).unwrap();
                assert_eq!(collapse_28_to_14(s.label28()), s.label14());
                assert!(s.label28() < 28);
            }
        }
    }

    #[test]
    fn parse_well_formed_and_round_trip() {
        let seq = ramp(3);
        let mut buf = Vec::new();
        write_skeleton(&mut buf, &seq).unwrap();
        let parsed = parse_skeleton(&buf[..], "mem").unwrap();
        assert_eq!(parsed.len(), 3 * FEATURES);
        assert_eq!(parsed, seq.data);

        let odd = SkeletonSequence::new(vec![0.1 + 0.2; FEATURES], 1, 1, 1, 1).unwrap();
        let mut buf = Vec::new();
        write_skeleton(&mut buf, &odd).unwrap();
        assert_eq!(parse_skeleton(&buf[..], "mem").unwrap(), odd.data);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let good = vec!["1"; FEATURES].join(" ");
        let short = vec!["1"; FEATURES - 1].join(" ");
        let text = format!("{good}\n{short}\n");
        match parse_skeleton(text.as_bytes(), "f.txt") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("65"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let bad = format!("{good}\n{} x\n", vec!["1"; FEATURES - 1].join(" "));
        assert!(matches!(parse_skeleton(bad.as_bytes(), "f"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_skeleton(&b""[..], "f"), Err(Error::Parse { .. })));
    }

    #[test]
    fn resample_examples() {
        let s64 = ramp(64);
        let w = resample_to_window(&s64, 64).unwrap();
        assert_eq!(w.data(), &s64.data[..]);

        let s128 = ramp(128);
        let w = resample_to_window(&s128, 64).unwrap();
        for j in 0..64 {
            let t = j as f64 * 127.0 / 63.0;
            for c in [0usize, 17, 65] {
                let expected = t * (c as f64 + 1.0) - 3.0;
                assert!((w.get(&[j, c]) - expected).abs() < 1e-9);
            }
        }
        assert_eq!(&w.data()[..FEATURES], s128.frame(0));
        assert_eq!(&w.data()[63 * FEATURES..], s128.frame(127));

        let s2 = ramp(2);
        let w = resample_to_window(&s2, 64).unwrap();
        assert_eq!(w.shape(), &[64, FEATURES]);
        assert_eq!(&w.data()[63 * FEATURES..], s2.frame(1));

        assert!(resample_to_window(&ramp(1), 64).is_err());
    }

    #[test]
    fn resample_is_idempotent() {
        let s = ramp(37);
        let w = resample_to_window(&s, 64).unwrap();
        let again = resample_to_window(&s.with_data(w.data().to_vec()), 64).unwrap();
        assert_eq!(w, again);
    }

    #[test]
    fn template_regex_rejects_bad_templates() {
        assert!(template_regex(DHG_TEMPLATE).is_ok());
        assert!(template_regex("g{g}/f{f}/s{s}.txt").is_err());
        assert!(template_regex("{g}/{f}/{s}/{e}/{x}").is_err());
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dhg(dir.path(), None), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn load_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut seqs = Vec::new();
        for s in 1..=2u8 {
            for e in 1..=2u8 {
                seqs.push(SkeletonSequence::new(vec![s as f64; 2 * FEATURES], s, 3, 1, e).unwrap());
            }
        }
        seqs.pop();
        write_layout(dir.path(), &seqs, DHG_TEMPLATE).unwrap();
        let idx = load_dhg(dir.path(), None).unwrap();
        assert_eq!(idx.sequences, seqs);
        assert_eq!(idx.missing.len(), 1);
        assert!(idx.missing[0].ends_with("gesture_3/finger_1/subject_2/essai_2/skeleton_world.txt"));
    }

    #[test]
    fn custom_template() {
        let dir = tempfile::tempdir().unwrap();
        let seq = SkeletonSequence::new(vec![0.5; 3 * FEATURES], 4, 9, 2, 3).unwrap();
        let template = "s{s}-g{g}-f{f}-t{e}.txt";
        write_layout(dir.path(), std::slice::from_ref(&seq), template).unwrap();
        let idx = load_dhg(dir.path(), Some(template)).unwrap();
        assert_eq!(idx.sequences, vec![seq]);
    }
}
