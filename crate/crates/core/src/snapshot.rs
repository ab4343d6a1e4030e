//! Cycle-end model snapshots.
//!
//! Layout: `<root>/cycle_<k>/manifest.txt` plus `params.bin`. The manifest is
//! plain text, one `key value` pair per line followed by one `tensor` line
//! per stored tensor:
//!
//! ```text
//! format gesture-kd-snapshot 1
//! dtype f64le
//! cycle 2
//! epoch 8
//! seed 7
//! model {"num_classes":4,...}
//! tensor transformer.block0.attn.query.weight weight 0 66x66
//! ```
//!
//! Offsets are in bytes into `params.bin`, which holds the raw little-endian
//! values back to back. Snapshots are written once; saving onto an existing
//! cycle directory is an error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{shape_err, Error, Result};
use crate::model::{GestureModel, ModelConfig};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

const FORMAT: &str = "gesture-kd-snapshot 1";
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotMeta {
    pub cycle: usize,
    /// Global epoch count at the end of the cycle.
    pub epoch: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub meta: SnapshotMeta,
    pub tensors: Vec<TensorEntry>,
}

pub fn cycle_dir(root: &Path, cycle: usize) -> PathBuf {
    root.join(format!("cycle_{cycle}"))
}

fn render_manifest(meta: &SnapshotMeta, store: &ParamStore) -> Result<String> {
    let mut s = String::new();
    let model = serde_json::to_string(&meta.model)?;
    writeln!(s, "format {FORMAT}").unwrap();
    writeln!(s, "dtype {DTYPE}").unwrap();
    writeln!(s, "cycle {}", meta.cycle).unwrap();
    writeln!(s, "epoch {}", meta.epoch).unwrap();
    writeln!(s, "seed {}", meta.seed).unwrap();
    writeln!(s, "model {model}").unwrap();
    let mut offset = 0;
    for p in store.params() {
        let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(s, "tensor {} {} {offset} {}", p.name, p.kind.as_str(), shape.join("x")).unwrap();
        offset += p.tensor.numel() * 8;
    }
    Ok(s)
}

/// Writes a snapshot of `store` under `root/cycle_<meta.cycle>`.
pub fn save_snapshot(root: &Path, store: &ParamStore, meta: &SnapshotMeta) -> Result<PathBuf> {
    let dest = cycle_dir(root, meta.cycle);
    if dest.exists() {
        return Err(Error::Snapshot(format!("{} already exists", dest.display())));
    }
    std::fs::create_dir_all(root)?;
    let tmp = root.join(format!(".cycle_{}.tmp", meta.cycle));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir(&tmp)?;
    let mut blob = Vec::with_capacity(store.count() * 8);
    for p in store.params() {
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(tmp.join("params.bin"), blob)?;
    std::fs::write(tmp.join("manifest.txt"), render_manifest(meta, store)?)?;
    std::fs::rename(&tmp, &dest)?;
    Ok(dest)
}

fn bad(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Snapshot(format!("{}:{line}: {}", path.display(), msg.into()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Snapshot(format!("cannot read {}: {e}", path.display())))?;
    let (mut cycle, mut epoch, mut seed, mut model) = (None, None, None, None);
    let (mut format, mut dtype) = (None, None);
    let mut tensors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let Some((key, rest)) = line.split_once(' ') else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(bad(&path, n, format!("malformed line {line:?}")));
        };
        let int = |v: &str| v.parse::<u64>().map_err(|_| bad(&path, n, format!("bad integer {v:?}")));
        match key {
            "format" => format = Some(rest.to_string()),
            "dtype" => dtype = Some(rest.to_string()),
            "cycle" => cycle = Some(int(rest)? as usize),
            "epoch" => epoch = Some(int(rest)? as usize),
            "seed" => seed = Some(int(rest)?),
            "model" => {
                model = Some(serde_json::from_str::<ModelConfig>(rest).map_err(|e| bad(&path, n, e.to_string()))?)
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(&path, n, "tensor line needs name, kind, offset, shape"));
                }
                let kind = ParamKind::parse(f[1]).ok_or_else(|| bad(&path, n, format!("unknown kind {:?}", f[1])))?;
                let shape = f[3]
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(&path, n, format!("bad shape {:?}", f[3]))))
                    .collect::<Result<Vec<_>>>()?;
                tensors.push(TensorEntry { name: f[0].to_string(), kind, offset: int(f[2])? as usize, shape });
            }
            other => return Err(bad(&path, n, format!("unknown key {other:?}"))),
        }
    }
    if format.as_deref() != Some(FORMAT) {
        return Err(bad(&path, 1, format!("unsupported format {format:?}")));
    }
    if dtype.as_deref() != Some(DTYPE) {
        return Err(bad(&path, 2, format!("unsupported dtype {dtype:?}")));
    }
    let missing = |k: &str| bad(&path, 0, format!("missing {k}"));
    Ok(Manifest {
        meta: SnapshotMeta {
            cycle: cycle.ok_or_else(|| missing("cycle"))?,
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            model: model.ok_or_else(|| missing("model"))?,
        },
        tensors,
    })
}

/// Loads a snapshot into an existing store with the same parameter layout.
pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<SnapshotMeta> {
    let manifest = read_manifest(dir)?;
    let blob = std::fs::read(dir.join("params.bin"))
        .map_err(|e| Error::Snapshot(format!("cannot read {}/params.bin: {e}", dir.display())))?;
    if manifest.tensors.len() != store.len() {
        return Err(Error::Snapshot(format!(
            "snapshot has {} tensors, model has {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    let mut tensors = Vec::with_capacity(store.len());
    for (entry, p) in manifest.tensors.iter().zip(store.params()) {
        if entry.name != p.name || entry.kind != p.kind {
            return Err(Error::Snapshot(format!(
                "tensor {} ({}) does not match model tensor {} ({})",
                entry.name,
                entry.kind.as_str(),
                p.name,
                p.kind.as_str()
            )));
        }
        if entry.shape != p.tensor.shape() {
            return Err(shape_err(
                "load_snapshot",
                format!("{}: snapshot {:?}, model {:?}", entry.name, entry.shape, p.tensor.shape()),
            ));
        }
        let n = p.tensor.numel();
        let bytes = blob
            .get(entry.offset..entry.offset + n * 8)
            .ok_or_else(|| Error::Snapshot(format!("{} runs past end of params.bin", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::new(&entry.shape, data)?);
    }
    store.set_tensors(tensors)?;
    Ok(manifest.meta)
}

/// Rebuilds a model from a snapshot directory.
pub fn load_snapshot(dir: &Path) -> Result<(GestureModel, SnapshotMeta)> {
    let manifest = read_manifest(dir)?;
    let mut model = GestureModel::new(manifest.meta.model.clone(), manifest.meta.seed)?;
    let meta = load_into(dir, &mut model.store)?;
    Ok((model, meta))
}

/// Snapshot directories under `root`, ordered by cycle.
pub fn list_snapshots(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if root.is_dir() {
        for entry in std::fs::read_dir(root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(k) = name.strip_prefix("cycle_").and_then(|k| k.parse::<usize>().ok()) {
                if entry.path().join("manifest.txt").is_file() {
                    found.push((k, entry.path()));
                }
            }
        }
    }
    if found.is_empty() {
        return Err(Error::MissingSnapshot(root.to_path_buf()));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            seq_len: 4,
            input_dim: 6,
            heads: 2,
            ff_dim: 8,
            transformer_blocks: 1,
            lstm_hidden: 4,
            chunk_size: 2,
            head_width: 5,
            ..ModelConfig::desk()
        }
    }

    fn meta(cycle: usize) -> SnapshotMeta {
        SnapshotMeta { cycle, epoch: 3 * cycle, seed: 11, model: tiny() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = GestureModel::new(tiny(), 5).unwrap();
        // Make the values awkward so a lossy format would show.
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.tensor_mut(id).data_mut() {
                *v = (*v + 0.1) / 3.0;
            }
        }
        let path = save_snapshot(dir.path(), &model.store, &meta(1)).unwrap();
        let (back, m) = load_snapshot(&path).unwrap();
        assert_eq!(m, meta(1));
        assert_eq!(back.store, model.store);
        let probe = Tensor::new(&[2, 4, 6], (0..48).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let a = model.predict_logits(&probe).unwrap();
        let b = back.predict_logits(&probe).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let model = GestureModel::new(tiny(), 5).unwrap();
        save_snapshot(dir.path(), &model.store, &meta(1)).unwrap();
        let before = std::fs::read(dir.path().join("cycle_1/params.bin")).unwrap();
        assert!(matches!(save_snapshot(dir.path(), &model.store, &meta(1)), Err(Error::Snapshot(_))));
        assert_eq!(std::fs::read(dir.path().join("cycle_1/params.bin")).unwrap(), before);
    }

    #[test]
    fn tampered_shape_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = GestureModel::new(tiny(), 5).unwrap();
        let path = save_snapshot(dir.path(), &model.store, &meta(1)).unwrap();
        let manifest = std::fs::read_to_string(path.join("manifest.txt")).unwrap();
        let first = manifest.lines().find(|l| l.starts_with("tensor ")).unwrap();
        let (head, shape) = first.rsplit_once(' ').unwrap();
        let tampered = manifest.replacen(first, &format!("{head} {shape}x1"), 1);
        std::fs::write(path.join("manifest.txt"), tampered).unwrap();
        let mut store = model.store.clone();
        assert!(matches!(load_into(&path, &mut store), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let model = GestureModel::new(tiny(), 5).unwrap();
        let path = save_snapshot(dir.path(), &model.store, &meta(1)).unwrap();
        std::fs::write(path.join("manifest.txt"), "format nope\n").unwrap();
        assert!(matches!(load_snapshot(&path), Err(Error::Snapshot(_))));
        std::fs::remove_file(path.join("manifest.txt")).unwrap();
        assert!(matches!(load_snapshot(&path), Err(Error::Snapshot(_))));
    }

    #[test]
    fn listing_orders_by_cycle() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(list_snapshots(dir.path()), Err(Error::MissingSnapshot(_))));
        let model = GestureModel::new(tiny(), 5).unwrap();
        for k in [10, 2, 1] {
            save_snapshot(dir.path(), &model.store, &meta(k)).unwrap();
        }
        let names: Vec<_> = list_snapshots(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().to_string())
            .collect();
        assert_eq!(names, ["cycle_1", "cycle_2", "cycle_10"]);
    }
}
