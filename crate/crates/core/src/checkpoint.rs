//! Checkpoint directories and the append-only metric history.
//!
//! A checkpoint is a directory holding `manifest.txt` and one raw
//! little-endian blob per tensor. The manifest lists the model kind,
//! architecture key/values, step, recipe hash, and for every tensor its
//! name, dtype, shape, byte length and SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Scalar};

const MAGIC: &str = "avmae-checkpoint v1";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: (usize, usize),
    pub bytes: usize,
    pub sha256: String,
}

impl TensorEntry {
    pub fn file_name(&self) -> String {
        format!("{}.bin", self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// `pretrain` or `classifier`.
    pub kind: String,
    pub step: usize,
    pub recipe_hash: String,
    pub arch: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{MAGIC}\nkind={}\nstep={}\nrecipe={}\n",
            self.kind, self.step, self.recipe_hash
        );
        for (k, v) in &self.arch {
            out.push_str(&format!("arch.{k}={v}\n"));
        }
        for t in &self.tensors {
            out.push_str(&format!(
                "tensor {} {} {}x{} {} {}\n",
                t.name, t.dtype, t.shape.0, t.shape.1, t.bytes, t.sha256
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("manifest header missing"));
        }
        let mut kind = None;
        let mut step = None;
        let mut recipe_hash = None;
        let mut arch = BTreeMap::new();
        let mut tensors = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 {
                    return Err(corrupt(format!("line {lineno}: malformed tensor entry")));
                }
                let (r, c) = f[2]
                    .split_once('x')
                    .ok_or_else(|| corrupt(format!("line {lineno}: bad shape {}", f[2])))?;
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| corrupt(format!("line {lineno}: bad number {s:?}")))
                };
                // Names become blob file names inside the checkpoint directory.
                if f[0].is_empty() || f[0].starts_with('.') || f[0].contains(['/', '\\']) {
                    return Err(corrupt(format!("line {lineno}: bad tensor name {:?}", f[0])));
                }
                tensors.push(TensorEntry {
                    name: f[0].to_string(),
                    dtype: f[1].to_string(),
                    shape: (parse(r)?, parse(c)?),
                    bytes: parse(f[3])?,
                    sha256: f[4].to_string(),
                });
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("line {lineno}: expected key=value")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "step" => step = Some(v.parse().map_err(|_| corrupt(format!("line {lineno}: bad step")))?),
                "recipe" => recipe_hash = Some(v.to_string()),
                _ => {
                    let key = k
                        .strip_prefix("arch.")
                        .ok_or_else(|| corrupt(format!("line {lineno}: unknown key {k}")))?;
                    arch.insert(key.to_string(), v.to_string());
                }
            }
        }
        Ok(Self {
            kind: kind.ok_or_else(|| corrupt("manifest has no kind"))?,
            step: step.ok_or_else(|| corrupt("manifest has no step"))?,
            recipe_hash: recipe_hash.ok_or_else(|| corrupt("manifest has no recipe hash"))?,
            arch,
            tensors,
        })
    }
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub manifest: Manifest,
    pub store: ParamStore<F>,
}

/// Writes `store` under `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    kind: &str,
    arch: &[(String, String)],
    step: usize,
    recipe_hash: &str,
    store: &ParamStore<F>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, value) in store.iter() {
        let mut bytes = Vec::with_capacity(value.len() * F::BYTES);
        for &v in value.iter() {
            v.write_le(&mut bytes);
        }
        let entry = TensorEntry {
            name: name.to_string(),
            dtype: F::DTYPE.to_string(),
            shape: value.dim(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        };
        let path = dir.join(entry.file_name());
        fs::write(&path, &bytes).map_err(|e| Error::io(path, e))?;
        tensors.push(entry);
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        step,
        recipe_hash: recipe_hash.to_string(),
        arch: arch.iter().cloned().collect(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Checkpoint(format!("no checkpoint manifest at {}", path.display())),
        _ => Error::io(path.clone(), e),
    })?;
    Manifest::parse(&text)
}

/// Decodes one blob, checking its length and digest against the manifest.
pub fn decode_blob<F: Scalar>(entry: &TensorEntry, bytes: &[u8]) -> Result<Array2<F>> {
    if entry.dtype != F::DTYPE {
        return Err(corrupt(format!(
            "tensor {} is {}, expected {}",
            entry.name,
            entry.dtype,
            F::DTYPE
        )));
    }
    let (r, c) = entry.shape;
    if bytes.len() != entry.bytes || r.checked_mul(c).and_then(|n| n.checked_mul(F::BYTES)) != Some(entry.bytes) {
        return Err(corrupt(format!(
            "tensor {} has {} bytes, manifest says {} for shape {r}x{c}",
            entry.name,
            bytes.len(),
            entry.bytes
        )));
    }
    if sha256_hex(bytes) != entry.sha256 {
        return Err(corrupt(format!("tensor {} fails its checksum", entry.name)));
    }
    let values: Vec<F> = bytes.chunks_exact(F::BYTES).map(F::read_le).collect();
    Array2::from_shape_vec((r, c), values).map_err(|e| corrupt(format!("tensor {}: {e}", entry.name)))
}

pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<Checkpoint<F>> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        if store.id(&entry.name).is_some() {
            return Err(corrupt(format!("tensor {} listed twice", entry.name)));
        }
        let path = dir.join(entry.file_name());
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => corrupt(format!("missing blob {}", path.display())),
            _ => Error::io(path.clone(), e),
        })?;
        store.add(entry.name.clone(), decode_blob(entry, &bytes)?);
    }
    Ok(Checkpoint { manifest, store })
}

/// Copies checkpoint tensors into a freshly built `target` with the same
/// parameter set. The first tensor that is missing or has another shape is
/// reported.
pub fn restore<F: Scalar>(source: &ParamStore<F>, target: &mut ParamStore<F>) -> Result<()> {
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        let value = source
            .by_name(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor {name}")))?;
        if value.dim() != target.get(id).dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?} in the checkpoint, model expects {:?}",
                value.dim(),
                target.get(id).dim()
            )));
        }
        target.get_mut(id).assign(value);
    }
    if source.len() != target.len() {
        let extra = source
            .iter()
            .find(|(_, n, _)| target.id(n).is_none())
            .map(|(_, n, _)| n.to_string())
            .unwrap_or_default();
        return Err(Error::Checkpoint(format!(
            "checkpoint tensor {extra} has no place in the model"
        )));
    }
    Ok(())
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl HistoryRow {
    pub fn new(step: usize, split: &str, metric: &str, value: f64) -> Self {
        Self {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

/// Appends rows to a `step,split,metric,value` CSV, writing the header when
/// the file is new.
pub fn append_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let exists = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let io = |e: csv::Error| Error::io(PathBuf::from(path), std::io::Error::other(e));
    if !exists {
        w.write_record(["step", "split", "metric", "value"]).map_err(io)?;
    }
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.split.clone(),
            r.metric.clone(),
            format!("{}", r.value),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let bad = || Error::InvalidInput(format!("history row {} is malformed", i + 1));
        if rec.len() != 4 {
            return Err(bad());
        }
        rows.push(HistoryRow {
            step: rec[0].parse().map_err(|_| bad())?,
            split: rec[1].to_string(),
            metric: rec[2].to_string(),
            value: rec[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Writes formatted text to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
