//! On-disk formats.
//!
//! A checkpoint is a directory holding `manifest.json` and `tensors.bin`. The
//! manifest records the container kind, the architecture, and an ordered list
//! of `{name, shape, offset, length}` entries, with `offset` and `length` in
//! bytes into `tensors.bin`. Tensor data is little-endian `f32`, widened to
//! `f64` on read; writes round to the nearest `f32`.
//!
//! Permutation assignments are UTF-8 text, one `<id> : <i0>,<i1>,...` record
//! per line. Attention variables are split into `<id>.inter` and
//! `<id>.intra.<h>` records. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::BlockPermutation;
use crate::error::{Error, Result};
use crate::graph::{PermutationAssignment, VarPerm};
use crate::permutation::Permutation;
use crate::toy::EvalBatch;
use crate::weights::{ArchSpec, TaskVector, Tensor, WeightSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Weights,
    TaskVector,
    EvalBatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestArch {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub has_layernorm: bool,
}

impl From<&ArchSpec> for ManifestArch {
    fn from(a: &ArchSpec) -> Self {
        ManifestArch {
            n_blocks: a.n_blocks,
            n_heads: a.n_heads,
            embed_dim: a.embed_dim,
            head_dim: a.embed_dim / a.n_heads.max(1),
            mlp_hidden: a.mlp_hidden,
            input_dim: a.input_dim,
            output_dim: a.output_dim,
            has_layernorm: a.has_layernorm,
        }
    }
}

impl ManifestArch {
    fn to_arch(&self) -> Result<ArchSpec> {
        let arch = ArchSpec {
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            embed_dim: self.embed_dim,
            mlp_hidden: self.mlp_hidden,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            has_layernorm: self.has_layernorm,
        };
        arch.validate()?;
        if arch.head_dim() != self.head_dim {
            return Err(Error::MalformedManifest(format!(
                "head_dim {} disagrees with embed_dim / n_heads = {}",
                self.head_dim,
                arch.head_dim()
            )));
        }
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ContainerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ManifestArch>,
    pub tensors: Vec<TensorEntry>,
}

/// Reads just the manifest of a container.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::MalformedManifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn read_container(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(TENSORS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        if entry.length != 4 * count as u64 {
            return Err(Error::shape(
                &entry.name,
                format!(
                    "shape {:?} needs {} values but the blob entry holds {} bytes",
                    entry.shape, count, entry.length
                ),
            ));
        }
        let start = usize::try_from(entry.offset)
            .map_err(|_| Error::MalformedManifest(format!("offset of `{}`", entry.name)))?;
        let end = start
            .checked_add(4 * count)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| {
                Error::MalformedManifest(format!(
                    "`{}` extends past the end of {TENSORS_FILE}",
                    entry.name
                ))
            })?;
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: entry.name.clone(),
                index,
            });
        }
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}

fn write_container(
    dir: &Path,
    kind: ContainerKind,
    arch: Option<&ArchSpec>,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for (index, &v) in t.data.iter().enumerate() {
            let narrow = v as f32;
            if !narrow.is_finite() {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    index,
                });
            }
            blob.extend_from_slice(&narrow.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        arch: arch.map(ManifestArch::from),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;

    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".checkpoint-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let manifest_path = staging.path().join(MANIFEST_FILE);
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    let blob_path = staging.path().join(TENSORS_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;

    if dir.exists() {
        let existing = if dir.is_dir() {
            fs::remove_dir_all(dir)
        } else {
            fs::remove_file(dir)
        };
        existing.map_err(|e| Error::io(dir, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn read_parameter_container(dir: &Path, expected: ContainerKind) -> Result<WeightSet> {
    let (manifest, tensors) = read_container(dir)?;
    if manifest.kind != expected {
        return Err(Error::MalformedManifest(format!(
            "expected a {expected:?} container, found {:?}",
            manifest.kind
        )));
    }
    let arch = manifest
        .arch
        .as_ref()
        .ok_or_else(|| Error::MalformedManifest("missing arch".into()))?
        .to_arch()?;
    let mut map = BTreeMap::new();
    for (name, t) in tensors {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::MalformedManifest(format!("duplicate tensor `{name}`")));
        }
    }
    WeightSet::new(arch, map)
}

fn write_parameter_container(dir: &Path, kind: ContainerKind, ws: &WeightSet) -> Result<()> {
    ws.validate()?;
    let ordered: Vec<(String, Vec<usize>)> = ws.arch().tensor_shapes();
    let tensors: Vec<(&str, &Tensor)> = ordered
        .iter()
        .map(|(name, _)| Ok((name.as_str(), ws.get(name)?)))
        .collect::<Result<_>>()?;
    write_container(dir, kind, Some(ws.arch()), &tensors)
}

pub fn read_checkpoint(dir: &Path) -> Result<WeightSet> {
    read_parameter_container(dir, ContainerKind::Weights)
}

/// Writes `ws` to `dir`, replacing anything already there.
pub fn write_checkpoint(ws: &WeightSet, dir: &Path) -> Result<()> {
    write_parameter_container(dir, ContainerKind::Weights, ws)
}

pub fn read_task_vector(dir: &Path) -> Result<TaskVector> {
    read_parameter_container(dir, ContainerKind::TaskVector).map(TaskVector::from_deltas)
}

pub fn write_task_vector(tv: &TaskVector, dir: &Path) -> Result<()> {
    write_parameter_container(dir, ContainerKind::TaskVector, tv.deltas())
}

/// Reads an evaluation batch (`inputs` of shape `N×S×input_dim`, `targets`
/// of shape `N` holding integral class labels).
pub fn read_eval_batch(dir: &Path) -> Result<EvalBatch> {
    let (manifest, tensors) = read_container(dir)?;
    if manifest.kind != ContainerKind::EvalBatch {
        return Err(Error::MalformedManifest(format!(
            "expected an EvalBatch container, found {:?}",
            manifest.kind
        )));
    }
    let mut inputs = None;
    let mut targets = None;
    for (name, t) in tensors {
        match name.as_str() {
            "inputs" => inputs = Some(t),
            "targets" => targets = Some(t),
            _ => return Err(Error::UnexpectedTensor(name)),
        }
    }
    let inputs = inputs.ok_or_else(|| Error::MissingTensor("inputs".into()))?;
    let targets = targets.ok_or_else(|| Error::MissingTensor("targets".into()))?;
    let &[n, s, d] = inputs.shape.as_slice() else {
        return Err(Error::shape("inputs", "expected shape [N, S, input_dim]"));
    };
    if targets.shape != [n] {
        return Err(Error::shape("targets", format!("expected shape [{n}]")));
    }
    let labels = targets
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::shape("targets", format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    EvalBatch::new(n, s, d, inputs.data, labels)
}

pub fn write_eval_batch(batch: &EvalBatch, dir: &Path) -> Result<()> {
    let inputs = Tensor::new(
        vec![batch.len(), batch.seq_len(), batch.input_dim()],
        batch.inputs().to_vec(),
    )?;
    for &label in batch.targets() {
        if label as f64 as f32 as usize != label {
            return Err(Error::shape("targets", format!("label {label} is not exact in f32")));
        }
    }
    let targets = Tensor::new(
        vec![batch.len()],
        batch.targets().iter().map(|&l| l as f64).collect(),
    )?;
    write_container(
        dir,
        ContainerKind::EvalBatch,
        None,
        &[("inputs", &inputs), ("targets", &targets)],
    )
}

/// Text rendering of an assignment, records sorted by variable id.
pub fn format_permutation_assignment(a: &PermutationAssignment) -> String {
    fn record(out: &mut String, id: &str, p: &Permutation) {
        let idx: Vec<String> = p.as_slice().iter().map(usize::to_string).collect();
        out.push_str(id);
        out.push_str(" : ");
        out.push_str(&idx.join(","));
        out.push('\n');
    }
    let mut out = String::new();
    for (id, perm) in a.iter() {
        match perm {
            VarPerm::Plain(p) => record(&mut out, id, p),
            VarPerm::Block(b) => {
                record(&mut out, &format!("{id}.inter"), b.inter());
                for (h, p) in b.intra().iter().enumerate() {
                    record(&mut out, &format!("{id}.intra.{h}"), p);
                }
            }
        }
    }
    out
}

pub fn parse_permutation_assignment(text: &str) -> Result<PermutationAssignment> {
    let malformed = |line: usize, detail: String| Error::MalformedPermutationFile { line, detail };
    let mut plain: BTreeMap<String, Permutation> = BTreeMap::new();
    let mut inter: BTreeMap<String, (usize, Permutation)> = BTreeMap::new();
    let mut intra: BTreeMap<String, BTreeMap<usize, Permutation>> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, values) = line
            .split_once(':')
            .ok_or_else(|| malformed(line_no, "expected `<id> : <indices>`".into()))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(malformed(line_no, "empty variable id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(malformed(line_no, format!("duplicate record `{id}`")));
        }
        let indices = values
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| malformed(line_no, format!("bad index in `{id}`: {e}")))?;
        let perm = Permutation::from_vec(indices)?;

        if let Some(base) = id.strip_suffix(".inter") {
            inter.insert(base.to_string(), (line_no, perm));
        } else if let Some((base, head)) = id.rsplit_once(".intra.") {
            let head: usize = head
                .parse()
                .map_err(|_| malformed(line_no, format!("bad head index in `{id}`")))?;
            intra.entry(base.to_string()).or_default().insert(head, perm);
        } else {
            plain.insert(id.to_string(), perm);
        }
    }

    let mut out = PermutationAssignment::new();
    for (id, p) in plain {
        out.insert(id, VarPerm::Plain(p));
    }
    for (base, (line_no, inter_perm)) in inter {
        if out.get(&base).is_some() {
            return Err(malformed(line_no, format!("`{base}` given both flat and per-head")));
        }
        let heads = intra.remove(&base).unwrap_or_default();
        if heads.len() != inter_perm.len() || heads.keys().enumerate().any(|(i, &h)| i != h) {
            return Err(malformed(
                line_no,
                format!("`{base}` needs intra records for heads 0..{}", inter_perm.len()),
            ));
        }
        let block = BlockPermutation::new(inter_perm, heads.into_values().collect())?;
        out.insert(base, VarPerm::Block(block));
    }
    if let Some(base) = intra.keys().next() {
        return Err(Error::MalformedPermutationFile {
            line: 0,
            detail: format!("intra records for `{base}` without an inter record"),
        });
    }
    Ok(out)
}

pub fn read_permutation_assignment(path: &Path) -> Result<PermutationAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_permutation_assignment(&text)
}

pub fn write_permutation_assignment(a: &PermutationAssignment, path: &Path) -> Result<()> {
    write_text_atomic(path, &format_permutation_assignment(a))
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_text_atomic(path: &Path, contents: &str) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(|e| Error::io(&parent, e))?;
    tmp.write_all(contents.as_bytes())
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
