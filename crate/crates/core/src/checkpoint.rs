//! On-disk parameter checkpoints: `manifest.json` describing every tensor plus a
//! flat `params.bin` of little-endian f32 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub step: u64,
    pub config: serde_json::Value,
}

fn namespace(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamStore<f32>,
    config: &impl Serialize,
    step: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.num_values() * 4);
    let mut offset = 0;
    for (name, p) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            dtype: "f32le".into(),
            offset,
        });
        offset += p.value.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step,
        config: serde_json::to_value(config)?,
        tensors,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} bytes, found {} (truncated or corrupt)",
            bpath.display(),
            total * 4,
            blob.len()
        )));
    }
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        if t.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("`{}`: unsupported dtype {}", t.name, t.dtype)));
        }
        let len: usize = t.shape.iter().product();
        let bytes = blob
            .get(t.offset * 4..(t.offset + len) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("`{}` lies outside the blob", t.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
    }
    Ok(Checkpoint { params, step: manifest.step, config: manifest.config })
}

/// Overwrites the parameters of `target` under each of `namespaces` with the
/// checkpoint's. The sets of names and every shape must agree exactly; other
/// namespaces of `target` are untouched.
pub fn load_namespaces(
    target: &mut ParamStore<f32>,
    source: &ParamStore<f32>,
    namespaces: &[&str],
) -> Result<()> {
    for ns in namespaces {
        let prefix = format!("{ns}.");
        let want: Vec<&str> = target.names().filter(|n| n.starts_with(&prefix)).collect();
        let have: Vec<&str> = source.names().filter(|n| n.starts_with(&prefix)).collect();
        if have.is_empty() {
            return Err(Error::Checkpoint(format!("namespace `{ns}` is missing from the checkpoint")));
        }
        if want != have {
            let extra: Vec<_> = have.iter().filter(|n| !want.contains(n)).collect();
            let missing: Vec<_> = want.iter().filter(|n| !have.contains(n)).collect();
            return Err(Error::Checkpoint(format!(
                "shape mismatch in namespace `{ns}`: unexpected {extra:?}, missing {missing:?}"
            )));
        }
        for name in want.iter().map(|s| s.to_string()).collect::<Vec<_>>() {
            let src = source.get(&name)?;
            let dst = target.get_mut(&name)?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch in namespace `{}`: `{name}` is {:?} in the checkpoint, model expects {:?}",
                    namespace(&name),
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, ModelConfig};
    use crate::config::{Profile, RunConfig};

    fn tiny() -> ModelConfig {
        RunConfig::profile(Profile::Tiny).model
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_backbone::<f32>(&tiny(), 3);
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&a, &p, &tiny(), 7).unwrap();
        let ck = load_checkpoint(&a).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.step, 7);
        save_checkpoint(&b, &ck.params, &ck.config, ck.step).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
    }

    #[test]
    fn depth_mismatch_names_namespace() {
        let cfg = tiny();
        let deeper = ModelConfig { depth: cfg.depth + 1, ..cfg.clone() };
        let source = init_backbone::<f32>(&deeper, 1);
        let mut target = init_backbone::<f32>(&cfg, 2);
        let err = load_namespaces(&mut target, &source, &["encoder", "transformer"]).unwrap_err();
        assert!(err.to_string().contains("`transformer`"), "{err}");
    }

    #[test]
    fn width_mismatch_names_namespace() {
        let cfg = tiny();
        let wider = ModelConfig { mlp_dim: cfg.mlp_dim * 2, ..cfg.clone() };
        let source = init_backbone::<f32>(&wider, 1);
        let mut target = init_backbone::<f32>(&cfg, 2);
        let err = load_namespaces(&mut target, &source, &["transformer"]).unwrap_err();
        assert!(err.to_string().contains("`transformer`"), "{err}");
    }

    #[test]
    fn partial_load_leaves_other_namespaces() {
        let cfg = tiny();
        let source = init_backbone::<f32>(&cfg, 1);
        let init = init_backbone::<f32>(&cfg, 2);
        let mut target = init.clone();
        load_namespaces(&mut target, &source, &["encoder"]).unwrap();
        assert_eq!(target.digest("encoder."), source.digest("encoder."));
        assert_eq!(target.digest("transformer."), init.digest("transformer."));
        assert_eq!(target.digest("embedder."), init.digest("embedder."));
    }

    #[test]
    fn truncated_blob_and_bad_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_backbone::<f32>(&tiny(), 3);
        save_checkpoint(dir.path(), &p, &serde_json::Value::Null, 0).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

        fs::write(&blob, &bytes).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&mpath, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
