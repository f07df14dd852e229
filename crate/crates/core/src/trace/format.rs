//! On-disk trace format: `<name>.manifest.json` plus a raw little-endian
//! f32 blob `<name>.f32` in token-major `[token][layer][dim]` order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ActivationTrace, Granularity};
use crate::error::{FaithError, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct TraceManifest {
    format_version: u32,
    model_id: String,
    granularity: String,
    n_tokens: usize,
    n_layers: usize,
    d_model: usize,
    tokens: Vec<String>,
    dtype: String,
    layout: String,
    blob: String,
}

/// Resolves `(manifest_path, blob_path)` for a trace name. `path` may be
/// either the manifest itself or the bare stem.
pub fn trace_paths(path: &Path) -> (PathBuf, PathBuf) {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(MANIFEST_SUFFIX).unwrap_or(&name).to_string();
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    (
        dir.join(format!("{stem}{MANIFEST_SUFFIX}")),
        dir.join(format!("{stem}.f32")),
    )
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| FaithError::io(path, e))
}

pub fn read_f32_blob(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| FaithError::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(FaithError::SizeMismatch(format!(
            "size mismatch: manifest declares {expected_len} f32 values ({} bytes), blob {} has {} bytes",
            expected_len * 4,
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_trace(trace: &ActivationTrace, path: &Path) -> Result<()> {
    // ActivationTrace is validated at construction, but keep the write path
    // self-contained.
    if let Some(index) = trace.states().iter().position(|v| !v.is_finite()) {
        return Err(FaithError::NonFinite { index });
    }
    let (manifest_path, blob_path) = trace_paths(path);
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| FaithError::io(dir, e))?;
        }
    }
    let manifest = TraceManifest {
        format_version: FORMAT_VERSION,
        model_id: trace.model_id().to_string(),
        granularity: trace.granularity().as_str().to_string(),
        n_tokens: trace.n_tokens(),
        n_layers: trace.n_layers(),
        d_model: trace.d_model(),
        tokens: trace.tokens().to_vec(),
        dtype: "f32".into(),
        layout: "token-major".into(),
        blob: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    write_f32_blob(&blob_path, trace.states())?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| FaithError::io(&manifest_path, e))
}

pub fn load_trace(path: &Path) -> Result<ActivationTrace> {
    let (manifest_path, _) = trace_paths(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| FaithError::io(&manifest_path, e))?;
    let manifest: TraceManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(FaithError::UnsupportedVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.dtype != "f32" {
        return Err(FaithError::InvalidManifest(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.layout != "token-major" {
        return Err(FaithError::InvalidManifest(format!("unsupported layout {:?}", manifest.layout)));
    }
    let granularity: Granularity = manifest.granularity.parse()?;
    if manifest.tokens.len() != manifest.n_tokens {
        return Err(FaithError::SizeMismatch(format!(
            "size mismatch: n_tokens={} but {} token strings",
            manifest.n_tokens,
            manifest.tokens.len()
        )));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    let blob_path = dir.join(&manifest.blob);
    let len = manifest.n_tokens * manifest.n_layers * manifest.d_model;
    let states = read_f32_blob(&blob_path, len)?;
    ActivationTrace::new(
        manifest.model_id,
        granularity,
        manifest.tokens,
        manifest.n_layers,
        manifest.d_model,
        states,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ActivationTrace {
        ActivationTrace::new("m", Granularity::ResidualStream, vec!["a".into()], 1, 2, vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn blob_bytes_are_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        save_trace(&tiny(), &p).unwrap();
        let bytes = fs::read(dir.path().join("t.f32")).unwrap();
        assert_eq!(bytes, vec![0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0x3F]);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("t.manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["format_version"], 1);
        assert_eq!(manifest["dtype"], "f32");
        assert_eq!(manifest["layout"], "token-major");
        assert_eq!(manifest["blob"], "t.f32");
        assert_eq!(manifest["granularity"], "RS");
    }

    #[test]
    fn save_then_load_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.manifest.json");
        let t = tiny();
        save_trace(&t, &p).unwrap();
        assert!(load_trace(&p).unwrap().bit_eq(&t));
        // the bare stem resolves to the same files
        assert!(load_trace(&dir.path().join("t")).unwrap().bit_eq(&t));
    }

    #[test]
    fn manifest_blob_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        let t = ActivationTrace::new(
            "m",
            Granularity::ResidualStream,
            vec!["a".into(), "b".into()],
            1,
            2,
            vec![0.0; 4],
        )
        .unwrap();
        save_trace(&t, &p).unwrap();
        // truncate the blob to a single token
        write_f32_blob(&dir.path().join("t.f32"), &[0.0, 0.0]).unwrap();
        let err = load_trace(&p).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    fn rewrite_manifest(dir: &Path, key: &str, value: serde_json::Value) {
        let mp = dir.join("t.manifest.json");
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();
        m[key] = value;
        fs::write(&mp, serde_json::to_string(&m).unwrap()).unwrap();
    }

    #[test]
    fn unknown_granularity_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        save_trace(&tiny(), &p).unwrap();
        rewrite_manifest(dir.path(), "granularity", "ATTN".into());
        assert!(matches!(load_trace(&p), Err(FaithError::UnknownGranularity(_))));

        save_trace(&tiny(), &p).unwrap();
        rewrite_manifest(dir.path(), "format_version", 2.into());
        assert!(matches!(load_trace(&p), Err(FaithError::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn granularity_rs_loads_as_residual_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        save_trace(&tiny(), &p).unwrap();
        assert_eq!(load_trace(&p).unwrap().granularity(), Granularity::ResidualStream);
    }
}
