//! Vector store: a directory holding `store.json` and one little-endian
//! f32 blob per (concept, layer). Used for CAVs, faithfulness vectors and
//! imported vector sets alike.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};
use crate::linfaith::{FaithVectorSet, ImportedVectorSet};
use crate::mechinterp::ConceptVector;
use crate::trace::{read_f32_blob, write_f32_blob};

pub const STORE_VERSION: u32 = 1;
pub const STORE_MANIFEST: &str = "store.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Cav,
    Faithfulness,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub concept_id: String,
    pub layer: usize,
    pub d_model: usize,
    pub blob: String,
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub n_pos: usize,
    #[serde(default)]
    pub n_neg: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub kind: StoreKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub dtype: String,
    pub entries: Vec<StoreEntry>,
}

fn blob_name(idx: usize, concept: &str, layer: usize) -> String {
    let safe: String = concept
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("v{idx:04}_{safe}_L{layer}.f32")
}

fn write_store(dir: &Path, mut manifest: StoreManifest, vectors: &[&[f64]]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FaithError::io(dir, e))?;
    for (i, (entry, v)) in manifest.entries.iter_mut().zip(vectors).enumerate() {
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(FaithError::NonFinite { index: k });
        }
        entry.blob = blob_name(i, &entry.concept_id, entry.layer);
        entry.d_model = v.len();
        let f: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        write_f32_blob(&dir.join(&entry.blob), &f)?;
    }
    let path = dir.join(STORE_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| FaithError::io(&path, e))
}

/// Reads the manifest and every blob, widening to f64.
pub fn read_store(dir: &Path) -> Result<(StoreManifest, Vec<Vec<f64>>)> {
    let path = dir.join(STORE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| FaithError::io(&path, e))?;
    let manifest: StoreManifest = serde_json::from_str(&text)?;
    if manifest.format_version != STORE_VERSION {
        return Err(FaithError::UnsupportedVersion {
            found: manifest.format_version,
            expected: STORE_VERSION,
        });
    }
    if manifest.dtype != "f32" {
        return Err(FaithError::InvalidManifest(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let vectors = manifest
        .entries
        .iter()
        .map(|e| Ok(read_f32_blob(&dir.join(&e.blob), e.d_model)?.into_iter().map(f64::from).collect()))
        .collect::<Result<_>>()?;
    Ok((manifest, vectors))
}

fn entry(concept_id: &str, layer: usize) -> StoreEntry {
    StoreEntry {
        concept_id: concept_id.to_string(),
        layer,
        d_model: 0,
        blob: String::new(),
        bias: 0.0,
        n_pos: 0,
        n_neg: 0,
        probe_f1: None,
    }
}

pub fn save_cavs(dir: &Path, name: &str, cavs: &[ConceptVector]) -> Result<()> {
    let entries = cavs
        .iter()
        .map(|c| StoreEntry {
            bias: c.bias,
            n_pos: c.n_pos,
            n_neg: c.n_neg,
            probe_f1: c.probe_f1,
            ..entry(&c.concept_id, c.layer)
        })
        .collect();
    let vectors: Vec<&[f64]> = cavs.iter().map(|c| c.vector.as_slice()).collect();
    write_store(
        dir,
        StoreManifest {
            format_version: STORE_VERSION,
            kind: StoreKind::Cav,
            name: name.to_string(),
            source: None,
            dtype: "f32".into(),
            entries,
        },
        &vectors,
    )
}

pub fn load_cavs(dir: &Path) -> Result<Vec<ConceptVector>> {
    let (m, vectors) = read_store(dir)?;
    Ok(m.entries
        .into_iter()
        .zip(vectors)
        .map(|(e, vector)| ConceptVector {
            concept_id: e.concept_id,
            layer: e.layer,
            vector,
            bias: e.bias,
            n_pos: e.n_pos,
            n_neg: e.n_neg,
            probe_f1: e.probe_f1,
        })
        .collect())
}

/// CAVs grouped by concept, then layer.
pub fn cavs_by_concept(cavs: Vec<ConceptVector>) -> BTreeMap<String, BTreeMap<usize, ConceptVector>> {
    let mut out: BTreeMap<String, BTreeMap<usize, ConceptVector>> = BTreeMap::new();
    for c in cavs {
        out.entry(c.concept_id.clone()).or_default().insert(c.layer, c);
    }
    out
}

pub const FAITH_CONCEPT: &str = "faithfulness";

pub fn save_faith_vectors(dir: &Path, fvs: &FaithVectorSet) -> Result<()> {
    let entries = fvs
        .vectors
        .keys()
        .map(|&l| StoreEntry {
            bias: fvs.biases.get(&l).copied().unwrap_or(0.0),
            probe_f1: fvs.f1_by_layer.get(&l).copied(),
            ..entry(FAITH_CONCEPT, l)
        })
        .collect();
    let vectors: Vec<&[f64]> = fvs.vectors.values().map(Vec::as_slice).collect();
    write_store(
        dir,
        StoreManifest {
            format_version: STORE_VERSION,
            kind: StoreKind::Faithfulness,
            name: fvs.task.clone(),
            source: None,
            dtype: "f32".into(),
            entries,
        },
        &vectors,
    )
}

pub fn load_faith_vectors(dir: &Path) -> Result<FaithVectorSet> {
    let (m, vectors) = read_store(dir)?;
    if m.kind != StoreKind::Faithfulness {
        return Err(FaithError::InvalidManifest(format!("store {} holds {:?} vectors", dir.display(), m.kind)));
    }
    let mut fvs = FaithVectorSet {
        task: m.name,
        vectors: BTreeMap::new(),
        f1_by_layer: BTreeMap::new(),
        biases: BTreeMap::new(),
    };
    for (e, v) in m.entries.into_iter().zip(vectors) {
        fvs.f1_by_layer.insert(e.layer, e.probe_f1.unwrap_or(0.0));
        fvs.biases.insert(e.layer, e.bias);
        fvs.vectors.insert(e.layer, v);
    }
    Ok(fvs)
}

pub fn save_imported(dir: &Path, set: &ImportedVectorSet) -> Result<()> {
    set.validate()?;
    let entries = set.vectors.keys().map(|&l| entry(&set.name, l)).collect();
    let vectors: Vec<&[f64]> = set.vectors.values().map(Vec::as_slice).collect();
    write_store(
        dir,
        StoreManifest {
            format_version: STORE_VERSION,
            kind: StoreKind::Imported,
            name: set.name.clone(),
            source: Some(set.source.clone()),
            dtype: "f32".into(),
            entries,
        },
        &vectors,
    )
}

/// Any store read as plain layer vectors. Imported sets must name their
/// source.
pub fn load_layer_vectors(dir: &Path) -> Result<ImportedVectorSet> {
    let (m, vectors) = read_store(dir)?;
    if m.kind == StoreKind::Imported && m.source.as_deref().is_none_or(str::is_empty) {
        return Err(FaithError::InvalidManifest("imported vector set has no source".into()));
    }
    if m.kind == StoreKind::Cav {
        let ids: std::collections::BTreeSet<&str> = m.entries.iter().map(|e| e.concept_id.as_str()).collect();
        if ids.len() > 1 {
            return Err(FaithError::InvalidManifest(format!(
                "store {} holds {} concepts; pick one",
                dir.display(),
                ids.len()
            )));
        }
    }
    let set = ImportedVectorSet {
        name: m.name,
        source: m.source.unwrap_or_else(|| format!("{:?} store", m.kind).to_lowercase()),
        vectors: m.entries.iter().map(|e| e.layer).zip(vectors).collect(),
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cavs = vec![
            ConceptVector {
                concept_id: "sports events".into(),
                layer: 3,
                vector: vec![0.5, -1.25],
                bias: 0.1,
                n_pos: 2,
                n_neg: 3,
                probe_f1: Some(0.9),
            },
            ConceptVector {
                concept_id: "sports events".into(),
                layer: 4,
                vector: vec![1.0, 2.0],
                bias: 0.0,
                n_pos: 2,
                n_neg: 3,
                probe_f1: None,
            },
        ];
        save_cavs(dir.path(), "cavs", &cavs).unwrap();
        assert_eq!(load_cavs(dir.path()).unwrap(), cavs);
        let set = load_layer_vectors(dir.path()).unwrap();
        assert_eq!(set.vectors[&4], vec![1.0, 2.0]);
    }

    #[test]
    fn imported_needs_source() {
        let dir = tempfile::tempdir().unwrap();
        let set = ImportedVectorSet {
            name: "hallucination".into(),
            vectors: [(6, vec![1.0, 0.0])].into(),
            source: "external work".into(),
        };
        save_imported(dir.path(), &set).unwrap();
        assert_eq!(load_layer_vectors(dir.path()).unwrap(), set);
        let path = dir.path().join(STORE_MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"source\": \"external work\",", "");
        fs::write(&path, text).unwrap();
        assert!(load_layer_vectors(dir.path()).is_err());
    }
}
