use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{f64s_to_le, le_to_f64s, write_atomic};
use crate::error::{Error, Result};
use crate::objectives::LossReport;
use crate::synth::{bold_to_fcn, BoldSeries, CohortRecipe, CohortSpec, PairedSample, Volume3D};
use crate::tensor::Tensor;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One record per optimizer step, one JSON object per line.
pub fn write_history(path: &Path, history: &[LossReport]) -> Result<()> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_history(path: &Path) -> Result<Vec<LossReport>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("history line {}: {e}", i + 1))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: usize,
}

/// `cohort.json` in a cohort directory; each subject has `<id>.vol` and `<id>.bold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub layout: String,
    pub spec: CohortSpec,
    pub recipe: CohortRecipe,
    pub subjects: Vec<SubjectEntry>,
}

const MANIFEST: &str = "cohort.json";
const LAYOUT: &str = "<id>.vol: D*H*W little-endian f64, z-major then y then x; \
<id>.bold: n_rois*n_timepoints little-endian f64, one ROI row after another";

/// Writes the manifest plus raw little-endian f64 volumes and BOLD matrices.
pub fn save_cohort(dir: &Path, spec: &CohortSpec, recipe: &CohortRecipe, samples: &[PairedSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        write_atomic(&dir.join(format!("{}.vol", s.subject_id)), &f64s_to_le(s.volume.voxels()))?;
        write_atomic(&dir.join(format!("{}.bold", s.subject_id)), &f64s_to_le(s.bold.signals()))?;
    }
    let manifest = CohortManifest {
        layout: LAYOUT.into(),
        spec: spec.clone(),
        recipe: recipe.clone(),
        subjects: samples.iter().map(|s| SubjectEntry { id: s.subject_id.clone(), label: s.label }).collect(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Reads a cohort directory; FCNs are recomputed from the stored BOLD series.
pub fn load_cohort(dir: &Path) -> Result<(CohortManifest, Vec<PairedSample>)> {
    let manifest: CohortManifest = read_json(&dir.join(MANIFEST))?;
    let spec = &manifest.spec;
    let samples = manifest
        .subjects
        .iter()
        .map(|entry| {
            let read = |ext: &str, want: usize| -> Result<Vec<f64>> {
                let path = dir.join(format!("{}.{ext}", entry.id));
                let data = le_to_f64s(&std::fs::read(&path)?)
                    .filter(|d| d.len() == want)
                    .ok_or_else(|| Error::Format(format!("{}: expected {want} f64 values", path.display())))?;
                Ok(data)
            };
            let volume = Volume3D::new(spec.dims, read("vol", spec.dims.iter().product())?, &entry.id)?;
            let bold = BoldSeries::new(spec.n_rois, spec.n_timepoints, read("bold", spec.n_rois * spec.n_timepoints)?)?;
            let fcn = bold_to_fcn(&bold)?;
            Ok(PairedSample { subject_id: entry.id.clone(), volume, bold, fcn, label: entry.label })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, samples))
}

/// Row-aligned embeddings with their subjects and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `"image"` or `"network"`.
    pub modality: String,
    pub subject_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub vectors: Tensor,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    format: String,
    modality: String,
    n: usize,
    d: usize,
    subject_ids: Vec<String>,
    labels: Vec<usize>,
}

const EMBEDDING_FORMAT: &str = "cinp-embeddings-v1";

/// One JSON header line, a newline, then `n * d` little-endian f64 values.
pub fn save_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let header = EmbeddingHeader {
        format: EMBEDDING_FORMAT.into(),
        modality: set.modality.clone(),
        n: set.vectors.rows(),
        d: set.vectors.cols(),
        subject_ids: set.subject_ids.clone(),
        labels: set.labels.clone(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    bytes.extend(f64s_to_le(set.vectors.data()));
    write_atomic(path, &bytes)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = std::fs::read(path)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("embedding file has no header line".into()))?;
    let header: EmbeddingHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Format(format!("embedding header: {e}")))?;
    if header.format != EMBEDDING_FORMAT {
        return Err(Error::Format(format!("unsupported embedding format `{}`", header.format)));
    }
    if header.subject_ids.len() != header.n || header.labels.len() != header.n {
        return Err(Error::Format("embedding header lists do not match n".into()));
    }
    let data = le_to_f64s(&bytes[split + 1..])
        .filter(|d| d.len() == header.n * header.d)
        .ok_or_else(|| Error::Format(format!("embedding payload is not {} x {} f64", header.n, header.d)))?;
    Ok(EmbeddingSet {
        modality: header.modality,
        subject_ids: header.subject_ids,
        labels: header.labels,
        vectors: Tensor::matrix(header.n, header.d, data)?,
    })
}
