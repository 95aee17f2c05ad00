//! Synthetic paired cohorts: volumes, BOLD series, and derived FCNs.

mod cohort;
mod fcn;
mod volume;

pub use cohort::{gen_paired_cohort, gen_paired_cohort_with, n_latents, CohortRecipe, CohortSpec};
pub use fcn::{bold_to_fcn, fcn_node_features};
pub use volume::{augment_volume, mask_volume, resize_volume, AugmentCfg, MaskSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D scalar volume stored row-major as `[d][h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    voxels: Vec<f64>,
    pub subject_id: String,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>, subject_id: impl Into<String>) -> Result<Self> {
        if dims.iter().any(|&e| e == 0) {
            return Err(Error::shape("volume", format!("extents must be positive, got {dims:?}")));
        }
        if dims.iter().product::<usize>() != voxels.len() {
            return Err(Error::shape(
                "volume",
                format!("{dims:?} needs {} voxels, got {}", dims.iter().product::<usize>(), voxels.len()),
            ));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("volume contains non-finite voxels".into()));
        }
        Ok(Self { dims, voxels, subject_id: subject_id.into() })
    }

    pub fn filled(dims: [usize; 3], value: f64, subject_id: impl Into<String>) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()], subject_id)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[self.index(z, y, x)]
    }
}

/// ROI-by-time BOLD signals, row-major `[n_rois][n_timepoints]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoldSeries {
    n_rois: usize,
    n_timepoints: usize,
    signals: Vec<f64>,
}

impl BoldSeries {
    pub fn new(n_rois: usize, n_timepoints: usize, signals: Vec<f64>) -> Result<Self> {
        if n_rois == 0 || n_timepoints < 2 {
            return Err(Error::shape("bold", format!("need >=1 ROI and >=2 timepoints, got {n_rois}x{n_timepoints}")));
        }
        if signals.len() != n_rois * n_timepoints {
            return Err(Error::shape("bold", format!("{n_rois}x{n_timepoints} vs {} values", signals.len())));
        }
        if signals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("BOLD series contains non-finite values".into()));
        }
        Ok(Self { n_rois, n_timepoints, signals })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::shape("bold", "ragged ROI rows"));
        }
        Self::new(rows.len(), t, rows.concat())
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn n_timepoints(&self) -> usize {
        self.n_timepoints
    }

    pub fn signals(&self) -> &[f64] {
        &self.signals
    }

    pub fn roi(&self, i: usize) -> &[f64] {
        &self.signals[i * self.n_timepoints..(i + 1) * self.n_timepoints]
    }
}

/// Symmetric correlation matrix with unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Fcn {
    n_rois: usize,
    matrix: Vec<f64>,
}

impl Fcn {
    /// Validates symmetry, unit diagonal and the [-1, 1] range.
    pub fn new(n_rois: usize, matrix: Vec<f64>) -> Result<Self> {
        if n_rois == 0 || matrix.len() != n_rois * n_rois {
            return Err(Error::shape("fcn", format!("{n_rois} ROIs vs {} entries", matrix.len())));
        }
        for i in 0..n_rois {
            if matrix[i * n_rois + i] != 1.0 {
                return Err(Error::Format(format!("FCN diagonal entry {i} is not 1")));
            }
            for j in 0..n_rois {
                let v = matrix[i * n_rois + j];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Format(format!("FCN entry ({i},{j}) = {v} outside [-1, 1]")));
                }
                if (v - matrix[j * n_rois + i]).abs() >= 1e-12 {
                    return Err(Error::Format(format!("FCN is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { n_rois, matrix })
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n_rois + j]
    }

    /// Relabels nodes: entry `(i, j)` of the result is `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_rois;
        if perm.len() != n {
            return Err(Error::shape("fcn permute", format!("{} vs {n}", perm.len())));
        }
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        Self::new(n, m)
    }
}

/// One subject's image-network pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub subject_id: String,
    pub volume: Volume3D,
    pub bold: BoldSeries,
    pub fcn: Fcn,
    pub label: usize,
}

/// Desk-scale and full-scale size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizePreset {
    Desk,
    Full,
}

impl SizePreset {
    pub fn dims(self) -> [usize; 3] {
        match self {
            SizePreset::Desk => [16, 16, 16],
            SizePreset::Full => [96, 96, 96],
        }
    }

    pub fn n_rois(self) -> usize {
        match self {
            SizePreset::Desk => 16,
            SizePreset::Full => 116,
        }
    }
}
