//! Synthetic paired cohort generator.
//!
//! Each class owns a prototype that shapes both modalities: a flip-symmetric
//! blob field added to the volume and a partition of the ROIs into blocks
//! that sets the BOLD correlation structure. Each subject also draws one
//! latent `z_b ~ U(-1, 1)` per block. `z_b` sets block `b`'s within-block
//! correlation and the amplitude of a class-independent pattern in the
//! volume, so the two modalities share subject-level information beyond the
//! class.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{bold_to_fcn, BoldSeries, PairedSample, Volume3D};
use crate::error::{Error, Result};
use crate::rng::{indexed_seed, rng_from, stream, Rng};

/// Size and seed of a synthetic cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub k_classes: usize,
    pub dims: [usize; 3],
    pub n_rois: usize,
    pub n_timepoints: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self { n_subjects: 256, k_classes: 2, dims: [16, 16, 16], n_rois: 16, n_timepoints: 128, seed: 0 }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_classes < 2 {
            return Err(Error::BadCohortSpec(format!("need at least 2 classes, got {}", self.k_classes)));
        }
        if self.n_subjects < self.k_classes {
            return Err(Error::BadCohortSpec(format!(
                "{} subjects cannot cover {} classes",
                self.n_subjects, self.k_classes
            )));
        }
        if self.dims.iter().any(|&e| e < 2) {
            return Err(Error::BadCohortSpec(format!("volume extents must be >= 2, got {:?}", self.dims)));
        }
        if self.n_rois < 4 {
            return Err(Error::BadCohortSpec(format!("need at least 4 ROIs, got {}", self.n_rois)));
        }
        if self.n_timepoints < 8 {
            return Err(Error::BadCohortSpec(format!("need at least 8 timepoints, got {}", self.n_timepoints)));
        }
        Ok(())
    }

    pub fn subject_id(index: usize) -> String {
        format!("sub-{index:04}")
    }

    pub fn subject_seed(&self, index: usize) -> u64 {
        indexed_seed(self.seed, "subject", index as u64)
    }
}

/// Signal strengths of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortRecipe {
    /// RMS of the class pattern added to each volume.
    pub class_amplitude: f64,
    /// RMS of each latent pattern per unit of its latent.
    pub latent_amplitude: f64,
    /// Per-subject blobs at random places with random amplitudes.
    pub nuisance_blobs: usize,
    /// Standard deviation of nuisance blob amplitudes.
    pub nuisance_sigma: f64,
    pub voxel_noise: f64,
    /// Within-block correlation is `rho_base + rho_gain * z_b`.
    pub rho_base: f64,
    pub rho_gain: f64,
}

impl CohortRecipe {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("class_amplitude", self.class_amplitude),
            ("latent_amplitude", self.latent_amplitude),
            ("nuisance_sigma", self.nuisance_sigma),
            ("voxel_noise", self.voxel_noise),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        let (lo, hi) = (self.rho_base - self.rho_gain.abs(), self.rho_base + self.rho_gain.abs());
        if !(lo >= 0.0 && hi < 1.0) {
            return Err(Error::invalid("rho_base", format!("within-block correlation range [{lo}, {hi}] must lie in [0, 1)")));
        }
        Ok(())
    }
}

impl Default for CohortRecipe {
    fn default() -> Self {
        Self {
            class_amplitude: 0.3,
            latent_amplitude: 0.6,
            nuisance_blobs: 3,
            nuisance_sigma: 0.35,
            voxel_noise: 0.5,
            rho_base: 0.45,
            rho_gain: 0.3,
        }
    }
}

struct Blob {
    center: [f64; 3],
    width: f64,
    amplitude: f64,
}

fn blob_field(dims: [usize; 3], blobs: &[Blob]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let v: f64 = blobs
                    .iter()
                    .map(|b| {
                        let r2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
                        b.amplitude * (-r2 / (2.0 * b.width * b.width)).exp()
                    })
                    .sum();
                out.push(v);
            }
        }
    }
    out
}

fn random_blobs(rng: &mut Rng, dims: [usize; 3], count: usize, amplitude: impl Fn(&mut Rng) -> f64) -> Vec<Blob> {
    let min_dim = *dims.iter().min().expect("three extents") as f64;
    (0..count)
        .map(|_| {
            let center = [0, 1, 2].map(|a| (0.15 + 0.7 * rng.random::<f64>()) * (dims[a] - 1) as f64);
            let width = min_dim * (0.08 + 0.1 * rng.random::<f64>());
            let amplitude = amplitude(rng);
            Blob { center, width, amplitude }
        })
        .collect()
}

/// Averages a field over all eight axis flips.
fn symmetrize(field: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut out = vec![0.0; field.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for fz in [z, d - 1 - z] {
                    for fy in [y, h - 1 - y] {
                        for fx in [x, w - 1 - x] {
                            acc += field[(fz * h + fy) * w + fx];
                        }
                    }
                }
                out[(z * h + y) * w + x] = acc / 8.0;
            }
        }
    }
    out
}

fn anatomy(dims: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims.iter().product());
    let half = dims.map(|e| (e - 1) as f64 / 2.0);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let r = (0..3).map(|a| ((p[a] - half[a]) / (half[a] + 0.5)).powi(2)).sum::<f64>().sqrt();
                out.push(1.0 / (1.0 + ((r - 0.85) / 0.06).exp()));
            }
        }
    }
    out
}

fn unit_rms(field: Vec<f64>) -> Vec<f64> {
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt().max(1e-12);
    field.into_iter().map(|v| v / rms).collect()
}

/// Number of ROI blocks, which is also the number of subject latents.
pub fn n_latents(spec: &CohortSpec) -> usize {
    (spec.n_rois / 4).max(2)
}

struct ClassPrototype {
    volume: Vec<f64>,
    block_of: Vec<usize>,
}

fn class_prototype(spec: &CohortSpec, class: usize) -> ClassPrototype {
    let mut rng = stream(spec.seed, &format!("prototype/{class}"));
    let blobs = random_blobs(&mut rng, spec.dims, 4, |r| {
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        sign * (0.5 + 0.5 * r.random::<f64>())
    });
    let volume = unit_rms(symmetrize(&blob_field(spec.dims, &blobs), spec.dims));

    let n_blocks = n_latents(spec);
    let mut order: Vec<usize> = (0..spec.n_rois).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut block_of = vec![0; spec.n_rois];
    for (pos, &roi) in order.iter().enumerate() {
        block_of[roi] = pos * n_blocks / spec.n_rois;
    }
    ClassPrototype { volume, block_of }
}

/// One unit-RMS blob pattern per latent, shared by all classes.
fn latent_patterns(spec: &CohortSpec) -> Vec<Vec<f64>> {
    let mut rng = stream(spec.seed, "latent-patterns");
    (0..n_latents(spec))
        .map(|_| unit_rms(blob_field(spec.dims, &random_blobs(&mut rng, spec.dims, 1, |_| 1.0))))
        .collect()
}

fn subject_bold(
    spec: &CohortSpec,
    recipe: &CohortRecipe,
    proto: &ClassPrototype,
    z: &[f64],
    rng: &mut Rng,
) -> Result<BoldSeries> {
    let n = spec.n_rois;
    let corr = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if proto.block_of[i] == proto.block_of[j] {
            recipe.rho_base + recipe.rho_gain * z[proto.block_of[i]]
        } else {
            0.0
        }
    });
    let chol = corr
        .cholesky()
        .ok_or_else(|| Error::BadCohortSpec("block correlation target is not positive definite".into()))?;
    let l = chol.l();
    let t = spec.n_timepoints;
    let eps = DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(rng));
    let signals = l * eps;
    let mut data = Vec::with_capacity(n * t);
    for i in 0..n {
        data.extend(signals.row(i).iter());
    }
    BoldSeries::new(n, t, data)
}

struct Shared {
    base: Vec<f64>,
    prototypes: Vec<ClassPrototype>,
    latents: Vec<Vec<f64>>,
}

fn subject_volume(
    spec: &CohortSpec,
    recipe: &CohortRecipe,
    shared: &Shared,
    label: usize,
    z: &[f64],
    id: &str,
    rng: &mut Rng,
) -> Result<Volume3D> {
    let nuisance_amp = Normal::new(0.0, recipe.nuisance_sigma).map_err(|e| Error::BadCohortSpec(e.to_string()))?;
    let blobs = random_blobs(rng, spec.dims, recipe.nuisance_blobs, |r| nuisance_amp.sample(r));
    let mut voxels = blob_field(spec.dims, &blobs);
    let proto = &shared.prototypes[label].volume;
    for (i, v) in voxels.iter_mut().enumerate() {
        *v += shared.base[i] + recipe.class_amplitude * proto[i];
        for (pattern, &zb) in shared.latents.iter().zip(z) {
            *v += recipe.latent_amplitude * zb * pattern[i];
        }
    }
    if recipe.voxel_noise > 0.0 {
        let noise = Normal::new(0.0, recipe.voxel_noise).map_err(|e| Error::BadCohortSpec(e.to_string()))?;
        voxels.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    Volume3D::new(spec.dims, voxels, id)
}

/// Generates `n_subjects` paired samples with labels `i mod k`.
///
/// Every subject's randomness comes from its own seed derived from
/// `(spec.seed, index)`, so the cohort is reproducible bit for bit.
pub fn gen_paired_cohort(spec: &CohortSpec) -> Result<Vec<PairedSample>> {
    gen_paired_cohort_with(spec, &CohortRecipe::default())
}

/// [`gen_paired_cohort`] with explicit signal strengths.
pub fn gen_paired_cohort_with(spec: &CohortSpec, recipe: &CohortRecipe) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    recipe.validate()?;
    let shared = Shared {
        base: anatomy(spec.dims),
        prototypes: (0..spec.k_classes).map(|c| class_prototype(spec, c)).collect(),
        latents: latent_patterns(spec),
    };
    (0..spec.n_subjects)
        .map(|i| {
            let label = i % spec.k_classes;
            let id = CohortSpec::subject_id(i);
            let mut rng = rng_from(spec.subject_seed(i));
            let z: Vec<f64> = (0..n_latents(spec)).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let volume = subject_volume(spec, recipe, &shared, label, &z, &id, &mut rng)?;
            let bold = subject_bold(spec, recipe, &shared.prototypes[label], &z, &mut rng)?;
            let fcn = bold_to_fcn(&bold)?;
            Ok(PairedSample { subject_id: id, volume, bold, fcn, label })
        })
        .collect()
}
