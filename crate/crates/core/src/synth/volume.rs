use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Volume3D;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Random voxel masking parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(ratio: f64, seed: u64) -> Self {
        Self { ratio, seed }
    }

    pub fn masked_count(&self, voxels: usize) -> usize {
        (self.ratio * voxels as f64).floor() as usize
    }
}

/// Zeroes exactly `floor(ratio * V)` voxels chosen without replacement.
///
/// Selection is a partial Fisher-Yates shuffle of `0..V` driven by a ChaCha8
/// generator seeded with `spec.seed`: for `i in 0..count`, draw
/// `j ~ U[i, V)` and swap positions `i` and `j`; the first `count` entries are
/// the masked voxels.
pub fn mask_volume(v: &Volume3D, spec: &MaskSpec) -> Result<(Volume3D, Vec<bool>)> {
    if !(spec.ratio > 0.0 && spec.ratio < 1.0) {
        return Err(Error::BadRatio(spec.ratio));
    }
    let n = v.len();
    let count = spec.masked_count(n);
    let mut rng = rng_from(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut mask = vec![false; n];
    let mut voxels = v.voxels().to_vec();
    for &idx in &order[..count] {
        mask[idx] = true;
        voxels[idx] = 0.0;
    }
    Ok((Volume3D::new(v.dims(), voxels, v.subject_id.clone())?, mask))
}

/// Image augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentCfg {
    pub noise_sigma: f64,
    pub flip_prob: [f64; 3],
    pub intensity_scale_range: (f64, f64),
    pub intensity_shift_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            flip_prob: [0.5; 3],
            intensity_scale_range: (0.9, 1.1),
            intensity_shift_range: (-0.1, 0.1),
            seed: 0,
        }
    }
}

impl AugmentCfg {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            flip_prob: [0.0; 3],
            intensity_scale_range: (1.0, 1.0),
            intensity_shift_range: (0.0, 0.0),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| Err(Error::invalid(path, msg));
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be finite and >= 0");
        }
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("flip_prob", "each entry must lie in [0, 1]");
        }
        let (lo, hi) = self.intensity_scale_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return bad("intensity_scale_range", "needs lo <= hi");
        }
        let (lo, hi) = self.intensity_shift_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return bad("intensity_shift_range", "needs lo <= hi");
        }
        Ok(())
    }
}

fn flip_axis(voxels: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut out = vec![0.0; voxels.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out[(z * h + y) * w + x] = voxels[(sz * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Flip (per axis), intensity scale, intensity shift, then Gaussian noise.
///
/// All randomness comes from `cfg.seed`; the draw sequence is fixed
/// (three flip coins, scale, shift, then per-voxel noise when sigma > 0).
pub fn augment_volume(v: &Volume3D, cfg: &AugmentCfg) -> Result<Volume3D> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed);
    let dims = v.dims();
    let mut voxels = v.voxels().to_vec();
    for (axis, &p) in cfg.flip_prob.iter().enumerate() {
        let coin: f64 = rng.random();
        if coin < p {
            voxels = flip_axis(&voxels, dims, axis);
        }
    }
    let (slo, shi) = cfg.intensity_scale_range;
    let scale = slo + (shi - slo) * rng.random::<f64>();
    let (tlo, thi) = cfg.intensity_shift_range;
    let shift = tlo + (thi - tlo) * rng.random::<f64>();
    for x in voxels.iter_mut() {
        *x = *x * scale + shift;
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        for x in voxels.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    Volume3D::new(dims, voxels, v.subject_id.clone())
}

/// Source coordinate for output index `o` under corner-aligned sampling.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_out == 1 || n_in == 1 {
        return (0, 0, 0.0);
    }
    let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let i0 = (pos.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, pos - i0 as f64)
}

/// Trilinear resize with corner-aligned sampling.
pub fn resize_volume(v: &Volume3D, target: [usize; 3]) -> Result<Volume3D> {
    if target.iter().any(|&e| e == 0) {
        return Err(Error::shape("resize_volume", format!("target extents must be >= 1, got {target:?}")));
    }
    if target == v.dims() {
        return Ok(v.clone());
    }
    let src = v.dims();
    let zc: Vec<_> = (0..target[0]).map(|o| source_coord(o, src[0], target[0])).collect();
    let yc: Vec<_> = (0..target[1]).map(|o| source_coord(o, src[1], target[1])).collect();
    let xc: Vec<_> = (0..target[2]).map(|o| source_coord(o, src[2], target[2])).collect();
    let mut out = Vec::with_capacity(target.iter().product());
    for &(z0, z1, fz) in &zc {
        for &(y0, y1, fy) in &yc {
            for &(x0, x1, fx) in &xc {
                let lerp_x = |z, y| v.at(z, y, x0) * (1.0 - fx) + v.at(z, y, x1) * fx;
                let c00 = lerp_x(z0, y0);
                let c01 = lerp_x(z0, y1);
                let c10 = lerp_x(z1, y0);
                let c11 = lerp_x(z1, y1);
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                out.push(c0 * (1.0 - fz) + c1 * fz);
            }
        }
    }
    Volume3D::new(target, out, v.subject_id.clone())
}
