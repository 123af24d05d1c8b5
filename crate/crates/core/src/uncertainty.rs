//! Voxelwise epistemic (MC dropout) and aleatoric (test-time augmentation)
//! uncertainty from stacks of full-volume predictions.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::derived_rng;
use crate::error::{Error, Result};
use crate::inference::predict_volume;
use crate::networks::Generator;
use crate::patch::BACKGROUND;
use crate::volume_io::{write_volume, Volume};

/// Random flips, rotations about each axis and additive noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaTransform {
    /// Flip of the `(d, h, w)` axes.
    pub flips: [bool; 3],
    /// Rotation angles about the `(d, h, w)` axes, applied in that order.
    pub angles: [f64; 3],
    pub noise_sigma: f64,
    /// Seed of the noise field.
    pub seed: u64,
}

impl TtaTransform {
    pub fn identity() -> Self {
        Self {
            flips: [false; 3],
            angles: [0.0; 3],
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// Flips ~ B(0.5), angles ~ U(0, 2π), noise seed from `rng`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, noise_sigma: f64) -> Self {
        let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let angles = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
        Self {
            flips,
            angles,
            noise_sigma,
            seed: rng.next_u64(),
        }
    }

    /// Noise (clamped back to `[-1, 1]`), then flips, then rotation.
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        let mut data = v.data().to_vec();
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma)
                .map_err(|e| Error::InvalidConfig(format!("noise sigma: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for x in &mut data {
                *x = (*x + normal.sample(&mut rng) as f32).clamp(-1.0, 1.0);
            }
        }
        let flipped = flip(&data, v.dims(), self.flips);
        let out = resample(&flipped, v.dims(), &self.rotation().transpose());
        Volume::new(v.dims(), out)
    }

    /// Inverse rotation, then the same flips. Noise is not undone.
    pub fn invert(&self, v: &Volume) -> Result<Volume> {
        let rotated = resample(v.data(), v.dims(), &self.rotation());
        Volume::new(v.dims(), flip(&rotated, v.dims(), self.flips))
    }

    /// Combined rotation `R_w · R_h · R_d` acting on `(d, h, w)` coordinates.
    pub fn rotation(&self) -> Mat3 {
        let [a, b, c] = self.angles;
        axis_rotation(2, c).mul(&axis_rotation(1, b).mul(&axis_rotation(0, a)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn transpose(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.0[j][i];
            }
        }
        Mat3(r)
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
    }
}

/// Rotation by `angle` in the plane of the two axes other than `axis`.
fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    Mat3(m)
}

fn flip(data: &[f32], dims: [usize; 3], flips: [bool; 3]) -> Vec<f32> {
    if flips == [false; 3] {
        return data.to_vec();
    }
    let [d, h, w] = dims;
    let pick = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        let sz = pick(z, d, flips[0]);
        for y in 0..h {
            let sy = pick(y, h, flips[1]);
            for x in 0..w {
                out.push(data[(sz * h + sy) * w + pick(x, w, flips[2])]);
            }
        }
    }
    out
}

/// `out(p) = in(c + m·(p − c))` with trilinear interpolation about the volume
/// center; samples outside the grid read as background.
fn resample(data: &[f32], dims: [usize; 3], m: &Mat3) -> Vec<f32> {
    if *m == Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) {
        return data.to_vec();
    }
    let [d, h, w] = dims;
    let c = [d, h, w].map(|n| (n as f64 - 1.0) / 2.0);
    let at = |z: isize, y: isize, x: isize| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            BACKGROUND as f64
        } else {
            data[(z as usize * h + y as usize) * w + x as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let q = m.apply([z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]]);
                let s = [0, 1, 2].map(|i| q[i] + c[i]);
                // snap near-integer coordinates so axis-aligned rotations are permutations
                let s = s.map(|v| if (v - v.round()).abs() < 1e-9 { v.round() } else { v });
                let f = s.map(f64::floor);
                let t = [0, 1, 2].map(|i| s[i] - f[i]);
                let b = f.map(|v| v as isize);
                let mut acc = 0.0;
                for dz in 0..2 {
                    let wz = if dz == 0 { 1.0 - t[0] } else { t[0] };
                    if wz == 0.0 {
                        continue;
                    }
                    for dy in 0..2 {
                        let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
                        if wy == 0.0 {
                            continue;
                        }
                        for dx in 0..2 {
                            let wx = if dx == 0 { 1.0 - t[2] } else { t[2] };
                            if wx == 0.0 {
                                continue;
                            }
                            acc += wz * wy * wx * at(b[0] + dz, b[1] + dy, b[2] + dx);
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    Epistemic,
    Aleatoric,
}

impl UncertaintyKind {
    pub fn suffix(self) -> &'static str {
        match self {
            UncertaintyKind::Epistemic => "epistemic",
            UncertaintyKind::Aleatoric => "aleatoric",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub kind: UncertaintyKind,
    pub sigma: Volume,
    pub n_samples: usize,
    pub mean_prediction: Volume,
}

impl UncertaintyMap {
    /// Writes `sigma` next to `prediction` as `<stem>.<kind>.nii`.
    pub fn write_beside(&self, prediction: &Path) -> Result<PathBuf> {
        let path = uncertainty_path(prediction, self.kind);
        write_volume(&self.sigma, &path)?;
        Ok(path)
    }
}

pub fn uncertainty_path(prediction: &Path, kind: UncertaintyKind) -> PathBuf {
    let name = prediction.file_name().and_then(|n| n.to_str()).unwrap_or("prediction");
    let stem = name.strip_suffix(".nii").unwrap_or(name);
    prediction.with_file_name(format!("{stem}.{}.nii", kind.suffix()))
}

/// Voxelwise mean and population standard deviation of a sample stack.
pub fn population_std(samples: &[Volume]) -> Result<(Volume, Volume)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("need at least one sample".into()))?;
    if let Some(s) = samples.iter().find(|s| s.dims() != first.dims()) {
        return Err(Error::ShapeMismatch(format!(
            "sample dims {:?} differ from {:?}",
            s.dims(),
            first.dims()
        )));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0f64; first.len()];
    for s in samples {
        for (m, &x) in mean.iter_mut().zip(s.data()) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; first.len()];
    for s in samples {
        for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(s.data()) {
            *v += (x as f64 - m).powi(2);
        }
    }
    let sigma = var.iter().map(|v| (v / n).sqrt() as f32).collect();
    let mean = mean.iter().map(|&m| m as f32).collect();
    Ok((first.with_data(mean)?, first.with_data(sigma)?))
}

fn check_samples(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("number of samples must be at least 1".into()));
    }
    Ok(())
}

fn restore_geometry(mut v: Volume, like: &Volume) -> Result<Volume> {
    v.spacing = like.spacing;
    match like.mask() {
        Some(m) => v.with_mask(m.to_vec()),
        None => Ok(v),
    }
}

/// `n` full-volume predictions with dropout at `keep`; pass `i` draws its
/// masks from stream `i` of `seed`.
pub fn epistemic_samples(
    gen: &Generator,
    volume: &Volume,
    n: usize,
    keep: f64,
    seed: u64,
    patch: usize,
    stride: usize,
) -> Result<Vec<Volume>> {
    check_samples(n)?;
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::InvalidConfig(format!("keep rate {keep} outside (0, 1]")));
    }
    let mut cfg = gen.cfg.clone();
    cfg.dropout_keep = keep;
    let gen = Generator::new(cfg, gen.params.clone())?;
    (0..n)
        .map(|i| {
            let mut rng = derived_rng(seed, i as u64);
            predict_volume(&gen, volume, patch, stride, Some(&mut rng))
        })
        .collect()
}

pub fn epistemic_map(
    gen: &Generator,
    volume: &Volume,
    n: usize,
    keep: f64,
    seed: u64,
    patch: usize,
    stride: usize,
) -> Result<UncertaintyMap> {
    let samples = epistemic_samples(gen, volume, n, keep, seed, patch, stride)?;
    let (mean, sigma) = population_std(&samples)?;
    Ok(UncertaintyMap {
        kind: UncertaintyKind::Epistemic,
        sigma,
        n_samples: n,
        mean_prediction: mean,
    })
}

/// The `n` transforms used by [`aleatoric_map`]; transform `i` comes from
/// stream `i` of `seed`.
pub fn sample_transforms(n: usize, noise_sigma: f64, seed: u64) -> Vec<TtaTransform> {
    (0..n)
        .map(|i| TtaTransform::sample(&mut derived_rng(seed, i as u64), noise_sigma))
        .collect()
}

/// Inverse-mapped deterministic predictions of the transformed inputs.
pub fn aleatoric_samples(
    gen: &Generator,
    volume: &Volume,
    transforms: &[TtaTransform],
    patch: usize,
    stride: usize,
) -> Result<Vec<Volume>> {
    check_samples(transforms.len())?;
    transforms
        .iter()
        .map(|t| {
            let x = t.apply(volume)?;
            let y = predict_volume(gen, &x, patch, stride, None)?;
            restore_geometry(t.invert(&y)?, volume)
        })
        .collect()
}

pub fn aleatoric_map_with(
    gen: &Generator,
    volume: &Volume,
    transforms: &[TtaTransform],
    patch: usize,
    stride: usize,
) -> Result<UncertaintyMap> {
    let samples = aleatoric_samples(gen, volume, transforms, patch, stride)?;
    let (mean, sigma) = population_std(&samples)?;
    Ok(UncertaintyMap {
        kind: UncertaintyKind::Aleatoric,
        sigma,
        n_samples: transforms.len(),
        mean_prediction: mean,
    })
}

pub fn aleatoric_map(
    gen: &Generator,
    volume: &Volume,
    n: usize,
    noise_sigma: f64,
    seed: u64,
    patch: usize,
    stride: usize,
) -> Result<UncertaintyMap> {
    aleatoric_map_with(gen, volume, &sample_transforms(n, noise_sigma, seed), patch, stride)
}
