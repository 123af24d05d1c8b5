//! Paired longitudinal synthetic phantoms and cohort manifests.
//!
//! A phantom is an ellipsoidal foreground holding two tissue classes. The inner
//! class boundary is a perturbed level set; the later time point moves that
//! boundary with a smooth displacement field and changes the class
//! intensities, optionally inverting their ordering.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{write_volume, Volume};

const MIN_SIZE: usize = 32;
const INNER_LEVEL: f64 = 0.6;
const EDGE_WIDTH: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub n_blobs: usize,
    pub age_a: f64,
    pub age_b: f64,
    pub contrast_flip: bool,
    /// Peak boundary displacement in voxels.
    pub deform_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [64; 3],
            n_blobs: 4,
            age_a: 0.0,
            age_b: 1.0,
            contrast_flip: true,
            deform_amplitude: 3.0,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < MIN_SIZE) {
            return Err(Error::InvalidSpec(format!(
                "every size must be at least {MIN_SIZE}, got {:?}",
                self.size
            )));
        }
        if self.n_blobs == 0 {
            return Err(Error::InvalidSpec("n_blobs must be at least 1".into()));
        }
        for (name, age) in [("age_a", self.age_a), ("age_b", self.age_b)] {
            if !(0.0..=1.0).contains(&age) {
                return Err(Error::InvalidSpec(format!("{name} = {age} is outside [0, 1]")));
            }
        }
        if !(self.deform_amplitude >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec(
                "deform_amplitude and noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// (inner class, outer class) intensity at pseudo-age `t`.
    pub fn class_intensities(&self, t: f64) -> (f64, f64) {
        if self.contrast_flip {
            (0.3 + 0.5 * t, 0.7 - 0.2 * t)
        } else {
            (0.3 + 0.1 * t, 0.7 + 0.1 * t)
        }
    }
}

struct Bump {
    center: [f64; 3],
    sigma: f64,
    weight: f64,
    dir: [f64; 3],
}

impl Bump {
    fn eval(&self, p: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|i| (p[i] - self.center[i]).powi(2)).sum();
        (-r2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Deterministic geometry shared by both time points.
pub struct PhantomGeometry {
    dims: [usize; 3],
    center: [f64; 3],
    radii: [f64; 3],
    level_bumps: Vec<Bump>,
    warp_bumps: Vec<Bump>,
    warp_scale: f64,
}

fn sample_inside(rng: &mut ChaCha8Rng, center: [f64; 3], radii: [f64; 3], frac: f64) -> [f64; 3] {
    loop {
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return std::array::from_fn(|i| center[i] + frac * radii[i] * u[i]);
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

impl PhantomGeometry {
    pub fn new(spec: &PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dims = spec.size;
        let center = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let radii = dims.map(|n| n as f64 * rng.random_range(0.40..0.44));
        let min_dim = *dims.iter().min().unwrap() as f64;
        let level_bumps = (0..spec.n_blobs)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Bump {
                    center: sample_inside(&mut rng, center, radii, 0.7),
                    sigma: min_dim * rng.random_range(0.08..0.16),
                    weight: sign * rng.random_range(0.1..0.2),
                    dir: [0.0; 3],
                }
            })
            .collect();
        let warp_bumps: Vec<Bump> = (0..spec.n_blobs)
            .map(|_| Bump {
                center: sample_inside(&mut rng, center, radii, 0.7),
                sigma: min_dim * 0.15,
                weight: 1.0,
                dir: unit_vector(&mut rng),
            })
            .collect();
        let amplitude = spec.deform_amplitude.min(0.1 * min_dim) * (spec.age_b - spec.age_a).abs();
        let mut geom = Self {
            dims,
            center,
            radii,
            level_bumps,
            warp_bumps,
            warp_scale: 0.0,
        };
        // scale so the peak displacement magnitude equals `amplitude`
        if amplitude > 0.0 {
            let mut peak: f64 = 0.0;
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let u = geom.raw_warp([z as f64, y as f64, x as f64]);
                        peak = peak.max(u.iter().map(|v| v * v).sum::<f64>().sqrt());
                    }
                }
            }
            if peak > 0.0 {
                geom.warp_scale = amplitude / peak;
            }
        }
        Ok(geom)
    }

    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn level(&self, p: [f64; 3]) -> f64 {
        self.rho(p) + self.level_bumps.iter().map(|b| b.weight * b.eval(p)).sum::<f64>()
    }

    fn raw_warp(&self, p: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for b in &self.warp_bumps {
            let g = b.weight * b.eval(p);
            for i in 0..3 {
                u[i] += g * b.dir[i];
            }
        }
        u
    }

    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        self.raw_warp(p).map(|v| v * self.warp_scale)
    }

    pub fn foreground(&self, p: [f64; 3]) -> bool {
        self.rho(p) < 1.0
    }

    /// Soft inner-class membership in `[0, 1]`; `late` applies the displacement.
    pub fn inner_membership(&self, p: [f64; 3], late: bool) -> f64 {
        let q = if late {
            let u = self.displacement(p);
            [p[0] - u[0], p[1] - u[1], p[2] - u[2]]
        } else {
            p
        };
        let t = (INNER_LEVEL - self.level(q)) / EDGE_WIDTH;
        1.0 / (1.0 + (-t).exp())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
}

/// Hard label maps (0 = background, 1 = outer class, 2 = inner class) for both time points.
pub fn phantom_labels(spec: &PhantomSpec) -> Result<(Vec<u8>, Vec<u8>)> {
    let g = PhantomGeometry::new(spec)?;
    let [d, h, w] = g.dims();
    let mut la = Vec::with_capacity(d * h * w);
    let mut lb = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                if !g.foreground(p) {
                    la.push(0);
                    lb.push(0);
                    continue;
                }
                la.push(if g.inner_membership(p, false) > 0.5 { 2 } else { 1 });
                lb.push(if g.inner_membership(p, true) > 0.5 { 2 } else { 1 });
            }
        }
    }
    Ok((la, lb))
}

/// Returns `(I_ta, I_tb, mask)`; the mask volume holds 1 inside the foreground.
pub fn generate_phantom_pair(spec: &PhantomSpec) -> Result<(Volume, Volume, Volume)> {
    let g = PhantomGeometry::new(spec)?;
    let [d, h, w] = g.dims();
    let n = d * h * w;
    let (inner_a, outer_a) = spec.class_intensities(spec.age_a);
    let (inner_b, outer_b) = spec.class_intensities(spec.age_b);
    let mut noise_a = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut noise_b = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc2b2_ae3d_27d4_eb4f);
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut a = vec![0.0f32; n];
    let mut b = vec![0.0f32; n];
    let mut m = vec![0.0f32; n];
    let mut mask = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = [z as f64, y as f64, x as f64];
                if !g.foreground(p) {
                    continue;
                }
                mask[i] = true;
                m[i] = 1.0;
                let ma = g.inner_membership(p, false);
                let mb = g.inner_membership(p, true);
                let mut va = ma * inner_a + (1.0 - ma) * outer_a;
                let mut vb = mb * inner_b + (1.0 - mb) * outer_b;
                if spec.noise_sigma > 0.0 {
                    va += normal.sample(&mut noise_a);
                    vb += normal.sample(&mut noise_b);
                }
                a[i] = va as f32;
                b[i] = vb as f32;
            }
        }
    }
    let va = Volume::new(spec.size, a)?.with_mask(mask.clone())?;
    let vb = Volume::new(spec.size, b)?.with_mask(mask.clone())?;
    let vm = Volume::new(spec.size, m)?.with_mask(mask)?;
    Ok((va, vb, vm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub subject: String,
    pub spec: PhantomSpec,
}

pub const TIMEPOINT_A: &str = "ta";
pub const TIMEPOINT_B: &str = "tb";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject: String,
    pub timepoint: String,
    pub path: PathBuf,
}

/// CSV manifest `subject,timepoint,path`; relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(text.as_slice());
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Self {
            rows,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["subject", "timepoint", "path"])?;
        for r in &self.rows {
            wtr.write_record([
                r.subject.as_str(),
                r.timepoint.as_str(),
                &r.path.to_string_lossy(),
            ])?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    /// SHA-256 of the canonical CSV text (row order preserved).
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(r.subject.as_bytes());
            h.update([0]);
            h.update(r.timepoint.as_bytes());
            h.update([0]);
            h.update(r.path.to_string_lossy().as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }

    /// `(subject, path_a, path_b)` for every subject, in first-appearance order.
    pub fn pairs(&self) -> Result<Vec<(String, PathBuf, PathBuf)>> {
        let mut order: Vec<String> = Vec::new();
        let mut a = std::collections::HashMap::new();
        let mut b = std::collections::HashMap::new();
        for r in &self.rows {
            let slot = match r.timepoint.as_str() {
                TIMEPOINT_A => &mut a,
                TIMEPOINT_B => &mut b,
                other => {
                    return Err(Error::ManifestMismatch(format!(
                        "subject {:?} has unknown timepoint {other:?}",
                        r.subject
                    )))
                }
            };
            if slot.insert(r.subject.clone(), self.resolve(r)).is_some() {
                return Err(Error::ManifestMismatch(format!(
                    "subject {:?} lists timepoint {} twice",
                    r.subject, r.timepoint
                )));
            }
            if !order.contains(&r.subject) {
                order.push(r.subject.clone());
            }
        }
        order
            .into_iter()
            .map(|s| match (a.remove(&s), b.remove(&s)) {
                (Some(pa), Some(pb)) => Ok((s, pa, pb)),
                (None, _) => Err(Error::ManifestMismatch(format!("subject {s:?} lacks {TIMEPOINT_A}"))),
                (_, None) => Err(Error::ManifestMismatch(format!("subject {s:?} lacks {TIMEPOINT_B}"))),
            })
            .collect()
    }

    /// Keep only subjects in (`keep_fold == true`) or out of fold `fold` of `folds`.
    pub fn fold_split(&self, folds: usize, fold: usize, keep_fold: bool) -> Result<Self> {
        if folds == 0 || fold >= folds {
            return Err(Error::InvalidConfig(format!("fold {fold} of {folds}")));
        }
        let mut subjects: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !subjects.contains(&r.subject.as_str()) {
                subjects.push(&r.subject);
            }
        }
        let chosen: HashSet<&str> = subjects
            .iter()
            .enumerate()
            .filter(|(i, _)| (i % folds == fold) == keep_fold)
            .map(|(_, s)| *s)
            .collect();
        Ok(Self {
            rows: self
                .rows
                .iter()
                .filter(|r| chosen.contains(r.subject.as_str()))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes `<subject>_ta.nii`, `<subject>_tb.nii` and `manifest.csv` under `out_dir`.
pub fn generate_cohort(entries: &[CohortEntry], out_dir: &Path) -> Result<Manifest> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.subject.as_str()) {
            return Err(Error::DuplicateSubject(e.subject.clone()));
        }
        e.spec.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest {
        rows: Vec::new(),
        base_dir: out_dir.to_path_buf(),
    };
    for e in entries {
        let (a, b, _) = generate_phantom_pair(&e.spec)?;
        for (tag, vol) in [(TIMEPOINT_A, &a), (TIMEPOINT_B, &b)] {
            let name = PathBuf::from(format!("{}_{tag}.nii", e.subject));
            write_volume(vol, &out_dir.join(&name))?;
            manifest.rows.push(ManifestRow {
                subject: e.subject.clone(),
                timepoint: tag.to_string(),
                path: name,
            });
        }
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// `n` subjects `sub-000 …` sharing `base` with seeds `base.seed + i`.
pub fn default_cohort(n: usize, base: &PhantomSpec) -> Vec<CohortEntry> {
    (0..n)
        .map(|i| CohortEntry {
            subject: format!("sub-{i:03}"),
            spec: PhantomSpec {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            size: [32; 3],
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_same_pair() {
        let a = generate_phantom_pair(&small(3)).unwrap();
        let b = generate_phantom_pair(&small(3)).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
        let c = generate_phantom_pair(&small(4)).unwrap();
        assert_ne!(a.0.data(), c.0.data());
    }

    #[test]
    fn degenerate_spec_gives_identical_time_points() {
        let spec = PhantomSpec {
            deform_amplitude: 0.0,
            contrast_flip: false,
            noise_sigma: 0.0,
            age_a: 0.4,
            age_b: 0.4,
            ..small(5)
        };
        let (a, b, _) = generate_phantom_pair(&spec).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn contrast_flip_inverts_class_ordering() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..small(6)
        };
        let (a, b, _) = generate_phantom_pair(&spec).unwrap();
        let (la, lb) = phantom_labels(&spec).unwrap();
        let mean = |v: &Volume, l: &[u8], class: u8| {
            let (s, n) = v
                .data()
                .iter()
                .zip(l)
                .filter(|(_, &c)| c == class)
                .fold((0.0, 0), |(s, n), (&x, _)| (s + x as f64, n + 1));
            s / n as f64
        };
        let (a1, a2) = (mean(&a, &la, 1), mean(&a, &la, 2));
        let (b1, b2) = (mean(&b, &lb, 1), mean(&b, &lb, 2));
        assert!(a2 < a1, "inner darker at t_a: {a2} vs {a1}");
        assert!(b2 > b1, "inner brighter at t_b: {b2} vs {b1}");
    }

    #[test]
    fn foreground_fraction_is_viable() {
        for seed in 0..5 {
            let (_, _, m) = generate_phantom_pair(&small(seed)).unwrap();
            let frac = m.mask().unwrap().iter().filter(|&&b| b).count() as f64 / m.len() as f64;
            assert!((0.2..=0.8).contains(&frac), "fraction {frac}");
        }
    }

    #[test]
    fn background_is_exactly_zero_and_foreground_nonzero() {
        let (a, b, m) = generate_phantom_pair(&small(7)).unwrap();
        for ((&x, &y), &f) in a.data().iter().zip(b.data()).zip(m.mask().unwrap()) {
            assert_eq!(x != 0.0, f);
            assert_eq!(y != 0.0, f);
        }
    }

    #[test]
    fn displacement_respects_amplitude_cap() {
        let spec = PhantomSpec {
            deform_amplitude: 100.0,
            ..small(8)
        };
        let g = PhantomGeometry::new(&spec).unwrap();
        for z in (0..32).step_by(3) {
            for y in (0..32).step_by(3) {
                for x in (0..32).step_by(3) {
                    let u = g.displacement([z as f64, y as f64, x as f64]);
                    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!(n <= 3.2 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            PhantomSpec { size: [16, 32, 32], ..small(0) },
            PhantomSpec { deform_amplitude: -1.0, ..small(0) },
            PhantomSpec { noise_sigma: -0.1, ..small(0) },
            PhantomSpec { n_blobs: 0, ..small(0) },
        ] {
            assert!(matches!(generate_phantom_pair(&spec), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn cohort_counts_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let entries = default_cohort(3, &small(0));
        let m = generate_cohort(&entries, dir.path()).unwrap();
        assert_eq!(m.rows.len(), 6);
        let files = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 7);
        let back = Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.pairs().unwrap().len(), 3);

        let empty = tempfile::tempdir().unwrap();
        let m = generate_cohort(&[], empty.path()).unwrap();
        assert!(m.rows.is_empty());
        assert_eq!(fs::read_dir(empty.path()).unwrap().count(), 1);

        let mut dup = default_cohort(2, &small(0));
        dup[1].subject = dup[0].subject.clone();
        assert!(matches!(
            generate_cohort(&dup, dir.path()),
            Err(Error::DuplicateSubject(_))
        ));
    }

    #[test]
    fn manifest_pairs_detect_missing_timepoint() {
        let m = Manifest {
            rows: vec![ManifestRow {
                subject: "s".into(),
                timepoint: TIMEPOINT_A.into(),
                path: "s_ta.nii".into(),
            }],
            base_dir: PathBuf::new(),
        };
        assert!(matches!(m.pairs(), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn folds_partition_subjects() {
        let rows = (0..5)
            .flat_map(|i| {
                [TIMEPOINT_A, TIMEPOINT_B].map(|t| ManifestRow {
                    subject: format!("s{i}"),
                    timepoint: t.into(),
                    path: format!("s{i}_{t}.nii").into(),
                })
            })
            .collect();
        let m = Manifest { rows, base_dir: PathBuf::new() };
        let mut total = 0;
        for f in 0..3 {
            let held = m.fold_split(3, f, true).unwrap();
            let train = m.fold_split(3, f, false).unwrap();
            assert_eq!(held.rows.len() + train.rows.len(), 10);
            total += held.rows.len();
        }
        assert_eq!(total, 10);
    }
}
