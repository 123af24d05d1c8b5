//! Cubic patch grids, extraction and mean-blended stitching.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume_io::Volume;

pub const DEFAULT_MIN_FG: f64 = 0.1;
pub const BACKGROUND: f32 = -1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    volume_shape: [usize; 3],
    patch_size: usize,
    stride: usize,
    offsets: Vec<[usize; 3]>,
}

impl PatchGrid {
    /// Grid from explicit offsets, each checked against the volume bounds.
    pub fn new(
        volume_shape: [usize; 3],
        patch_size: usize,
        stride: usize,
        offsets: Vec<[usize; 3]>,
    ) -> Result<Self> {
        check_fits(volume_shape, patch_size)?;
        for o in &offsets {
            if (0..3).any(|i| o[i] + patch_size > volume_shape[i]) {
                return Err(Error::GridMismatch(format!(
                    "offset {o:?} with patch {patch_size} exceeds {volume_shape:?}"
                )));
            }
        }
        Ok(Self {
            volume_shape,
            patch_size,
            stride,
            offsets,
        })
    }

    pub fn volume_shape(&self) -> [usize; 3] {
        self.volume_shape
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn offsets(&self) -> &[[usize; 3]] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Number of patches covering each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let [d, h, w] = self.volume_shape;
        let p = self.patch_size;
        // 3D difference array, one extra slot per axis
        let (d1, h1, w1) = (d + 1, h + 1, w + 1);
        let mut diff = vec![0i64; d1 * h1 * w1];
        let at = |z: usize, y: usize, x: usize| (z * h1 + y) * w1 + x;
        for o in &self.offsets {
            let lo = *o;
            let hi = [o[0] + p, o[1] + p, o[2] + p];
            for corner in 0..8u8 {
                let z = if corner & 4 != 0 { hi[0] } else { lo[0] };
                let y = if corner & 2 != 0 { hi[1] } else { lo[1] };
                let x = if corner & 1 != 0 { hi[2] } else { lo[2] };
                let sign = if corner.count_ones() % 2 == 0 { 1 } else { -1 };
                diff[at(z, y, x)] += sign;
            }
        }
        prefix_sum_3d(&mut diff, [d1, h1, w1]);
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out.push(diff[at(z, y, x)] as u32);
                }
            }
        }
        out
    }
}

fn prefix_sum_3d(a: &mut [i64], [d, h, w]: [usize; 3]) {
    for z in 0..d {
        for y in 0..h {
            for x in 1..w {
                let i = (z * h + y) * w + x;
                a[i] += a[i - 1];
            }
        }
    }
    for z in 0..d {
        for y in 1..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                a[i] += a[i - w];
            }
        }
    }
    for z in 1..d {
        for i in z * h * w..(z + 1) * h * w {
            a[i] += a[i - h * w];
        }
    }
}

fn check_fits(shape: [usize; 3], patch: usize) -> Result<()> {
    if patch == 0 {
        return Err(Error::GridMismatch("patch size must be positive".into()));
    }
    for &dim in &shape {
        if patch > dim {
            return Err(Error::PatchTooLarge { patch, dim });
        }
    }
    Ok(())
}

/// 0, stride, 2·stride, … plus the clamped terminal offset `n − patch`.
pub fn axis_offsets(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = n - patch;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// Dense grid over `shape`, optionally filtered to patches whose foreground
/// fraction is at least `min_fg`. Dropped patches are restored when they are
/// the only cover of some foreground voxel.
pub fn plan_patch_offsets(
    shape: [usize; 3],
    patch: usize,
    stride: usize,
    mask: Option<&[bool]>,
    min_fg: f64,
) -> Result<PatchGrid> {
    check_fits(shape, patch)?;
    if stride == 0 {
        return Err(Error::GridMismatch("stride must be at least 1".into()));
    }
    let axes: Vec<Vec<usize>> = (0..3).map(|i| axis_offsets(shape[i], patch, stride)).collect();
    let mut all = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                all.push([z, y, x]);
            }
        }
    }
    let Some(mask) = mask else {
        return PatchGrid::new(shape, patch, stride, all);
    };
    let n: usize = shape.iter().product();
    if mask.len() != n {
        return Err(Error::GridMismatch(format!(
            "mask has {} voxels, volume has {n}",
            mask.len()
        )));
    }
    let counts = foreground_counts(shape, patch, mask, &all);
    let vol = (patch * patch * patch) as f64;
    let mut keep: Vec<bool> = counts.iter().map(|&c| c as f64 / vol >= min_fg).collect();

    let kept = PatchGrid::new(
        shape,
        patch,
        stride,
        all.iter().zip(&keep).filter(|(_, &k)| k).map(|(o, _)| *o).collect(),
    )?;
    let mut covered: Vec<bool> = kept.coverage().iter().map(|&c| c > 0).collect();
    let [_, h, w] = shape;
    for (i, o) in all.iter().enumerate() {
        if keep[i] || counts[i] == 0 {
            continue;
        }
        let mut needed = false;
        'scan: for z in o[0]..o[0] + patch {
            for y in o[1]..o[1] + patch {
                let row = (z * h + y) * w;
                for x in o[2]..o[2] + patch {
                    if mask[row + x] && !covered[row + x] {
                        needed = true;
                        break 'scan;
                    }
                }
            }
        }
        if needed {
            keep[i] = true;
            for z in o[0]..o[0] + patch {
                for y in o[1]..o[1] + patch {
                    let row = (z * h + y) * w;
                    covered[row + o[2]..row + o[2] + patch].fill(true);
                }
            }
        }
    }
    let offsets = all.into_iter().zip(keep).filter(|(_, k)| *k).map(|(o, _)| o).collect();
    PatchGrid::new(shape, patch, stride, offsets)
}

fn foreground_counts(shape: [usize; 3], patch: usize, mask: &[bool], offsets: &[[usize; 3]]) -> Vec<i64> {
    let [d, h, w] = shape;
    let (d1, h1, w1) = (d + 1, h + 1, w + 1);
    let mut sat = vec![0i64; d1 * h1 * w1];
    let at = |z: usize, y: usize, x: usize| (z * h1 + y) * w1 + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                sat[at(z + 1, y + 1, x + 1)] = mask[(z * h + y) * w + x] as i64;
            }
        }
    }
    prefix_sum_3d(&mut sat, [d1, h1, w1]);
    offsets
        .iter()
        .map(|o| {
            let (z0, y0, x0) = (o[0], o[1], o[2]);
            let (z1, y1, x1) = (z0 + patch, y0 + patch, x0 + patch);
            sat[at(z1, y1, x1)] - sat[at(z0, y1, x1)] - sat[at(z1, y0, x1)] - sat[at(z1, y1, x0)]
                + sat[at(z0, y0, x1)]
                + sat[at(z0, y1, x0)]
                + sat[at(z1, y0, x0)]
                - sat[at(z0, y0, x0)]
        })
        .collect()
}

/// Copies each grid patch into a `[1, P, P, P]` tensor, in grid order.
pub fn extract_patches(v: &Volume, grid: &PatchGrid) -> Result<Vec<Tensor<f32>>> {
    if v.dims() != grid.volume_shape {
        return Err(Error::GridMismatch(format!(
            "grid built for {:?}, volume is {:?}",
            grid.volume_shape,
            v.dims()
        )));
    }
    let [_, h, w] = v.dims();
    let p = grid.patch_size;
    let src = v.data();
    Ok(grid
        .offsets
        .iter()
        .map(|o| {
            let mut data = Vec::with_capacity(p * p * p);
            for z in o[0]..o[0] + p {
                for y in o[1]..o[1] + p {
                    let row = (z * h + y) * w + o[2];
                    data.extend_from_slice(&src[row..row + p]);
                }
            }
            Tensor::from_vec(&[1, p, p, p], data).expect("patch shape")
        })
        .collect())
}

/// Mean of all patch values covering each voxel; uncovered voxels are −1.
pub fn stitch_patches(patches: &[Tensor<f32>], grid: &PatchGrid) -> Result<Volume> {
    if patches.len() != grid.offsets.len() {
        return Err(Error::GridMismatch(format!(
            "{} patches for {} offsets",
            patches.len(),
            grid.offsets.len()
        )));
    }
    let p = grid.patch_size;
    if let Some(t) = patches.iter().find(|t| t.len() != p * p * p) {
        return Err(Error::GridMismatch(format!(
            "patch of shape {:?} does not hold {p}³ voxels",
            t.shape()
        )));
    }
    let shape = grid.volume_shape;
    let [_, h, w] = shape;
    let n: usize = shape.iter().product();
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for (t, o) in patches.iter().zip(&grid.offsets) {
        let src = t.data();
        let mut k = 0;
        for z in o[0]..o[0] + p {
            for y in o[1]..o[1] + p {
                let row = (z * h + y) * w + o[2];
                for (s, c) in sum[row..row + p].iter_mut().zip(&mut count[row..row + p]) {
                    *s += src[k] as f64;
                    *c += 1;
                    k += 1;
                }
            }
        }
    }
    let data = sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { BACKGROUND } else { (s / c as f64) as f32 })
        .collect();
    Volume::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_axis(n: usize, p: usize, s: usize) -> Vec<usize> {
        let mut v = Vec::new();
        let mut o = 0;
        while o + p <= n {
            v.push(o);
            o += s;
        }
        if v.last() != Some(&(n - p)) {
            v.push(n - p);
        }
        v
    }

    #[test]
    fn offset_examples() {
        let g = plan_patch_offsets([64; 3], 64, 10, None, DEFAULT_MIN_FG).unwrap();
        assert_eq!(g.offsets(), &[[0, 0, 0]]);
        let g = plan_patch_offsets([84; 3], 64, 10, None, DEFAULT_MIN_FG).unwrap();
        assert_eq!(axis_offsets(84, 64, 10), vec![0, 10, 20]);
        assert_eq!(g.len(), 27);
        let g = plan_patch_offsets([70; 3], 64, 10, None, DEFAULT_MIN_FG).unwrap();
        assert_eq!(axis_offsets(70, 64, 10), vec![0, 6]);
        assert_eq!(g.len(), 8);
    }

    #[test]
    fn too_large_patch_rejected() {
        assert!(matches!(
            plan_patch_offsets([64, 32, 64], 48, 10, None, 0.1),
            Err(Error::PatchTooLarge { patch: 48, dim: 32 })
        ));
        assert!(PatchGrid::new([8; 3], 4, 1, vec![[5, 0, 0]]).is_err());
    }

    #[test]
    fn corner_block_of_ramp() {
        let v = Volume::new([4; 3], (0..64).map(|i| i as f32).collect()).unwrap();
        let g = PatchGrid::new([4; 3], 2, 2, vec![[0, 0, 0]]).unwrap();
        let p = extract_patches(&v, &g).unwrap();
        assert_eq!(p[0].data(), &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn stitch_single_and_overlap() {
        let g = PatchGrid::new([4; 3], 4, 1, vec![[0, 0, 0]]).unwrap();
        let t = Tensor::from_fn(&[1, 4, 4, 4], |i| i as f32 * 0.1);
        let v = stitch_patches(std::slice::from_ref(&t), &g).unwrap();
        assert_eq!(v.data(), t.data());

        let g = PatchGrid::new([4, 4, 6], 4, 2, vec![[0, 0, 0], [0, 0, 2]]).unwrap();
        let a = Tensor::full(&[1, 4, 4, 4], 1.0);
        let b = Tensor::full(&[1, 4, 4, 4], 3.0);
        let v = stitch_patches(&[a, b], &g).unwrap();
        assert_eq!(v.get(1, 1, 0), 1.0);
        assert_eq!(v.get(1, 1, 2), 2.0);
        assert_eq!(v.get(1, 1, 3), 2.0);
        assert_eq!(v.get(1, 1, 5), 3.0);
    }

    #[test]
    fn uncovered_voxels_are_background() {
        let g = PatchGrid::new([4; 3], 2, 2, vec![[0, 0, 0]]).unwrap();
        let v = stitch_patches(&[Tensor::full(&[1, 2, 2, 2], 0.5)], &g).unwrap();
        assert_eq!(v.get(3, 3, 3), BACKGROUND);
        assert_eq!(v.get(1, 1, 1), 0.5);
    }

    #[test]
    fn stitch_rejects_wrong_count() {
        let g = PatchGrid::new([4; 3], 2, 2, vec![[0, 0, 0], [2, 2, 2]]).unwrap();
        assert!(matches!(
            stitch_patches(&[Tensor::zeros(&[1, 2, 2, 2])], &g),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn mask_filter_keeps_foreground_covered() {
        let shape = [40, 40, 40];
        let mut mask = vec![false; 40 * 40 * 40];
        // small blob near a corner plus a single isolated voxel
        for z in 2..8 {
            for y in 2..8 {
                for x in 2..8 {
                    mask[(z * 40 + y) * 40 + x] = true;
                }
            }
        }
        mask[(39 * 40 + 39) * 40 + 39] = true;
        let g = plan_patch_offsets(shape, 16, 8, Some(&mask), 0.02).unwrap();
        let cov = g.coverage();
        assert!(mask.iter().zip(&cov).all(|(&m, &c)| !m || c > 0));
        assert!(g.len() < axis_offsets(40, 16, 8).len().pow(3));
    }

    fn brute_coverage(g: &PatchGrid) -> Vec<u32> {
        let [d, h, w] = g.volume_shape();
        let p = g.patch_size();
        let mut c = vec![0; d * h * w];
        for o in g.offsets() {
            for z in o[0]..o[0] + p {
                for y in o[1]..o[1] + p {
                    for x in o[2]..o[2] + p {
                        c[(z * h + y) * w + x] += 1;
                    }
                }
            }
        }
        c
    }

    proptest! {
        #[test]
        fn axis_offsets_match_enumeration(n in 1usize..200, p in 1usize..64, s in 1usize..40) {
            prop_assume!(p <= n);
            let v = axis_offsets(n, p, s);
            prop_assert_eq!(&v, &brute_axis(n, p, s));
            prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*v.last().unwrap() + p == n);
        }

        #[test]
        fn stitch_extract_round_trip(
            dims in prop::array::uniform3(4usize..14),
            p in 1usize..5,
            s in 1usize..6,
            seed in any::<u64>(),
            drop in prop::collection::vec(any::<bool>(), 0..64),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = dims.iter().product();
            let v = Volume::new(dims, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let full = plan_patch_offsets(dims, p, s, None, 0.0).unwrap();
            let offsets: Vec<_> = full
                .offsets()
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop.get(*i).copied().unwrap_or(false))
                .map(|(_, o)| *o)
                .collect();
            let g = PatchGrid::new(dims, p, s, offsets).unwrap();
            prop_assert_eq!(g.coverage(), brute_coverage(&g));
            let out = stitch_patches(&extract_patches(&v, &g).unwrap(), &g).unwrap();
            for (i, &c) in g.coverage().iter().enumerate() {
                if c > 0 {
                    prop_assert!((out.data()[i] - v.data()[i]).abs() <= 1e-6);
                } else {
                    prop_assert_eq!(out.data()[i], BACKGROUND);
                }
            }
            // an undropped grid with stride <= patch sees every voxel
            if g.len() == full.len() && s <= p {
                prop_assert!(g.coverage().iter().all(|&c| c > 0));
            }
        }
    }
}
