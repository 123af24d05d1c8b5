//! Volume preparation and sliding-window full-volume prediction.

use std::path::Path;

use rand::RngCore;

use crate::error::Result;
use crate::networks::Generator;
use crate::patch::{extract_patches, plan_patch_offsets, stitch_patches};
use crate::volume_io::{normalize_intensity, read_volume, Volume};

/// Foreground = nonzero voxels, then intensity normalization onto `[-1, 1]`.
pub fn prepare_volume(v: Volume) -> Result<Volume> {
    normalize_intensity(&v.with_nonzero_mask())
}

pub fn load_prepared(path: &Path) -> Result<Volume> {
    prepare_volume(read_volume(path)?)
}

/// Full-resolution prediction stitched from `patch³` windows at `stride`.
/// Dropout is active exactly when `rng` is given.
pub fn predict_volume(
    gen: &Generator,
    x: &Volume,
    patch: usize,
    stride: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Volume> {
    let grid = plan_patch_offsets(x.dims(), patch, stride, None, 0.0)?;
    let mut outputs = Vec::with_capacity(grid.len());
    for p in extract_patches(x, &grid)? {
        let r: Option<&mut dyn RngCore> = match rng {
            Some(ref mut r) => Some(&mut **r),
            None => None,
        };
        outputs.push(gen.infer(&p, r)?.s1);
    }
    let mut y = stitch_patches(&outputs, &grid)?;
    y.spacing = x.spacing;
    if let Some(m) = x.mask() {
        y = y.with_mask(m.to_vec())?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::GeneratorConfig;
    use crate::tensor::Tensor;

    #[test]
    fn prediction_matches_single_patch_pass() {
        let cfg = GeneratorConfig {
            enc_channels: [4, 2],
            sft_channels: 4,
            n_res_blocks: 1,
            ..GeneratorConfig::default()
        };
        let g = Generator::init(cfg, 3).unwrap();
        let data: Vec<f32> = (0..16 * 16 * 16).map(|i| ((i as f32) * 0.01).sin() * 0.9).collect();
        let v = Volume::new([16; 3], data.clone()).unwrap();
        let y = predict_volume(&g, &v, 16, 16, None).unwrap();
        let direct = g.infer(&Tensor::from_vec(&[1, 16, 16, 16], data).unwrap(), None).unwrap();
        assert_eq!(y.data(), direct.s1.data());
    }

    #[test]
    fn prepare_sets_background() {
        let mut data = vec![0.0f32; 8];
        data[1] = 2.0;
        data[2] = 4.0;
        let v = prepare_volume(Volume::new([2, 2, 2], data).unwrap()).unwrap();
        assert_eq!(v.data()[0], -1.0);
        assert_eq!(v.data()[1], -1.0);
        assert_eq!(v.data()[2], 1.0);
    }
}
