//! PSNR, SSIM, error maps, rank correlation and cohort evaluation with CSV
//! tables and mid-slice PNG montages.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::inference::{load_prepared, predict_volume};
use crate::networks::{Discriminator, Generator};
use crate::patch::{extract_patches, plan_patch_offsets, stitch_patches};
use crate::phantom::Manifest;
use crate::training::TrainState;
use crate::uncertainty::epistemic_map;
use crate::volume_io::Volume;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn check_shapes(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0) {
        return Err(Error::InvalidConfig(format!("data_range {data_range} must be positive")));
    }
    Ok(())
}

/// Mask used for metrics: the target's foreground if it has one.
fn metric_mask<'a>(target: &'a Volume) -> Option<&'a [bool]> {
    target.mask()
}

pub fn mse(pred: &Volume, target: &Volume) -> Result<f64> {
    check_shapes(pred, target)?;
    let mask = metric_mask(target);
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sum += (p as f64 - t as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::ShapeMismatch("mask selects no voxels".into()));
    }
    Ok(sum / n as f64)
}

/// `10·log10(range² / MSE)`; `+∞` for identical inputs.
pub fn psnr(pred: &Volume, target: &Volume, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

pub fn error_map(pred: &Volume, target: &Volume) -> Result<Volume> {
    check_shapes(pred, target)?;
    let data = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).collect();
    target.with_data(data)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a `[d, h, w]` field along each axis.
fn filter_valid(data: &[f64], dims: [usize; 3], k: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut cur = data.to_vec();
    let mut shape = dims;
    for axis in 0..3 {
        let mut out_shape = shape;
        out_shape[axis] = shape[axis] + 1 - k.len();
        let stride = match axis {
            0 => shape[1] * shape[2],
            1 => shape[2],
            _ => 1,
        };
        let [od, oh, ow] = out_shape;
        let mut out = Vec::with_capacity(od * oh * ow);
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (z * shape[1] + y) * shape[2] + x;
                    out.push(k.iter().enumerate().map(|(i, w)| w * cur[base + i * stride]).sum());
                }
            }
        }
        cur = out;
        shape = out_shape;
    }
    (cur, shape)
}

/// Local SSIM at every window center that fits inside the volume.
pub fn ssim_map(pred: &Volume, target: &Volume, data_range: f64) -> Result<(Vec<f64>, [usize; 3])> {
    check_shapes(pred, target)?;
    check_range(data_range)?;
    let dims = target.dims();
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::VolumeTooSmall {
            window: SSIM_WINDOW,
            dims,
        });
    }
    let k = gaussian_window();
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let (mx, shape) = filter_valid(&x, dims, &k);
    let (my, _) = filter_valid(&y, dims, &k);
    let (mxx, _) = filter_valid(&xx, dims, &k);
    let (myy, _) = filter_valid(&yy, dims, &k);
    let (mxy, _) = filter_valid(&xy, dims, &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let map = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect();
    Ok((map, shape))
}

/// Mean local SSIM with an 11³ Gaussian window (σ 1.5), averaged over window
/// centers inside the target's mask when it has one.
pub fn ssim(pred: &Volume, target: &Volume, data_range: f64) -> Result<f64> {
    let (map, [md, mh, mw]) = ssim_map(pred, target, data_range)?;
    let r = SSIM_WINDOW / 2;
    let mask = metric_mask(target);
    let (mut sum, mut n) = (0.0, 0usize);
    for z in 0..md {
        for y in 0..mh {
            for x in 0..mw {
                let inside = mask.is_none_or(|m| m[target.index(z + r, y + r, x + r)]);
                if inside {
                    sum += map[(z * mh + y) * mw + x];
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Ok(map.iter().sum::<f64>() / map.len() as f64);
    }
    Ok(sum / n as f64)
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with its two-sided p-value from the t
/// approximation with `n − 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::ShapeMismatch(format!(
            "spearman needs two equal samples of at least 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let rho = pearson(&ranks(x), &ranks(y));
    let df = (x.len() - 2) as f64;
    if rho.abs() >= 1.0 {
        return Ok((rho.clamp(-1.0, 1.0), 0.0));
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok((rho, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    pub direction: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionSummary {
    pub n: usize,
    pub psnr_db: MeanStd,
    pub ssim: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subjects: Vec<SubjectMetrics>,
    pub summary: BTreeMap<String, DirectionSummary>,
}

impl MetricReport {
    pub fn from_subjects(subjects: Vec<SubjectMetrics>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for s in &subjects {
            let g = groups.entry(s.direction.clone()).or_default();
            g.0.push(s.psnr_db);
            g.1.push(s.ssim);
        }
        let summary = groups
            .into_iter()
            .map(|(dir, (p, s))| {
                (
                    dir,
                    DirectionSummary {
                        n: p.len(),
                        psnr_db: MeanStd::of(&p),
                        ssim: MeanStd::of(&s),
                    },
                )
            })
            .collect();
        Ok(Self { subjects, summary })
    }

    pub fn write_csv(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut w = csv::Writer::from_path(out_dir.join(METRICS_FILE))?;
        for s in &self.subjects {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(out_dir.join(METRICS_FILE), e))?;
        let mut w = csv::Writer::from_path(out_dir.join(SUMMARY_FILE))?;
        w.write_record(["direction", "n", "psnr_db_mean", "psnr_db_std_pop", "ssim_mean", "ssim_std_pop"])?;
        for (dir, s) in &self.summary {
            w.write_record([
                dir.clone(),
                s.n.to_string(),
                s.psnr_db.mean.to_string(),
                s.psnr_db.std.to_string(),
                s.ssim.mean.to_string(),
                s.ssim.std.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(out_dir.join(SUMMARY_FILE), e))
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<SubjectMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// PSNR and SSIM of `pred` against `target`; `masked = false` ignores the
/// target's foreground mask.
pub fn volume_metrics(pred: &Volume, target: &Volume, data_range: f64, masked: bool) -> Result<(f64, f64)> {
    let t = if masked { target.clone() } else { target.clone().without_mask() };
    Ok((psnr(pred, &t, data_range)?, ssim(pred, &t, data_range)?))
}

/// Patchwise discriminator quality map (finest scale) of `x`.
pub fn quality_volume(d: &Discriminator, x: &Volume, patch: usize, stride: usize) -> Result<Volume> {
    let grid = plan_patch_offsets(x.dims(), patch, stride, None, 0.0)?;
    let maps = extract_patches(x, &grid)?
        .iter()
        .map(|p| d.infer(p).map(|o| o.s1))
        .collect::<Result<Vec<_>>>()?;
    stitch_patches(&maps, &grid)
}

fn to_gray(v: f32, lo: f32, hi: f32) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Mid-axial slices side by side, each panel mapped from its `(lo, hi)` range.
pub fn write_montage(panels: &[(&Volume, f32, f32)], path: &Path) -> Result<()> {
    let [d, h, w] = panels
        .first()
        .ok_or_else(|| Error::InvalidConfig("montage needs at least one panel".into()))?
        .0
        .dims();
    let width = w * panels.len();
    let mut img = vec![0u8; width * h];
    for (k, (v, lo, hi)) in panels.iter().enumerate() {
        if v.dims() != [d, h, w] {
            return Err(Error::ShapeMismatch("montage panels differ in shape".into()));
        }
        for y in 0..h {
            for x in 0..w {
                img[y * width + k * w + x] = to_gray(v.get(d / 2, y, x), *lo, *hi);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    enc.write_header()
        .map_err(png_err)?
        .write_image_data(&img)
        .map_err(png_err)
}

fn max_of(v: &Volume) -> f32 {
    v.data().iter().copied().fold(0.0, f32::max)
}

/// Both translation directions of every manifest pair with the models in
/// `state`, writing CSVs and one montage (prediction / error / quality /
/// epistemic uncertainty) per subject and direction.
pub fn evaluate_models(manifest: &Manifest, state: &TrainState, out_dir: &Path) -> Result<MetricReport> {
    let pairs = manifest.pairs()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCohort);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = &state.config;
    let (patch, stride) = (cfg.inference.patch_size, cfg.inference.stride);
    let mut subjects = Vec::new();
    for (subject, pa, pb) in pairs {
        let a = load_prepared(&pa)?;
        let b = load_prepared(&pb)?;
        let runs: [(&str, &Generator, &Discriminator, &Volume, &Volume); 2] =
            [("ab", &state.g_a, &state.d_b, &a, &b), ("ba", &state.g_b, &state.d_a, &b, &a)];
        for (dir, g, d, x, target) in runs {
            let pred = predict_volume(g, x, patch, stride, None)?;
            let (p, s) = volume_metrics(&pred, target, cfg.evaluation.data_range, cfg.evaluation.masked)?;
            log::info!("{subject} {dir}: psnr {p:.3} dB, ssim {s:.4}");
            subjects.push(SubjectMetrics {
                subject: subject.clone(),
                direction: dir.into(),
                psnr_db: p,
                ssim: s,
            });
            let err = error_map(&pred, target)?;
            let quality = quality_volume(d, &pred, patch, stride)?;
            let mut panels = vec![(&pred, -1.0, 1.0), (&err, 0.0, max_of(&err)), (&quality, 0.0, 1.0)];
            let unc = if cfg.inference.mc_samples > 0 {
                let keep = g.cfg.dropout_keep;
                Some(epistemic_map(g, x, cfg.inference.mc_samples, keep, cfg.seed, patch, stride)?.sigma)
            } else {
                None
            };
            if let Some(u) = &unc {
                panels.push((u, 0.0, max_of(u)));
            }
            write_montage(&panels, &out_dir.join(format!("{subject}_{dir}.png")))?;
        }
    }
    let report = MetricReport::from_subjects(subjects)?;
    report.write_csv(out_dir)?;
    Ok(report)
}

pub fn evaluate_cohort(manifest: &Manifest, checkpoint: &Path, out_dir: &Path) -> Result<MetricReport> {
    evaluate_models(manifest, &TrainState::load(checkpoint)?, out_dir)
}
