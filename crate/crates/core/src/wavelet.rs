//! Single-level separable 3D discrete wavelet analysis and synthesis.
//!
//! Both directions are fixed-weight strided convolutions with circular
//! boundary handling. Each of the eight subbands uses a 6×6×6 kernel formed as
//! the outer product of the per-axis filters; zero taps are dropped when the
//! kernels are materialized.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub name: String,
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
}

/// Biorthogonal spline wavelet 1.3.
pub fn bior13_filter_bank() -> FilterBank {
    let a = std::f64::consts::SQRT_2 / 16.0;
    let b = std::f64::consts::FRAC_1_SQRT_2;
    FilterBank {
        name: "bior1.3".to_string(),
        dec_lo: vec![-a, a, b, b, a, -a],
        dec_hi: vec![0.0, 0.0, -b, b, 0.0, 0.0],
        rec_lo: vec![0.0, 0.0, b, b, 0.0, 0.0],
        rec_hi: vec![-a, -a, b, -b, a, a],
    }
}

impl FilterBank {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "bior1.3" => Ok(bior13_filter_bank()),
            other => Err(Error::InvalidConfig(format!("unknown wavelet {other:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.dec_lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dec_lo.is_empty()
    }
}

/// Subband key; letters are (depth, height, width), `L` = low-pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subband(u8);

impl Subband {
    pub const ALL: [Subband; 8] = [
        Subband(0),
        Subband(1),
        Subband(2),
        Subband(3),
        Subband(4),
        Subband(5),
        Subband(6),
        Subband(7),
    ];

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// High-pass flags per axis (depth, height, width).
    pub fn highs(self) -> [bool; 3] {
        [self.0 & 4 != 0, self.0 & 2 != 0, self.0 & 1 != 0]
    }

    pub fn from_key(key: &str) -> Option<Self> {
        let b = key.as_bytes();
        if b.len() != 3 {
            return None;
        }
        let mut idx = 0u8;
        for &c in b {
            idx <<= 1;
            match c {
                b'L' => {}
                b'H' => idx |= 1,
                _ => return None,
            }
        }
        Some(Subband(idx))
    }
}

impl fmt::Display for Subband {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for h in self.highs() {
            f.write_str(if h { "H" } else { "L" })?;
        }
        Ok(())
    }
}

/// The eight subbands of one decomposition level, stacked band-major on the
/// channel axis: band `k` occupies channels `k*C .. (k+1)*C`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands<T = f32> {
    stacked: Tensor<T>,
    source_shape: [usize; 4],
}

impl<T: Real> WaveletBands<T> {
    pub fn from_stacked(stacked: Tensor<T>, source_shape: [usize; 4]) -> Result<Self> {
        let [c, d, h, w] = source_shape;
        let expect = [8 * c, d / 2, h / 2, w / 2];
        if stacked.shape() != expect || d % 2 + h % 2 + w % 2 != 0 {
            return Err(Error::BandShapeMismatch(format!(
                "stacked bands {:?} inconsistent with source {source_shape:?}",
                stacked.shape()
            )));
        }
        Ok(Self {
            stacked,
            source_shape,
        })
    }

    pub fn band(&self, key: Subband) -> Tensor<T> {
        let c = self.source_shape[0];
        self.stacked.channels(key.index() * c, c)
    }

    pub fn stacked(&self) -> &Tensor<T> {
        &self.stacked
    }

    pub fn into_stacked(self) -> Tensor<T> {
        self.stacked
    }

    pub fn source_shape(&self) -> [usize; 4] {
        self.source_shape
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    dz: usize,
    dy: usize,
    dx: usize,
    w: T,
}

/// Materialized fixed kernels for one filter bank.
#[derive(Clone, Debug)]
pub struct WaveletKernels<T> {
    analysis: Vec<Vec<Tap<T>>>,
    synthesis: Vec<Vec<Tap<T>>>,
}

fn outer_taps<T: Real>(filters: [&[f64]; 3]) -> Vec<Tap<T>> {
    let mut taps = Vec::new();
    for (dz, &fz) in filters[0].iter().enumerate() {
        for (dy, &fy) in filters[1].iter().enumerate() {
            for (dx, &fx) in filters[2].iter().enumerate() {
                let w = fz * fy * fx;
                if w != 0.0 {
                    taps.push(Tap {
                        dz,
                        dy,
                        dx,
                        w: T::from_f64_lossy(w),
                    });
                }
            }
        }
    }
    taps
}

impl<T: Real> WaveletKernels<T> {
    pub fn new(bank: &FilterBank) -> Self {
        // correlation taps: analysis[j] = dec[len-1-j]
        let rev = |f: &[f64]| f.iter().rev().copied().collect::<Vec<_>>();
        let a_lo = rev(&bank.dec_lo);
        let a_hi = rev(&bank.dec_hi);
        let pick = |high: bool, lo: &[f64], hi: &[f64]| if high { hi.to_vec() } else { lo.to_vec() };
        let mut analysis = Vec::with_capacity(8);
        let mut synthesis = Vec::with_capacity(8);
        for band in Subband::ALL {
            let h = band.highs();
            let af: Vec<Vec<f64>> = h.iter().map(|&hh| pick(hh, &a_lo, &a_hi)).collect();
            let sf: Vec<Vec<f64>> = h
                .iter()
                .map(|&hh| pick(hh, &bank.rec_lo, &bank.rec_hi))
                .collect();
            analysis.push(outer_taps([&af[0], &af[1], &af[2]]));
            synthesis.push(outer_taps([&sf[0], &sf[1], &sf[2]]));
        }
        Self {
            analysis,
            synthesis,
        }
    }

    /// Dense 6×6×6 analysis kernel of one subband (for inspection).
    pub fn analysis_kernel(&self, band: Subband, len: usize) -> Tensor<T> {
        let mut k = Tensor::zeros(&[len, len, len]);
        for t in &self.analysis[band.index()] {
            k.data_mut()[(t.dz * len + t.dy) * len + t.dx] = t.w;
        }
        k
    }
}

fn check_even(shape: [usize; 4]) -> Result<()> {
    for &n in &shape[1..] {
        if n % 2 != 0 || n == 0 {
            return Err(Error::OddDimension(n));
        }
    }
    Ok(())
}

/// `out[b*C + c, k] = Σ_taps w · x[c, (2k + d) mod N]` for every band `b`.
fn gather<T: Real>(x: &Tensor<T>, kernels: &[Vec<Tap<T>>]) -> Tensor<T> {
    let [c, d, h, w] = x.dims4();
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let ovox = od * oh * ow;
    let mut out = Tensor::zeros(&[8 * c, od, oh, ow]);
    // circular x index per (tap offset, output index)
    let wrap = |n: usize, o: usize| -> Vec<Vec<usize>> {
        (0..6).map(|dd| (0..o).map(|k| (2 * k + dd) % n).collect()).collect()
    };
    let (zi, yi, xi) = (wrap(d, od), wrap(h, oh), wrap(w, ow));
    let xd = x.data();
    let od_ = out.data_mut();
    for (b, taps) in kernels.iter().enumerate() {
        for ci in 0..c {
            let src = &xd[ci * d * h * w..(ci + 1) * d * h * w];
            let dst = &mut od_[(b * c + ci) * ovox..(b * c + ci + 1) * ovox];
            for t in taps {
                let xs = &xi[t.dx];
                for kz in 0..od {
                    let z = zi[t.dz][kz];
                    for ky in 0..oh {
                        let row = &src[(z * h + yi[t.dy][ky]) * w..(z * h + yi[t.dy][ky] + 1) * w];
                        let line = &mut dst[(kz * oh + ky) * ow..(kz * oh + ky + 1) * ow];
                        for (v, &ix) in line.iter_mut().zip(xs) {
                            *v = *v + t.w * row[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`gather`]: scatter-add stacked bands back onto the full grid.
fn scatter<T: Real>(bands: &Tensor<T>, kernels: &[Vec<Tap<T>>], source: [usize; 4]) -> Tensor<T> {
    let [c, d, h, w] = source;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let ovox = od * oh * ow;
    let mut out = Tensor::zeros(&[c, d, h, w]);
    let wrap = |n: usize, o: usize| -> Vec<Vec<usize>> {
        (0..6).map(|dd| (0..o).map(|k| (2 * k + dd) % n).collect()).collect()
    };
    let (zi, yi, xi) = (wrap(d, od), wrap(h, oh), wrap(w, ow));
    let bd = bands.data();
    let out_d = out.data_mut();
    for (b, taps) in kernels.iter().enumerate() {
        for ci in 0..c {
            let src = &bd[(b * c + ci) * ovox..(b * c + ci + 1) * ovox];
            let dst = &mut out_d[ci * d * h * w..(ci + 1) * d * h * w];
            for t in taps {
                let xs = &xi[t.dx];
                for kz in 0..od {
                    let z = zi[t.dz][kz];
                    for ky in 0..oh {
                        let y = yi[t.dy][ky];
                        let line = &src[(kz * oh + ky) * ow..(kz * oh + ky + 1) * ow];
                        let row = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                        for (&v, &ix) in line.iter().zip(xs) {
                            row[ix] = row[ix] + t.w * v;
                        }
                    }
                }
            }
        }
    }
    out
}

impl<T: Real> WaveletKernels<T> {
    /// Forward analysis: `[C, D, H, W]` → stacked `[8C, D/2, H/2, W/2]`.
    pub fn analyze(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_even(x.dims4())?;
        Ok(gather(x, &self.analysis))
    }

    /// Adjoint of [`Self::analyze`] (used for backpropagation).
    pub fn analyze_adjoint(&self, g: &Tensor<T>, source: [usize; 4]) -> Tensor<T> {
        scatter(g, &self.analysis, source)
    }

    /// Synthesis: stacked bands → `[C, D, H, W]`.
    pub fn synthesize(&self, bands: &Tensor<T>) -> Result<Tensor<T>> {
        let [c8, d, h, w] = bands.dims4();
        if c8 % 8 != 0 {
            return Err(Error::BandShapeMismatch(format!(
                "{c8} channels is not a multiple of 8 subbands"
            )));
        }
        Ok(scatter(bands, &self.synthesis, [c8 / 8, 2 * d, 2 * h, 2 * w]))
    }

    /// Adjoint of [`Self::synthesize`].
    pub fn synthesize_adjoint(&self, g: &Tensor<T>) -> Tensor<T> {
        gather(g, &self.synthesis)
    }
}

pub fn dwt3<T: Real>(x: &Tensor<T>, bank: &FilterBank) -> Result<WaveletBands<T>> {
    let source = x.dims4();
    let stacked = WaveletKernels::new(bank).analyze(x)?;
    WaveletBands::from_stacked(stacked, source)
}

pub fn idwt3<T: Real>(bands: &WaveletBands<T>, bank: &FilterBank) -> Result<Tensor<T>> {
    WaveletKernels::new(bank).synthesize(bands.stacked())
}
