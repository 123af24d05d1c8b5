//! 3D convolution and transposed convolution via chunked im2col + GEMM.
//!
//! A [`ConvGeom`] always describes the *forward convolution* direction: it maps
//! the `big` grid onto the `small` grid. A transposed convolution runs the same
//! geometry backwards (small → big).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Upper bound on elements in one im2col buffer.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry of a convolution applied to `input`.
    pub fn conv(input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let mut small = [0; 3];
        for (o, &n) in small.iter_mut().zip(&input) {
            if n + 2 * pad < kernel || stride == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "conv kernel {kernel} (pad {pad}) does not fit extent {n}"
                )));
            }
            *o = (n + 2 * pad - kernel) / stride + 1;
        }
        Ok(Self {
            big: input,
            small,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry of a transposed convolution applied to `input`.
    pub fn transposed(
        input: [usize; 3],
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self> {
        let mut big = [0; 3];
        for (o, &n) in big.iter_mut().zip(&input) {
            let full = (n.max(1) - 1) * stride + kernel + out_pad;
            if full < 2 * pad + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "transposed conv output for extent {n} is empty"
                )));
            }
            *o = full - 2 * pad;
        }
        let geom = Self::conv(big, kernel, stride, pad)?;
        if geom.small != input {
            return Err(Error::ShapeMismatch(format!(
                "transposed conv geometry {big:?} does not invert to {input:?}"
            )));
        }
        Ok(geom)
    }

    fn big_vox(&self) -> usize {
        self.big.iter().product()
    }

    fn small_vox(&self) -> usize {
        self.small.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    /// Valid output index range for one kernel offset along an axis.
    fn valid_range(&self, k: usize, big: usize, small: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // ix = o*s + k - p  must lie in [0, big)
        let lo = (p - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi_num = big as isize - 1 + p - k;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.min(small as isize) as usize;
        let hi = (hi + 1).clamp(lo as isize, small as isize) as usize;
        (lo, hi)
    }

    /// Number of small-grid z-slices per im2col chunk for `rows` rows.
    fn slices_per_chunk(&self, rows: usize) -> usize {
        let per_slice = rows * self.small[1] * self.small[2];
        (COL_BUDGET / per_slice.max(1)).clamp(1, self.small[0].max(1))
    }
}

/// Gather `x` (`channels` × big grid) into `col` for small z-slices `z0..z1`.
fn im2col<T: Real>(x: &[T], channels: usize, g: &ConvGeom, z0: usize, z1: usize, col: &mut [T]) {
    let [bd, bh, bw] = g.big;
    let [_, sh, sw] = g.small;
    let k = g.kernel;
    let ncols = (z1 - z0) * sh * sw;
    let (s, p) = (g.stride, g.pad as isize);
    for ci in 0..channels {
        let xc = &x[ci * bd * bh * bw..(ci + 1) * bd * bh * bw];
        for kz in 0..k {
            for ky in 0..k {
                let (ylo, yhi) = g.valid_range(ky, bh, sh);
                for kx in 0..k {
                    let (xlo, xhi) = g.valid_range(kx, bw, sw);
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for oz in z0..z1 {
                        let iz = (oz * s) as isize + kz as isize - p;
                        let plane = &mut dst[(oz - z0) * sh * sw..(oz - z0 + 1) * sh * sw];
                        if iz < 0 || iz >= bd as isize {
                            plane.fill(T::zero());
                            continue;
                        }
                        let iz = iz as usize;
                        for oy in 0..sh {
                            let line = &mut plane[oy * sw..(oy + 1) * sw];
                            if oy < ylo || oy >= yhi {
                                line.fill(T::zero());
                                continue;
                            }
                            let iy = oy * s + ky - g.pad;
                            let src = &xc[(iz * bh + iy) * bw..(iz * bh + iy + 1) * bw];
                            line[..xlo].fill(T::zero());
                            line[xhi..].fill(T::zero());
                            if xlo < xhi {
                                let ix0 = xlo * s + kx - g.pad;
                                if s == 1 {
                                    line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                                } else {
                                    for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                                        *v = src[ix0 + j * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` back onto `x`; the adjoint of [`im2col`].
fn col2im<T: Real>(col: &[T], channels: usize, g: &ConvGeom, z0: usize, z1: usize, x: &mut [T]) {
    let [bd, bh, bw] = g.big;
    let [_, sh, sw] = g.small;
    let k = g.kernel;
    let ncols = (z1 - z0) * sh * sw;
    let (s, p) = (g.stride, g.pad as isize);
    for ci in 0..channels {
        let xc = &mut x[ci * bd * bh * bw..(ci + 1) * bd * bh * bw];
        for kz in 0..k {
            for ky in 0..k {
                let (ylo, yhi) = g.valid_range(ky, bh, sh);
                for kx in 0..k {
                    let (xlo, xhi) = g.valid_range(kx, bw, sw);
                    if xlo >= xhi {
                        continue;
                    }
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &col[row * ncols..(row + 1) * ncols];
                    for oz in z0..z1 {
                        let iz = (oz * s) as isize + kz as isize - p;
                        if iz < 0 || iz >= bd as isize {
                            continue;
                        }
                        let iz = iz as usize;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - g.pad;
                            let dst = &mut xc[(iz * bh + iy) * bw..(iz * bh + iy + 1) * bw];
                            let line = &src[((oz - z0) * sh + oy) * sw..((oz - z0) * sh + oy + 1) * sw];
                            let ix0 = xlo * s + kx - g.pad;
                            for (j, &v) in line[xlo..xhi].iter().enumerate() {
                                let d = &mut dst[ix0 + j * s];
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] (+)= op(a) · op(b)` where `b`/`c` may be column windows of wider row-major matrices.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    lda: usize,
    b: &[T],
    b_trans: bool,
    ldb: usize,
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if b_trans { (1, ldb as isize) } else { (ldb as isize, 1) };
    let a_need = if a_trans { (k - 1) * lda + m } else { (m - 1) * lda + k };
    let b_need = if b_trans { (n - 1) * ldb + k } else { (k - 1) * ldb + n };
    assert!(k == 0 || (a.len() >= a_need && b.len() >= b_need));
    assert!(c.len() >= (m - 1) * ldc + n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked against the strides above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

fn check_len<T: Real>(t: &Tensor<T>, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {shape:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], vox: usize) {
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut y[co * vox..(co + 1) * vox] {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], channels: usize, vox: usize) -> Tensor<T> {
    Tensor::from_fn(&[channels], |co| {
        dy[co * vox..(co + 1) * vox].iter().copied().sum()
    })
}

/// Convolution: `x [Cin, big]`, `w [Cout, Cin, k, k, k]`, `bias [Cout]` → `[Cout, small]`.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Result<Tensor<T>> {
    let cin = x.shape()[0];
    let cout = w.shape()[0];
    let k = g.kernel;
    check_len(x, &[cin, g.big[0], g.big[1], g.big[2]], "conv input")?;
    check_len(w, &[cout, cin, k, k, k], "conv weight")?;
    let rows = cin * g.taps();
    let svox = g.small_vox();
    let plane = g.small[1] * g.small[2];
    let mut y = Tensor::zeros(&[cout, g.small[0], g.small[1], g.small[2]]);
    let step = g.slices_per_chunk(rows);
    let mut col = vec![T::zero(); rows * step * plane];
    let mut z0 = 0;
    while z0 < g.small[0] {
        let z1 = (z0 + step).min(g.small[0]);
        let ncols = (z1 - z0) * plane;
        im2col(x.data(), cin, g, z0, z1, &mut col);
        gemm(
            cout,
            rows,
            ncols,
            w.data(),
            false,
            rows,
            &col,
            false,
            ncols,
            &mut y.data_mut()[z0 * plane..],
            svox,
            false,
        );
        z0 = z1;
    }
    if let Some(b) = bias {
        check_len(b, &[cout], "conv bias")?;
        add_bias(y.data_mut(), b.data(), svox);
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let cin = x.shape()[0];
    let cout = w.shape()[0];
    let rows = cin * g.taps();
    let svox = g.small_vox();
    let plane = g.small[1] * g.small[2];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let step = g.slices_per_chunk(rows);
    let mut col = vec![T::zero(); rows * step * plane];
    let mut z0 = 0;
    while z0 < g.small[0] && (need_dx || need_dw) {
        let z1 = (z0 + step).min(g.small[0]);
        let ncols = (z1 - z0) * plane;
        let dy_chunk = &dy.data()[z0 * plane..];
        if need_dw {
            im2col(x.data(), cin, g, z0, z1, &mut col);
            // dW[cout×rows] += dY[cout×ncols] · colᵀ
            gemm(
                cout,
                ncols,
                rows,
                dy_chunk,
                false,
                svox,
                &col,
                true,
                ncols,
                dw.data_mut(),
                rows,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[rows×ncols] = Wᵀ · dY
            gemm(
                rows,
                cout,
                ncols,
                w.data(),
                true,
                rows,
                dy_chunk,
                false,
                svox,
                &mut col,
                ncols,
                false,
            );
            col2im(&col, cin, g, z0, z1, dx.data_mut());
        }
        z0 = z1;
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(dy.data(), cout, svox),
    }
}

/// Transposed convolution: `x [Cin, small]`, `w [Cin, Cout, k, k, k]` → `[Cout, big]`.
pub fn conv_transpose3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Result<Tensor<T>> {
    let cin = x.shape()[0];
    let k = g.kernel;
    let cout = w.shape().get(1).copied().unwrap_or(0);
    check_len(x, &[cin, g.small[0], g.small[1], g.small[2]], "deconv input")?;
    check_len(w, &[cin, cout, k, k, k], "deconv weight")?;
    let rows = cout * g.taps();
    let svox = g.small_vox();
    let plane = g.small[1] * g.small[2];
    let mut y = Tensor::zeros(&[cout, g.big[0], g.big[1], g.big[2]]);
    let step = g.slices_per_chunk(rows);
    let mut col = vec![T::zero(); rows * step * plane];
    let mut z0 = 0;
    while z0 < g.small[0] {
        let z1 = (z0 + step).min(g.small[0]);
        let ncols = (z1 - z0) * plane;
        // col[rows×ncols] = Wᵀ[rows×cin] · X[cin×ncols]
        gemm(
            rows,
            cin,
            ncols,
            w.data(),
            true,
            rows,
            &x.data()[z0 * plane..],
            false,
            svox,
            &mut col,
            ncols,
            false,
        );
        col2im(&col, cout, g, z0, z1, y.data_mut());
        z0 = z1;
    }
    if let Some(b) = bias {
        check_len(b, &[cout], "deconv bias")?;
        add_bias(y.data_mut(), b.data(), g.big_vox());
    }
    Ok(y)
}

pub fn conv_transpose3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let cin = x.shape()[0];
    let cout = w.shape()[1];
    let rows = cout * g.taps();
    let svox = g.small_vox();
    let plane = g.small[1] * g.small[2];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let step = g.slices_per_chunk(rows);
    let mut col = vec![T::zero(); rows * step * plane];
    let mut z0 = 0;
    while z0 < g.small[0] && (need_dx || need_dw) {
        let z1 = (z0 + step).min(g.small[0]);
        let ncols = (z1 - z0) * plane;
        im2col(dy.data(), cout, g, z0, z1, &mut col);
        if let Some(dx) = dx.as_mut() {
            // dX[cin×ncols] = W[cin×rows] · col
            gemm(
                cin,
                rows,
                ncols,
                w.data(),
                false,
                rows,
                &col,
                false,
                ncols,
                &mut dx.data_mut()[z0 * plane..],
                svox,
                false,
            );
        }
        if need_dw {
            // dW[cin×rows] += X[cin×ncols] · colᵀ
            gemm(
                cin,
                ncols,
                rows,
                &x.data()[z0 * plane..],
                false,
                svox,
                &col,
                true,
                ncols,
                dw.data_mut(),
                rows,
                true,
            );
        }
        z0 = z1;
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(dy.data(), cout, g.big_vox()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let cin = x.shape()[0];
        let cout = w.shape()[0];
        let k = g.kernel;
        let [bd, bh, bw] = g.big;
        let [sd, sh, sw] = g.small;
        let mut y = Tensor::zeros(&[cout, sd, sh, sw]);
        for co in 0..cout {
            for oz in 0..sd {
                for oy in 0..sh {
                    for ox in 0..sw {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= bd as isize
                                            || iy >= bh as isize
                                            || ix >= bw as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * bd + iz as usize) * bh + iy as usize) * bw
                                            + ix as usize;
                                        let wi = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((co * sd + oz) * sh + oy) * sw + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_for_strides_and_kernels() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0)] {
            let g = ConvGeom::conv([6, 5, 8], k, s, p).unwrap();
            let x = Tensor::from_vec(&[2, 6, 5, 8], pseudo(2 * 240, 1)).unwrap();
            let w = Tensor::from_vec(&[3, 2, k, k, k], pseudo(6 * k * k * k, 2)).unwrap();
            let y = conv3d_forward(&x, &w, None, &g).unwrap();
            let e = naive_conv(&x, &w, &g);
            assert!(y.max_abs_diff(&e) < 1e-12, "k{k} s{s} p{p}");
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with the same weights viewed as [Cin, Cout]
        let g = ConvGeom::conv([8, 8, 8], 3, 2, 1).unwrap();
        let x = Tensor::from_vec(&[2, 8, 8, 8], pseudo(1024, 3)).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3, 3], pseudo(162, 4)).unwrap();
        let y = Tensor::from_vec(&[3, 4, 4, 4], pseudo(192, 5)).unwrap();
        let cx = conv3d_forward(&x, &w, None, &g).unwrap();
        let gt = ConvGeom::transposed([4, 4, 4], 3, 2, 1, 1).unwrap();
        assert_eq!(gt, g);
        let ty = conv_transpose3d_forward(&y, &w, None, &gt).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_output_sizes() {
        assert_eq!(ConvGeom::transposed([16; 3], 3, 2, 1, 1).unwrap().big, [32; 3]);
        assert_eq!(ConvGeom::transposed([8; 3], 4, 2, 1, 0).unwrap().big, [16; 3]);
        assert_eq!(ConvGeom::conv([64; 3], 4, 2, 1).unwrap().small, [32; 3]);
    }

    #[test]
    fn backward_matches_adjoint_identities() {
        let g = ConvGeom::conv([5, 6, 7], 3, 2, 1).unwrap();
        let x = Tensor::from_vec(&[2, 5, 6, 7], pseudo(420, 7)).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3, 3], pseudo(162, 8)).unwrap();
        let dy = Tensor::from_vec(&[3, 3, 3, 4], pseudo(108, 9)).unwrap();
        let gr = conv3d_backward(&x, &w, &dy, &g, true, true);
        // dL/dx with L = <conv(x), dy> is linear: check against a perturbation
        let dx = gr.dx.unwrap();
        let v = Tensor::from_vec(&[2, 5, 6, 7], pseudo(420, 10)).unwrap();
        let cv = conv3d_forward(&v, &w, None, &g).unwrap();
        let lhs: f64 = cv.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // dL/dw: L is linear in w too
        let u = Tensor::from_vec(&[3, 2, 3, 3, 3], pseudo(162, 11)).unwrap();
        let cu = conv3d_forward(&x, &u, None, &g).unwrap();
        let lhs: f64 = cu.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data().iter().zip(gr.dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
