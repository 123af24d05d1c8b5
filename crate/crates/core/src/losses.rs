//! Objective terms: adversarial (BCE), quality-weighted L1, block-Gram texture,
//! wavelet-band frequency and cycle consistency, composed across scales.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::networks::MultiScale;
use crate::tensor::{Real, Tensor};
use crate::wavelet::WaveletKernels;

pub const PROB_EPS: f64 = 1e-7;
pub const TEXTURE_BLOCK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_paired: f64,
    pub lambda_cyc: f64,
    pub beta: f64,
    pub scale_weights: [f64; 3],
    /// Off means the quality term is plain L1.
    pub use_quality_guidance: bool,
    pub enable_texture_loss: bool,
    pub enable_frequency_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_paired: 10.0,
            lambda_cyc: 10.0,
            beta: 1.5,
            scale_weights: [1.0; 3],
            use_quality_guidance: true,
            enable_texture_loss: true,
            enable_frequency_loss: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_adv, self.lambda_paired, self.lambda_cyc, self.beta];
        if all.iter().chain(&self.scale_weights).any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(a: Var<'_, T>, b: Var<'_, T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `−mean ln d` with `d` clamped away from zero.
fn neg_mean_log<'t, T: Real>(d: Var<'t, T>) -> Var<'t, T> {
    d.log_clamped(PROB_EPS).mean().affine(-1.0, 0.0)
}

/// Discriminator BCE at one scale: `−mean ln d_real − mean ln(1 − d_fake)`.
pub fn discriminator_bce<'t, T: Real>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Var<'t, T> {
    neg_mean_log(d_real).add(neg_mean_log(d_fake.affine(-1.0, 1.0)))
}

/// Non-saturating generator term at one scale: `−mean ln d_fake`.
pub fn generator_bce<'t, T: Real>(d_fake: Var<'t, T>) -> Var<'t, T> {
    neg_mean_log(d_fake)
}

/// Scale-weighted `(d_loss, g_loss)`; `d_loss` sees the fake maps detached.
pub fn adversarial_losses<'t, T: Real>(
    d_real: &MultiScale<Var<'t, T>>,
    d_fake: &MultiScale<Var<'t, T>>,
    scale_weights: [f64; 3],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let real = d_real.into_array();
    let fake = d_fake.into_array();
    let d: Vec<(f64, Var<'t, T>)> = (0..3)
        .map(|s| (scale_weights[s], discriminator_bce(real[s], fake[s].detach())))
        .collect();
    let g: Vec<(f64, Var<'t, T>)> = (0..3).map(|s| (scale_weights[s], generator_bce(fake[s]))).collect();
    Ok((Var::weighted_sum(&d)?, Var::weighted_sum(&g)?))
}

/// `mean |target − pred| · (1 − q)^β`; `q` is a constant map (or zero when absent).
pub fn quality_loss<'t, T: Real>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    q: Option<&Tensor<T>>,
    beta: f64,
) -> Result<Var<'t, T>> {
    same_shape(pred, target, "quality loss")?;
    let resid = target.sub(pred).abs();
    let Some(q) = q else {
        return Ok(resid.mean());
    };
    if q.shape() != pred.shape().as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "quality map {:?} vs prediction {:?}",
            q.shape(),
            pred.shape()
        )));
    }
    let w = q.map(|v| {
        let one_minus = (T::one() - v).max(T::zero());
        T::from_f64_lossy(one_minus.to_f64().unwrap().powf(beta))
    });
    Ok(resid.mul_const(&w).mean())
}

/// Mean squared difference of the `4³`-block Gram matrices.
pub fn texture_loss<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(pred, target, "texture loss")?;
    let gp = pred.block_gram(TEXTURE_BLOCK)?;
    let gt = target.block_gram(TEXTURE_BLOCK)?;
    Ok(gp.sub(gt).square().mean())
}

/// Sum over the eight subbands of the mean absolute coefficient difference.
pub fn frequency_loss<'t, T: Real>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    kernels: &Rc<WaveletKernels<T>>,
) -> Result<Var<'t, T>> {
    same_shape(pred, target, "frequency loss")?;
    let diff = target.dwt3(kernels)?.sub(pred.dwt3(kernels)?);
    // bands have equal size, so the per-band mean sum is 8× the global mean
    Ok(diff.abs().mean().affine(8.0, 0.0))
}

pub fn cycle_loss<'t, T: Real>(
    x_a: Var<'t, T>,
    rec_a: Var<'t, T>,
    x_b: Var<'t, T>,
    rec_b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    same_shape(x_a, rec_a, "cycle loss (a)")?;
    same_shape(x_b, rec_b, "cycle loss (b)")?;
    Ok(x_a.sub(rec_a).abs().mean().add(x_b.sub(rec_b).abs().mean()))
}

/// One logged component of an objective with the coefficient it enters the total with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub term: String,
    pub scale: u8,
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub entries: Vec<LossEntry>,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.weight * e.value).sum()
    }

    pub fn get(&self, term: &str, scale: u8) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.term == term && e.scale == scale)
            .map(|e| e.value)
    }

    /// Sum of `weight · value` over entries whose term starts with `prefix`.
    pub fn contribution(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.term.starts_with(prefix))
            .map(|e| e.weight * e.value)
            .sum()
    }

    pub fn merge(&mut self, other: LossReport) {
        self.entries.extend(other.entries);
        self.total += other.total;
    }
}

/// Collects weighted scalar vars and mirrors them in a report.
pub struct Objective<'t, T: Real> {
    terms: Vec<(f64, Var<'t, T>)>,
    report: LossReport,
}

impl<'t, T: Real> Default for Objective<'t, T> {
    fn default() -> Self {
        Self {
            terms: Vec::new(),
            report: LossReport::default(),
        }
    }
}

impl<'t, T: Real> Objective<'t, T> {
    pub fn push(&mut self, term: impl Into<String>, scale: u8, weight: f64, v: Var<'t, T>) {
        let value = v.value().data()[0].to_f64().unwrap();
        self.report.entries.push(LossEntry {
            term: term.into(),
            scale,
            value,
            weight,
        });
        if weight != 0.0 {
            self.terms.push((weight, v));
        }
    }

    /// Total var (`None` when every weight was zero) and the report.
    pub fn finish(self) -> Result<(Option<Var<'t, T>>, LossReport)> {
        let mut report = self.report;
        report.total = report.weighted_sum();
        let total = if self.terms.is_empty() {
            None
        } else {
            Some(Var::weighted_sum(&self.terms)?)
        };
        Ok((total, report))
    }
}

/// Inputs for one translation direction (`tag` is `"ab"` or `"ba"`).
pub struct DirectionTerms<'t, 'q, T: Real> {
    pub tag: &'static str,
    pub pred: MultiScale<Var<'t, T>>,
    pub target: MultiScale<Var<'t, T>>,
    /// Detached quality maps from the opposite-domain discriminator.
    pub quality: Option<&'q MultiScale<Tensor<T>>>,
    /// Discriminator outputs on `pred` (gradient flows into the generator).
    pub d_fake: Option<MultiScale<Var<'t, T>>>,
}

/// Generator objective over both directions: per scale
/// `λ_adv·adv + λ_paired·(quality + texture + frequency) + λ_cyc·cycle`,
/// texture, frequency and cycle at full resolution only.
pub fn total_objective<'t, T: Real>(
    directions: &[DirectionTerms<'t, '_, T>],
    cycle: Option<(Var<'t, T>, Var<'t, T>, Var<'t, T>, Var<'t, T>)>,
    weights: &LossWeights,
    kernels: &Rc<WaveletKernels<T>>,
) -> Result<(Option<Var<'t, T>>, LossReport)> {
    weights.validate()?;
    let sw = weights.scale_weights;
    let mut obj = Objective::default();
    for dir in directions {
        let preds = dir.pred.into_array();
        let targets = dir.target.into_array();
        let qs = dir.quality.map(|q| q.as_ref().into_array());
        let fakes = dir.d_fake.map(|d| d.into_array());
        for s in 0..3 {
            let scale = s as u8 + 1;
            let q = if weights.use_quality_guidance { qs.map(|q| q[s]) } else { None };
            let lq = quality_loss(preds[s], targets[s], q, weights.beta)?;
            obj.push(format!("quality_{}", dir.tag), scale, sw[s] * weights.lambda_paired, lq);
            if let Some(f) = fakes {
                obj.push(format!("adv_g_{}", dir.tag), scale, sw[s] * weights.lambda_adv, generator_bce(f[s]));
            }
        }
        if weights.enable_texture_loss {
            let lt = texture_loss(preds[0], targets[0])?;
            obj.push(format!("texture_{}", dir.tag), 1, sw[0] * weights.lambda_paired, lt);
        }
        if weights.enable_frequency_loss {
            let lf = frequency_loss(preds[0], targets[0], kernels)?;
            obj.push(format!("frequency_{}", dir.tag), 1, sw[0] * weights.lambda_paired, lf);
        }
    }
    if let Some((x_a, rec_a, x_b, rec_b)) = cycle {
        obj.push("cycle", 1, sw[0] * weights.lambda_cyc, cycle_loss(x_a, rec_a, x_b, rec_b)?);
    }
    obj.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::wavelet::bior13_filter_bank;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(lo..hi))
    }

    fn scalar(v: Var<'_, f64>) -> f64 {
        v.value().data()[0]
    }

    fn kernels() -> Rc<WaveletKernels<f64>> {
        Rc::new(WaveletKernels::new(&bior13_filter_bank()))
    }

    #[test]
    fn bce_closed_forms() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[1, 4, 4, 4], 1.0));
        let zeros = tape.constant(Tensor::full(&[1, 4, 4, 4], 0.0));
        assert!(scalar(discriminator_bce(ones, zeros)).abs() < 1e-6);
        let half = tape.constant(Tensor::full(&[1, 4, 4, 4], 0.5));
        assert!((scalar(discriminator_bce(half, half)) - 4f64.ln()).abs() < 1e-12);
        assert!((scalar(generator_bce(half)) - 2f64.ln()).abs() < 1e-12);

        let ms = MultiScale { s1: half, s2: half, s3: half };
        let (d, g) = adversarial_losses(&ms, &ms, [1.0; 3]).unwrap();
        assert!((scalar(d) - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((scalar(g) - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quality_degenerate_cases() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(rand_t(&[1, 4, 4, 4], 1, -1.0, 1.0));
        let t = tape.constant(rand_t(&[1, 4, 4, 4], 2, -1.0, 1.0));
        let l1 = scalar(t.sub(p).abs().mean());
        let zero = Tensor::zeros(&[1, 4, 4, 4]);
        let one = Tensor::full(&[1, 4, 4, 4], 1.0);
        let q = rand_t(&[1, 4, 4, 4], 3, 0.0, 1.0);
        assert!((scalar(quality_loss(p, t, Some(&zero), 1.5).unwrap()) - l1).abs() < 1e-12);
        assert!((scalar(quality_loss(p, t, None, 1.5).unwrap()) - l1).abs() < 1e-12);
        assert_eq!(scalar(quality_loss(p, t, Some(&one), 1.5).unwrap()), 0.0);
        assert!((scalar(quality_loss(p, t, Some(&q), 0.0).unwrap()) - l1).abs() < 1e-12);
        let bad = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(quality_loss(p, bad, None, 1.5), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn texture_examples() {
        let tape = Tape::<f64>::new();
        let t = rand_t(&[1, 4, 4, 4], 4, -1.0, 1.0);
        let tv = tape.constant(t.clone());
        assert_eq!(scalar(texture_loss(tv, tv).unwrap()), 0.0);
        let doubled = tape.constant(t.map(|v| 2.0 * v));
        // independent Gram of the single 64-voxel block
        let f = t.data();
        let mut sq = 0.0;
        for i in 0..64 {
            for j in 0..64 {
                let m = f[i] * f[j] / 64.0;
                sq += m * m;
            }
        }
        let expected = 9.0 * sq / 4096.0;
        let got = scalar(texture_loss(doubled, tv).unwrap());
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(rand_t(&[1, 8, 8, 8], 5, -1.0, 1.0)).block_gram(4).unwrap().value();
        let n = 64;
        for i in 0..n {
            for j in 0..n {
                assert!((g.data()[i * n + j] - g.data()[j * n + i]).abs() < 1e-14);
            }
        }
        let v = rand_t(&[n], 6, -1.0, 1.0);
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += v.data()[i] * g.data()[i * n + j] * v.data()[j];
            }
        }
        assert!(quad >= -1e-12);
    }

    #[test]
    fn frequency_examples() {
        let k = kernels();
        let tape = Tape::<f64>::new();
        let p = rand_t(&[1, 8, 8, 8], 7, -1.0, 1.0);
        let pv = tape.constant(p.clone());
        assert_eq!(scalar(frequency_loss(pv, pv, &k).unwrap()), 0.0);
        let delta = 0.3;
        let shifted = tape.constant(p.map(|v| v + delta));
        let got = scalar(frequency_loss(pv, shifted, &k).unwrap());
        assert!((got - 2.0 * 2f64.sqrt() * delta).abs() < 1e-10, "{got}");
        let t = tape.constant(rand_t(&[1, 8, 8, 8], 8, -1.0, 1.0));
        let base = scalar(frequency_loss(pv, t, &k).unwrap());
        let a = -2.5;
        let pa = pv.affine(a, 0.0);
        let ta = t.affine(a, 0.0);
        assert!((scalar(frequency_loss(pa, ta, &k).unwrap()) - a.abs() * base).abs() < 1e-10);
        let odd = tape.constant(Tensor::zeros(&[1, 7, 8, 8]));
        assert!(matches!(frequency_loss(odd, odd, &k), Err(Error::OddDimension(7))));
    }

    #[test]
    fn cycle_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(rand_t(&[1, 4, 4, 4], 9, -1.0, 1.0));
        let b = tape.constant(rand_t(&[1, 4, 4, 4], 10, -1.0, 1.0));
        assert_eq!(scalar(cycle_loss(a, a, b, b).unwrap()), 0.0);
        let shifted = a.affine(1.0, 0.5);
        assert!((scalar(cycle_loss(a, shifted, b, b).unwrap()) - 0.5).abs() < 1e-12);
        let fwd = scalar(cycle_loss(a, shifted, b, b).unwrap());
        let rev = scalar(cycle_loss(b, b, a, shifted).unwrap());
        assert_eq!(fwd, rev);
    }

    fn fd_grad(
        x0: &Tensor<f64>,
        f: impl for<'a> Fn(Var<'a, f64>) -> Var<'a, f64>,
    ) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let g = tape.backward(f(x)).get_or_zeros(x);
        let eval = |t: Tensor<f64>| {
            let tape = Tape::new();
            f(tape.constant(t)).value().data()[0]
        };
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            let mut m = x0.clone();
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (eval(p) - eval(m)) / (2.0 * eps);
            let an = g.data()[i];
            let scale = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / scale < 1e-3, "index {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn quality_gradient() {
        let target = rand_t(&[1, 4, 4, 4], 11, -1.0, 1.0);
        // residuals bounded away from zero
        let pred = Tensor::from_fn(&[1, 4, 4, 4], |i| {
            target.data()[i] + if i % 2 == 0 { 0.3 } else { -0.2 }
        });
        let q = rand_t(&[1, 4, 4, 4], 12, 0.0, 1.0);
        fd_grad(&pred, |p| {
            let t = p.tape().constant(target.clone());
            quality_loss(p, t, Some(&q), 1.5).unwrap()
        });
    }

    #[test]
    fn texture_gradient() {
        let target = rand_t(&[1, 4, 4, 4], 13, -1.0, 1.0);
        let pred = rand_t(&[1, 4, 4, 4], 14, -1.0, 1.0);
        fd_grad(&pred, |p| {
            let t = p.tape().constant(target.clone());
            texture_loss(p, t).unwrap()
        });
    }

    #[test]
    fn frequency_gradient() {
        let k = kernels();
        let target = rand_t(&[1, 8, 8, 8], 15, -1.0, 1.0);
        let pred = rand_t(&[1, 8, 8, 8], 16, -1.0, 1.0);
        fd_grad(&pred, |p| {
            let t = p.tape().constant(target.clone());
            frequency_loss(p, t, &k).unwrap()
        });
    }

    fn direction<'t>(
        tape: &'t Tape<f64>,
        tag: &'static str,
        seed: u64,
    ) -> DirectionTerms<'t, 'static, f64> {
        let p = rand_t(&[1, 8, 8, 8], seed, -1.0, 1.0);
        let t = rand_t(&[1, 8, 8, 8], seed + 1, -1.0, 1.0);
        let pred = MultiScale::pyramid(&p).unwrap().map(|x| tape.constant(x));
        let target = MultiScale::pyramid(&t).unwrap().map(|x| tape.constant(x));
        let d = MultiScale::pyramid(&rand_t(&[1, 8, 8, 8], seed + 2, 0.1, 0.9))
            .unwrap()
            .map(|x| tape.constant(x));
        DirectionTerms {
            tag,
            pred,
            target,
            quality: None,
            d_fake: Some(d),
        }
    }

    #[test]
    fn report_total_matches_independent_sum() {
        let k = kernels();
        let tape = Tape::new();
        let dirs = [direction(&tape, "ab", 20), direction(&tape, "ba", 30)];
        let a = tape.constant(rand_t(&[1, 8, 8, 8], 40, -1.0, 1.0));
        let ra = tape.constant(rand_t(&[1, 8, 8, 8], 41, -1.0, 1.0));
        let w = LossWeights {
            scale_weights: [1.0, 0.5, 0.25],
            ..LossWeights::default()
        };
        let (total, report) = total_objective(&dirs, Some((a, ra, a, ra)), &w, &k).unwrap();
        let total = scalar(total.unwrap());
        // recompute every component directly
        let mut expected = 0.0;
        for d in &dirs {
            let p = d.pred.into_array();
            let t = d.target.into_array();
            let f = d.d_fake.unwrap().into_array();
            for s in 0..3 {
                let l1 = scalar(t[s].sub(p[s]).abs().mean());
                let adv = -f[s].value().data().iter().map(|v| v.ln()).sum::<f64>() / f[s].value().len() as f64;
                expected += w.scale_weights[s] * (10.0 * l1 + adv);
            }
            expected += 10.0 * scalar(texture_loss(p[0], t[0]).unwrap());
            expected += 10.0 * scalar(frequency_loss(p[0], t[0], &k).unwrap());
        }
        expected += 10.0 * 2.0 * scalar(a.sub(ra).abs().mean());
        assert!((total - expected).abs() < 1e-6 * expected.abs().max(1.0));
        assert!((report.total - expected).abs() < 1e-6 * expected.abs().max(1.0));

        let doubled = LossWeights {
            lambda_paired: 20.0,
            ..w.clone()
        };
        let dirs = [direction(&tape, "ab", 20), direction(&tape, "ba", 30)];
        let (_, r2) = total_objective(&dirs, Some((a, ra, a, ra)), &doubled, &k).unwrap();
        for prefix in ["quality", "texture", "frequency"] {
            let (c1, c2) = (report.contribution(prefix), r2.contribution(prefix));
            assert!((c2 - 2.0 * c1).abs() < 1e-9 * c1.abs().max(1.0));
        }
        assert!((r2.contribution("cycle") - report.contribution("cycle")).abs() < 1e-12);
    }

    #[test]
    fn zero_components_give_zero_total() {
        let k = kernels();
        let tape = Tape::new();
        let x = MultiScale::pyramid(&rand_t(&[1, 8, 8, 8], 50, -1.0, 1.0))
            .unwrap()
            .map(|t| tape.constant(t));
        let dirs = [DirectionTerms {
            tag: "ab",
            pred: x,
            target: x,
            quality: None,
            d_fake: None,
        }];
        let (total, report) = total_objective(&dirs, Some((x.s1, x.s1, x.s1, x.s1)), &LossWeights::default(), &k).unwrap();
        assert_eq!(scalar(total.unwrap()), 0.0);
        assert_eq!(report.total, 0.0);
    }

    proptest! {
        #[test]
        fn quality_monotone_in_q(seed in any::<u64>(), idx in 0usize..64, bump in 0.0f64..1.0) {
            let tape = Tape::<f64>::new();
            let p = tape.constant(rand_t(&[1, 4, 4, 4], seed, -1.0, 1.0));
            let t = tape.constant(rand_t(&[1, 4, 4, 4], seed ^ 1, -1.0, 1.0));
            let q = rand_t(&[1, 4, 4, 4], seed ^ 2, 0.0, 1.0);
            let mut q2 = q.clone();
            q2.data_mut()[idx] = (q2.data()[idx] + bump).min(1.0);
            let a = scalar(quality_loss(p, t, Some(&q), 1.5).unwrap());
            let b = scalar(quality_loss(p, t, Some(&q2), 1.5).unwrap());
            prop_assert!(b <= a + 1e-15);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn frequency_triangle_inequality(seed in any::<u64>()) {
            let k = kernels();
            let tape = Tape::<f64>::new();
            let x = tape.constant(rand_t(&[1, 4, 4, 4], seed, -1.0, 1.0));
            let y = tape.constant(rand_t(&[1, 4, 4, 4], seed ^ 5, -1.0, 1.0));
            let z = tape.constant(rand_t(&[1, 4, 4, 4], seed ^ 9, -1.0, 1.0));
            let xy = scalar(frequency_loss(x, y, &k).unwrap());
            let xz = scalar(frequency_loss(x, z, &k).unwrap());
            let zy = scalar(frequency_loss(z, y, &k).unwrap());
            prop_assert!(xy <= xz + zy + 1e-12);
            prop_assert!(xy >= 0.0);
        }
    }
}
