//! Generator (encoder, spatial/frequency transform block, deep-supervised
//! decoder) and U-shaped multi-scale discriminator, plus named parameter
//! storage and its binary archive.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::wavelet::{bior13_filter_bank, FilterBank, WaveletKernels};

pub const IN_EPS: f64 = 1e-5;
const RANGE_SLACK: f64 = 1e-6;

/// Named parameter tensors in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters of one store recorded on a tape.
pub struct Bound<'t, T: Real = f32> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name:?}")))
    }

    /// Gradient for every bound parameter (zeros when unreached).
    pub fn grads(&self, g: &Grads<T>) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), g.get_or_zeros(*v)))
                .collect(),
        }
    }

    /// Names whose gradient the sweep never reached.
    pub fn unreached(&self, g: &Grads<T>) -> Vec<String> {
        self.vars
            .iter()
            .filter(|(_, v)| g.get(**v).is_none())
            .map(|(k, _)| k.clone())
            .collect()
    }
}

const ARCHIVE_MAGIC: &[u8; 4] = b"MGCK";
const ARCHIVE_VERSION: u32 = 1;

/// Little-endian archive: magic, version, count, then per entry
/// `name_len u32, name, ndim u32, dims u64…, f32 payload`.
pub fn encode_archive(entries: &BTreeMap<String, Tensor<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_archive(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    struct Cursor<'a>(&'a [u8]);
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.0.len() < n {
                return Err(Error::CheckpointMismatch("truncated archive".into()));
            }
            let (a, b) = self.0.split_at(n);
            self.0 = b;
            Ok(a)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }
    let mut c = Cursor(bytes);
    if c.take(4)? != ARCHIVE_MAGIC {
        return Err(Error::CheckpointMismatch("bad archive magic".into()));
    }
    let version = c.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::CheckpointMismatch(format!("unsupported archive version {version}")));
    }
    let count = c.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::CheckpointMismatch("non-utf8 entry name".into()))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(4).ok_or_else(|| Error::CheckpointMismatch("entry too large".into()))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if !c.0.is_empty() {
        return Err(Error::CheckpointMismatch("trailing bytes after archive".into()));
    }
    Ok(out)
}

pub fn write_archive(entries: &BTreeMap<String, Tensor<f32>>, path: &Path) -> Result<()> {
    fs::write(path, encode_archive(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    decode_archive(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Values at the three supervision scales (full, half, quarter resolution).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiScale<V> {
    pub s1: V,
    pub s2: V,
    pub s3: V,
}

pub type MultiScaleOutput<T = f32> = MultiScale<Tensor<T>>;

impl<V> MultiScale<V> {
    pub fn map<U>(self, mut f: impl FnMut(V) -> U) -> MultiScale<U> {
        MultiScale {
            s1: f(self.s1),
            s2: f(self.s2),
            s3: f(self.s3),
        }
    }

    pub fn try_map<U>(self, mut f: impl FnMut(V) -> Result<U>) -> Result<MultiScale<U>> {
        Ok(MultiScale {
            s1: f(self.s1)?,
            s2: f(self.s2)?,
            s3: f(self.s3)?,
        })
    }

    pub fn as_ref(&self) -> MultiScale<&V> {
        MultiScale {
            s1: &self.s1,
            s2: &self.s2,
            s3: &self.s3,
        }
    }

    pub fn zip<U>(self, other: MultiScale<U>) -> MultiScale<(V, U)> {
        MultiScale {
            s1: (self.s1, other.s1),
            s2: (self.s2, other.s2),
            s3: (self.s3, other.s3),
        }
    }

    pub fn into_array(self) -> [V; 3] {
        [self.s1, self.s2, self.s3]
    }
}

impl<T: Real> MultiScale<Tensor<T>> {
    /// Target pyramid by repeated 2× average pooling.
    pub fn pyramid(x: &Tensor<T>) -> Result<Self> {
        let s2 = x.avg_pool2()?;
        let s3 = s2.avg_pool2()?;
        Ok(Self { s1: x.clone(), s2, s3 })
    }
}

impl<'t, T: Real> MultiScale<Var<'t, T>> {
    pub fn values(&self) -> MultiScaleOutput<T> {
        self.as_ref().map(|v| (*v.value()).clone())
    }

    pub fn detach(&self) -> Self {
        self.as_ref().map(|v| v.detach())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub enc_channels: [usize; 2],
    pub enc_strides: [usize; 2],
    pub sft_channels: usize,
    pub n_res_blocks: usize,
    pub use_frequency_branch: bool,
    pub dropout_keep: f64,
    pub wavelet: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            enc_channels: [64, 32],
            enc_strides: [1, 2],
            sft_channels: 64,
            n_res_blocks: 9,
            use_frequency_branch: true,
            dropout_keep: 0.8,
            wavelet: "bior1.3".into(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_res_blocks == 0 {
            return bad("n_res_blocks must be at least 1".into());
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad(format!("dropout_keep {} outside (0, 1]", self.dropout_keep));
        }
        if self.enc_strides != [1, 2] {
            return bad(format!("enc_strides must be [1, 2], got {:?}", self.enc_strides));
        }
        if self.in_channels == 0 || self.sft_channels == 0 || self.enc_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        FilterBank::by_name(&self.wavelet).map_err(|_| Error::InvalidConfig(format!("unknown wavelet {:?}", self.wavelet)))?;
        Ok(())
    }

    pub fn filter_bank(&self) -> FilterBank {
        FilterBank::by_name(&self.wavelet).unwrap_or_else(|_| bior13_filter_bank())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub n_levels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: vec![64, 128, 256],
            kernel: 4,
            n_levels: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels != self.channels.len() {
            return Err(Error::InvalidConfig(format!(
                "n_levels {} != {} channel entries",
                self.n_levels,
                self.channels.len()
            )));
        }
        if self.n_levels < 3 {
            return Err(Error::InvalidConfig("discriminator needs at least 3 levels".into()));
        }
        if self.kernel < 2 || self.kernel % 2 != 0 {
            return Err(Error::InvalidConfig(format!("kernel {} must be even and >= 2", self.kernel)));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        Ok(())
    }
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(self.rng.random_range(-bound..=bound)));
        self.store.insert(name, t);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let bound = 1.0 / ((cin * k * k * k) as f64).sqrt();
        self.uniform(format!("{name}.w"), &[cout, cin, k, k, k], bound);
        self.uniform(format!("{name}.b"), &[cout], bound);
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let bound = 1.0 / ((cout * k * k * k) as f64).sqrt();
        self.uniform(format!("{name}.w"), &[cin, cout, k, k, k], bound);
        self.uniform(format!("{name}.b"), &[cout], bound);
    }

    fn res_blocks(&mut self, prefix: &str, c: usize, n: usize) {
        for i in 0..n {
            self.conv(&format!("{prefix}.res{i}.c1"), c, c, 3);
            self.conv(&format!("{prefix}.res{i}.c2"), c, c, 3);
        }
    }
}

/// Freshly initialized generator weights (uniform ±1/√fan_in).
pub fn init_generator<T: Real>(cfg: &GeneratorConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let [e1, e2] = cfg.enc_channels;
    let s = cfg.sft_channels;
    b.conv("enc1", cfg.in_channels, e1, 3);
    b.conv("enc2", e1, e2, 3);
    if cfg.use_frequency_branch {
        b.conv("sft.freq.in", 8 * e2, s, 3);
        b.res_blocks("sft.freq", s, cfg.n_res_blocks);
        b.conv("sft.freq.out", s, 8 * e2, 3);
    }
    b.conv("sft.spat.down", e2, s, 3);
    b.res_blocks("sft.spat", s, cfg.n_res_blocks);
    b.deconv("sft.spat.up", s, e2, 3);
    let fuse_in = if cfg.use_frequency_branch { 2 * e2 } else { e2 };
    b.conv("sft.fuse", fuse_in, s, 3);
    b.deconv("dec.up", s, s, 3);
    b.conv("dec.out", s, cfg.in_channels, 3);
    b.conv("head2.out", s, cfg.in_channels, 3);
    b.conv("head3.down", s, s, 3);
    b.conv("head3.out", s, cfg.in_channels, 3);
    Ok(b.store)
}

pub fn init_discriminator<T: Real>(cfg: &DiscriminatorConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let ch = &cfg.channels;
    let k = cfg.kernel;
    let mut cin = cfg.in_channels;
    for (i, &c) in ch.iter().enumerate() {
        b.conv(&format!("down{i}"), cin, c, k);
        cin = c;
    }
    // up stages i = n-2 … 0 restore the resolution of down{i} and concatenate it
    for i in (0..ch.len() - 1).rev() {
        b.deconv(&format!("up{i}"), cin, ch[i], k);
        cin = 2 * ch[i];
    }
    b.deconv("up_top", cin, ch[0], k);
    b.conv("head3", 2 * ch[1], 1, 1);
    b.conv("head2", 2 * ch[0], 1, 1);
    b.conv("head1", ch[0], 1, 1);
    Ok(b.store)
}

fn conv<'t, T: Real>(x: Var<'t, T>, p: &Bound<'t, T>, name: &str, stride: usize, pad: usize) -> Result<Var<'t, T>> {
    x.conv3d(p.var(&format!("{name}.w"))?, Some(p.var(&format!("{name}.b"))?), stride, pad)
}

fn deconv<'t, T: Real>(
    x: Var<'t, T>,
    p: &Bound<'t, T>,
    name: &str,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Var<'t, T>> {
    x.conv_transpose3d(p.var(&format!("{name}.w"))?, Some(p.var(&format!("{name}.b"))?), stride, pad, out_pad)
}

fn conv_in_relu<'t, T: Real>(x: Var<'t, T>, p: &Bound<'t, T>, name: &str, stride: usize) -> Result<Var<'t, T>> {
    Ok(conv(x, p, name, stride, 1)?.instance_norm(IN_EPS).relu())
}

/// `x + IN(conv(ReLU(IN(conv(x)))))` with 3³ kernels.
pub fn residual_block<'t, T: Real>(x: Var<'t, T>, p: &Bound<'t, T>, name: &str) -> Result<Var<'t, T>> {
    let h = conv_in_relu(x, p, &format!("{name}.c1"), 1)?;
    let h = conv(h, p, &format!("{name}.c2"), 1, 1)?.instance_norm(IN_EPS);
    if h.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "residual block {name}: {:?} -> {:?}",
            x.shape(),
            h.shape()
        )));
    }
    Ok(x.add(h))
}

fn dropout<'t, T: Real, R: RngCore + ?Sized>(x: Var<'t, T>, keep: f64, rng: Option<&mut R>) -> Var<'t, T> {
    match rng {
        Some(rng) if keep < 1.0 => {
            let scale = T::from_f64_lossy(1.0 / keep);
            let mask = Tensor::from_fn(&x.shape(), |_| if rng.random_bool(keep) { scale } else { T::zero() });
            x.dropout_mask(&mask)
        }
        _ => x,
    }
}

fn check_range<T: Real>(x: &Tensor<T>) -> Result<()> {
    let lim = 1.0 + RANGE_SLACK;
    if x.data().iter().any(|v| !(v.to_f64().unwrap().abs() <= lim)) {
        return Err(Error::InvalidRange);
    }
    Ok(())
}

/// Spatial/frequency transform block: `[enc2, d³] -> [sft, d³]`.
pub fn sft_forward<'t, T: Real>(
    x: Var<'t, T>,
    cfg: &GeneratorConfig,
    p: &Bound<'t, T>,
    kernels: &Rc<WaveletKernels<T>>,
) -> Result<Var<'t, T>> {
    let e2 = cfg.enc_channels[1];
    let shape = x.shape();
    if shape.len() != 4 || shape[0] != e2 {
        return Err(Error::ShapeMismatch(format!("SFT input {shape:?}, expected {e2} channels")));
    }
    if shape[1..].iter().any(|n| n % 2 != 0) {
        return Err(Error::ShapeMismatch(format!("SFT input {shape:?} needs even spatial dims")));
    }
    let mut s = conv_in_relu(x, p, "sft.spat.down", 2)?;
    for i in 0..cfg.n_res_blocks {
        s = residual_block(s, p, &format!("sft.spat.res{i}"))?;
    }
    let s = deconv(s, p, "sft.spat.up", 2, 1, 1)?.instance_norm(IN_EPS).relu();
    let fused_in = if cfg.use_frequency_branch {
        let mut f = conv_in_relu(x.dwt3(kernels)?, p, "sft.freq.in", 1)?;
        for i in 0..cfg.n_res_blocks {
            f = residual_block(f, p, &format!("sft.freq.res{i}"))?;
        }
        let f = conv(f, p, "sft.freq.out", 1, 1)?.idwt3(kernels)?;
        Var::concat_channels(&[f, s])?
    } else {
        s
    };
    conv_in_relu(fused_in, p, "sft.fuse", 1)
}

/// Generator pass on a `[in_channels, P, P, P]` patch with `P % 8 == 0`.
/// Dropout masks are drawn from `rng` when given and skipped otherwise.
pub fn generator_forward<'t, T: Real>(
    x: Var<'t, T>,
    cfg: &GeneratorConfig,
    p: &Bound<'t, T>,
    kernels: &Rc<WaveletKernels<T>>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<MultiScale<Var<'t, T>>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[0] != cfg.in_channels || shape[1..].iter().any(|n| *n == 0 || n % 8 != 0) {
        return Err(Error::ShapeMismatch(format!(
            "generator input {shape:?}; expected {} channels and spatial dims divisible by 8",
            cfg.in_channels
        )));
    }
    check_range(&x.value())?;
    let h = conv_in_relu(x, p, "enc1", cfg.enc_strides[0])?;
    let h = conv_in_relu(h, p, "enc2", cfg.enc_strides[1])?;
    let h = dropout(h, cfg.dropout_keep, rng.as_deref_mut());
    let h = sft_forward(h, cfg, p, kernels)?;
    let h = dropout(h, cfg.dropout_keep, rng.as_deref_mut());
    let up = deconv(h, p, "dec.up", 2, 1, 1)?.instance_norm(IN_EPS).relu();
    let s1 = conv(up, p, "dec.out", 1, 1)?.tanh();
    let s2 = conv(h, p, "head2.out", 1, 1)?.tanh();
    let low = conv_in_relu(h, p, "head3.down", 2)?;
    let s3 = conv(low, p, "head3.out", 1, 1)?.tanh();
    Ok(MultiScale { s1, s2, s3 })
}

/// Voxelwise quality maps in `[0, 1]` at full, half and quarter resolution.
pub fn discriminator_forward<'t, T: Real>(
    x: Var<'t, T>,
    cfg: &DiscriminatorConfig,
    p: &Bound<'t, T>,
) -> Result<MultiScale<Var<'t, T>>> {
    let n = cfg.n_levels;
    let div = 1usize << n;
    let shape = x.shape();
    if shape.len() != 4 || shape[0] != cfg.in_channels || shape[1..].iter().any(|d| *d == 0 || d % div != 0) {
        return Err(Error::ShapeMismatch(format!(
            "discriminator input {shape:?}; expected {} channels and spatial dims divisible by {div}",
            cfg.in_channels
        )));
    }
    check_range(&x.value())?;
    let k = cfg.kernel;
    let pad = (k - 2) / 2;
    let mut downs = Vec::with_capacity(n);
    let mut h = x;
    for i in 0..n {
        h = conv(h, p, &format!("down{i}"), 2, pad)?.instance_norm(IN_EPS).relu();
        downs.push(h);
    }
    let mut ups = Vec::new();
    for i in (0..n - 1).rev() {
        let u = deconv(h, p, &format!("up{i}"), 2, pad, 0)?.instance_norm(IN_EPS).relu();
        h = Var::concat_channels(&[u, downs[i]])?;
        ups.push(h);
    }
    let top = deconv(h, p, "up_top", 2, pad, 0)?.instance_norm(IN_EPS).relu();
    let s3 = conv(ups[ups.len() - 2], p, "head3", 1, 0)?.sigmoid();
    let s2 = conv(ups[ups.len() - 1], p, "head2", 1, 0)?.sigmoid();
    let s1 = conv(top, p, "head1", 1, 0)?.sigmoid();
    Ok(MultiScale { s1, s2, s3 })
}

/// A generator with its weights and fixed wavelet kernels.
#[derive(Clone)]
pub struct Generator<T: Real = f32> {
    pub cfg: GeneratorConfig,
    pub params: ParamStore<T>,
    kernels: Rc<WaveletKernels<T>>,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: GeneratorConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = init_generator::<T>(&cfg, 0)?;
        if !expected.same_layout(&params) {
            return Err(Error::CheckpointMismatch("generator weights do not match config".into()));
        }
        let kernels = Rc::new(WaveletKernels::new(&cfg.filter_bank()));
        Ok(Self { cfg, params, kernels })
    }

    pub fn init(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        let params = init_generator(&cfg, seed)?;
        Self::new(cfg, params)
    }

    pub fn kernels(&self) -> &Rc<WaveletKernels<T>> {
        &self.kernels
    }

    pub fn forward<'t>(
        &self,
        x: Var<'t, T>,
        p: &Bound<'t, T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<MultiScale<Var<'t, T>>> {
        generator_forward(x, &self.cfg, p, &self.kernels, rng)
    }

    /// Gradient-free pass.
    pub fn infer(&self, x: &Tensor<T>, rng: Option<&mut dyn RngCore>) -> Result<MultiScaleOutput<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(tape.constant(x.clone()), &p, rng)?;
        Ok(out.values())
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Real = f32> {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = init_discriminator::<T>(&cfg, 0)?;
        if !expected.same_layout(&params) {
            return Err(Error::CheckpointMismatch("discriminator weights do not match config".into()));
        }
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let params = init_discriminator(&cfg, seed)?;
        Self::new(cfg, params)
    }

    pub fn forward<'t>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<MultiScale<Var<'t, T>>> {
        discriminator_forward(x, &self.cfg, p)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<MultiScaleOutput<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.forward(tape.constant(x.clone()), &p)?.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_gen(freq: bool) -> GeneratorConfig {
        GeneratorConfig {
            enc_channels: [4, 2],
            sft_channels: 4,
            n_res_blocks: 1,
            use_frequency_branch: freq,
            ..GeneratorConfig::default()
        }
    }

    fn tiny_disc() -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: vec![2, 3, 4],
            ..DiscriminatorConfig::default()
        }
    }

    fn patch<T: Real>(n: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, n, n, n], |_| T::from_f64_lossy(rng.random_range(-0.9..0.9)))
    }

    #[test]
    fn residual_block_zero_weights_is_identity() {
        let tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        for c in ["r.c1", "r.c2"] {
            store.insert(format!("{c}.w"), Tensor::zeros(&[3, 3, 3, 3, 3]));
            store.insert(format!("{c}.b"), Tensor::zeros(&[3]));
        }
        let p = store.bind(&tape, false);
        let x = Tensor::from_fn(&[3, 4, 4, 4], |i| (i as f64 * 0.37).sin());
        let y = residual_block(tape.constant(x.clone()), &p, "r").unwrap();
        assert_eq!(y.value().data(), x.data());
    }

    #[test]
    fn generator_shapes_and_determinism() {
        let g = Generator::<f32>::init(tiny_gen(true), 1).unwrap();
        let x = patch(16, 2);
        let a = g.infer(&x, None).unwrap();
        let b = g.infer(&x, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.s1.shape(), &[1, 16, 16, 16]);
        assert_eq!(a.s2.shape(), &[1, 8, 8, 8]);
        assert_eq!(a.s3.shape(), &[1, 4, 4, 4]);
        for t in a.into_array() {
            assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dropout_makes_passes_stochastic() {
        let g = Generator::<f32>::init(tiny_gen(true), 1).unwrap();
        let x = patch(16, 2);
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = g.infer(&x, Some(&mut r1)).unwrap();
        let b = g.infer(&x, Some(&mut r2)).unwrap();
        assert!(a.s1.max_abs_diff(&b.s1) > 0.0);
    }

    #[test]
    fn disabled_frequency_branch_has_no_wavelet_weights() {
        let with = init_generator::<f32>(&tiny_gen(true), 0).unwrap();
        let without = init_generator::<f32>(&tiny_gen(false), 0).unwrap();
        assert!(with.iter().any(|(k, _)| k.starts_with("sft.freq")));
        assert!(without.iter().all(|(k, _)| !k.starts_with("sft.freq")));
        let g = Generator::new(tiny_gen(false), without).unwrap();
        assert_eq!(g.infer(&patch(16, 3), None).unwrap().s1.shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn layouts_are_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = init_generator::<f32>(&cfg, 0).unwrap();
        let b = init_generator::<f32>(&cfg, 99).unwrap();
        assert!(a.same_layout(&b));
        assert_ne!(a, b);
        assert_eq!(a, init_generator::<f32>(&cfg, 0).unwrap());
        let d = init_discriminator::<f32>(&DiscriminatorConfig::default(), 0).unwrap();
        assert!(d.same_layout(&init_discriminator(&DiscriminatorConfig::default(), 5).unwrap()));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let g = Generator::<f64>::init(tiny_gen(true), 4).unwrap();
        let tape = Tape::new();
        let p = g.params.bind(&tape, true);
        let out = g.forward(tape.constant(patch(16, 5)), &p, None).unwrap();
        let loss = Var::weighted_sum(&[(1.0, out.s1.mean()), (1.0, out.s2.mean()), (1.0, out.s3.mean())]).unwrap();
        assert!(p.unreached(&tape.backward(loss)).is_empty());

        let d = Discriminator::<f64>::init(tiny_disc(), 4).unwrap();
        let tape = Tape::new();
        let p = d.params.bind(&tape, true);
        let out = d.forward(tape.constant(patch(8, 5)), &p).unwrap();
        let loss = Var::weighted_sum(&[(1.0, out.s1.mean()), (1.0, out.s2.mean()), (1.0, out.s3.mean())]).unwrap();
        assert!(p.unreached(&tape.backward(loss)).is_empty());
    }

    #[test]
    fn discriminator_shapes_and_range() {
        let d = Discriminator::<f32>::init(tiny_disc(), 0).unwrap();
        let out = d.infer(&patch(16, 1)).unwrap();
        assert_eq!(out.s1.shape(), &[1, 16, 16, 16]);
        assert_eq!(out.s2.shape(), &[1, 8, 8, 8]);
        assert_eq!(out.s3.shape(), &[1, 4, 4, 4]);
        for t in out.into_array() {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn discriminator_input_gradient_matches_differences() {
        let d = Discriminator::<f64>::init(tiny_disc(), 7).unwrap();
        let x0 = patch::<f64>(8, 8);
        let f = |x: &Tensor<f64>| d.infer(x).unwrap().s1.mean_f64();
        let tape = Tape::new();
        let p = d.params.bind(&tape, false);
        let xv = tape.leaf(x0.clone(), true);
        let loss = d.forward(xv, &p).unwrap().s1.mean();
        let g = tape.backward(loss).get_or_zeros(xv);
        let eps = 1e-5;
        for i in (0..x0.len()).step_by(37) {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            let an = g.data()[i];
            let scale = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / scale < 1e-3, "voxel {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn out_of_range_and_bad_shapes_rejected() {
        let g = Generator::<f32>::init(tiny_gen(true), 0).unwrap();
        let mut x = patch::<f32>(16, 0);
        x.data_mut()[0] = 1.5;
        assert!(matches!(g.infer(&x, None), Err(Error::InvalidRange)));
        assert!(matches!(g.infer(&patch(12, 0), None), Err(Error::ShapeMismatch(_))));
        let d = Discriminator::<f32>::init(tiny_disc(), 0).unwrap();
        assert!(matches!(d.infer(&patch(12, 0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn archive_round_trip_is_bitwise() {
        let p = init_generator::<f32>(&tiny_gen(true), 3).unwrap();
        let bytes = encode_archive(p.as_map());
        let back = ParamStore::from_map(decode_archive(&bytes).unwrap());
        assert_eq!(back, p);
        assert!(decode_archive(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_archive(b"NOPE").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig { n_res_blocks: 0, ..tiny_gen(true) }.validate().is_err());
        assert!(GeneratorConfig { dropout_keep: 0.0, ..tiny_gen(true) }.validate().is_err());
        assert!(DiscriminatorConfig { n_levels: 2, ..tiny_disc() }.validate().is_err());
    }
}
