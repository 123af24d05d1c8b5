//! Paired pretraining followed by alternating adversarial training of both
//! translation directions, with per-epoch checkpoints and a JSON-lines log.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{derived_rng, RunConfig};
use crate::error::{Error, Result};
use crate::inference::load_prepared;
use crate::losses::{discriminator_bce, total_objective, DirectionTerms, LossReport, Objective};
use crate::networks::{read_archive, write_archive, Bound, Discriminator, Generator, MultiScale, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::patch::{extract_patches, plan_patch_offsets, PatchGrid};
use crate::phantom::Manifest;
use crate::tensor::Tensor;
use crate::volume_io::Volume;

pub const CHECKPOINT_FORMAT: &str = "mgan-checkpoint/1";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const NONFINITE_DUMP: &str = "nonfinite_dump.json";

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adversarial,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adversarial => "adversarial",
        }
    }
}

/// Losses of one update step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub phase: Phase,
    pub generator: LossReport,
    pub discriminator: Option<LossReport>,
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub term: String,
    pub scale: u8,
    pub value: f64,
}

impl StepReport {
    pub fn records(&self, step: u64, epoch: usize) -> Vec<LogRecord> {
        let rec = |term: &str, scale: u8, value: f64| LogRecord {
            step,
            epoch,
            phase: self.phase,
            term: term.to_string(),
            scale,
            value,
        };
        let mut out = Vec::new();
        if let Some(d) = &self.discriminator {
            out.extend(d.entries.iter().map(|e| rec(&e.term, e.scale, e.value)));
            out.push(rec("total_d", 0, d.total));
        }
        out.extend(self.generator.entries.iter().map(|e| rec(&e.term, e.scale, e.value)));
        out.push(rec("total_g", 0, self.generator.total));
        out
    }
}

/// Both generator/discriminator pairs, their optimizers and run counters.
/// `g_a` maps domain a to b and is judged by `d_b`; `g_b` the reverse.
#[derive(Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub g_a: Generator,
    pub g_b: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub manifest_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub manifest_digest: String,
    pub opt_g_t: u64,
    pub opt_d_t: u64,
    pub config: RunConfig,
}

fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.train.lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.adam_eps,
    }
}

const G_GROUPS: [&str; 2] = ["g_a", "g_b"];
const D_GROUPS: [&str; 2] = ["d_a", "d_b"];

fn prefixed(out: &mut BTreeMap<String, Tensor>, prefix: &str, store: &ParamStore) {
    for (k, v) in store.iter() {
        out.insert(format!("{prefix}/{k}"), v.clone());
    }
}

fn take_prefixed(map: &BTreeMap<String, Tensor>, prefix: &str) -> ParamStore {
    let p = format!("{prefix}/");
    ParamStore::from_map(
        map.iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
            .collect(),
    )
}

impl TrainState {
    pub fn new(config: RunConfig, manifest_digest: String) -> Result<Self> {
        config.validate()?;
        let mut seeds = derived_rng(config.seed, STREAM_INIT);
        let g_a = Generator::init(config.generator.clone(), seeds.next_u64())?;
        let g_b = Generator::init(config.generator.clone(), seeds.next_u64())?;
        let d_a = Discriminator::init(config.discriminator.clone(), seeds.next_u64())?;
        let d_b = Discriminator::init(config.discriminator.clone(), seeds.next_u64())?;
        let opt_g = Adam::new(adam_config(&config), &[&g_a.params, &g_b.params]);
        let opt_d = Adam::new(adam_config(&config), &[&d_a.params, &d_b.params]);
        Ok(Self {
            config,
            g_a,
            g_b,
            d_a,
            d_b,
            opt_g,
            opt_d,
            epoch: 0,
            step: 0,
            manifest_digest,
        })
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            epoch: self.epoch,
            step: self.step,
            seed: self.config.seed,
            manifest_digest: self.manifest_digest.clone(),
            opt_g_t: self.opt_g.t,
            opt_d_t: self.opt_d.t,
            config: self.config.clone(),
        }
    }

    /// Writes `<path>` (tensor archive) and `<path>.json` (sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = BTreeMap::new();
        prefixed(&mut map, "g_a", &self.g_a.params);
        prefixed(&mut map, "g_b", &self.g_b.params);
        prefixed(&mut map, "d_a", &self.d_a.params);
        prefixed(&mut map, "d_b", &self.d_b.params);
        for (opt, name, groups) in [(&self.opt_g, "opt_g", G_GROUPS), (&self.opt_d, "opt_d", D_GROUPS)] {
            for (i, g) in groups.iter().enumerate() {
                prefixed(&mut map, &format!("{name}/m/{g}"), &opt.m[i]);
                prefixed(&mut map, &format!("{name}/v/{g}"), &opt.v[i]);
            }
        }
        write_archive(&map, path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta())?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::CheckpointMismatch(format!("unknown format {:?}", meta.format)));
        }
        let map = read_archive(path)?;
        let cfg = meta.config.clone();
        let g_a = Generator::new(cfg.generator.clone(), take_prefixed(&map, "g_a"))?;
        let g_b = Generator::new(cfg.generator.clone(), take_prefixed(&map, "g_b"))?;
        let d_a = Discriminator::new(cfg.discriminator.clone(), take_prefixed(&map, "d_a"))?;
        let d_b = Discriminator::new(cfg.discriminator.clone(), take_prefixed(&map, "d_b"))?;
        let restore = |name: &str, groups: [&str; 2], params: [&ParamStore; 2], t: u64| -> Result<Adam> {
            let mut opt = Adam::new(adam_config(&cfg), &params);
            opt.t = t;
            for (i, g) in groups.iter().enumerate() {
                let m = take_prefixed(&map, &format!("{name}/m/{g}"));
                let v = take_prefixed(&map, &format!("{name}/v/{g}"));
                if !m.same_layout(params[i]) || !v.same_layout(params[i]) {
                    return Err(Error::CheckpointMismatch(format!("{name} moments for {g} do not match weights")));
                }
                opt.m[i] = m;
                opt.v[i] = v;
            }
            Ok(opt)
        };
        let opt_g = restore("opt_g", G_GROUPS, [&g_a.params, &g_b.params], meta.opt_g_t)?;
        let opt_d = restore("opt_d", D_GROUPS, [&d_a.params, &d_b.params], meta.opt_d_t)?;
        Ok(Self {
            config: cfg,
            g_a,
            g_b,
            d_a,
            d_b,
            opt_g,
            opt_d,
            epoch: meta.epoch,
            step: meta.step,
            manifest_digest: meta.manifest_digest,
        })
    }

    pub fn phase_of_epoch(&self, epoch: usize) -> Phase {
        if epoch < self.config.train.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Adversarial
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.config.train.pretrain_epochs + self.config.train.adversarial_epochs
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Generator graph of one step: translations and cycle reconstructions.
struct GenPass<'t> {
    pa: Bound<'t>,
    pb: Bound<'t>,
    xa: Var<'t>,
    xb: Var<'t>,
    fake_a: MultiScale<Var<'t>>,
    fake_b: MultiScale<Var<'t>>,
    rec_a: Var<'t>,
    rec_b: Var<'t>,
}

fn gen_forward<'t>(tape: &'t Tape, state: &TrainState, xa: &Tensor, xb: &Tensor) -> Result<GenPass<'t>> {
    let pa = state.g_a.params.bind(tape, true);
    let pb = state.g_b.params.bind(tape, true);
    let xa = tape.constant(xa.clone());
    let xb = tape.constant(xb.clone());
    let fake_b = state.g_a.forward(xa, &pa, None)?;
    let fake_a = state.g_b.forward(xb, &pb, None)?;
    let rec_a = state.g_b.forward(fake_b.s1, &pb, None)?.s1;
    let rec_b = state.g_a.forward(fake_a.s1, &pa, None)?.s1;
    Ok(GenPass {
        pa,
        pb,
        xa,
        xb,
        fake_a,
        fake_b,
        rec_a,
        rec_b,
    })
}

fn check_report(report: &LossReport, step: u64, what: &str) -> Result<()> {
    if !report.total.is_finite() || report.entries.iter().any(|e| !e.value.is_finite()) {
        let detail = serde_json::to_string(report).unwrap_or_default();
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what}: {detail}"),
        });
    }
    Ok(())
}

fn check_grads(stores: &[&ParamStore], step: u64, what: &str) -> Result<()> {
    if stores.iter().all(|s| s.all_finite()) {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        step,
        detail: format!("{what}: non-finite gradient"),
    })
}

/// Objective and gradients for both generators; adversarial terms and
/// quality maps come from the current discriminators when `adversarial`.
fn gen_backward(
    tape: &Tape,
    pass: GenPass<'_>,
    state: &TrainState,
    adversarial: bool,
) -> Result<(ParamStore, ParamStore, LossReport)> {
    let target_a = MultiScale::pyramid(&pass.xa.value())?.map(|t| tape.constant(t));
    let target_b = MultiScale::pyramid(&pass.xb.value())?.map(|t| tape.constant(t));
    let (d_fake_b, d_fake_a) = if adversarial {
        let pdb = state.d_b.params.bind(tape, false);
        let pda = state.d_a.params.bind(tape, false);
        (
            Some(state.d_b.forward(pass.fake_b.s1, &pdb)?),
            Some(state.d_a.forward(pass.fake_a.s1, &pda)?),
        )
    } else {
        (None, None)
    };
    let q_b = d_fake_b.map(|d| d.values());
    let q_a = d_fake_a.map(|d| d.values());
    let dirs = [
        DirectionTerms {
            tag: "ab",
            pred: pass.fake_b,
            target: target_b,
            quality: q_b.as_ref(),
            d_fake: d_fake_b,
        },
        DirectionTerms {
            tag: "ba",
            pred: pass.fake_a,
            target: target_a,
            quality: q_a.as_ref(),
            d_fake: d_fake_a,
        },
    ];
    let cycle = Some((pass.xa, pass.rec_a, pass.xb, pass.rec_b));
    let (total, report) = total_objective(&dirs, cycle, &state.config.losses, state.g_a.kernels())?;
    check_report(&report, state.step + 1, "generator objective")?;
    let (ga, gb) = match total {
        Some(t) => {
            let g = tape.backward(t);
            (pass.pa.grads(&g), pass.pb.grads(&g))
        }
        None => (state.g_a.params.zeros_like(), state.g_b.params.zeros_like()),
    };
    Ok((ga, gb, report))
}

/// Generator gradients without applying them (pretrain objective unless `adversarial`).
pub fn generator_gradients(
    state: &TrainState,
    xa: &Tensor,
    xb: &Tensor,
    adversarial: bool,
) -> Result<(ParamStore, ParamStore, LossReport)> {
    let tape = Tape::new();
    let pass = gen_forward(&tape, state, xa, xb)?;
    gen_backward(&tape, pass, state, adversarial)
}

fn apply_generator(state: &mut TrainState, ga: &ParamStore, gb: &ParamStore) -> Result<()> {
    check_grads(&[ga, gb], state.step + 1, "generator")?;
    state
        .opt_g
        .step(&mut [&mut state.g_a.params, &mut state.g_b.params], &[ga, gb])
}

/// Paired update of both generators with quality maps fixed at zero.
pub fn pretrain_step(state: &mut TrainState, xa: &Tensor, xb: &Tensor) -> Result<StepReport> {
    let (ga, gb, report) = generator_gradients(state, xa, xb, false)?;
    apply_generator(state, &ga, &gb)?;
    state.step += 1;
    Ok(StepReport {
        phase: Phase::Pretrain,
        generator: report,
        discriminator: None,
    })
}

/// One update of both discriminators on real patches versus fixed fakes.
pub fn discriminator_update(
    state: &mut TrainState,
    xa: &Tensor,
    xb: &Tensor,
    fake_a: &Tensor,
    fake_b: &Tensor,
) -> Result<LossReport> {
    let tape = Tape::new();
    let pda = state.d_a.params.bind(&tape, true);
    let pdb = state.d_b.params.bind(&tape, true);
    let sw = state.config.losses.scale_weights;
    let mut obj = Objective::default();
    for (tag, d, p, real, fake) in [
        ("adv_d_a", &state.d_a, &pda, xa, fake_a),
        ("adv_d_b", &state.d_b, &pdb, xb, fake_b),
    ] {
        let r = d.forward(tape.constant(real.clone()), p)?.into_array();
        let f = d.forward(tape.constant(fake.clone()), p)?.into_array();
        for s in 0..3 {
            obj.push(tag, s as u8 + 1, sw[s], discriminator_bce(r[s], f[s]));
        }
    }
    let (total, report) = obj.finish()?;
    check_report(&report, state.step + 1, "discriminator objective")?;
    if let Some(t) = total {
        let g = tape.backward(t);
        let (ga, gb) = (pda.grads(&g), pdb.grads(&g));
        check_grads(&[&ga, &gb], state.step + 1, "discriminator")?;
        state
            .opt_d
            .step(&mut [&mut state.d_a.params, &mut state.d_b.params], &[&ga, &gb])?;
    }
    Ok(report)
}

/// Discriminator update on detached fakes, then generator update against the
/// updated discriminators. The generator forward pass is shared by both.
pub fn adversarial_step(state: &mut TrainState, xa: &Tensor, xb: &Tensor) -> Result<StepReport> {
    let tape = Tape::new();
    let pass = gen_forward(&tape, state, xa, xb)?;
    let fake_a = (*pass.fake_a.s1.value()).clone();
    let fake_b = (*pass.fake_b.s1.value()).clone();
    let mut d_report = LossReport::default();
    for _ in 0..state.config.train.d_steps {
        d_report = discriminator_update(state, xa, xb, &fake_a, &fake_b)?;
    }
    let (ga, gb, g_report) = gen_backward(&tape, pass, state, true)?;
    apply_generator(state, &ga, &gb)?;
    state.step += 1;
    Ok(StepReport {
        phase: Phase::Adversarial,
        generator: g_report,
        discriminator: Some(d_report),
    })
}

/// A normalized training pair with its patch grid.
pub struct TrainingPair {
    pub subject: String,
    pub a: Volume,
    pub b: Volume,
    pub grid: PatchGrid,
}

pub fn load_training_pairs(manifest: &Manifest, cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    let pairs = manifest.pairs()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCohort);
    }
    pairs
        .into_iter()
        .map(|(subject, pa, pb)| {
            let a = load_prepared(&pa)?;
            let b = load_prepared(&pb)?;
            if a.dims() != b.dims() {
                return Err(Error::ManifestMismatch(format!(
                    "subject {subject:?}: time points have dims {:?} and {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
            let union: Vec<bool> = match (a.mask(), b.mask()) {
                (Some(ma), Some(mb)) => ma.iter().zip(mb).map(|(x, y)| *x || *y).collect(),
                _ => vec![true; a.len()],
            };
            let t = &cfg.train;
            let grid = plan_patch_offsets(a.dims(), t.patch_size, t.stride, Some(&union), t.min_fg)?;
            Ok(TrainingPair { subject, a, b, grid })
        })
        .collect()
}

fn patch_at(v: &Volume, grid: &PatchGrid, idx: usize) -> Result<Tensor> {
    let one = PatchGrid::new(v.dims(), grid.patch_size(), grid.stride(), vec![grid.offsets()[idx]])?;
    Ok(extract_patches(v, &one)?.remove(0))
}

/// `(pair, patch)` visiting order of `epoch` (0-based), fixed by the seed.
pub fn epoch_order(pairs: &[TrainingPair], seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = pairs
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.grid.len()).map(move |j| (i, j)))
        .collect();
    order.shuffle(&mut derived_rng(seed, STREAM_SHUFFLE + epoch as u64));
    order
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub state: TrainState,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_epoch{epoch:03}.mgck"))
}

/// Fresh run over all patches of all pairs in `manifest`.
pub fn train(manifest: &Manifest, config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let pairs = load_training_pairs(manifest, config)?;
    let state = TrainState::new(config.clone(), manifest.digest())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    run_epochs(state, &pairs, out_dir)
}

/// Continues from a checkpoint; the log in `out_dir` keeps only records up to
/// the checkpoint's epoch.
pub fn resume(checkpoint: &Path, manifest: &Manifest, out_dir: &Path) -> Result<TrainOutcome> {
    let state = TrainState::load(checkpoint)?;
    if state.manifest_digest != manifest.digest() {
        return Err(Error::ManifestMismatch(format!(
            "checkpoint was trained on manifest {}, got {}",
            state.manifest_digest,
            manifest.digest()
        )));
    }
    let pairs = load_training_pairs(manifest, &state.config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let kept: Vec<String> = match File::open(&log_path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .map_while(|l| l.ok())
            .filter(|l| {
                serde_json::from_str::<LogRecord>(l)
                    .map(|r| r.epoch <= state.epoch)
                    .unwrap_or(false)
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    run_epochs(state, &pairs, out_dir)
}

fn run_epochs(mut state: TrainState, pairs: &[TrainingPair], out_dir: &Path) -> Result<TrainOutcome> {
    let log_path = out_dir.join(LOG_FILE);
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut last = None;
    while state.epoch < state.total_epochs() {
        let epoch = state.epoch;
        let phase = state.phase_of_epoch(epoch);
        let order = epoch_order(pairs, state.config.seed, epoch);
        log::info!("epoch {}/{} ({}) over {} patches", epoch + 1, state.total_epochs(), phase.name(), order.len());
        for (pi, oi) in order {
            let pair = &pairs[pi];
            let xa = patch_at(&pair.a, &pair.grid, oi)?;
            let xb = patch_at(&pair.b, &pair.grid, oi)?;
            let result = match phase {
                Phase::Pretrain => pretrain_step(&mut state, &xa, &xb),
                Phase::Adversarial => adversarial_step(&mut state, &xa, &xb),
            };
            let report = match result {
                Ok(r) => r,
                Err(e) => {
                    if let Error::NonFiniteLoss { step, detail } = &e {
                        let dump = serde_json::json!({
                            "step": step,
                            "epoch": epoch + 1,
                            "phase": phase,
                            "subject": pair.subject,
                            "offset": pair.grid.offsets()[oi],
                            "detail": detail,
                        });
                        let path = out_dir.join(NONFINITE_DUMP);
                        fs::write(&path, dump.to_string()).map_err(|e| Error::io(&path, e))?;
                    }
                    return Err(e);
                }
            };
            for r in report.records(state.step, epoch + 1) {
                serde_json::to_writer(&mut log, &r)?;
                log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        state.epoch += 1;
        let ckpt = checkpoint_path(out_dir, state.epoch);
        state.save(&ckpt)?;
        last = Some(ckpt);
    }
    let final_checkpoint = match last {
        Some(p) => p,
        None => {
            let p = checkpoint_path(out_dir, state.epoch);
            state.save(&p)?;
            p
        }
    };
    Ok(TrainOutcome {
        final_checkpoint,
        log_path,
        state,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}
