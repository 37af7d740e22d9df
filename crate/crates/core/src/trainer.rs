//! The collaborative training loop: one shared-weight student seen by source
//! and target inputs, an EMA teacher, and two domain discriminators.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    pixel_augment, sample_spatial_transform_with, PixelAugmentConfig, SpatialTransform, MAX_SHIFT,
};
use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::data::{LabeledDataset, PairedBatch, PairedBatches, UnlabeledDataset};
use crate::discriminator::{Discriminator, DiscriminatorCache, DiscriminatorConfig, OutputMode};
use crate::ema::{ema_update, init_teacher, EmaSchedule};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss_grad, consistency_mse_grad, dice_loss_grad, domain_classification_loss_grad,
    total_loss, AdversarialForm, LossReport, LossWeights,
};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ParamGrads, ParameterSet};
use crate::persistence;
use crate::seed;
use crate::tensor::{Tensor3, NUM_CLASSES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Cfea,
    /// Supervised training on source data only; every adaptation weight is zero.
    SourceOnly,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfea" => Ok(TrainMode::Cfea),
            "source-only" => Ok(TrainMode::SourceOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected cfea or source-only)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Cfea => "cfea",
            TrainMode::SourceOnly => "source-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub batch_size: usize,
    pub total_iterations: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub adversarial_form: AdversarialForm,
    /// Largest translation of the consistency transform, in input pixels.
    pub max_shift: i32,
    pub loss_weights: LossWeights,
    pub ema_schedule: EmaSchedule,
    pub adam: AdamConfig,
    pub pixel_augment: PixelAugmentConfig,
    pub backbone: BackboneConfig,
    pub disc_enc: DiscriminatorConfig,
    pub disc_dec: DiscriminatorConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            mode: TrainMode::Cfea,
            seed: 0,
            batch_size: 4,
            total_iterations: 2000,
            checkpoint_every: 500,
            lr_seg: 1e-3,
            lr_disc: 1e-4,
            adversarial_form: AdversarialForm::NonSaturating,
            max_shift: MAX_SHIFT,
            loss_weights: LossWeights::default(),
            ema_schedule: EmaSchedule::default(),
            adam: AdamConfig::default(),
            pixel_augment: PixelAugmentConfig::default(),
            disc_enc: DiscriminatorConfig {
                input_channels: backbone.feature_channels(),
                width: 64,
                strided_layers: 2,
                output_mode: OutputMode::PatchMap,
            },
            disc_dec: DiscriminatorConfig {
                input_channels: NUM_CLASSES,
                ..DiscriminatorConfig::default()
            },
            backbone,
        }
    }
}

impl TrainingConfig {
    /// Copy with discriminator input channels derived from the backbone.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.disc_enc.input_channels = c.backbone.feature_channels();
        c.disc_dec.input_channels = NUM_CLASSES;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_seg > 0.0 && self.lr_seg.is_finite()) {
            return Err(Error::Config(format!("lr_seg = {} must be positive", self.lr_seg)));
        }
        if !(self.lr_disc > 0.0 && self.lr_disc.is_finite()) {
            return Err(Error::Config(format!("lr_disc = {} must be positive", self.lr_disc)));
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0..=MAX_SHIFT).contains(&self.max_shift) {
            return Err(Error::Config(format!("max_shift must lie in 0..={MAX_SHIFT}")));
        }
        self.loss_weights.validate()?;
        self.adam.validate()?;
        self.pixel_augment.validate()?;
        self.backbone.validate()?;
        let n = self.normalized();
        for (name, d, side) in [
            ("disc_enc", &n.disc_enc, n.backbone.feature_size()),
            ("disc_dec", &n.disc_dec, n.backbone.input_size),
        ] {
            d.validate()?;
            if side >> d.strided_layers == 0 {
                return Err(Error::Config(format!(
                    "{name}: {} stride-2 layers leave no output on a {side}x{side} input",
                    d.strided_layers
                )));
            }
        }
        Ok(())
    }

    /// Loss weights in force for the configured mode.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            TrainMode::Cfea => self.loss_weights.clone(),
            TrainMode::SourceOnly => self.loss_weights.source_only(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("training config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Digest of every setting that shapes the trajectory. Run length
    /// (`total_iterations`, `checkpoint_every`) is excluded so a run can be
    /// extended on resume.
    pub fn hash(&self) -> u64 {
        let mut c = self.normalized();
        c.total_iterations = 0;
        c.checkpoint_every = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Layer plans for the configured networks.
#[derive(Clone, Debug)]
pub struct Networks {
    pub backbone: Backbone,
    pub disc_enc: Discriminator,
    pub disc_dec: Discriminator,
}

impl Networks {
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        let c = config.normalized();
        Ok(Self {
            backbone: Backbone::new(c.backbone)?,
            disc_enc: Discriminator::new(c.disc_enc)?,
            disc_dec: Discriminator::new(c.disc_dec)?,
        })
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainingConfig,
    /// Shared weights of the source and target student passes.
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub disc_enc: ParameterSet,
    pub disc_dec: ParameterSet,
    pub opt_student: AdamState,
    pub opt_disc_enc: AdamState,
    pub opt_disc_dec: AdamState,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    nets: Arc<Networks>,
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.student.values_bit_equal(&o.student)
            && self.teacher.values_bit_equal(&o.teacher)
            && self.disc_enc.values_bit_equal(&o.disc_enc)
            && self.disc_dec.values_bit_equal(&o.disc_dec)
            && bits_equal(&self.opt_student, &o.opt_student)
            && bits_equal(&self.opt_disc_enc, &o.opt_disc_enc)
            && bits_equal(&self.opt_disc_dec, &o.opt_disc_dec)
            && self.iteration == o.iteration
            && self.rng == o.rng
    }
}

fn bits_equal(a: &AdamState, b: &AdamState) -> bool {
    let eq = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
        x.len() == y.len()
            && x.iter().zip(y).all(|(p, q)| {
                p.len() == q.len() && p.iter().zip(q).all(|(u, v)| u.to_bits() == v.to_bits())
            })
    };
    a.step == b.step && eq(&a.m, &b.m) && eq(&a.v, &b.v)
}

const INIT_TAG: u64 = 0x1A17;
const RNG_TAG: u64 = 0x5EED;
const BATCH_TAG: u64 = 0xBA7C;

impl TrainState {
    /// Fresh networks and optimizer moments, all derived from `config.seed`.
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let config = config.normalized();
        let nets = Arc::new(Networks::new(&config)?);
        let s = config.seed;
        let student = Backbone::init(&config.backbone, seed::derive(s, &[INIT_TAG, 0]))?;
        let disc_enc = Discriminator::init(&config.disc_enc, seed::derive(s, &[INIT_TAG, 1]))?;
        let disc_dec = Discriminator::init(&config.disc_dec, seed::derive(s, &[INIT_TAG, 2]))?;
        Ok(Self {
            teacher: init_teacher(&student),
            opt_student: AdamState::new(&student),
            opt_disc_enc: AdamState::new(&disc_enc),
            opt_disc_dec: AdamState::new(&disc_dec),
            student,
            disc_enc,
            disc_dec,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed::derive(s, &[RNG_TAG])),
            config,
            nets,
        })
    }

    /// Reassembles a state from stored parts, checking every structure.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: TrainingConfig,
        student: ParameterSet,
        teacher: ParameterSet,
        disc_enc: ParameterSet,
        disc_dec: ParameterSet,
        opts: [AdamState; 3],
        iteration: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let config = config.normalized();
        let nets = Arc::new(Networks::new(&config)?);
        nets.backbone.check_params(&student)?;
        nets.backbone.check_params(&teacher)?;
        nets.disc_enc.check_params(&disc_enc)?;
        nets.disc_dec.check_params(&disc_dec)?;
        let [opt_student, opt_disc_enc, opt_disc_dec] = opts;
        if !(opt_student.matches(&student)
            && opt_disc_enc.matches(&disc_enc)
            && opt_disc_dec.matches(&disc_dec))
        {
            return Err(Error::Structure("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            config,
            student,
            teacher,
            disc_enc,
            disc_dec,
            opt_student,
            opt_disc_enc,
            opt_disc_dec,
            iteration,
            rng,
            nets,
        })
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            disc_enc: self.disc_enc.clone(),
            disc_dec: self.disc_dec.clone(),
        }
    }
}

/// Copies of the four parameter sets at one point of a step.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub disc_enc: ParameterSet,
    pub disc_dec: ParameterSet,
}

/// Parameter snapshots around the sub-steps of one iteration.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub before: Snapshot,
    pub after_seg: Snapshot,
    pub after_disc: Snapshot,
    /// Gradient the discriminator step delivered to the student weights.
    pub disc_step_student_grads: ParamGrads,
    pub transforms: Vec<SpatialTransform>,
}

/// Per-sample randomness of one iteration.
#[derive(Clone, Copy, Debug)]
struct Draw {
    transform: SpatialTransform,
    student_aug: u64,
    teacher_aug: u64,
}

struct SourcePass {
    cache: BackboneCache,
    enc: Option<DiscriminatorCache>,
    dec: Option<DiscriminatorCache>,
}

struct TargetPass {
    cache: BackboneCache,
    teacher_feature: Tensor3,
    teacher_prob: Tensor3,
    enc: DiscriminatorCache,
    dec: DiscriminatorCache,
}

/// Restricts a translation to whole cells of the feature grid so that the
/// same transform acts exactly on input and bottleneck resolution.
fn snap_to_grid(t: SpatialTransform, factor: usize) -> SpatialTransform {
    let s = t.scaled(factor);
    let f = factor as i32;
    SpatialTransform {
        shift: (s.shift.0 * f, s.shift.1 * f),
        ..t
    }
}

fn split_by<'a>(flat: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    let mut off = 0;
    for &l in lens {
        out.push(&flat[off..off + l]);
        off += l;
    }
    out
}

fn sum_grads(template: &ParameterSet, parts: Vec<ParamGrads>) -> ParamGrads {
    let mut g = template.zero_grads();
    for p in &parts {
        g.add_assign(p);
    }
    g
}

/// One training iteration; see [`train_step_traced`].
pub fn train_step(state: &mut TrainState, batch: &PairedBatch) -> Result<LossReport> {
    Ok(run_step(state, batch, false)?.0)
}

/// Like [`train_step`], also returning parameter snapshots around the
/// segmentation and discriminator updates.
pub fn train_step_traced(
    state: &mut TrainState,
    batch: &PairedBatch,
) -> Result<(LossReport, StepTrace)> {
    let (r, t) = run_step(state, batch, true)?;
    Ok((r, t.expect("trace requested")))
}

fn run_step(
    state: &mut TrainState,
    batch: &PairedBatch,
    trace: bool,
) -> Result<(LossReport, Option<StepTrace>)> {
    let cfg = state.config.clone();
    let w = cfg.effective_weights();
    let nets = state.nets.clone();
    let bb = &nets.backbone;
    let ns = batch.source_images.len();
    if ns == 0 || batch.source_masks.len() != ns {
        return Err(Error::Input("batch needs source images with one mask each".into()));
    }
    let adapt = cfg.mode == TrainMode::Cfea;
    let nt = if adapt { batch.target_images.len() } else { 0 };
    if adapt && nt == 0 {
        return Err(Error::Input("adaptation step without target images".into()));
    }
    let before = trace.then(|| state.snapshot());

    // (1) per-sample transforms and augmentation seeds
    let factor = bb.config().downsample_factor();
    let draws: Vec<Draw> = (0..nt)
        .map(|_| {
            let t = sample_spatial_transform_with(state.rng.next_u64(), cfg.max_shift);
            Draw {
                transform: snap_to_grid(t, factor),
                student_aug: state.rng.next_u64(),
                teacher_aug: state.rng.next_u64(),
            }
        })
        .collect();

    // (2) forward passes
    let student = &state.student;
    let teacher = &state.teacher;
    let (denc, ddec) = (&state.disc_enc, &state.disc_dec);
    let src: Vec<SourcePass> = batch
        .source_images
        .par_iter()
        .map(|img| -> Result<SourcePass> {
            let cache = bb.forward_train(student, img.tensor())?;
            let (enc, dec) = if adapt {
                (
                    Some(nets.disc_enc.forward_train(denc, cache.feature())?),
                    Some(nets.disc_dec.forward_train(ddec, cache.prob())?),
                )
            } else {
                (None, None)
            };
            Ok(SourcePass { cache, enc, dec })
        })
        .collect::<Result<_>>()?;
    let tgt: Vec<TargetPass> = batch.target_images[..nt]
        .par_iter()
        .zip(&draws)
        .map(|(img, d)| -> Result<TargetPass> {
            let s_in = pixel_augment(img, &cfg.pixel_augment, d.student_aug);
            let s_in = d.transform.apply_tensor(s_in.tensor())?;
            let cache = bb.forward_train(student, &s_in)?;
            let t_in = pixel_augment(img, &cfg.pixel_augment, d.teacher_aug);
            let (tf, tp) = bb.forward_train(teacher, t_in.tensor())?.into_outputs();
            let teacher_feature = d.transform.scaled(factor).apply_tensor(&tf)?;
            let teacher_prob = d.transform.apply_tensor(&tp)?;
            let enc = nets.disc_enc.forward_train(denc, cache.feature())?;
            let dec = nets.disc_dec.forward_train(ddec, cache.prob())?;
            Ok(TargetPass {
                cache,
                teacher_feature,
                teacher_prob,
                enc,
                dec,
            })
        })
        .collect::<Result<_>>()?;

    // (3) segmentation step
    let inv_s = 1.0 / ns as f64;
    let mut seg_grads = Vec::with_capacity(ns);
    let mut seg = 0.0;
    for (p, m) in src.iter().zip(&batch.source_masks) {
        let (l, mut g) = dice_loss_grad(p.cache.prob(), m)?;
        seg += l * inv_s;
        g.scale(inv_s);
        seg_grads.push(g);
    }

    let adv = |pick: fn(&SourcePass) -> &DiscriminatorCache| -> (f64, Vec<Vec<f64>>) {
        let lens: Vec<usize> = src.iter().map(|p| pick(p).scores().len()).collect();
        let flat: Vec<f64> = src.iter().flat_map(|p| pick(p).scores().to_vec()).collect();
        let (l, g) = adversarial_loss_grad(&flat, cfg.adversarial_form);
        (l, split_by(&g, &lens).into_iter().map(<[f64]>::to_vec).collect())
    };
    let (adv_enc, adv_enc_g, adv_dec, adv_dec_g) = if adapt {
        let (a, ag) = adv(|p| p.enc.as_ref().expect("adapting"));
        let (b, bg) = adv(|p| p.dec.as_ref().expect("adapting"));
        (a, ag, b, bg)
    } else {
        (0.0, Vec::new(), 0.0, Vec::new())
    };

    let inv_t = 1.0 / nt.max(1) as f64;
    let mut mse_enc = 0.0;
    let mut mse_dec = 0.0;
    let mut mse_grads = Vec::with_capacity(nt);
    for p in &tgt {
        let (le, mut ge) = consistency_mse_grad(p.cache.feature(), &p.teacher_feature)?;
        let (ld, mut gd) = consistency_mse_grad(p.cache.prob(), &p.teacher_prob)?;
        mse_enc += le * inv_t;
        mse_dec += ld * inv_t;
        ge.scale(w.lambda_mse_enc * inv_t);
        gd.scale(w.lambda_mse_dec * inv_t);
        mse_grads.push((ge, gd));
    }

    let mut report = LossReport {
        seg,
        adv_enc,
        adv_dec,
        mse_enc,
        mse_dec,
        ..LossReport::default()
    };
    report.total = total_loss(&report.components(), &w)?;

    let student_parts: Vec<ParamGrads> = src
        .par_iter()
        .zip(seg_grads.into_par_iter())
        .enumerate()
        .map(|(i, (p, mut d_prob))| {
            let mut d_feat = None;
            if adapt && w.lambda_adv_enc > 0.0 {
                let enc = p.enc.as_ref().expect("adapting");
                let mut g = nets
                    .disc_enc
                    .backward(denc, enc, &adv_enc_g[i], None, true)
                    .expect("input gradient requested");
                g.scale(w.lambda_adv_enc);
                d_feat = Some(g);
            }
            if adapt && w.lambda_adv_dec > 0.0 {
                let dec = p.dec.as_ref().expect("adapting");
                let mut g = nets
                    .disc_dec
                    .backward(ddec, dec, &adv_dec_g[i], None, true)
                    .expect("input gradient requested");
                g.scale(w.lambda_adv_dec);
                d_prob.add_assign(&g);
            }
            let mut grads = student.zero_grads();
            bb.backward(student, &p.cache, d_feat.as_ref(), Some(&d_prob), &mut grads);
            grads
        })
        .chain(tgt.par_iter().zip(mse_grads.into_par_iter()).map(|(p, (ge, gd))| {
            let mut grads = student.zero_grads();
            let fe = (w.lambda_mse_enc > 0.0).then_some(&ge);
            let fd = (w.lambda_mse_dec > 0.0).then_some(&gd);
            if fe.is_some() || fd.is_some() {
                bb.backward(student, &p.cache, fe, fd, &mut grads);
            }
            grads
        }))
        .collect();
    let student_grads = sum_grads(student, student_parts);
    if !student_grads.all_finite() {
        return Err(Error::NonFinite {
            term: "student gradient".into(),
        });
    }
    state
        .opt_student
        .update(&mut state.student, &student_grads, cfg.lr_seg, &cfg.adam)?;
    let after_seg = trace.then(|| state.snapshot());

    // (4) discriminator step on the detached forward activations
    let disc_step_student_grads = state.student.zero_grads();
    if adapt {
        let (de, dd) = (&state.disc_enc, &state.disc_dec);
        let step = |disc: &Discriminator,
                    params: &ParameterSet,
                    s: Vec<&DiscriminatorCache>,
                    t: Vec<&DiscriminatorCache>|
         -> (f64, ParamGrads) {
            let sl: Vec<usize> = s.iter().map(|c| c.scores().len()).collect();
            let tl: Vec<usize> = t.iter().map(|c| c.scores().len()).collect();
            let sf: Vec<f64> = s.iter().flat_map(|c| c.scores().to_vec()).collect();
            let tf: Vec<f64> = t.iter().flat_map(|c| c.scores().to_vec()).collect();
            let (loss, gt, gs) = domain_classification_loss_grad(&tf, &sf);
            let gs = split_by(&gs, &sl);
            let gt = split_by(&gt, &tl);
            let parts: Vec<ParamGrads> = s
                .par_iter()
                .zip(gs.into_par_iter())
                .chain(t.par_iter().zip(gt.into_par_iter()))
                .map(|(c, g)| {
                    let mut acc = params.zero_grads();
                    disc.backward(params, c, g, Some(&mut acc), false);
                    acc
                })
                .collect();
            (loss, sum_grads(params, parts))
        };
        let (le, ge) = step(
            &nets.disc_enc,
            de,
            src.iter().map(|p| p.enc.as_ref().expect("adapting")).collect(),
            tgt.iter().map(|p| &p.enc).collect(),
        );
        let (ld, gd) = step(
            &nets.disc_dec,
            dd,
            src.iter().map(|p| p.dec.as_ref().expect("adapting")).collect(),
            tgt.iter().map(|p| &p.dec).collect(),
        );
        report.disc_enc = le;
        report.disc_dec = ld;
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite { term: term.into() });
        }
        if !(ge.all_finite() && gd.all_finite()) {
            return Err(Error::NonFinite {
                term: "discriminator gradient".into(),
            });
        }
        state
            .opt_disc_enc
            .update(&mut state.disc_enc, &ge, cfg.lr_disc, &cfg.adam)?;
        state
            .opt_disc_dec
            .update(&mut state.disc_dec, &gd, cfg.lr_disc, &cfg.adam)?;
    }
    let after_disc = trace.then(|| state.snapshot());

    // (5) teacher
    let alpha = cfg.ema_schedule.decay_at(w.ema_decay, state.iteration + 1);
    ema_update(&mut state.teacher, &state.student, alpha)?;
    state.iteration += 1;
    state.student.iteration = state.iteration;

    let trace = trace.then(|| StepTrace {
        before: before.expect("traced"),
        after_seg: after_seg.expect("traced"),
        after_disc: after_disc.expect("traced"),
        disc_step_student_grads,
        transforms: draws.iter().map(|d| d.transform).collect(),
    });
    Ok((report, trace))
}

/// Schedule of paired batches used by [`train`].
pub fn batch_schedule(
    config: &TrainingConfig,
    source_len: usize,
    target_len: usize,
) -> Result<PairedBatches> {
    let t = if config.mode == TrainMode::Cfea { target_len } else { 0 };
    PairedBatches::new(
        source_len,
        t,
        config.batch_size,
        seed::derive(config.seed, &[BATCH_TAG]),
    )
}

/// Artifacts of a finished run.
#[derive(Debug)]
pub struct TrainRun {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.cfea";

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("ckpt_{iteration:08}.cfea"))
}

/// Trains from scratch for `config.total_iterations` steps.
pub fn train(
    config: &TrainingConfig,
    source: &LabeledDataset,
    target: Option<&UnlabeledDataset>,
    out_dir: &Path,
) -> Result<TrainRun> {
    let state = TrainState::new(config)?;
    train_from(state, source, target, out_dir)
}

/// Continues `state` until `state.config.total_iterations`. Log rows past the
/// state's iteration (left by an interrupted run) are discarded first.
pub fn train_from(
    mut state: TrainState,
    source: &LabeledDataset,
    target: Option<&UnlabeledDataset>,
    out_dir: &Path,
) -> Result<TrainRun> {
    let cfg = state.config.clone();
    check_datasets(&cfg, source, target)?;
    let target = if cfg.mode == TrainMode::Cfea { target } else { None };
    if target.is_none() && cfg.mode == TrainMode::Cfea {
        return Err(Error::Input("cfea mode needs target images".into()));
    }
    fs::create_dir_all(out_dir.join("checkpoints"))
        .map_err(|e| Error::io(out_dir.join("checkpoints"), e))?;

    let log_path = out_dir.join(METRICS_FILE);
    let mut log = open_metrics_log(&log_path, state.iteration)?;
    let schedule = batch_schedule(&cfg, source.len(), target.map_or(0, |t| t.len()))?;

    while state.iteration < cfg.total_iterations {
        let batch = schedule.gather(state.iteration, source, target);
        let report = train_step(&mut state, &batch)?;
        writeln!(log, "{}", report.csv_row(state.iteration)).map_err(|e| Error::io(&log_path, e))?;
        if state.iteration.is_multiple_of(100) || state.iteration == 1 {
            log::info!(
                "iter {} seg {:.4} adv {:.4}/{:.4} disc {:.4}/{:.4} mse {:.5}/{:.5}",
                state.iteration,
                report.seg,
                report.adv_enc,
                report.adv_dec,
                report.disc_enc,
                report.disc_dec,
                report.mse_enc,
                report.mse_dec
            );
        }
        if cfg.checkpoint_every > 0
            && state.iteration.is_multiple_of(cfg.checkpoint_every)
            && state.iteration < cfg.total_iterations
        {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            persistence::save_checkpoint(&state, &checkpoint_path(out_dir, state.iteration))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    persistence::save_checkpoint(&state, &final_checkpoint)?;
    Ok(TrainRun {
        state,
        final_checkpoint,
        metrics_log: log_path,
    })
}

fn check_datasets(
    cfg: &TrainingConfig,
    source: &LabeledDataset,
    target: Option<&UnlabeledDataset>,
) -> Result<()> {
    if source.is_empty() {
        return Err(Error::Input("source dataset is empty".into()));
    }
    let s = cfg.backbone.input_size;
    let bad = |h: usize, w: usize| h != s || w != s;
    if source.images.iter().any(|i| bad(i.height(), i.width())) {
        return Err(Error::Input(format!("source images must be {s}x{s}")));
    }
    if cfg.mode == TrainMode::Cfea {
        if let Some(t) = target {
            if t.is_empty() {
                return Err(Error::Input("target dataset is empty".into()));
            }
            if t.images.iter().any(|i| bad(i.height(), i.width())) {
                return Err(Error::Input(format!("target images must be {s}x{s}")));
            }
        }
    }
    Ok(())
}

/// Opens the metrics log for appending after `iteration`, keeping only the
/// header and rows up to that iteration.
fn open_metrics_log(path: &Path, iteration: u64) -> Result<BufWriter<File>> {
    let mut kept = vec![LossReport::CSV_HEADER.to_string()];
    if iteration > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let it: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Input(format!("{}: malformed row {line:?}", path.display())))?;
            if it <= iteration {
                kept.push(line);
            }
        }
    }
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainingConfig::default();
        assert_eq!(TrainingConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn hash_ignores_run_length() {
        let a = TrainingConfig::default();
        let b = TrainingConfig {
            total_iterations: 7,
            checkpoint_every: 3,
            ..a.clone()
        };
        let c = TrainingConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn invalid_rates_rejected() {
        for c in [
            TrainingConfig {
                lr_seg: 0.0,
                ..TrainingConfig::default()
            },
            TrainingConfig {
                lr_disc: -1.0,
                ..TrainingConfig::default()
            },
            TrainingConfig {
                total_iterations: 0,
                ..TrainingConfig::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn snapped_shift_is_a_grid_multiple() {
        for seed in 0..50 {
            let t = snap_to_grid(sample_spatial_transform_with(seed, 8), 4);
            assert_eq!(t.shift.0 % 4, 0);
            assert_eq!(t.shift.1 % 4, 0);
            assert_eq!(t.scaled(4).shift, (t.shift.0 / 4, t.shift.1 / 4));
        }
    }
}
