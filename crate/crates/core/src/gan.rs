//! Adversarial training of teachers and distilled students.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{GeneratorArch, LayerSpec, Shape};
use crate::config::{KdMode, PairedMode, RunConfig};
use crate::data::{gather, Dataset};
use crate::error::{Error, Result};
use crate::macs::output_shape;
use crate::net::{
    apply_stat_updates, disc_forward, discriminator_layers, generate, generator_forward, init_disc_params,
    init_params, sync_scales, Mode, INIT_STD,
};
use crate::tensor::{Adam, ParamStore, Scalar, Tape, Tensor, Var};

const SHUFFLE_SALT: u64 = 0x5348_5546;
const PROJ_SALT: u64 = 0x5052_4f4a;
const EVAL_BATCH: usize = 16;
/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub recon: f64,
    pub dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            recon: 100.0,
            dist: 1.0,
        }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        LossWeights {
            adv: cfg.lambda_adv,
            recon: cfg.lambda_recon,
            dist: cfg.lambda_dist,
        }
    }
}

/// Distillation tap points (indices into the generator's feature list: 0
/// is the head output, `b` the output of block `b - 1`) and loss mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KDConfig {
    pub taps: Vec<usize>,
    pub mode: KdMode,
}

impl KDConfig {
    pub fn new(n_blocks: usize, mode: KdMode) -> Self {
        KDConfig {
            taps: default_taps(n_blocks),
            mode,
        }
    }
}

/// `{0, ⌈n/3⌉, ⌈2n/3⌉, n}`, deduplicated.
pub fn default_taps(n_blocks: usize) -> Vec<usize> {
    let mut t = vec![0, n_blocks.div_ceil(3), (2 * n_blocks).div_ceil(3), n_blocks];
    t.dedup();
    t
}

/// Captured features keyed by tap index.
pub type FeatureSet<T = f32> = BTreeMap<usize, Tensor<T>>;

/// Discriminator loss on real and fake logits:
/// `−log σ(real) − log(1 − σ(fake))`, batch means.
pub fn d_loss<T: Scalar>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let r = tape.bce_with_logits(real_logits, 1.0);
    let f = tape.bce_with_logits(fake_logits, 0.0);
    tape.weighted_sum(&[(r, 1.0), (f, 1.0)])
}

/// Non-saturating generator loss `−log σ(fake)`.
pub fn g_loss<T: Scalar>(tape: &mut Tape<T>, fake_logits: Var) -> Var {
    tape.bce_with_logits(fake_logits, 1.0)
}

/// Both adversarial losses for one batch: `(loss_D, loss_G)`.
pub fn adv_loss<T: Scalar>(
    tape: &mut Tape<T>,
    disc_layers: &[LayerSpec],
    disc: &ParamStore<T>,
    x: Var,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let rl = disc_forward(tape, disc_layers, disc, x, real)?;
    let fl = disc_forward(tape, disc_layers, disc, x, fake)?;
    let ld = d_loss(tape, rl, fl)?;
    let lg = g_loss(tape, fl);
    Ok((ld, lg))
}

fn proj_name(tap: usize) -> String {
    format!("proj.{tap}.weight")
}

/// Learnable 1×1 projections from student to teacher width, one per tap.
pub fn init_projections<T: Scalar>(teacher_ch: usize, student_ch: usize, taps: &[usize], seed: u64) -> ParamStore<T> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROJ_SALT);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut store = ParamStore::new();
    for &t in taps {
        let w = Tensor::from_fn([teacher_ch, student_ch, 1, 1], |_| T::of(normal.sample(&mut rng)));
        store.insert(proj_name(t), w, true);
    }
    store
}

/// Distillation loss. In `ka` mode `−Σ KA(X_t, X_s)`; in `mse` mode
/// `Σ mean((P·X_s − X_t)²)` with learnable projections `P`. Teacher
/// features enter as constants.
pub fn dist_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &FeatureSet<T>,
    student: &BTreeMap<usize, Var>,
    kd: &KDConfig,
    proj: Option<&ParamStore<T>>,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(kd.taps.len());
    for &tap in &kd.taps {
        let t = teacher
            .get(&tap)
            .ok_or_else(|| Error::TapMismatch(format!("teacher has no features at tap {tap}")))?;
        let s = *student
            .get(&tap)
            .ok_or_else(|| Error::TapMismatch(format!("student has no features at tap {tap}")))?;
        let tv = tape.constant(t.clone());
        match kd.mode {
            KdMode::Ka => {
                let k = tape.ka(tv, s)?;
                terms.push((k, -1.0));
            }
            KdMode::Mse => {
                let store = proj.ok_or_else(|| Error::TapMismatch("mse distillation needs projections".into()))?;
                let w = tape.param(store, &proj_name(tap))?;
                let p = tape.conv2d(s, w, None, 1, 0, crate::arch::PadMode::Zero)?;
                let m = tape.mse(p, tv)?;
                terms.push((m, 1.0));
            }
            KdMode::None => {}
        }
    }
    tape.weighted_sum(&terms)
}

/// The student objective `λ_adv·adv + λ_recon·recon + λ_dist·dist`. Without
/// a distillation term the sum has two terms only.
pub fn objective<T: Scalar>(tape: &mut Tape<T>, w: &LossWeights, adv: Var, recon: Var, dist: Option<Var>) -> Result<Var> {
    let mut terms = vec![(adv, w.adv), (recon, w.recon)];
    if let Some(d) = dist {
        terms.push((d, w.dist));
    }
    tape.weighted_sum(&terms)
}

/// Trainable parameters a student run adds beyond the student itself: the
/// projections of `mse` distillation, nothing in the other modes.
pub fn auxiliary_params(teacher: &GeneratorArch, student: &GeneratorArch, cfg: &RunConfig) -> ParamStore {
    if cfg.kd != KdMode::Mse || cfg.lambda_dist == 0.0 {
        return ParamStore::new();
    }
    let taps = default_taps(student.blocks.len());
    let tc = teacher.stream_channels().unwrap_or(0);
    let sc = student.stream_channels().unwrap_or(0);
    init_projections(tc, sc, &taps, cfg.seed)
}

/// A generator with its discriminator.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: GeneratorArch,
    pub gen: ParamStore,
    pub disc_layers: Vec<LayerSpec>,
    pub disc: ParamStore,
}

impl Model {
    /// Freshly initialized generator and discriminator.
    pub fn init(arch: &GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate().map_err(Error::Invalid)?;
        let out = output_shape(arch, arch.input())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = init_params(arch, &mut rng);
        let disc_layers = discriminator_layers(arch.input().c, out.c);
        let disc = init_disc_params(&disc_layers, &mut rng);
        Ok(Model {
            arch: arch.clone(),
            gen,
            disc_layers,
            disc,
        })
    }

    pub fn generate(&self, x: &Tensor) -> Result<Tensor> {
        generate(&self.arch, &self.gen, x).map(|r| r.0)
    }

    /// Eval-mode features at the given taps for every sample of `inputs`.
    pub fn features(&self, inputs: &Tensor, taps: &[usize]) -> Result<FeatureSet> {
        let n = inputs.shape()[0];
        let mut parts: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        let mut shapes = BTreeMap::new();
        for start in (0..n).step_by(EVAL_BATCH) {
            let len = EVAL_BATCH.min(n - start);
            let mut tape = Tape::new();
            let x = tape.constant(inputs.batch_slice(start, len));
            let f = generator_forward(&mut tape, &self.arch, &self.gen, x, Mode::Eval)?;
            for &t in taps {
                let v = *f
                    .features
                    .get(t)
                    .ok_or_else(|| Error::TapMismatch(format!("tap {t} beyond {} blocks", f.features.len() - 1)))?;
                let val = tape.value(v);
                let [_, c, h, w] = val.shape();
                shapes.insert(t, [n, c, h, w]);
                parts.entry(t).or_default().extend_from_slice(val.data());
            }
        }
        Ok(parts
            .into_iter()
            .map(|(t, d)| (t, Tensor::new(shapes[&t], d)))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_recon: f64,
    pub loss_dist: f64,
    pub val_l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l1: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Validation metrics before the first update.
    pub initial: Metrics,
    #[serde(rename = "final")]
    pub final_metrics: Metrics,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        crate::config::canonical_json(self)
    }

    /// JSON with the wall-clock field zeroed, for byte comparisons.
    pub fn to_json_without_timing(&self) -> String {
        TrainReport {
            wall_clock_s: 0.0,
            ..self.clone()
        }
        .to_json()
    }
}

/// Mean absolute error and PSNR (peak-to-peak range 2) of the generator
/// over a dataset, in evaluation mode.
pub fn evaluate(arch: &GeneratorArch, gen: &ParamStore, data: &Dataset) -> Result<Metrics> {
    let n = data.len();
    let (mut abs, mut sq, mut count) = (0.0f64, 0.0f64, 0usize);
    for start in (0..n).step_by(EVAL_BATCH) {
        let len = EVAL_BATCH.min(n - start);
        let x = data.inputs.batch_slice(start, len);
        let y = data.targets.batch_slice(start, len);
        let (out, _) = generate(arch, gen, &x)?;
        if out.shape() != y.shape() {
            return Err(Error::Shape(format!("generator output {:?} vs target {:?}", out.shape(), y.shape())));
        }
        for (&p, &q) in out.data().iter().zip(y.data()) {
            let d = p as f64 - q as f64;
            abs += d.abs();
            sq += d * d;
        }
        count += y.numel();
    }
    let mse = sq / count as f64;
    let psnr = if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (4.0 / mse).log10()).min(PSNR_CAP)
    };
    Ok(Metrics {
        l1: abs / count as f64,
        psnr,
    })
}

struct Distill {
    kd: KDConfig,
    /// Teacher features over the whole training set, per tap.
    feats: FeatureSet,
    proj: Option<(ParamStore, Adam)>,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    weights: LossWeights,
    model: Model,
    opt_g: Adam,
    opt_d: Adam,
    distill: Option<Distill>,
}

#[derive(Default)]
struct StepLosses {
    d: f64,
    g: f64,
    recon: f64,
    dist: f64,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{name} became {v}")))
    }
}

impl Trainer<'_> {
    fn step(&mut self, train: &Dataset, idx: &[usize]) -> Result<StepLosses> {
        let (x, y) = train.gather(idx);
        let m = &mut self.model;

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = generator_forward(&mut tape, &m.arch, &m.gen, xv, Mode::Train)?;
        let fake = fwd.output;

        // discriminator update on a detached copy of the fake batch
        let mut dt = Tape::new();
        let dx = dt.constant(x);
        let dy = dt.constant(y.clone());
        let df = dt.constant(tape.value(fake).clone());
        let rl = disc_forward(&mut dt, &m.disc_layers, &m.disc, dx, dy)?;
        let fl = disc_forward(&mut dt, &m.disc_layers, &m.disc, dx, df)?;
        let ld = d_loss(&mut dt, rl, fl)?;
        let loss_d = finite("loss_d", dt.value(ld).item() as f64)?;
        dt.backward(ld)?.accumulate_into(&mut m.disc);
        self.opt_d.step(&mut m.disc);
        m.disc.zero_grad();

        let frozen = m.disc.frozen();
        let fl = disc_forward(&mut tape, &m.disc_layers, &frozen, xv, fake)?;
        let lg = g_loss(&mut tape, fl);
        let yv = tape.constant(y);
        let lr = tape.l1(fake, yv)?;
        let mut dist = None;
        if let Some(d) = &self.distill {
            if d.kd.mode != KdMode::None {
                let teacher: FeatureSet = d.feats.iter().map(|(&t, f)| (t, gather(f, idx))).collect();
                let student: BTreeMap<usize, Var> = d
                    .kd
                    .taps
                    .iter()
                    .map(|&t| {
                        fwd.features
                            .get(t)
                            .map(|&v| (t, v))
                            .ok_or_else(|| Error::TapMismatch(format!("student has no tap {t}")))
                    })
                    .collect::<Result<_>>()?;
                let l = dist_loss(&mut tape, &teacher, &student, &d.kd, d.proj.as_ref().map(|p| &p.0))?;
                dist = Some(l);
            }
        }
        let total = objective(&mut tape, &self.weights, lg, lr, dist)?;
        let out = StepLosses {
            d: loss_d,
            g: finite("loss_g", tape.value(lg).item() as f64)?,
            recon: finite("loss_recon", tape.value(lr).item() as f64)?,
            dist: match dist {
                Some(l) => finite("loss_dist", tape.value(l).item() as f64)?,
                None => 0.0,
            },
        };
        finite("total loss", tape.value(total).item() as f64)?;
        let grads = tape.backward(total)?;
        grads.accumulate_into(&mut m.gen);
        self.opt_g.step(&mut m.gen);
        m.gen.zero_grad();
        if let Some((store, opt)) = self.distill.as_mut().and_then(|d| d.proj.as_mut()) {
            grads.accumulate_into(store);
            opt.step(store);
            store.zero_grad();
        }
        apply_stat_updates(&mut m.gen, &fwd.stats)?;
        Ok(out)
    }

    fn run(mut self, train: &Dataset, val: &Dataset) -> Result<(Model, TrainReport)> {
        let start = Instant::now();
        let initial = evaluate(&self.model.arch, &self.model.gen, val)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ SHUFFLE_SALT);
        let mut epochs = Vec::with_capacity(self.cfg.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = StepLosses::default();
            let mut steps = 0usize;
            for idx in order.chunks(self.cfg.batch_size) {
                let l = self.step(train, idx)?;
                sum.d += l.d;
                sum.g += l.g;
                sum.recon += l.recon;
                sum.dist += l.dist;
                steps += 1;
            }
            let k = steps.max(1) as f64;
            let val_l1 = evaluate(&self.model.arch, &self.model.gen, val)?.l1;
            epochs.push(EpochStats {
                loss_d: sum.d / k,
                loss_g: sum.g / k,
                loss_recon: sum.recon / k,
                loss_dist: sum.dist / k,
                val_l1: finite("val_l1", val_l1)?,
            });
        }
        let final_metrics = evaluate(&self.model.arch, &self.model.gen, val)?;
        sync_scales(&mut self.model.arch, &self.model.gen)?;
        let report = TrainReport {
            epochs,
            initial,
            final_metrics,
            seed: self.cfg.seed,
            config_hash: self.cfg.config_hash(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        Ok((self.model, report))
    }
}

fn optimizer(cfg: &RunConfig) -> Adam {
    Adam::new(cfg.lr, cfg.beta1, cfg.beta2)
}

fn check_task(arch: &GeneratorArch, cfg: &RunConfig) -> Result<()> {
    let want = Shape::new(arch.input().c, cfg.image_size, cfg.image_size);
    if arch.input() != want || arch.input().c != 1 {
        return Err(Error::InvalidArgument(format!(
            "architecture input {} does not match the task's 1x{}x{} images",
            arch.input(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    Ok(())
}

/// Trains a generator from scratch with the adversarial and reconstruction
/// terms only.
pub fn train_teacher(arch: &GeneratorArch, cfg: &RunConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    check_task(arch, cfg)?;
    let model = Model::init(arch, cfg.seed)?;
    let task = cfg.task();
    let trainer = Trainer {
        cfg,
        weights: LossWeights {
            dist: 0.0,
            ..LossWeights::from_config(cfg)
        },
        model,
        opt_g: optimizer(cfg),
        opt_d: optimizer(cfg),
        distill: None,
    };
    trainer.run(&task.train(), &task.val())
}

/// Resets every normalization scale to 1 and shift to 0.
pub fn reset_scales(arch: &mut GeneratorArch) {
    for (g, b) in arch.norms_mut() {
        g.iter_mut().for_each(|v| *v = 1.0);
        b.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Trains a pruned student from scratch against a trained teacher. The
/// discriminator starts from the teacher's.
pub fn train_student(teacher: &Model, student_arch: &GeneratorArch, cfg: &RunConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    check_task(student_arch, cfg)?;
    if teacher.arch.blocks.len() != student_arch.blocks.len() {
        return Err(Error::TapMismatch(format!(
            "teacher has {} blocks, student {}",
            teacher.arch.blocks.len(),
            student_arch.blocks.len()
        )));
    }
    let mut arch = student_arch.clone();
    reset_scales(&mut arch);
    let mut model = Model::init(&arch, cfg.seed)?;
    if model.disc_layers != teacher.disc_layers {
        return Err(Error::InvalidArgument("student and teacher discriminators differ".into()));
    }
    model.disc = teacher.disc.clone();

    let task = cfg.task();
    let mut train = task.train();
    if cfg.paired == PairedMode::Teacher {
        let n = train.len();
        let mut out = Vec::with_capacity(train.targets.numel());
        for s in (0..n).step_by(EVAL_BATCH) {
            let len = EVAL_BATCH.min(n - s);
            out.extend_from_slice(teacher.generate(&train.inputs.batch_slice(s, len))?.data());
        }
        train.targets = Tensor::new(train.targets.shape(), out);
    }

    let kd = KDConfig::new(arch.blocks.len(), cfg.kd);
    let distill = if cfg.kd == KdMode::None || cfg.lambda_dist == 0.0 {
        None
    } else {
        let feats = teacher.features(&train.inputs, &kd.taps)?;
        let proj = (cfg.kd == KdMode::Mse).then(|| (auxiliary_params(&teacher.arch, &arch, cfg), optimizer(cfg)));
        Some(Distill { kd, feats, proj })
    };
    let trainer = Trainer {
        cfg,
        weights: LossWeights::from_config(cfg),
        model,
        opt_g: optimizer(cfg),
        opt_d: optimizer(cfg),
        distill,
    };
    trainer.run(&train, &task.val())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{BlockKind, TemplateOptions};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            epochs: 1,
            n_train: 8,
            n_val: 4,
            image_size: 16,
            ..RunConfig::default()
        }
    }

    fn tiny_arch() -> GeneratorArch {
        TemplateOptions::new(6, 2, 1, 3, BlockKind::IncRes)
            .with_size(16, 16)
            .build()
            .unwrap()
    }

    #[test]
    fn taps_for_common_depths() {
        assert_eq!(default_taps(9), vec![0, 3, 6, 9]);
        assert_eq!(default_taps(3), vec![0, 1, 2, 3]);
        assert_eq!(default_taps(2), vec![0, 1, 2]);
        assert_eq!(default_taps(1), vec![0, 1]);
    }

    #[test]
    fn zero_logits_give_log_two() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::zeros([2, 1, 4, 4]));
        let d = d_loss(&mut t, z, z).unwrap();
        let g = g_loss(&mut t, z);
        assert!((t.value(d).item() - 1.3862943611198906).abs() < 1e-12);
        assert!((t.value(g).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_discriminator_has_near_zero_loss() {
        let mut t = Tape::<f64>::new();
        let r = t.constant(Tensor::full([1, 1, 2, 2], 1e6));
        let f = t.constant(Tensor::full([1, 1, 2, 2], -1e6));
        let d = d_loss(&mut t, r, f).unwrap();
        assert!(t.value(d).item() < 1e-12);
    }

    #[test]
    fn identical_features_give_minus_tap_count() {
        let mut t = Tape::<f32>::new();
        let kd = KDConfig::new(3, KdMode::Ka);
        let mut teacher = FeatureSet::new();
        let mut student = BTreeMap::new();
        for &tap in &kd.taps[..3] {
            let f = Tensor::from_fn([4, 2, 3, 3], |i| ((i * 13 + tap) % 7) as f32 - 3.0);
            student.insert(tap, t.input(f.clone()));
            teacher.insert(tap, f);
        }
        let kd3 = KDConfig {
            taps: kd.taps[..3].to_vec(),
            mode: KdMode::Ka,
        };
        let l = dist_loss(&mut t, &teacher, &student, &kd3, None).unwrap();
        assert!((t.value(l).item() + 3.0).abs() < 1e-6);
        assert!(matches!(
            dist_loss(&mut t, &teacher, &student, &kd, None),
            Err(Error::TapMismatch(_))
        ));
    }

    #[test]
    fn one_epoch_smoke() {
        let cfg = tiny_cfg();
        let (m, r) = train_teacher(&tiny_arch(), &cfg).unwrap();
        assert_eq!(r.epochs.len(), 1);
        let e = r.epochs[0];
        assert!(e.loss_d.is_finite() && e.loss_g.is_finite() && e.loss_recon.is_finite());
        assert_eq!(e.loss_dist, 0.0);
        assert!(m.gen.grads_are_zero());
        // trained scales are visible to the pruner
        let trained = &m.gen.get("head.1.gamma").unwrap().value;
        let LayerSpec::Norm { gamma, .. } = &m.arch.head[1] else {
            panic!("head.1 is not a norm")
        };
        assert_eq!(gamma.as_slice(), trained.data());
        assert!(gamma.iter().any(|&g| g != 1.0));
    }

    #[test]
    fn evaluate_on_own_outputs_is_perfect() {
        let cfg = tiny_cfg();
        let m = Model::init(&tiny_arch(), 1).unwrap();
        let mut val = cfg.task().val();
        val.targets = m.generate(&val.inputs).unwrap();
        let r = evaluate(&m.arch, &m.gen, &val).unwrap();
        assert_eq!(r.l1, 0.0);
        assert_eq!(r.psnr, PSNR_CAP);
    }
}
