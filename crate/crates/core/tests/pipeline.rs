use std::collections::BTreeMap;

use catpress::arch::{BlockKind, GeneratorArch, TemplateOptions};
use catpress::checkpoint;
use catpress::config::{KdMode, PairedMode, RunConfig};
use catpress::gan::{
    auxiliary_params, dist_loss, evaluate, objective, train_student, train_teacher, FeatureSet, KDConfig, LossWeights,
    Model,
};
use catpress::ka::{ka, FeatureMatrix};
use catpress::macs::total_macs;
use catpress::net::{generator_forward, param_specs, Mode};
use catpress::prune::{prune, PruneBudget};
use catpress::tensor::{Tape, Tensor};
use catpress::verify::{random_orthogonal, right_multiply};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> RunConfig {
    RunConfig {
        epochs: 1,
        n_train: 8,
        n_val: 4,
        image_size: 16,
        batch_size: 4,
        ..RunConfig::default()
    }
}

fn teacher_arch() -> GeneratorArch {
    TemplateOptions::new(6, 3, 1, 3, BlockKind::IncRes)
        .with_size(16, 16)
        .build()
        .unwrap()
}

fn trained_teacher() -> Model {
    train_teacher(&teacher_arch(), &cfg()).unwrap().0
}

fn student_of(teacher: &Model) -> GeneratorArch {
    let budget = PruneBudget::new(total_macs(&teacher.arch).unwrap() * 6 / 10, 2, teacher.arch.input()).unwrap();
    prune(&teacher.arch, &budget).unwrap().arch
}

#[test]
fn teacher_checkpoints_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let save = |name: &str| {
        let (m, r) = train_teacher(&teacher_arch(), &cfg()).unwrap();
        checkpoint::save(&dir.path().join(name), &m, Some(&r), Some(&cfg())).unwrap();
        r
    };
    let (a, b) = (save("a"), save("b"));
    assert_eq!(a.to_json_without_timing(), b.to_json_without_timing());
    for f in ["manifest.json", "weights.bin", "arch.json", "config.json"] {
        let read = |d: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
        assert_eq!(read("a"), read("b"), "{f}");
    }
    let other = train_teacher(&teacher_arch(), &RunConfig { seed: 1, ..cfg() }).unwrap().1;
    assert_ne!(other.to_json_without_timing(), a.to_json_without_timing());
}

#[test]
fn evaluation_is_repeatable_and_survives_a_checkpoint() {
    let teacher = trained_teacher();
    let val = cfg().task().val();
    let a = evaluate(&teacher.arch, &teacher.gen, &val).unwrap();
    let b = evaluate(&teacher.arch, &teacher.gen, &val).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &teacher, None, None).unwrap();
    let back = checkpoint::load_for(dir.path(), &teacher.arch).unwrap().model;
    assert_eq!(evaluate(&back.arch, &back.gen, &val).unwrap(), a);
}

#[test]
fn student_training_leaves_the_teacher_untouched() {
    let teacher = trained_teacher();
    let before = teacher.clone();
    let student = student_of(&teacher);
    for kd in [KdMode::Ka, KdMode::Mse] {
        let c = RunConfig { kd, ..cfg() };
        let (s, r) = train_student(&teacher, &student, &c).unwrap();
        assert!(r.epochs[0].loss_dist != 0.0);
        assert!(teacher.gen.grads_are_zero() && teacher.disc.grads_are_zero());
        for (a, b) in teacher.gen.entries().iter().zip(before.gen.entries()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert!(s.gen.grads_are_zero());
        // the inherited discriminator was finetuned, not shared
        assert_ne!(s.disc.entries()[0].value, teacher.disc.entries()[0].value);
    }
}

#[test]
fn ka_distillation_adds_no_parameters() {
    let teacher = trained_teacher();
    let student = student_of(&teacher);
    let ka_cfg = RunConfig { kd: KdMode::Ka, ..cfg() };
    assert!(auxiliary_params(&teacher.arch, &student, &ka_cfg).is_empty());
    assert!(auxiliary_params(&teacher.arch, &student, &RunConfig { kd: KdMode::None, ..cfg() }).is_empty());
    let mse = auxiliary_params(&teacher.arch, &student, &RunConfig { kd: KdMode::Mse, ..cfg() });
    assert_eq!(mse.trainable_count(), 4);

    let (s, _) = train_student(&teacher, &student, &ka_cfg).unwrap();
    assert_eq!(s.gen.len(), param_specs(&s.arch).len());
}

#[test]
fn objective_is_the_weighted_sum_of_its_terms() {
    let w = LossWeights {
        adv: 0.7,
        recon: 100.0,
        dist: 0.3,
    };
    let (adv, recon, dist) = (0.693_147_2f32, 0.251_9f32, -3.141_7f32);
    let mut t = Tape::<f32>::new();
    let a = t.input(Tensor::scalar(adv));
    let r = t.input(Tensor::scalar(recon));
    let d = t.input(Tensor::scalar(dist));
    let with = objective(&mut t, &w, a, r, Some(d)).unwrap();
    let without = objective(&mut t, &w, a, r, None).unwrap();
    let two = w.adv * adv as f64 + w.recon * recon as f64;
    assert_eq!(t.value(with).item(), (two + w.dist * dist as f64) as f32);
    assert_eq!(t.value(without).item(), two as f32);
}

#[test]
fn zero_distillation_weight_is_plain_gan_training() {
    let teacher = trained_teacher();
    let student = student_of(&teacher);
    let run = |kd, lambda_dist| {
        let c = RunConfig {
            kd,
            lambda_dist,
            ..cfg()
        };
        train_student(&teacher, &student, &c).unwrap()
    };
    let (a, ra) = run(KdMode::Ka, 0.0);
    let (b, rb) = run(KdMode::None, 1.0);
    assert!(ra.epochs.iter().all(|e| e.loss_dist == 0.0));
    assert_eq!(ra.epochs, rb.epochs);
    for (x, y) in a.gen.entries().iter().zip(b.gen.entries()) {
        assert_eq!(x.value, y.value, "{}", x.name);
    }
}

#[test]
fn teacher_generated_pairs_change_the_targets() {
    let teacher = trained_teacher();
    let student = student_of(&teacher);
    let data = train_student(&teacher, &student, &cfg()).unwrap().1;
    let paired = train_student(
        &teacher,
        &student,
        &RunConfig {
            paired: PairedMode::Teacher,
            ..cfg()
        },
    )
    .unwrap()
    .1;
    assert_ne!(data.epochs[0].loss_recon, paired.epochs[0].loss_recon);
}

/// Student features on the training tape at the default taps.
fn tape_features(model: &Model, x: &Tensor, taps: &[usize]) -> (Tape<f32>, BTreeMap<usize, catpress::tensor::Var>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = generator_forward(&mut tape, &model.arch, &model.gen, xv, Mode::Train).unwrap();
    let feats = taps.iter().map(|&t| (t, f.features[t])).collect();
    (tape, feats)
}

#[test]
fn self_distillation_starts_at_minus_tap_count() {
    let teacher = trained_teacher();
    let kd = KDConfig::new(teacher.arch.blocks.len(), KdMode::Ka);
    let x = cfg().task().train().inputs;
    let target = teacher.features(&x, &kd.taps).unwrap();
    let (mut tape, student) = tape_features(&teacher, &x, &kd.taps);
    let l = dist_loss(&mut tape, &target, &student, &kd, None).unwrap();
    let expected = -(kd.taps.len() as f32);
    assert!((tape.value(l).item() - expected).abs() < 1e-5, "{}", tape.value(l).item());
}

#[test]
fn ka_term_ignores_rotation_and_scale_of_student_features() {
    let teacher = trained_teacher();
    let kd = KDConfig::new(teacher.arch.blocks.len(), KdMode::Ka);
    let x = cfg().task().train().inputs;
    let feats: FeatureSet = teacher.features(&x, &kd.taps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (tap, f) in &feats {
        let xt = FeatureMatrix::from_tensor(f, "teacher");
        let u = random_orthogonal(&mut rng, xt.cols);
        let rotated = right_multiply(&xt, &u);
        assert!((ka(&xt, &rotated).unwrap() - 1.0).abs() < 1e-5, "tap {tap}");
        let scaled = FeatureMatrix::new(xt.rows, xt.cols, xt.data.iter().map(|v| v * 3.5).collect(), "s");
        let other = FeatureMatrix::from_tensor(&feats[&0], "other");
        let base = ka(&other, &xt).unwrap();
        assert!((ka(&other, &scaled).unwrap() - base).abs() < 1e-5, "tap {tap}");
    }
}

#[test]
fn trained_teacher_beats_its_initialization() {
    let c = RunConfig {
        epochs: 4,
        n_train: 32,
        ..cfg()
    };
    let (_, r) = train_teacher(&teacher_arch(), &c).unwrap();
    assert!(r.final_metrics.l1 < r.initial.l1, "{:?} vs {:?}", r.final_metrics, r.initial);
}
