#![allow(dead_code)]

pub mod gradcheck;

use cfea::backbone::BackboneConfig;
use cfea::data::{synth_generate, LabeledDataset, SynthConfig, UnlabeledDataset};
use cfea::discriminator::DiscriminatorConfig;
use cfea::params::ParameterSet;
use cfea::trainer::{batch_schedule, train_step_traced, TrainMode, TrainState, TrainingConfig};

/// 16×16 input, depth 2, four base channels; runs a step in milliseconds.
pub fn tiny_config(mode: TrainMode) -> TrainingConfig {
    let backbone = BackboneConfig {
        input_size: 16,
        depth: 2,
        base_channels: 4,
        ..BackboneConfig::default()
    };
    TrainingConfig {
        mode,
        batch_size: 2,
        total_iterations: 5,
        checkpoint_every: 0,
        max_shift: 4,
        disc_enc: DiscriminatorConfig {
            input_channels: backbone.feature_channels(),
            width: 8,
            strided_layers: 1,
            ..DiscriminatorConfig::default()
        },
        disc_dec: DiscriminatorConfig {
            input_channels: 3,
            width: 4,
            strided_layers: 2,
            ..DiscriminatorConfig::default()
        },
        backbone,
        ..TrainingConfig::default()
    }
}

pub fn tiny_data(seed: u64) -> (LabeledDataset, UnlabeledDataset) {
    let d = synth_generate(&SynthConfig {
        n_source: 6,
        n_target: 6,
        n_target_test: 2,
        image_size: 16,
        seed,
        ..SynthConfig::default()
    })
    .expect("tiny synth config is valid");
    (d.source, d.target.into_unlabeled())
}

pub fn ema_oracle(teacher: &ParameterSet, student: &ParameterSet, alpha: f64) -> ParameterSet {
    let mut out = teacher.clone();
    for ((_, o), (_, s)) in out.iter_mut().zip(student.iter()) {
        for (ov, &sv) in o.data.iter_mut().zip(&s.data) {
            *ov = alpha * *ov + (1.0 - alpha) * sv;
        }
    }
    out
}

/// Seg step moves only the student, the discriminator step only the
/// discriminators, and the teacher follows the moving average exactly.
pub fn check_routing(steps: u64) {
    let cfg = tiny_config(TrainMode::Cfea);
    let (source, target) = tiny_data(3);
    let schedule = batch_schedule(&cfg, source.len(), target.len()).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let alpha = cfg.loss_weights.ema_decay;
    for step in 0..steps {
        let batch = schedule.gather(step, &source, Some(&target));
        let (_, t) = train_step_traced(&mut state, &batch).unwrap();

        assert!(!t.after_seg.student.values_bit_equal(&t.before.student));
        assert!(t.after_seg.disc_enc.values_bit_equal(&t.before.disc_enc));
        assert!(t.after_seg.disc_dec.values_bit_equal(&t.before.disc_dec));
        assert!(t.after_seg.teacher.values_bit_equal(&t.before.teacher));

        assert!(t.after_disc.student.values_bit_equal(&t.after_seg.student));
        assert!(!t.after_disc.disc_enc.values_bit_equal(&t.after_seg.disc_enc));
        assert!(!t.after_disc.disc_dec.values_bit_equal(&t.after_seg.disc_dec));
        assert!(t.after_disc.teacher.values_bit_equal(&t.before.teacher));
        assert_eq!(t.disc_step_student_grads.max_abs(), 0.0);

        let expected = ema_oracle(&t.before.teacher, &t.after_disc.student, alpha);
        assert!(state.teacher.values_bit_equal(&expected), "teacher at step {step}");
    }
}
