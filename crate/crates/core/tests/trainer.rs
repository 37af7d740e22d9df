mod common;

use std::fs;

use cfea::persistence::{load_checkpoint, save_checkpoint};
use cfea::trainer::{
    batch_schedule, checkpoint_path, train, train_from, train_step, TrainMode, TrainState,
};
use common::{tiny_config, tiny_data};

#[test]
fn updates_touch_only_their_own_parameters() {
    common::check_routing(5);
}

#[test]
fn source_only_logs_no_adaptation_terms() {
    let cfg = tiny_config(TrainMode::SourceOnly);
    let (source, target) = tiny_data(4);
    let schedule = batch_schedule(&cfg, source.len(), target.len()).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let disc_before = (state.disc_enc.clone(), state.disc_dec.clone());
    for step in 0..3 {
        let r = train_step(&mut state, &schedule.gather(step, &source, None)).unwrap();
        assert!(r.seg > 0.0);
        for v in [r.adv_enc, r.adv_dec, r.disc_enc, r.disc_dec, r.mse_enc, r.mse_dec] {
            assert_eq!(v, 0.0);
        }
        assert_eq!(r.total, r.seg);
    }
    assert!(state.disc_enc.values_bit_equal(&disc_before.0));
    assert!(state.disc_dec.values_bit_equal(&disc_before.1));
}

#[test]
fn resume_matches_a_straight_run() {
    let mut cfg = tiny_config(TrainMode::Cfea);
    cfg.total_iterations = 4;
    cfg.checkpoint_every = 2;
    let (source, target) = tiny_data(5);

    let straight = tempfile::tempdir().unwrap();
    let a = train(&cfg, &source, Some(&target), straight.path()).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    let mut half = cfg.clone();
    half.total_iterations = 2;
    train(&half, &source, Some(&target), resumed.path()).unwrap();
    let mut state = load_checkpoint(&resumed.path().join("final.cfea")).unwrap();
    assert_eq!(state.iteration, 2);
    state.config.total_iterations = 4;
    let b = train_from(state, &source, Some(&target), resumed.path()).unwrap();

    assert_eq!(a.state, b.state);
    assert_eq!(
        fs::read(&a.metrics_log).unwrap(),
        fs::read(&b.metrics_log).unwrap()
    );
    assert_eq!(
        fs::read(&a.final_checkpoint).unwrap(),
        fs::read(&b.final_checkpoint).unwrap()
    );
    // the straight run's own periodic checkpoint restores the same state
    let mid = load_checkpoint(&checkpoint_path(straight.path(), 2)).unwrap();
    assert_eq!(mid.iteration, 2);
}

#[test]
fn interrupted_log_rows_are_discarded_on_resume() {
    let mut cfg = tiny_config(TrainMode::SourceOnly);
    cfg.total_iterations = 3;
    let (source, _) = tiny_data(6);
    let dir = tempfile::tempdir().unwrap();
    let straight = train(&cfg, &source, None, dir.path()).unwrap();
    let log = fs::read_to_string(&straight.metrics_log).unwrap();

    // pretend the process died after writing row 3 but before checkpointing
    let mut early = cfg.clone();
    early.total_iterations = 2;
    let other = tempfile::tempdir().unwrap();
    let run = train(&early, &source, None, other.path()).unwrap();
    let mut text = fs::read_to_string(&run.metrics_log).unwrap();
    text.push_str("3,9,9,9,9,9,9,9,9\n");
    fs::write(&run.metrics_log, text).unwrap();
    let mut state = run.state;
    state.config.total_iterations = 3;
    let resumed = train_from(state, &source, None, other.path()).unwrap();
    assert_eq!(fs::read_to_string(&resumed.metrics_log).unwrap(), log);
}

#[test]
fn identical_runs_write_identical_files() {
    let cfg = tiny_config(TrainMode::Cfea);
    let (source, target) = tiny_data(7);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = train(&cfg, &source, Some(&target), d1.path()).unwrap();
    let b = train(&cfg, &source, Some(&target), d2.path()).unwrap();
    assert_eq!(fs::read(&a.metrics_log).unwrap(), fs::read(&b.metrics_log).unwrap());
    assert_eq!(
        fs::read(&a.final_checkpoint).unwrap(),
        fs::read(&b.final_checkpoint).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_restores_every_field() {
    let cfg = tiny_config(TrainMode::Cfea);
    let (source, target) = tiny_data(8);
    let schedule = batch_schedule(&cfg, source.len(), target.len()).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    for step in 0..2 {
        train_step(&mut state, &schedule.gather(step, &source, Some(&target))).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.cfea");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, state);

    // the restored generator continues the same stream
    let mut a = state;
    let mut b = back;
    let batch = schedule.gather(2, &source, Some(&target));
    let ra = train_step(&mut a, &batch).unwrap();
    let rb = train_step(&mut b, &batch).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn cfea_without_target_images_is_an_input_error() {
    let cfg = tiny_config(TrainMode::Cfea);
    let (source, _) = tiny_data(9);
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, &source, None, dir.path()).unwrap_err();
    assert!(matches!(err, cfea::Error::Input(_)), "{err}");
}
