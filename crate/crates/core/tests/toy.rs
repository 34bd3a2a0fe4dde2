use effconf_core::ctc::min_frames;
use effconf_core::toy::{train, ToyTask, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn samples_are_ctc_feasible_after_subsampling() {
    let task = ToyTask::new(3);
    task.validate().unwrap();
    let config = task.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let u = task.sample(&mut rng);
        let l = u.labels.len();
        assert!((3..=8).contains(&l));
        assert!(u.labels.windows(2).all(|w| w[0] != w[1]));
        assert!(u.labels.iter().all(|&k| (1..=8).contains(&k)));
        let t_out = config.output_len(u.features.shape()[0]);
        assert!(t_out > 2 * l && t_out >= min_frames(&u.labels));
    }
}

#[test]
fn sampling_is_seeded() {
    let task = ToyTask::new(4);
    assert_eq!(task.batch(3, 9), task.batch(3, 9));
    assert_ne!(task.batch(3, 9), task.batch(3, 10));
    assert_ne!(ToyTask::new(4), ToyTask::new(5));
}

#[test]
fn bad_task_rejected() {
    let mut task = ToyTask::new(0);
    task.gap_frames = 2;
    assert!(task.validate().is_err());
}

#[test]
fn short_runs_are_deterministic_and_untrained_is_near_chance() {
    let task = ToyTask::new(0);
    let mut config = task.model_config();
    for s in &mut config.stages {
        s.blocks = 1;
    }
    let tc = TrainConfig {
        steps: 4,
        batch: 2,
        eval_every: 2,
        eval_size: 4,
        ..Default::default()
    };
    let a = train(&task, &config, &tc, |_| {}).unwrap();
    let b = train(&task, &config, &tc, |_| {}).unwrap();
    assert_eq!(a.log.len(), 3);
    assert_eq!(a.log, b.log);
    assert!(a.log[0].loss.is_none() && a.log[2].loss.is_some());
    assert!(a.log[0].accuracy < 0.3);
    let zero = train(&task, &config, &TrainConfig { steps: 0, ..tc }, |_| {}).unwrap();
    assert_eq!(zero.steps, 0);
    assert!(zero.accuracy < 0.3);
}
