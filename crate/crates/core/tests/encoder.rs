use effconf_core::encoder::{
    Arch, EncoderConfig, EncoderModel, SpecAugment, StageConfig, MIN_FRAMES, PRESETS,
};
use effconf_core::gradcheck::{check_inputs, check_params, GradCheckOptions};
use effconf_core::nn::Module;
use effconf_core::{Error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn miniature(features: usize) -> EncoderConfig {
    let mut c = EncoderConfig::preset("effconf-ctc-s").unwrap();
    for (s, d) in c.stages.iter_mut().zip([8, 12, 16]) {
        s.blocks = 1;
        s.dim = d;
        s.heads = 2;
        s.conv_kernel = 3;
    }
    c.input_features = features;
    c.stem_channels = 4;
    c.output_vocab = Some(5);
    c
}

#[test]
fn preset_parameter_counts() {
    let targets = [
        ("conformer-ctc-s", 13.0e6),
        ("effconf-ctc-s", 13.2e6),
        ("conformer-ctc-m", 30.5e6),
        ("effconf-ctc-m", 31.5e6),
        ("conformer-ctc-l", 121.5e6),
        ("effconf-ctc-l", 125.6e6),
    ];
    for (name, want) in targets {
        let m = EncoderModel::build(&EncoderConfig::preset(name).unwrap(), 0).unwrap();
        let got = m.num_params() as f64;
        assert!((got / want - 1.0).abs() < 0.05, "{name}: {got}");
    }
}

#[test]
fn every_preset_builds_and_validates() {
    for name in PRESETS {
        EncoderConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(matches!(EncoderConfig::preset("nope"), Err(Error::Config(_))));
}

#[test]
fn analytic_length_law() {
    let c = EncoderConfig::preset("effconf-ctc-s").unwrap();
    for t in 8..=4096 {
        assert_eq!(c.output_len(t), t.div_ceil(8), "t={t}");
    }
    assert_eq!(c.output_len(1000), 125);
    assert_eq!(c.output_len(1001), 126);
    let b = EncoderConfig::preset("conformer-ctc-s").unwrap();
    assert_eq!(b.output_len(1001), 251);
}

#[test]
fn executed_length_and_normalized_outputs() {
    let m = EncoderModel::build(&miniature(6), 1).unwrap();
    for t in [8, 9, 15, 16, 17, 40, 1001] {
        let g = Graph::inference();
        let out = m.forward(&g, &g.constant(random(&[t, 6], t as u64)), None).unwrap();
        assert_eq!(out.out_length, t.div_ceil(8));
        assert_eq!(out.sequence.shape(), &[t.div_ceil(8), 16]);
        let lp = out.log_probs.unwrap();
        for row in lp.data().chunks(5) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn too_short_input_is_an_error() {
    let m = EncoderModel::build(&miniature(6), 1).unwrap();
    let g = Graph::inference();
    match m.forward(&g, &g.constant(Tensor::zeros(&[7, 6])), None) {
        Err(Error::InputTooShort { frames: 7, min }) => assert_eq!(min, MIN_FRAMES),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_configs_name_the_problem() {
    let mut c = miniature(6);
    c.stages[1].heads = 5;
    c.stages[2].conv_kernel = 4;
    let Err(Error::Config(msg)) = c.validate() else { panic!() };
    assert!(msg.contains("stage 2") && msg.contains("stage 3"), "{msg}");

    let mut c = miniature(6);
    c.stages.pop();
    assert!(c.validate().is_err());

    let mut c = miniature(6);
    c.arch = Arch::Conformer;
    assert!(c.validate().is_err());
    c.stages = vec![StageConfig::new(2, 8, 2, 3)];
    assert!(c.validate().is_ok());
}

#[test]
fn build_is_deterministic_per_seed() {
    let c = miniature(6);
    let a = EncoderModel::build(&c, 5).unwrap();
    let b = EncoderModel::build(&c, 5).unwrap();
    let d = EncoderModel::build(&c, 6).unwrap();
    let same = a.params().iter().zip(b.params()).all(|(x, y)| x.value() == y.value());
    let diff = a.params().iter().zip(d.params()).any(|(x, y)| x.value() != y.value());
    assert!(same && diff);
}

#[test]
fn attention_variants_only_change_attention() {
    // Same seed, g = 1 written two ways: identical outputs.
    let x = random(&[24, 6], 9);
    let run = |c: &EncoderConfig| {
        let m = EncoderModel::build(c, 3).unwrap();
        let g = Graph::inference();
        m.forward(&g, &g.constant(x.clone()), None).unwrap().sequence.to_tensor()
    };
    let base = miniature(6).with_group_sizes(&[1, 1, 1]).unwrap();
    let local = miniature(6).with_windows(&[Some(64), Some(64), Some(64)]).unwrap();
    assert!(run(&base).max_abs_diff(&run(&local)) < 1e-12);
    let grouped = miniature(6);
    assert!(run(&base).max_abs_diff(&run(&grouped)) > 1e-9);
}

#[test]
fn miniature_end_to_end_gradients() {
    let c = miniature(80);
    let m = EncoderModel::build(&c, 2).unwrap();
    let x = random(&[24, 80], 4);
    let opts = GradCheckOptions {
        max_entries: 24,
        ..Default::default()
    };
    let r = check_params(&m, |m| m.params_mut(), &opts, |m, g| {
        Ok(m.forward(g, &g.constant(x.clone()), None)?.log_probs.unwrap())
    })
    .unwrap();
    assert!(r.passes(1e-4), "params {r:?}");
    let r = check_inputs(std::slice::from_ref(&x), &opts, |g, xs| {
        Ok(m.forward(g, &xs[0], None)?.log_probs.unwrap())
    })
    .unwrap();
    assert!(r.passes(1e-4), "input {r:?}");
}

#[test]
fn spec_augment_bounds_and_determinism() {
    let x = random(&[100, 80], 1);
    let off = SpecAugment {
        freq_mask_param: 0,
        time_masks: 0,
        ..Default::default()
    };
    assert_eq!(off.apply(&x, &mut ChaCha8Rng::seed_from_u64(0)), x);

    let aug = SpecAugment {
        freq_masks: 0,
        time_masks: 1,
        ..Default::default()
    };
    for seed in 0..200 {
        let y = aug.apply(&x, &mut ChaCha8Rng::seed_from_u64(seed));
        let zeroed = (0..100).filter(|&r| y.row(r).iter().all(|&v| v == 0.0)).count();
        assert!(zeroed <= 5, "seed {seed}: {zeroed}");
    }
    let full = SpecAugment::default();
    let a = full.apply(&x, &mut ChaCha8Rng::seed_from_u64(7));
    let b = full.apply(&x, &mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(a, b);
}
