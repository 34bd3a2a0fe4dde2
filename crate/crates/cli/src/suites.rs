//! Equivalence and finite-difference suites behind `equiv` and `gradcheck`.

use anyhow::Result;
use effconf_core::attention::{
    mhsa, reference, rel_to_abs_strided, table_len_for, AttentionParams, AttentionVariant, RelPosTable,
};
use effconf_core::blocks::{BlockConfig, ConformerBlock, Downsample};
use effconf_core::ctc::{ctc_loss, CtcInstance};
use effconf_core::encoder::{EncoderConfig, EncoderModel};
use effconf_core::gradcheck::{check_inputs, check_params, GradCheckOptions, GradCheckReport};
use effconf_core::nn::{Init, Module};
use effconf_core::{ConvMode, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::CheckRow;

pub const COLLAPSE_TOL: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;
pub const CTC_GRAD_TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random layer with non-zero biases.
fn random_layer(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionParams {
    let mut p = AttentionParams::new(&mut Init::new(rng.gen()), d, heads, true).expect("heads divide d");
    for w in p.params_mut() {
        if w.shape().len() == 1 {
            for v in w.make_mut().data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    p
}

fn run(x: &Tensor, p: &AttentionParams, v: AttentionVariant) -> Result<Tensor> {
    let n = x.shape()[0];
    let table = RelPosTable::new(table_len_for(v, n), p.d)?;
    let g = Graph::inference();
    Ok(mhsa(&g, &g.constant(x.clone()), p, Some(&table), v)?.to_tensor())
}

fn random_layout(rng: &mut ChaCha8Rng) -> (usize, usize) {
    loop {
        let d = [4, 8, 16][rng.gen_range(0..3)];
        let h = [1, 2, 4][rng.gen_range(0..3)];
        if d % h == 0 {
            return (d, h);
        }
    }
}

/// Degenerate variants against regular attention.
pub fn collapse_suite(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..trials {
        let n = rng.gen_range(4..=32);
        let (d, h) = random_layout(&mut rng);
        let p = random_layer(&mut rng, d, h);
        let x = random(&mut rng, &[n, d]);
        let base = run(&x, &p, AttentionVariant::Regular)?;
        let others = [
            AttentionVariant::Grouped(1),
            AttentionVariant::Strided(1),
            AttentionVariant::Local(n),
        ];
        for (w, v) in worst.iter_mut().zip(others) {
            *w = w.max(run(&x, &p, v)?.max_abs_diff(&base));
        }
    }
    let names = ["collapse grouped(1)", "collapse strided(1)", "collapse local(n)"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| CheckRow::new(*n, trials, w, COLLAPSE_TOL))
        .collect())
}

/// Every variant against its plain-loop reference, `n <= 16`.
pub fn oracle_suite(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa0c1e);
    let names = [
        "oracle regular (naive dense)",
        "oracle strided (sliced scores)",
        "oracle grouped (reshape + naive)",
        "oracle local (per block)",
        "oracle linear (two matmuls)",
    ];
    let mut worst = [0.0f64; 5];
    for _ in 0..trials {
        let n = rng.gen_range(1..=16);
        let (d, h) = random_layout(&mut rng);
        let p = random_layer(&mut rng, d, h);
        let x = random(&mut rng, &[n, d]);
        let variants = [
            AttentionVariant::Regular,
            AttentionVariant::Strided(rng.gen_range(2..=4)),
            AttentionVariant::Grouped(rng.gen_range(2..=4)),
            AttentionVariant::Local(rng.gen_range(2..=6)),
            AttentionVariant::Linear,
        ];
        for (w, v) in worst.iter_mut().zip(variants) {
            let oracle = reference::attention(&x, &p, v)?;
            *w = w.max(run(&x, &p, v)?.max_abs_diff(&oracle));
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| CheckRow::new(*n, trials, w, ORACLE_TOL))
        .collect())
}

/// Pad/reshape skew against direct gathering, exact.
pub fn skew_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e3);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=32usize {
        for s in 1..=3usize {
            let nq = (n - 1) / s + 1;
            let w = 2 * n - 1;
            let x = random(&mut rng, &[2, nq, w]);
            let g = Graph::inference();
            let y = rel_to_abs_strided(&g, &g.constant(x.clone()), n, s)?;
            for b in 0..2 {
                for i in 0..nq {
                    for j in 0..n {
                        let want = x.data()[(b * nq + i) * w + j + n - 1 - i * s];
                        worst = worst.max((y.data()[(b * nq + i) * n + j] - want).abs());
                    }
                }
            }
            cases += 1;
        }
    }
    Ok(vec![CheckRow::new("skew vs gather", cases, worst, 0.0)])
}

pub fn equiv_suite(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    let mut rows = collapse_suite(seed, trials)?;
    rows.extend(oracle_suite(seed, trials)?);
    rows.extend(skew_suite(seed)?);
    Ok(rows)
}

fn opts(max_entries: usize) -> GradCheckOptions {
    GradCheckOptions {
        max_entries,
        ..Default::default()
    }
}

fn worst(reports: &[GradCheckReport]) -> (usize, f64) {
    (
        reports.iter().map(|r| r.checked).sum(),
        reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
    )
}

type OpFn = Box<dyn Fn(&Graph, &[Var]) -> effconf_core::Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut r = |s: &[usize]| random(rng, s);
    vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|g, v| g.matmul(&v[0], &v[1]))),
        ("bmm", vec![r(&[2, 3, 4]), r(&[2, 4, 3])], Box::new(|g, v| g.bmm(&v[0], &v[1]))),
        ("softmax", vec![r(&[4, 5])], Box::new(|g, v| g.softmax(&v[0], 1))),
        ("log_softmax", vec![r(&[4, 5])], Box::new(|g, v| g.log_softmax(&v[0], 1))),
        (
            "layer_norm",
            vec![r(&[3, 6]), r(&[6]), r(&[6])],
            Box::new(|g, v| g.layer_norm(&v[0], &v[1], &v[2])),
        ),
        (
            "conv1d depthwise k15 s2",
            vec![r(&[16, 3]), r(&[15, 3])],
            Box::new(|g, v| g.conv1d(&v[0], &v[1], 2, ConvMode::Depthwise)),
        ),
        (
            "conv1d pointwise",
            vec![r(&[7, 3]), r(&[1, 3, 4])],
            Box::new(|g, v| g.conv1d(&v[0], &v[1], 1, ConvMode::Pointwise)),
        ),
        (
            "conv1d dense k3",
            vec![r(&[7, 3]), r(&[3, 3, 2])],
            Box::new(|g, v| g.conv1d(&v[0], &v[1], 1, ConvMode::Dense)),
        ),
        (
            "conv2d stem",
            vec![r(&[6, 5, 1]), r(&[3, 3, 1, 2])],
            Box::new(|g, v| g.conv2d(&v[0], &v[1], 2)),
        ),
        ("glu", vec![r(&[3, 6])], Box::new(|g, v| g.glu(&v[0]))),
        ("swish", vec![r(&[3, 4])], Box::new(|g, v| Ok(g.swish(&v[0])))),
        ("sigmoid", vec![r(&[3, 4])], Box::new(|g, v| Ok(g.sigmoid(&v[0])))),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.mul(&v[0], &v[1]))),
        ("add_bias", vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| g.add_bias(&v[0], &v[1]))),
        ("avg_pool", vec![r(&[7, 3])], Box::new(|g, v| g.avg_pool1d(&v[0], 2))),
        (
            "shape ops",
            vec![r(&[4, 6])],
            Box::new(|g, v| {
                let x = g.pad(&v[0], 0, 1, 2)?;
                let x = g.reshape(&x, &[7, 2, 3])?;
                let x = g.permute(&x, &[2, 0, 1])?;
                let x = g.slice(&x, 1, 1, 6)?;
                let x = g.subsample(&x, 1, 2)?;
                Ok(g.scale(&g.transpose(&x)?, 0.7))
            }),
        ),
        ("mean", vec![r(&[3, 4])], Box::new(|g, v| Ok(g.mean(&v[0])))),
    ]
}

fn miniature() -> EncoderConfig {
    let mut c = EncoderConfig::preset("effconf-ctc-s").expect("preset");
    for (s, d) in c.stages.iter_mut().zip([8, 12, 16]) {
        s.blocks = 1;
        s.dim = d;
        s.heads = 2;
        s.conv_kernel = 3;
    }
    c.stem_channels = 4;
    c.output_vocab = Some(5);
    c
}

/// Finite-difference checks; one row per component with its worst error.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (name, inputs, f) in op_cases(&mut rng) {
        let r = check_inputs(&inputs, &opts(usize::MAX), |g, v| f(g, v))?;
        rows.push(CheckRow::new(format!("op {name}"), r.checked, r.max_rel_err, GRAD_TOL));
    }

    let variants = [
        AttentionVariant::Regular,
        AttentionVariant::Strided(2),
        AttentionVariant::Grouped(3),
        AttentionVariant::Local(4),
        AttentionVariant::Linear,
    ];
    for v in variants {
        let n = rng.gen_range(5..=12);
        let p = random_layer(&mut rng, 8, 2);
        let x = random(&mut rng, &[n, 8]);
        let table = RelPosTable::new(table_len_for(v, n), 8)?;
        let a = check_inputs(std::slice::from_ref(&x), &opts(64), |g, xs| mhsa(g, &xs[0], &p, Some(&table), v))?;
        let b = check_params(&p, |m| m.params_mut(), &opts(32), |m, g| {
            mhsa(g, &g.constant(x.clone()), m, Some(&table), v)
        })?;
        let (cases, err) = worst(&[a, b]);
        rows.push(CheckRow::new(format!("attention {v:?}"), cases, err, GRAD_TOL));
    }

    for (label, ds, d_out) in [
        ("block", Downsample::None, 8),
        ("block conv-downsample", Downsample::Conv, 12),
        ("block attention-downsample", Downsample::Attention, 12),
    ] {
        let mut c = BlockConfig::new(8, 2, 3);
        c.variant = AttentionVariant::Grouped(2);
        c.downsample = ds;
        c.d_out = d_out;
        let block = ConformerBlock::new(&mut Init::new(rng.gen()), c)?;
        let x = random(&mut rng, &[8, 8]);
        let table = RelPosTable::new(8, 8)?;
        let a = check_inputs(std::slice::from_ref(&x), &opts(32), |g, xs| block.forward(g, &xs[0], Some(&table), None))?;
        let b = check_params(&block, |m| m.params_mut(), &opts(16), |m, g| {
            m.forward(g, &g.constant(x.clone()), Some(&table), None)
        })?;
        let (cases, err) = worst(&[a, b]);
        rows.push(CheckRow::new(label, cases, err, GRAD_TOL));
    }

    let model = EncoderModel::build(&miniature(), rng.gen())?;
    let x = random(&mut rng, &[24, 80]);
    let logits = |m: &EncoderModel, g: &Graph, x: &Var| -> effconf_core::Result<Var> {
        Ok(m.forward(g, x, None)?.log_probs.expect("ctc head"))
    };
    let a = check_inputs(std::slice::from_ref(&x), &opts(24), |g, xs| logits(&model, g, &xs[0]))?;
    let b = check_params(&model, |m| m.params_mut(), &opts(12), |m, g| {
        logits(m, g, &g.constant(x.clone()))
    })?;
    let (cases, err) = worst(&[a, b]);
    rows.push(CheckRow::new("encoder miniature", cases, err, GRAD_TOL));

    rows.push(ctc_gradcheck(&mut rng)?);
    Ok(rows)
}

fn ctc_gradcheck(rng: &mut ChaCha8Rng) -> Result<CheckRow> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 20 {
        let t = rng.gen_range(2..=8);
        let v = rng.gen_range(2..=4);
        let labels: Vec<usize> = (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(1..v)).collect();
        let g = Graph::inference();
        let lp = g.log_softmax(&g.constant(random(rng, &[t, v])), 1)?.to_tensor();
        let inst = CtcInstance::new(lp, labels)?;
        let r = ctc_loss(&inst);
        if !r.feasible {
            continue;
        }
        cases += 1;
        let h = 1e-5;
        for i in 0..inst.log_probs.numel() {
            let mut plus = inst.clone();
            plus.log_probs.data_mut()[i] += h;
            let mut minus = inst.clone();
            minus.log_probs.data_mut()[i] -= h;
            let fd = (ctc_loss(&plus).nll - ctc_loss(&minus).nll) / (2.0 * h);
            let a = r.grad.data()[i];
            let abs = (fd - a).abs();
            let rel = if abs <= GradCheckOptions::default().abs_floor { 0.0 } else { abs / fd.abs().max(a.abs()) };
            worst = worst.max(rel);
        }
    }
    Ok(CheckRow::new("ctc loss", cases, worst, CTC_GRAD_TOL))
}
