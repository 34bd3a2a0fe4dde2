use effconf_core::attention::{reference, AttentionVariant, RelPosTable};
use effconf_core::blocks::{BlockConfig, ConformerBlock, ConvModule, Downsample, FeedForward, MhsaModule};
use effconf_core::gradcheck::{check_inputs, check_params, GradCheckOptions};
use effconf_core::nn::{Init, Linear, Module};
use effconf_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn zero(lin: &mut Linear) {
    for p in lin.params_mut() {
        p.make_mut().data_mut().fill(0.0);
    }
}

fn layer_norm_rows(x: &Tensor) -> Tensor {
    let d = x.shape()[1];
    let mut out = x.clone();
    for r in out.data_mut().chunks_mut(d) {
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for v in r.iter_mut() {
            *v = (*v - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

fn pool2(x: &Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = n.div_ceil(2);
    Tensor::from_fn(&[m, d], |i| {
        let (o, j) = (i / d, i % d);
        let rows: Vec<usize> = (2 * o..(2 * o + 2).min(n)).collect();
        rows.iter().map(|&r| x.data()[r * d + j]).sum::<f64>() / rows.len() as f64
    })
}

fn eval(f: impl FnOnce(&Graph, &effconf_core::Var) -> effconf_core::Result<effconf_core::Var>, x: &Tensor) -> Tensor {
    let g = Graph::inference();
    f(&g, &g.constant(x.clone())).unwrap().to_tensor()
}

#[test]
fn ffn_with_zero_output_is_identity() {
    let mut ffn = FeedForward::new(&mut Init::new(1), 6, 4);
    zero(&mut ffn.down);
    let x = random(&[5, 6], 2);
    assert_eq!(eval(|g, v| ffn.forward(g, v, 0.0, None), &x), x);
}

#[test]
fn ffn_hand_computed() {
    // d = 2, expansion 1: LN([3, 1]) = [1, -1] (up to eps); W1 = I, b1 = 0;
    // W2 = [[2, 0], [0, 0]], b2 = [0, 1].
    let mut ffn = FeedForward::new(&mut Init::new(0), 2, 1);
    *ffn.up.weight.make_mut() = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
    *ffn.down.weight.make_mut() = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]).unwrap();
    *ffn.down.bias.as_mut().unwrap().make_mut() = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
    let x = Tensor::from_rows(&[&[3.0, 1.0]]).unwrap();
    let y = eval(|g, v| ffn.forward(g, v, 0.0, None), &x);
    let a = 1.0 / (1.0f64 + 1e-5).sqrt();
    let swish_a = a / (1.0 + (-a).exp());
    let expect = [3.0 + 0.5 * 2.0 * swish_a, 1.0 + 0.5 * 1.0];
    for (got, want) in y.data().iter().zip(expect) {
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
}

#[test]
fn conv_module_zero_output_is_identity() {
    let mut conv = ConvModule::new(&mut Init::new(3), 8, 8, 15, 1);
    zero(&mut conv.project);
    let x = random(&[9, 8], 4);
    assert_eq!(eval(|g, v| conv.forward(g, v, 0.0, None), &x), x);
}

#[test]
fn conv_downsample_shape_and_residual() {
    let mut conv = ConvModule::new(&mut Init::new(5), 120, 168, 15, 2);
    let x = random(&[10, 120], 6);
    assert_eq!(eval(|g, v| conv.forward(g, v, 0.0, None), &x).shape(), &[5, 168]);

    zero(&mut conv.project);
    let y = eval(|g, v| conv.forward(g, v, 0.0, None), &x);
    let residual = conv.residual.as_ref().unwrap();
    let expect = eval(|g, v| residual.forward(g, v), &pool2(&x));
    assert!(y.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn attention_downsample_matches_composed_oracle() {
    let mut m = MhsaModule::new(&mut Init::new(7), 8, 2, AttentionVariant::Strided(2)).unwrap();
    let x = random(&[8, 8], 8);
    let table = RelPosTable::new(8, 8).unwrap();
    let run = |m: &MhsaModule| {
        eval(
            |g, v| m.forward(g, v, Some(&table), AttentionVariant::Strided(2), 0.0, None),
            &x,
        )
    };
    let y = run(&m);
    assert_eq!(y.shape(), &[4, 8]);

    let normed = layer_norm_rows(&x);
    let att = reference::attention(&normed, &m.attention, AttentionVariant::Strided(2)).unwrap();
    let pooled = pool2(&x);
    let expect = Tensor::from_fn(&[4, 8], |i| att.data()[i] + pooled.data()[i]);
    assert!(y.max_abs_diff(&expect) < 1e-10);

    zero(&mut m.attention.output);
    assert!(run(&m).max_abs_diff(&pooled) < 1e-15);
}

fn block(d: usize, heads: usize, variant: AttentionVariant, downsample: Downsample, d_out: usize) -> ConformerBlock {
    let mut c = BlockConfig::new(d, heads, 3);
    c.variant = variant;
    c.downsample = downsample;
    c.d_out = d_out;
    ConformerBlock::new(&mut Init::new(11), c).unwrap()
}

fn run_block(b: &ConformerBlock, x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let need = effconf_core::attention::table_len_for(b.config.attention_variant(), n);
    let table = RelPosTable::new(need, b.config.d_in).unwrap();
    eval(|g, v| b.forward(g, v, Some(&table), None), x)
}

#[test]
fn zeroed_sublayers_reduce_block_to_layer_norm() {
    let mut b = block(8, 2, AttentionVariant::Grouped(2), Downsample::None, 8);
    zero(&mut b.ffn1.down);
    zero(&mut b.ffn2.down);
    zero(&mut b.mhsa.attention.output);
    zero(&mut b.conv.project);
    let x = random(&[7, 8], 12);
    assert!(run_block(&b, &x).max_abs_diff(&layer_norm_rows(&x)) < 1e-12);
}

#[test]
fn length_law_per_block() {
    let x = random(&[20, 8], 13);
    for (ds, d_out) in [(Downsample::None, 8), (Downsample::Conv, 12), (Downsample::Attention, 12)] {
        let b = block(8, 2, AttentionVariant::Regular, ds, d_out);
        let expect = if ds == Downsample::None { 20 } else { 10 };
        assert_eq!(run_block(&b, &x).shape(), &[expect, d_out]);
        assert_eq!(b.config.output_len(21), if ds == Downsample::None { 21 } else { 11 });
    }
}

#[test]
fn grouped_one_block_equals_regular_block() {
    let x = random(&[9, 8], 14);
    let a = run_block(&block(8, 2, AttentionVariant::Regular, Downsample::None, 8), &x);
    let b = run_block(&block(8, 2, AttentionVariant::Grouped(1), Downsample::None, 8), &x);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn invalid_block_configs_rejected() {
    let mut c = BlockConfig::new(8, 2, 4);
    assert!(c.validate().is_err());
    c.conv_kernel = 3;
    c.d_out = 12;
    assert!(c.validate().is_err());
    c.downsample = Downsample::Conv;
    assert!(c.validate().is_ok());
    c.d_out = 3;
    assert!(c.validate().is_err());
}

#[test]
fn block_gradients_match_finite_differences() {
    let cases = [
        (AttentionVariant::Regular, Downsample::None, 8),
        (AttentionVariant::Grouped(3), Downsample::None, 8),
        (AttentionVariant::Local(3), Downsample::None, 8),
        (AttentionVariant::Linear, Downsample::None, 8),
        (AttentionVariant::Regular, Downsample::Conv, 12),
        (AttentionVariant::Regular, Downsample::Attention, 12),
    ];
    let x = random(&[8, 8], 15);
    let opts = GradCheckOptions {
        max_entries: 40,
        ..Default::default()
    };
    for (v, ds, d_out) in cases {
        let b = block(8, 2, v, ds, d_out);
        let table = RelPosTable::new(9, 8).unwrap();
        let r = check_inputs(std::slice::from_ref(&x), &opts, |g, xs| b.forward(g, &xs[0], Some(&table), None)).unwrap();
        assert!(r.passes(1e-4), "{v:?} {ds:?} input {r:?}");
        let r = check_params(&b, |m| m.params_mut(), &opts, |m, g| {
            m.forward(g, &g.constant(x.clone()), Some(&table), None)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{v:?} {ds:?} params {r:?}");
    }
}

#[test]
fn dropout_only_with_rng() {
    let mut c = BlockConfig::new(8, 2, 3);
    c.dropout = 0.3;
    let b = ConformerBlock::new(&mut Init::new(1), c).unwrap();
    let x = random(&[6, 8], 1);
    let table = RelPosTable::new(6, 8).unwrap();
    let g = Graph::inference();
    let plain = b.forward(&g, &g.constant(x.clone()), Some(&table), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noisy = b
        .forward(&g, &g.constant(x), Some(&table), Some(&mut rng))
        .unwrap();
    assert!(plain.value().max_abs_diff(noisy.value()) > 1e-6);
}
