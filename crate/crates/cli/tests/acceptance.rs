//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Runs with `harness = false` so the lines reach the terminal uncaptured.

use std::time::{Duration, Instant};

use effconf_cli::bench::bench;
use effconf_cli::suites::{collapse_suite, gradcheck_suite, oracle_suite, skew_suite};
use effconf_core::attention::AttentionVariant;
use effconf_core::ctc::{ctc_brute_force, ctc_loss, CtcInstance};
use effconf_core::encoder::{DownsampleMethod, EncoderConfig, EncoderModel};
use effconf_core::profiler::{attention_madds, count_madds, count_params, score_map_elems};
use effconf_core::toy::{train, ToyTask, TrainConfig};
use effconf_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, Box<dyn FnOnce() -> Check>);

fn preset(name: &str) -> EncoderConfig {
    EncoderConfig::preset(name).unwrap()
}

fn total(c: &EncoderConfig) -> f64 {
    count_madds(c, "c", 1000).unwrap().total as f64
}

fn s_with(groups: &[usize]) -> EncoderConfig {
    preset("effconf-ctc-s").with_group_sizes(groups).unwrap()
}

fn rnnt_regular() -> EncoderConfig {
    preset("effconf-rnnt-s").with_group_sizes(&[1, 1, 1]).unwrap()
}

fn rows_check(rows: &[effconf_cli::report::CheckRow], elapsed: Duration, budget: Duration) -> Check {
    let worst = rows.iter().map(|r| r.max_err).fold(0.0, f64::max);
    let detail = format!("{} checks, worst {worst:.2e}, {:.1}s", rows.len(), elapsed.as_secs_f64());
    match rows.iter().find(|r| !r.pass) {
        Some(r) => Err(format!("{}: {:.3e} > {:.0e}", r.check, r.max_err, r.tolerance)),
        None if elapsed > budget => Err(format!("over time budget: {detail}")),
        None => Ok(detail),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn identity_collapses() -> Check {
    let (rows, t) = timed(|| collapse_suite(0, 50).unwrap());
    rows_check(&rows, t, Duration::from_secs(60))
}

fn oracle_equivalence() -> Check {
    let (rows, t) = timed(|| oracle_suite(0, 50).unwrap());
    rows_check(&rows, t, Duration::from_secs(60))
}

fn skew_exact() -> Check {
    let (rows, t) = timed(|| skew_suite(0).unwrap());
    rows_check(&rows, t, Duration::from_secs(60))
}

fn gradient_suite() -> Check {
    let (rows, t) = timed(|| gradcheck_suite(0).unwrap());
    let rows: Vec<_> = rows.into_iter().filter(|r| r.check != "ctc loss").collect();
    rows_check(&rows, t, Duration::from_secs(300))
}

fn madds_table() -> Check {
    let s = preset("effconf-ctc-s");
    let cases = [
        ("g=1,1,1", s_with(&[1, 1, 1]), 3.91e9, 0.15),
        ("g=3,1,1", s.clone(), 3.51e9, 0.15),
        ("g=5,3,1", s_with(&[5, 3, 1]), 3.29e9, 0.15),
        ("g=9,5,3", s_with(&[9, 5, 3]), 3.16e9, 0.15),
        ("w=175,-,-", s.clone().with_windows(&[Some(175), None, None]).unwrap(), 3.49e9, 0.15),
        ("w=130,130,-", s.clone().with_windows(&[Some(130), Some(130), None]).unwrap(), 3.29e9, 0.15),
        ("w=100,100,100", s.clone().with_windows(&[Some(100); 3]).unwrap(), 3.21e9, 0.15),
        ("linear", s.clone().with_linear_attention(), 2.87e9, 0.15),
        ("rnnt g=1,1,1", rnnt_regular(), 2.84e9, 0.15),
        (
            "rnnt attn-down",
            rnnt_regular().with_downsample_method(DownsampleMethod::Attention),
            2.75e9,
            0.15,
        ),
        ("rnnt g=3,1,1", preset("effconf-rnnt-s"), 2.51e9, 0.15),
        ("conformer-ctc-s", preset("conformer-ctc-s"), 5.41e9, 0.35),
        ("conformer-rnnt-s", preset("conformer-rnnt-s"), 3.73e9, 0.35),
    ];
    let mut worst = 0.0f64;
    for (name, c, want, tol) in cases {
        let dev = total(&c) / want - 1.0;
        if dev.abs() > tol {
            return Err(format!("{name}: {:.3e} vs {want:.3e}", total(&c)));
        }
        worst = worst.max(dev.abs());
    }
    Ok(format!("13 totals, worst deviation {:.1}%", worst * 100.0))
}

fn madds_ratios() -> Check {
    let base = total(&s_with(&[1, 1, 1]));
    let s = preset("effconf-ctc-s");
    let cases = [
        (total(&s) / base, 0.898),
        (total(&s_with(&[5, 3, 1])) / base, 0.841),
        (total(&s_with(&[9, 5, 3])) / base, 0.808),
        (total(&s.clone().with_windows(&[Some(175), None, None]).unwrap()) / base, 0.893),
        (total(&s.clone().with_linear_attention()) / base, 0.734),
        (total(&rnnt_regular()) / total(&preset("conformer-rnnt-s")), 0.761),
        (
            total(&rnnt_regular().with_downsample_method(DownsampleMethod::Attention)) / total(&rnnt_regular()),
            0.968,
        ),
        (
            total(&s_with(&[1, 1, 1]).with_downsample_method(DownsampleMethod::Attention)) / base,
            0.969,
        ),
    ];
    let mut worst = 0.0f64;
    for (got, want) in cases {
        if (got - want).abs() > 0.05 {
            return Err(format!("ratio {got:.3} vs {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(format!("8 ratios, worst |diff| {worst:.3}"))
}

fn analytic_exactness() -> Check {
    let mut cases = 0;
    for (n, d, h) in [(12, 8, 2), (360, 120, 4), (500, 240, 4), (1260, 144, 4)] {
        let regular = attention_madds(AttentionVariant::Regular, n, d, h).scores;
        let map = score_map_elems(AttentionVariant::Regular, n, h);
        for k in 1..=10 {
            if n % k != 0 {
                continue;
            }
            let grouped = attention_madds(AttentionVariant::Grouped(k), n, d, h).scores;
            let strided = attention_madds(AttentionVariant::Strided(k), n, d, h).scores;
            let gmap = score_map_elems(AttentionVariant::Grouped(k), n, h);
            if grouped * k as u64 != regular || strided * k as u64 != regular || gmap * (k * k) as u64 != map {
                return Err(format!("n={n} d={d} h={h} k={k}"));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} divisible cases exact"))
}

fn parameter_counts() -> Check {
    let cases = [
        ("conformer-ctc-s", 13.0e6),
        ("effconf-ctc-s", 13.2e6),
        ("conformer-ctc-m", 30.5e6),
        ("effconf-ctc-m", 31.5e6),
        ("conformer-ctc-l", 121.5e6),
        ("effconf-ctc-l", 125.6e6),
    ];
    let mut parts = Vec::new();
    for (name, want) in cases {
        let got = count_params(&preset(name)).unwrap() as f64;
        if (got / want - 1.0).abs() > 0.05 {
            return Err(format!("{name}: {got} vs {want}"));
        }
        parts.push(format!("{:.2}M", got / 1e6));
    }
    let built = EncoderModel::build(&preset("effconf-ctc-s"), 0).unwrap();
    use effconf_core::nn::Module;
    if built.num_params() as u64 != count_params(&preset("effconf-ctc-s")).unwrap() {
        return Err("analytic count differs from built model".into());
    }
    Ok(parts.join(" "))
}

fn length_law() -> Check {
    for name in effconf_core::encoder::PRESETS {
        // The baseline keeps a /4 stem and no later downsampling.
        let factor = if name.starts_with("effconf") { 8 } else { 4 };
        let c = preset(name);
        if let Some(t) = (8..=4096).find(|&t| c.output_len(t) != t.div_ceil(factor)) {
            return Err(format!("{name} at t={t}"));
        }
    }
    let mut c = preset("effconf-ctc-s");
    for (s, d) in c.stages.iter_mut().zip([8, 12, 16]) {
        s.blocks = 1;
        s.dim = d;
        s.heads = 2;
        s.conv_kernel = 3;
    }
    c.input_features = 4;
    c.stem_channels = 2;
    let m = EncoderModel::build(&c, 0).unwrap();
    let mut executed = 0;
    for t in (8..=256).chain([511, 1000, 2049, 4096]) {
        let g = Graph::inference();
        let out = m.forward(&g, &g.constant(Tensor::zeros(&[t, 4])), None).unwrap();
        if out.out_length != t.div_ceil(8) || out.sequence.shape()[0] != t.div_ceil(8) {
            return Err(format!("executed t={t} gave {}", out.out_length));
        }
        executed += 1;
    }
    Ok(format!("analytic t=8..4096 for every preset, {executed} executed lengths"))
}

fn ctc_oracle(grad_row: Option<&effconf_cli::report::CheckRow>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut feasible, mut worst) = (0, 0.0f64);
    for _ in 0..400 {
        let t = rng.gen_range(1..=8);
        let v = rng.gen_range(2..=4);
        let labels: Vec<usize> = (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(1..v)).collect();
        let g = Graph::inference();
        let logits = g.constant(Tensor::from_fn(&[t, v], |_| rng.gen_range(-2.0..2.0)));
        let inst = CtcInstance::new(g.log_softmax(&logits, 1).unwrap().to_tensor(), labels).unwrap();
        let p = ctc_brute_force(&inst).unwrap();
        let r = ctc_loss(&inst);
        if p > 0.0 {
            feasible += 1;
            worst = worst.max((r.nll + p.ln()).abs());
        } else if r.feasible || r.nll != f64::INFINITY {
            return Err("infeasible instance reported as feasible".into());
        }
    }
    let grad = grad_row.ok_or("no ctc gradient row")?;
    if feasible < 200 || worst >= 1e-9 || !grad.pass {
        return Err(format!(
            "{feasible} feasible, loss err {worst:.2e}, grad err {:.2e}",
            grad.max_err
        ));
    }
    Ok(format!(
        "{feasible} instances, loss err {worst:.2e}; gradient err {:.2e} over {} instances",
        grad.max_err, grad.cases
    ))
}

fn trainability() -> Check {
    let start = Instant::now();
    let task = ToyTask::new(0);
    let tc = TrainConfig {
        target_accuracy: Some(0.9),
        ..TrainConfig::default()
    };
    let run = || train(&task, &task.model_config(), &tc, |_| {}).unwrap();
    let a = run();
    let b = run();
    let elapsed = start.elapsed();
    let detail = format!(
        "accuracy {:.3} after {} steps, {:.0}s for two runs",
        a.accuracy,
        a.steps,
        elapsed.as_secs_f64()
    );
    if a.log != b.log {
        return Err(format!("rerun differs: {detail}"));
    }
    if a.accuracy < 0.9 || a.steps > 2000 || elapsed > Duration::from_secs(1200) {
        return Err(detail);
    }
    Ok(detail)
}

fn bench_direction() -> Check {
    let frames = [2048];
    let grouped = bench(&preset("effconf-ctc-s"), "g=3,1,1", &frames, 5, 0, |_| {}).unwrap();
    let regular = bench(&s_with(&[1, 1, 1]), "g=1,1,1", &frames, 5, 0, |_| {}).unwrap();
    let (g, r) = (grouped[0].median_ms, regular[0].median_ms);
    let detail = format!("2048 frames: grouped {g:.0}ms vs regular {r:.0}ms median");
    if g < r {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let grads = gradcheck_suite(0).unwrap();
    let ctc_row = grads.iter().find(|r| r.check == "ctc loss").cloned();
    let criteria: Vec<Criterion> = vec![
        ("identity collapses", Box::new(identity_collapses)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("skew equals gather", Box::new(skew_exact)),
        ("gradient suite", Box::new(gradient_suite)),
        ("MAdds table", Box::new(madds_table)),
        ("MAdds ratios", Box::new(madds_ratios)),
        ("analytic exactness", Box::new(analytic_exactness)),
        ("parameter counts", Box::new(parameter_counts)),
        ("length law", Box::new(length_law)),
        ("CTC vs enumeration", Box::new(move || ctc_oracle(ctc_row.as_ref()))),
        ("toy trainability", Box::new(trainability)),
        ("bench direction", Box::new(bench_direction)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
