use enhance_core::autodiff::ConvTrace;
use enhance_core::bench::{self, count_macs, layer_plan, parse_grid, BenchOptions, RESIDUAL_SWEEP, STRIDED_SWEEP};
use enhance_core::models::{Generator, GeneratorConfig, Mode, Model};
use enhance_core::{Rng, Shape, Tape, Tensor};

/// Counts multiply-accumulates by walking every (output pixel, tap) pair of
/// the convolutions a real forward pass executed.
fn traced_macs(trace: &[ConvTrace]) -> u64 {
    let mut total = 0u64;
    for t in trace {
        let (cin, cout) = (t.input.c as u64, t.output.c as u64);
        let mut taps = 0u64;
        if t.transposed {
            // Each input pixel scatters a full kernel into the output.
            for _y in 0..t.input.h {
                for _x in 0..t.input.w {
                    for _ in 0..t.kernel * t.kernel {
                        taps += 1;
                    }
                }
            }
        } else {
            for _y in 0..t.output.h {
                for _x in 0..t.output.w {
                    for _ in 0..t.kernel * t.kernel {
                        taps += 1;
                    }
                }
            }
        }
        total += taps * cin * cout * t.input.n as u64;
    }
    total
}

fn forward_trace(cfg: &GeneratorConfig, n: usize, h: usize, w: usize) -> (Vec<ConvTrace>, usize) {
    let mut g = Generator::new(cfg, &mut Rng::new(3)).unwrap();
    let tape = Tape::no_grad();
    let x = Tensor::random_uniform(Shape::new(n, 3, h, w).unwrap(), 0.0, 1.0, &mut Rng::new(4));
    g.forward(&tape, &tape.constant(x), Mode::Eval).unwrap();
    (tape.conv_trace(), g.param_count())
}

#[test]
fn macs_and_params_match_executed_graph() {
    for label in RESIDUAL_SWEEP.iter().chain(&STRIDED_SWEEP) {
        let cfg = GeneratorConfig::parse_label(label).unwrap();
        let (n, h, w) = (2, 12, 20);
        let (trace, params) = forward_trace(&cfg, n, h, w);
        let cost = count_macs(&cfg, Shape::new(n, 3, h, w).unwrap()).unwrap();
        assert_eq!(cost.macs, traced_macs(&trace), "{label}");
        assert_eq!(cost.params, params as u64, "{label}");
        let plan = layer_plan(&cfg, h, w).unwrap();
        assert_eq!(plan.convs.len(), trace.len(), "{label}");
        for (p, t) in plan.convs.iter().zip(&trace) {
            assert_eq!((p.output_hw.0, p.output_hw.1), (t.output.h, t.output.w), "{label} {}", p.name);
            assert_eq!(p.bias, t.bias, "{label} {}", p.name);
        }
    }
}

#[test]
fn batch_norm_and_prelu_params_counted() {
    let mut cfg = GeneratorConfig::parse_label("strided 3-4 8-32 2 prelu").unwrap();
    cfg.batch_norm = true;
    let (trace, params) = forward_trace(&cfg, 1, 8, 8);
    let cost = count_macs(&cfg, Shape::new(1, 3, 8, 8).unwrap()).unwrap();
    assert_eq!(cost.params, params as u64);
    assert_eq!(cost.macs, traced_macs(&trace));
}

#[test]
fn strided_is_cheaper_at_hd() {
    let hd = Shape::new(1, 3, 720, 1280).unwrap();
    let base = count_macs(&GeneratorConfig::baseline(), hd).unwrap();
    let strided = count_macs(&GeneratorConfig::strided(), hd).unwrap();
    assert!(base.macs > 3 * strided.macs, "{} vs {}", base.macs, strided.macs);
    assert!(strided.peak_mem_bytes < base.peak_mem_bytes);
    let two = count_macs(&GeneratorConfig::strided(), Shape::new(2, 3, 720, 1280).unwrap()).unwrap();
    assert_eq!(two.macs, 2 * strided.macs);
    assert!(two.peak_mem_bytes > strided.peak_mem_bytes);
}

#[test]
fn macs_only_report() {
    let grid = parse_grid("* baseline 3 64 4\nstrided 3-4 16-64 2\n").unwrap();
    let opts = BenchOptions {
        height: 64,
        width: 64,
        macs_only: true,
        ..BenchOptions::default()
    };
    let f = bench::frontier_report(&grid, None, &opts).unwrap();
    let tsv = f.to_tsv();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "arch\tkernel\tchannels\tblocks\tmacs\tparams");
    assert!(lines.next().unwrap().starts_with("baseline 3 64 4\t3\t64\t4\t"));
    assert!(lines.next().unwrap().starts_with("strided 3-4 16-64 2\t3-4\t16-64\t2\t"));
    assert!(f.rows.iter().all(|r| r.wall_ms.is_none()));
    let json: serde_json::Value = serde_json::from_str(&f.to_json()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn timed_report_has_baseline_speedup_one() {
    let grid = parse_grid("strided 3 4-16 1\n* strided 3 8-32 1\n").unwrap();
    let opts = BenchOptions {
        height: 32,
        width: 32,
        repeats: 3,
        ..BenchOptions::default()
    };
    let f = bench::frontier_report(&grid, None, &opts).unwrap();
    assert_eq!(f.rows[1].speedup, Some(1.0));
    assert_eq!(f.plot.len(), 2);
    let tsv = f.to_tsv();
    let row: Vec<&str> = tsv.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row.len(), 11);
    assert_eq!(row[5], "-");
}

#[test]
fn time_scales_with_pixels() {
    let mut g = Generator::new(&GeneratorConfig::strided(), &mut Rng::new(0)).unwrap();
    assert!(bench::time_inference(&mut g, 64, 64, 2, 1, 0).is_err());
    let small = bench::time_inference(&mut g, 128, 128, 5, 1, 0).unwrap();
    let big = bench::time_inference(&mut g, 256, 128, 5, 1, 0).unwrap();
    let ratio = big.median_ms / small.median_ms;
    assert!((1.0..=3.0).contains(&ratio), "doubling pixels scaled time by {ratio}");
}

#[test]
fn wall_time_order_follows_macs() {
    let grid = parse_grid("strided 3 4-16 1\nstrided 3 16-64 2\nbaseline 3 16 1\nbaseline 3 32 2\n").unwrap();
    let opts = BenchOptions {
        height: 128,
        width: 128,
        repeats: 3,
        ..BenchOptions::default()
    };
    let f = bench::frontier_report(&grid, None, &opts).unwrap();
    for a in &f.rows {
        for b in &f.rows {
            if a.macs as f64 > 1.5 * b.macs as f64 {
                assert!(a.wall_ms > b.wall_ms, "{} ({} MACs) ran faster than {} ({} MACs)", a.arch, a.macs, b.arch, b.macs);
            }
        }
    }
}
