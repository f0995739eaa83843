//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 even when a criterion fails, so the workspace test run reports
//! results rather than aborting; set `ACCEPTANCE_STRICT=1` to turn failures
//! into a nonzero exit. `ACCEPTANCE_ONLY=4,5` runs a subset.

use std::path::{Path, PathBuf};
use std::time::Instant;

use enhance_core::bench::{count_macs, time_inference};
use enhance_core::data::{self, DegradeSpec, PatchPair};
use enhance_core::losses::{self, LossParts, LossWeights, TvNorm};
use enhance_core::metrics::{self, ColorMode, MetricAccumulator};
use enhance_core::models::{FeatureExtractor, Generator, GeneratorConfig};
use enhance_core::ops::conv::conv2d_transpose_direct;
use enhance_core::ops::{conv2d, conv2d_transpose, Conv2dSpec, ConvTranspose2dSpec, GaussianKernel};
use enhance_core::train::{self, evaluate, evaluate_identity, TrainConfig, TrainOptions};
use enhance_core::{gradcheck, Rng, Shape, Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::random_uniform(Shape::new(n, c, h, w).unwrap(), 0.0, 1.0, &mut Rng::new(seed))
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let results = single_thread(|| {
        gradcheck::DEFAULT_SEEDS
            .iter()
            .flat_map(|&s| gradcheck::run(s, None).unwrap())
            .collect::<Vec<_>>()
    });
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("{}@{}", r.name, r.seed)).collect();
    let ops = gradcheck::op_names().len();
    verdict(
        failed.is_empty() && secs < 120.0,
        format!(
            "{ops} ops x {} seeds, worst {:.2e} ({} seed {}), {secs:.1} s single-thread{}",
            gradcheck::DEFAULT_SEEDS.len(),
            worst.max_rel_err,
            worst.name,
            worst.seed,
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn shapes_and_identity() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for cfg in [GeneratorConfig::baseline(), GeneratorConfig::strided()] {
        let mut g = Generator::new(&cfg, &mut Rng::new(0)).unwrap();
        for (h, w) in [(100, 100), (720, 1280)] {
            let x = image(1, 3, h, w, 1);
            let same = g.enhance(&x).unwrap().shape() == x.shape();
            ok &= same;
            if !same {
                notes.push(format!("{} changed {h}x{w}", cfg.label()));
            }
        }
    }

    let spec = Conv2dSpec::same(3, 3, 3).without_bias();
    let mut k = Tensor::zeros(spec.weight_shape());
    for c in 0..3 {
        k.set(c, c, 1, 1, 1.0);
    }
    let x = image(2, 3, 17, 23, 2);
    let tape = Tape::no_grad();
    let y = conv2d(&tape.constant(x.clone()), &spec, &tape.constant(k), None).unwrap().to_tensor();
    let exact = y.data() == x.data();
    ok &= exact;

    let mut worst = 0f64;
    let mut rng = Rng::new(3);
    for (cin, cout, k, s, p, e, h, w) in [
        (3, 5, 4, 2, 1, 0, 9, 11),
        (4, 2, 3, 2, 0, 1, 8, 6),
        (2, 3, 3, 1, 1, 0, 7, 7),
        (6, 3, 5, 2, 2, 1, 5, 9),
    ] {
        let t = ConvTranspose2dSpec::new(cout, cin, k, s, p).with_extra_padding(e).without_bias();
        let c = t.adjoint();
        let (oh, ow) = t.output_hw(h, w).unwrap();
        let xa = Tensor::random_normal(Shape::new(2, cin, oh, ow).unwrap(), 0.0, 1.0, &mut rng).unwrap();
        let ya = Tensor::random_normal(Shape::new(2, cout, h, w).unwrap(), 0.0, 1.0, &mut rng).unwrap();
        let wt = Tensor::random_normal(t.weight_shape(), 0.0, 1.0, &mut rng).unwrap();
        let cx = conv2d(&tape.constant(xa.clone()), &c, &tape.constant(wt.clone()), None).unwrap().to_tensor();
        let ty = conv2d_transpose(&tape.constant(ya.clone()), &t, &tape.constant(wt), None).unwrap().to_tensor();
        let (l, r) = (cx.dot_f64(&ya).unwrap(), xa.dot_f64(&ty).unwrap());
        worst = worst.max((l - r).abs() / l.abs().max(r.abs()));
    }
    ok &= worst < 1e-4;
    notes.push(format!(
        "both generators keep 100x100 and 1280x720; identity conv exact: {exact}; adjoint worst rel {worst:.1e}"
    ));
    verdict(ok, notes.join("; "))
}

fn checkerboard() -> Verdict {
    let spread = |k: usize| {
        let spec = ConvTranspose2dSpec::new(1, 1, k, 2, 0).without_bias();
        let x = Tensor::full(Shape::new(1, 1, 10, 10).unwrap(), 1.0);
        let y = conv2d_transpose_direct(&x, &spec, &Tensor::full(spec.weight_shape(), 1.0), None).unwrap();
        let s = y.shape();
        let mut v = Vec::new();
        for i in k..s.h - k {
            for j in k..s.w - k {
                v.push(y.at(0, 0, i, j));
            }
        }
        let min = v.iter().copied().fold(f32::MAX, f32::min);
        let max = v.iter().copied().fold(f32::MIN, f32::max);
        (min, max)
    };
    let (a, b) = (spread(4), spread(3));
    verdict(
        a.0 == a.1 && b.0 < b.1,
        format!("k4/s2 interior range {a:?}; k3/s2 interior range {b:?}"),
    )
}

fn performance() -> Verdict {
    let start = Instant::now();
    let hd = Shape::new(1, 3, 720, 1280).unwrap();
    let (base, strided) = (GeneratorConfig::baseline(), GeneratorConfig::strided());
    let ratio = count_macs(&base, hd).unwrap().macs as f64 / count_macs(&strided, hd).unwrap().macs as f64;
    let time = |cfg: &GeneratorConfig| {
        let mut g = Generator::new(cfg, &mut Rng::new(0)).unwrap();
        time_inference(&mut g, 720, 1280, 3, 1, 0).unwrap().median_ms
    };
    let (tb, ts) = (time(&base), time(&strided));
    let secs = start.elapsed().as_secs_f64();
    let speedup = tb / ts;
    verdict(
        ratio > 3.0 && speedup >= 2.0 && secs < 300.0,
        format!(
            "MAC ratio {ratio:.2}; 1280x720 single-thread median {:.2} s vs {:.2} s = {speedup:.2}x; {secs:.0} s",
            tb / 1e3,
            ts / 1e3
        ),
    )
}

struct Desk {
    test: Vec<PatchPair>,
    train: Vec<PatchPair>,
}

impl Desk {
    fn new() -> Desk {
        Desk {
            train: data::synthetic_pairs(64, 64, &DegradeSpec::default(), 1).unwrap(),
            test: data::synthetic_pairs(16, 64, &DegradeSpec::default(), 2).unwrap(),
        }
    }

    /// One full run; returns the outcome and the final generator file.
    fn run(&self, out: &Path) -> (train::TrainOutcome, PathBuf) {
        let cfg = TrainConfig {
            iterations: 500,
            batch_size: 8,
            gen: GeneratorConfig::parse_label("strided 3-4 16-64 2").unwrap(),
            seed: 0,
            ..TrainConfig::default()
        };
        let outcome = single_thread(|| {
            train::train(
                cfg,
                FeatureExtractor::tiny_fixed(),
                &self.train,
                TrainOptions {
                    out_dir: Some(out.to_path_buf()),
                    omit_timing: true,
                    ..Default::default()
                },
            )
            .unwrap()
        });
        let path = outcome.checkpoints.last().unwrap().generator.clone();
        (outcome, path)
    }
}

fn desk_training(desk: &Desk, out: &Path) -> (Verdict, PathBuf) {
    let start = Instant::now();
    let (mut outcome, path) = desk.run(out);
    let secs = start.elapsed().as_secs_f64();
    let totals: Vec<f64> = outcome.log.iter().map(|r| r.losses.total as f64).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&totals[..50]), mean(&totals[totals.len() - 50..]));
    let mut score = |mode| {
        let before = evaluate_identity(&desk.test, mode).unwrap().psnr_db;
        let after = evaluate(&mut outcome.trainer.generator, &desk.test, mode).unwrap().psnr_db;
        (before, after)
    };
    let (rb, ra) = score(ColorMode::RgbMean);
    let (lb, la) = score(ColorMode::Luma);
    let pass = last < first && ra - rb >= 0.5 && secs < 1800.0;
    let v = verdict(
        pass,
        format!(
            "loss {first:.3} -> {last:.3} (first/last 50 means); held-out PSNR {rb:.2} -> {ra:.2} dB ({:+.2}); luma {lb:.2} -> {la:.2} dB ({:+.2}); {secs:.0} s",
            ra - rb,
            la - lb
        ),
    );
    (v, path)
}

fn metric_suite() -> Verdict {
    let a = Tensor::zeros(Shape::new(1, 1, 4, 4).unwrap());
    let b = Tensor::full(a.shape(), 1.0);
    let p = metrics::psnr(&a, &b, 255.0).unwrap();
    let x = image(1, 3, 180, 190, 4);
    let s = metrics::ssim(&x, &x).unwrap();
    let ms = metrics::ms_ssim(&x, &x).unwrap();
    let scores: Vec<f32> = [0.01f32, 0.05, 0.15]
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let mut rng = Rng::new(10 + i as u64);
            let mut y = x.clone();
            for v in y.data_mut() {
                *v = (*v + sigma * rng.standard_normal()).clamp(0.0, 1.0);
            }
            let mut acc = MetricAccumulator::new(ColorMode::Luma);
            acc.add(&y, &x).unwrap();
            acc.report().unwrap().psnr_db
        })
        .collect();
    let monotone = scores.windows(2).all(|w| w[0] > w[1]);
    verdict(
        (p - 48.1308).abs() <= 1e-3 && (s - 1.0).abs() <= 1e-6 && (ms - 1.0).abs() <= 1e-6 && monotone,
        format!("PSNR(MSE 1 @ 255) = {p:.4} dB; SSIM {s}; MS-SSIM {ms}; PSNR under noise {scores:.2?}"),
    )
}

fn loss_arithmetic() -> Verdict {
    let tape = Tape::no_grad();
    let (total, _) = losses::total_loss(&LossParts::from_values(&tape, 1.0, 1.0, 1.0, 0.001), &LossWeights::default()).unwrap();
    let total = total.item();
    let k = GaussianKernel::color_loss_default();
    let (x, y) = (image(2, 3, 16, 16, 5), image(2, 3, 16, 16, 6));
    let c = |a: &Tensor, b: &Tensor| losses::color_loss(&tape.constant(a.clone()), &tape.constant(b.clone()), &k).unwrap().item();
    let (xy, yx, xx) = (c(&x, &y), c(&y, &x), c(&x, &x));
    let flat = tape.constant(Tensor::full(Shape::new(2, 3, 9, 7).unwrap(), 0.37));
    let tv = [TvNorm::SquaredFields, TvNorm::LiteralSum].map(|n| losses::tv_loss(&flat, n).unwrap().item());
    let symmetric = (xy - yx).abs() <= 1e-6 * xy.abs();
    verdict(
        (total - 1.9).abs() <= 1e-6 && symmetric && xx == 0.0 && tv == [0.0, 0.0],
        format!("total {total}; color(x,y) {xy:.6} vs color(y,x) {yx:.6}; color(x,x) {xx}; tv(const) {tv:?}"),
    )
}

fn determinism(desk: &Desk, first: Option<PathBuf>, dir: &Path) -> Verdict {
    let a = first.unwrap_or_else(|| desk.run(&dir.join("run_a")).1);
    let b = desk.run(&dir.join("run_b")).1;
    let (wa, wb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    verdict(wa == wb, format!("final generator files {} bytes, identical: {}", wa.len(), wa == wb))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |i: u32| only.as_ref().is_none_or(|o| o.contains(&i));
    let dir = tempfile::tempdir().unwrap();
    let desk = (wanted(5) || wanted(8)).then(Desk::new);
    let mut first_run = None;

    let mut results = Vec::new();
    let mut record = |i: u32, name: &str, v: Verdict| {
        println!("[{}] {i}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push(v.pass);
    };
    if wanted(1) {
        record(1, "gradient suite", gradients());
    }
    if wanted(2) {
        record(2, "shape/identity suite", shapes_and_identity());
    }
    if wanted(3) {
        record(3, "checkerboard property", checkerboard());
    }
    if wanted(4) {
        record(4, "performance ratio", performance());
    }
    if wanted(5) {
        let (v, path) = desk_training(desk.as_ref().unwrap(), &dir.path().join("run_a"));
        first_run = Some(path);
        record(5, "desk-scale training", v);
    }
    if wanted(6) {
        record(6, "metric suite", metric_suite());
    }
    if wanted(7) {
        record(7, "loss arithmetic", loss_arithmetic());
    }
    if wanted(8) {
        record(8, "determinism", determinism(desk.as_ref().unwrap(), first_run, dir.path()));
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed < results.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
