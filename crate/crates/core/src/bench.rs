//! Cost model and timing harness for generator architectures.
//!
//! MACs and parameter counts come from a layer plan derived from the config
//! alone. A convolution costs `out_h*out_w*cout*cin*k^2` multiply-accumulates
//! (padded taps included); a transposed convolution costs
//! `in_h*in_w*cin*cout*k^2`, the dense scatter it performs. Bias adds,
//! normalization and activations are not counted.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::data::PatchPair;
use crate::error::{Error, Result};
use crate::metrics::{fmt_db, ColorMode, MetricAccumulator, MetricReport};
use crate::models::generator::BASELINE_OUTER_KERNEL;
use crate::models::{weights, Generator, GeneratorConfig, Model, Variant};
use crate::ops::{Conv2dSpec, ConvTranspose2dSpec};
use crate::tensor::{Rng, Shape, Tensor};

/// Residual-network sweep: kernel 3 and 5 at several widths and depths.
pub const RESIDUAL_SWEEP: [&str; 17] = [
    "baseline 3 64 4",
    "baseline 3 16 1",
    "baseline 3 16 2",
    "baseline 3 16 3",
    "baseline 3 16 4",
    "baseline 3 32 2",
    "baseline 3 32 4",
    "baseline 3 128 1",
    "baseline 3 128 3",
    "baseline 5 16 1",
    "baseline 5 16 2",
    "baseline 5 16 3",
    "baseline 5 16 4",
    "baseline 5 32 2",
    "baseline 5 32 4",
    "baseline 5 128 1",
    "baseline 5 128 3",
];

/// Strided encoder-decoder sweep over kernels, widths and PReLU.
pub const STRIDED_SWEEP: [&str; 7] = [
    "strided 3 16-64 2",
    "strided 3 32-128 2",
    "strided 3-4 16-64 2",
    "strided 3-4 32-128 2",
    "strided 4 16-64 2",
    "strided 4 32-128 2",
    "strided 4 32-128 2 prelu",
];

/// One convolution of the plan, per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedConv {
    pub name: String,
    pub transposed: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
    pub bias: bool,
    /// Elements of other activations alive while this layer runs.
    pub held: usize,
}

impl PlannedConv {
    pub fn macs(&self) -> u64 {
        let k2 = (self.kernel * self.kernel) as u64;
        let channels = (self.in_channels * self.out_channels) as u64;
        let (h, w) = if self.transposed { self.input_hw } else { self.output_hw };
        (h * w) as u64 * channels * k2
    }

    pub fn params(&self) -> u64 {
        let w = self.in_channels * self.out_channels * self.kernel * self.kernel;
        (w + if self.bias { self.out_channels } else { 0 }) as u64
    }

    fn live(&self) -> usize {
        let (ih, iw) = self.input_hw;
        let (oh, ow) = self.output_hw;
        self.held + self.in_channels * ih * iw + self.out_channels * oh * ow
    }
}

#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub convs: Vec<PlannedConv>,
    /// Batch-norm scales/shifts and PReLU slopes.
    pub other_params: u64,
    /// Batch-norm running statistics: stored, but not learnable.
    pub buffers: u64,
}

impl LayerPlan {
    pub fn macs(&self) -> u64 {
        self.convs.iter().map(PlannedConv::macs).sum()
    }

    pub fn params(&self) -> u64 {
        self.convs.iter().map(PlannedConv::params).sum::<u64>() + self.other_params
    }

    /// Largest live activation set, per image, in elements.
    pub fn peak_activations(&self) -> usize {
        self.convs.iter().map(PlannedConv::live).max().unwrap_or(0)
    }
}

struct Planner {
    cfg: GeneratorConfig,
    plan: LayerPlan,
}

impl Planner {
    fn conv(&mut self, name: &str, spec: Conv2dSpec, hw: (usize, usize), held: usize) -> Result<(usize, usize)> {
        let out = spec.output_hw(hw.0, hw.1)?;
        self.plan.convs.push(PlannedConv {
            name: name.to_string(),
            transposed: false,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            input_hw: hw,
            output_hw: out,
            bias: spec.has_bias,
            held,
        });
        Ok(out)
    }

    fn conv_t(&mut self, name: &str, spec: ConvTranspose2dSpec, hw: (usize, usize), held: usize) -> Result<(usize, usize)> {
        let out = spec.output_hw(hw.0, hw.1)?;
        self.plan.convs.push(PlannedConv {
            name: name.to_string(),
            transposed: true,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            input_hw: hw,
            output_hw: out,
            bias: spec.has_bias,
            held,
        });
        Ok(out)
    }

    fn act(&mut self, channels: usize) {
        if self.cfg.use_prelu {
            self.plan.other_params += channels as u64;
        }
    }

    fn blocks(&mut self, channels: usize, hw: (usize, usize), held: usize) -> Result<()> {
        let bn = self.cfg.batch_norm;
        let spec = Conv2dSpec::same(channels, channels, self.cfg.kernel);
        let spec = if bn { spec.without_bias() } else { spec };
        let size = channels * hw.0 * hw.1;
        for i in 0..self.cfg.blocks {
            self.conv(&format!("block{i}.conv1"), spec, hw, held)?;
            self.act(channels);
            // The block input stays alive for the identity skip.
            self.conv(&format!("block{i}.conv2"), spec, hw, held + size)?;
            if bn {
                self.plan.other_params += 4 * channels as u64;
                self.plan.buffers += 4 * channels as u64;
            }
        }
        Ok(())
    }
}

/// Per-image layer plan for an `h x w` input.
pub fn layer_plan(cfg: &GeneratorConfig, h: usize, w: usize) -> Result<LayerPlan> {
    cfg.validate()?;
    let m = cfg.size_multiple();
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::arg("layer_plan", format!("{h}x{w} is not a positive multiple of {m}")));
    }
    let mut p = Planner {
        cfg: cfg.clone(),
        plan: LayerPlan {
            convs: Vec::new(),
            other_params: 0,
            buffers: 0,
        },
    };
    let (c, k) = (cfg.base_channels, cfg.kernel);
    // The input is kept for the final residual add.
    let x = 3 * h * w;
    match cfg.variant {
        Variant::Baseline => {
            let ok = BASELINE_OUTER_KERNEL;
            let hw = p.conv("head", Conv2dSpec::same(3, c, ok), (h, w), 0)?;
            p.act(c);
            p.blocks(c, hw, x)?;
            for name in ["tail1", "tail2"] {
                p.conv(name, Conv2dSpec::same(c, c, k), hw, x)?;
                p.act(c);
            }
            p.conv("out", Conv2dSpec::same(c, 3, ok), hw, x)?;
        }
        Variant::Strided => {
            let (sk, (sp, extra)) = (cfg.strided_kernel, cfg.strided_padding());
            let down = |cin, cout| Conv2dSpec::new(cin, cout, sk, 2, sp).with_extra_padding(extra);
            let up = |cin, cout| ConvTranspose2dSpec::new(cin, cout, sk, 2, sp).with_extra_padding(extra);
            let full = p.conv("head", Conv2dSpec::same(3, c, k), (h, w), 0)?;
            p.act(c);
            let h0 = c * full.0 * full.1;
            let half = p.conv("down1", down(c, 2 * c), full, x)?;
            p.act(2 * c);
            let s1 = 2 * c * half.0 * half.1;
            let quarter = p.conv("down2", down(2 * c, 4 * c), half, x + h0)?;
            p.act(4 * c);
            p.blocks(4 * c, quarter, x + h0 + s1)?;
            p.conv_t("up1", up(4 * c, 2 * c), quarter, x + h0 + s1)?;
            p.act(2 * c);
            p.conv_t("up2", up(2 * c, c), half, x + h0)?;
            p.act(c);
            p.conv("out", Conv2dSpec::same(c, 3, k), full, x)?;
        }
    }
    Ok(p.plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
    pub peak_mem_bytes: u64,
}

/// Exact MACs and learnable parameters for a `(n, 3, h, w)` input, plus the
/// analytic peak memory: the largest live activation set plus all weights.
pub fn count_macs(cfg: &GeneratorConfig, input: Shape) -> Result<Cost> {
    if input.c != 3 {
        return Err(Error::ChannelMismatch {
            op: "count_macs",
            expected: 3,
            actual: input.c,
        });
    }
    let plan = layer_plan(cfg, input.h, input.w)?;
    let weights = plan.params() + plan.buffers;
    Ok(Cost {
        macs: plan.macs() * input.n as u64,
        params: plan.params(),
        peak_mem_bytes: 4 * (plan.peak_activations() as u64 * input.n as u64 + weights),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
    pub threads: usize,
}

/// Median wall time of `repeats` eval-mode forward passes on an `h x w`
/// image, after one untimed warm-up, inside a pool of `threads` workers.
pub fn time_inference(gen: &mut Generator, h: usize, w: usize, repeats: usize, threads: usize, seed: u64) -> Result<Timing> {
    if repeats < 3 {
        return Err(Error::arg("time_inference", format!("need at least 3 repeats, got {repeats}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::arg("time_inference", e.to_string()))?;
    let image = Tensor::random_uniform(Shape::new(1, 3, h, w)?, 0.0, 1.0, &mut Rng::new(seed));
    let mut samples = pool.install(|| -> Result<Vec<f64>> {
        gen.enhance(&image)?;
        (0..repeats)
            .map(|_| {
                let start = Instant::now();
                gen.enhance(&image)?;
                Ok(start.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    })?;
    let raw = samples.clone();
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    let median = if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    };
    Ok(Timing {
        median_ms: median,
        samples_ms: raw,
        threads: threads.max(1),
    })
}

/// One architecture to benchmark, optionally with trained weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub cfg: GeneratorConfig,
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub entries: Vec<GridEntry>,
    /// Row that speedups are relative to.
    pub baseline: usize,
}

/// One architecture label per line, `#` comments. A leading `*` marks the
/// baseline row (default: the first); `@ <path>` attaches a weight file.
///
/// ```text
/// * baseline 3 64 4
/// strided 3-4 16-64 2 @ runs/strided/checkpoints/checkpoint_000500.fpie
/// ```
pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut entries = Vec::new();
    let mut baseline = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (line, star) = match line.strip_prefix('*') {
            Some(rest) => (rest.trim(), true),
            None => (line, false),
        };
        let (label, weights) = match line.split_once('@') {
            Some((l, p)) => (l.trim(), Some(PathBuf::from(p.trim()))),
            None => (line, None),
        };
        let cfg = GeneratorConfig::parse_label(label)
            .map_err(|e| Error::InvalidConfig(format!("grid line {}: {e}", i + 1)))?;
        if star {
            if baseline.is_some() {
                return Err(Error::InvalidConfig(format!("grid line {}: second baseline marker", i + 1)));
            }
            baseline = Some(entries.len());
        }
        entries.push(GridEntry { cfg, weights });
    }
    if entries.is_empty() {
        return Err(Error::InvalidConfig("grid lists no architectures".into()));
    }
    Ok(Grid {
        entries,
        baseline: baseline.unwrap_or(0),
    })
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text)
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
    pub threads: usize,
    /// Skip timing and quality: costs only.
    pub macs_only: bool,
    pub seed: u64,
    pub metric_mode: ColorMode,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            height: 720,
            width: 1280,
            repeats: 5,
            threads: 1,
            macs_only: false,
            seed: 0,
            metric_mode: ColorMode::Luma,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub arch: String,
    pub kernel: String,
    pub channels: String,
    pub blocks: usize,
    pub prelu: bool,
    pub macs: u64,
    pub params: u64,
    pub peak_mem_bytes: u64,
    pub wall_ms: Option<f64>,
    pub psnr_db: Option<f32>,
    pub ssim: Option<f32>,
    pub ms_ssim: Option<f32>,
    pub speedup: Option<f64>,
}

fn kernel_and_channels(cfg: &GeneratorConfig) -> (String, String) {
    match cfg.variant {
        Variant::Baseline => (cfg.kernel.to_string(), cfg.base_channels.to_string()),
        Variant::Strided => {
            let k = if cfg.strided_kernel == cfg.kernel {
                cfg.kernel.to_string()
            } else {
                format!("{}-{}", cfg.kernel, cfg.strided_kernel)
            };
            (k, format!("{}-{}", cfg.base_channels, cfg.max_channels))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PlotPoint {
    pub arch: String,
    pub speedup: f64,
    pub ms_ssim: Option<f32>,
}

/// Rows plus the `(speedup, ms_ssim)` series.
#[derive(Clone, Debug, Serialize)]
pub struct Frontier {
    pub height: usize,
    pub width: usize,
    pub threads: usize,
    pub repeats: usize,
    pub macs_only: bool,
    pub baseline: String,
    pub rows: Vec<BenchReport>,
    pub plot: Vec<PlotPoint>,
}

fn quality(gen: &mut Generator, set: &[PatchPair], mode: ColorMode) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(mode);
    for p in set {
        acc.add(&gen.enhance(&p.phone)?, &p.dslr)?;
    }
    acc.report()
}

/// Costs every grid entry and, unless `macs_only`, times it and scores it
/// on `test_set`. Untrained entries are initialized from `opts.seed`.
pub fn frontier_report(grid: &Grid, test_set: Option<&[PatchPair]>, opts: &BenchOptions) -> Result<Frontier> {
    let input = Shape::new(1, 3, opts.height, opts.width)?;
    let mut rows = Vec::with_capacity(grid.entries.len());
    for (i, entry) in grid.entries.iter().enumerate() {
        let cost = count_macs(&entry.cfg, input)?;
        let (kernel, channels) = kernel_and_channels(&entry.cfg);
        let mut row = BenchReport {
            arch: entry.cfg.label(),
            kernel,
            channels,
            blocks: entry.cfg.blocks,
            prelu: entry.cfg.use_prelu,
            macs: cost.macs,
            params: cost.params,
            peak_mem_bytes: cost.peak_mem_bytes,
            wall_ms: None,
            psnr_db: None,
            ssim: None,
            ms_ssim: None,
            speedup: None,
        };
        if !opts.macs_only {
            let mut gen = Generator::new(&entry.cfg, &mut Rng::new(opts.seed).derive(i as u64))?;
            if let Some(path) = &entry.weights {
                gen.load(&weights::load(path)?)?;
            }
            let t = time_inference(&mut gen, opts.height, opts.width, opts.repeats, opts.threads, opts.seed)?;
            row.wall_ms = Some(t.median_ms);
            if let Some(set) = test_set {
                let q = quality(&mut gen, set, opts.metric_mode)?;
                row.psnr_db = Some(q.psnr_db);
                row.ssim = Some(q.ssim);
                row.ms_ssim = q.ms_ssim;
            }
        }
        rows.push(row);
    }
    let base_ms = rows[grid.baseline].wall_ms;
    for row in &mut rows {
        row.speedup = base_ms.zip(row.wall_ms).map(|(b, t)| b / t);
    }
    let plot = rows
        .iter()
        .filter_map(|r| {
            r.speedup.map(|s| PlotPoint {
                arch: r.arch.clone(),
                speedup: s,
                ms_ssim: r.ms_ssim,
            })
        })
        .collect();
    Ok(Frontier {
        height: opts.height,
        width: opts.width,
        threads: opts.threads,
        repeats: opts.repeats,
        macs_only: opts.macs_only,
        baseline: rows[grid.baseline].arch.clone(),
        rows,
        plot,
    })
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map_or_else(|| "-".to_string(), f)
}

impl Frontier {
    /// Tab-separated table. Costs-only reports keep the identifying and
    /// cost columns.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        if self.macs_only {
            s.push_str("arch\tkernel\tchannels\tblocks\tmacs\tparams\n");
            for r in &self.rows {
                let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", r.arch, r.kernel, r.channels, r.blocks, r.macs, r.params);
            }
            return s;
        }
        s.push_str("arch\tkernel\tchannels\tblocks\ttime_s\tpsnr\tms_ssim\tspeedup\tmacs\tparams\tpeak_mem_bytes\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.arch,
                r.kernel,
                r.channels,
                r.blocks,
                opt(r.wall_ms, |t| format!("{:.3}", t / 1e3)),
                opt(r.psnr_db, fmt_db),
                match (r.psnr_db, r.ms_ssim) {
                    (None, _) => "-".to_string(),
                    (Some(_), None) => "n/a".to_string(),
                    (Some(_), Some(m)) => format!("{m:.4}"),
                },
                opt(r.speedup, |v| format!("{v:.2}")),
                r.macs,
                r.params,
                r.peak_mem_bytes,
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("frontier serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_arithmetic() {
        let spec = Conv2dSpec::new(16, 16, 3, 1, 1);
        let conv = PlannedConv {
            name: "c".into(),
            transposed: false,
            in_channels: 16,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            input_hw: (100, 100),
            output_hw: spec.output_hw(100, 100).unwrap(),
            bias: true,
            held: 0,
        };
        assert_eq!(conv.macs(), 23_040_000);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("# sweep\nstrided 3-4 16-64 2 @ w.fpie\n* baseline 3 64 4  # reference\n\n").unwrap();
        assert_eq!(g.entries.len(), 2);
        assert_eq!(g.baseline, 1);
        assert_eq!(g.entries[0].weights.as_deref(), Some(Path::new("w.fpie")));
        assert!(parse_grid("# nothing\n").is_err());
        let err = parse_grid("baseline 3 64 4\nwide 3 1 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_grid("* baseline 3 64 4\n* baseline 3 16 1\n").is_err());
    }

    #[test]
    fn sweeps_parse() {
        for label in RESIDUAL_SWEEP.iter().chain(&STRIDED_SWEEP) {
            GeneratorConfig::parse_label(label).unwrap();
        }
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = GeneratorConfig::strided();
        assert!(count_macs(&cfg, Shape::new(1, 3, 10, 12).unwrap()).is_err());
        assert!(count_macs(&cfg, Shape::new(1, 1, 12, 12).unwrap()).is_err());
    }
}
