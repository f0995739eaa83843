mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use enhance_core::bench::{self, BenchOptions};
use enhance_core::data::{self, Split};
use enhance_core::gradcheck;
use enhance_core::metrics::MetricReport;
use enhance_core::models::{weights, Generator, GeneratorConfig, Model};
use enhance_core::train::{self, LogRow, TrainOptions};
use enhance_core::Rng;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "enhancer", version, about = "Train, run and benchmark photo-enhancement generators")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (`key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `threads`: worker threads for kernel-internal parallelism
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `deterministic`: omit wall-clock values from logs and output
    #[arg(long, global = true)]
    deterministic: bool,
    /// Sets any config key, e.g. `--set loss.tv=200`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator on `<data>/train`, evaluating on `<data>/test` if present
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Enhance one PNG with a trained generator
    Enhance {
        #[arg(long)]
        weights: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Print PSNR/SSIM/MS-SSIM of a generator over a dataset split
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Cost, time and score a grid of architectures
    Bench {
        /// One architecture label per line; `*` marks the baseline row
        #[arg(long)]
        grid: PathBuf,
        /// Time on this image's resolution instead of `bench.height` x `bench.width`
        image: Option<PathBuf>,
        /// Dataset whose test split is used for PSNR/MS-SSIM
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only count MACs and parameters
        #[arg(long)]
        macs_only: bool,
        /// Also write frontier.tsv and frontier.json here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and loss gradient
    Gradcheck {
        /// Print the checked names without running
        #[arg(long)]
        list: bool,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write synthetic degraded/clean pairs as PNG
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &g.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    cfg.deterministic |= g.deterministic;
    if cfg.threads == 0 {
        bail!("threads must be >= 1");
    }
    Ok(cfg)
}

fn load_generator(path: &Path) -> Result<Generator> {
    let tensors = weights::load(path).with_context(|| format!("cannot load weights {}", path.display()))?;
    let gcfg = GeneratorConfig::infer(&tensors)?;
    let mut g = Generator::new(&gcfg, &mut Rng::new(0))?;
    g.load(&tensors)?;
    Ok(g)
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} directory {} does not exist", path.display());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, iterations: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    let data = data.unwrap_or_else(|| cfg.data_dir.clone());
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let tcfg = cfg.train_config()?;
    require_dir(&data, "dataset")?;
    let pairs = data::load_pairs(&data, Split::Train)?;
    let test_dir = data::split_dir(&data, Split::Test);
    let test = if test_dir.is_dir() { Some(data::load_pairs(&data, Split::Test)?) } else { None };
    let features = cfg.feature_extractor()?;
    println!("# {} on {} pairs, config {}", tcfg.gen.label(), pairs.len(), tcfg.hash());
    println!("{}", LogRow::header());
    let every = (tcfg.iterations / 20).max(1);
    let total = tcfg.iterations;
    let mut progress = |row: &LogRow| {
        if row.iteration % every == 0 || row.iteration == 1 || row.iteration == total {
            println!("{}", row.csv());
        }
    };
    let outcome = train::train(
        tcfg,
        features,
        &pairs,
        TrainOptions {
            out_dir: Some(out.clone()),
            eval_set: test.as_deref(),
            progress: Some(&mut progress),
            omit_timing: cfg.deterministic,
        },
    )?;
    if let Some((it, report)) = outcome.evals.last() {
        println!("iteration\t{}", MetricReport::HEADER);
        println!("{it}\t{report}");
    }
    if let Some(ck) = outcome.checkpoints.last() {
        println!("checkpoint {}", ck.generator.display());
    }
    Ok(())
}

fn cmd_enhance(weights: &Path, input: &Path, output: &Path) -> Result<()> {
    let mut g = load_generator(weights)?;
    let img = data::read_png(input)?;
    let out = g.enhance(&img)?;
    data::write_png(output, &out)?;
    let s = out.shape();
    println!("wrote {} ({}x{})", output.display(), s.w, s.h);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, weights: &Path, data: Option<PathBuf>, split: &str) -> Result<()> {
    let mut g = load_generator(weights)?;
    let data = data.unwrap_or_else(|| cfg.data_dir.clone());
    require_dir(&data, "dataset")?;
    let pairs = data::load_pairs(&data, Split::parse(split)?)?;
    let report = train::evaluate(&mut g, &pairs, cfg.train.metric_mode)?;
    println!("{}", MetricReport::HEADER);
    println!("{report}");
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, grid: &Path, image: Option<PathBuf>, data: Option<PathBuf>, macs_only: bool, out: Option<PathBuf>) -> Result<()> {
    let grid = bench::load_grid(grid)?;
    let (height, width) = match &image {
        Some(p) => {
            let s = data::read_png(p)?.shape();
            (s.h, s.w)
        }
        None => (cfg.bench_height, cfg.bench_width),
    };
    let test = match &data {
        Some(d) if !macs_only => {
            require_dir(d, "dataset")?;
            Some(data::load_pairs(d, Split::Test)?)
        }
        _ => None,
    };
    let opts = BenchOptions {
        height,
        width,
        repeats: cfg.bench_repeats,
        threads: cfg.threads,
        macs_only,
        seed: cfg.seed,
        metric_mode: cfg.train.metric_mode,
    };
    let frontier = bench::frontier_report(&grid, test.as_deref(), &opts)?;
    print!("{}", frontier.to_tsv());
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for (name, body) in [("frontier.tsv", frontier.to_tsv()), ("frontier.json", frontier.to_json())] {
            let path = dir.join(name);
            std::fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>, list: bool, corrupt: Option<&str>) -> Result<()> {
    if list {
        for name in gradcheck::op_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let seeds = match seed {
        Some(s) => vec![s],
        None => gradcheck::DEFAULT_SEEDS.to_vec(),
    };
    let mut failed = Vec::new();
    println!("op\tseed\tmax_rel_err\tstatus");
    for s in seeds {
        for r in gradcheck::run(s, corrupt)? {
            println!("{}\t{}\t{:.3e}\t{}", r.name, r.seed, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
            if !r.passed {
                failed.push(format!("{} (seed {}, max rel err {:.3e})", r.name, r.seed, r.max_rel_err));
            }
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let root = out.unwrap_or_else(|| cfg.data_dir.clone());
    let spec = cfg.degrade;
    spec.validate()?;
    let rng = Rng::new(cfg.seed);
    for (split, count, tag) in [(Split::Train, cfg.train_pairs, 0), (Split::Test, cfg.test_pairs, 1)] {
        let pairs = data::synthetic_pairs(count, cfg.patch_size, &spec, rng.derive(tag).next_u64())?;
        data::save_pairs(&root, split, &pairs)?;
        println!("{}: {count} pairs of {size}x{size}", data::split_dir(&root, split).display(), size = cfg.patch_size);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli.global)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .context("cannot start thread pool")?;
    match cli.command {
        Command::Train { data, out, iterations } => cmd_train(&cfg, data, out, iterations),
        Command::Enhance { weights, input, output } => cmd_enhance(&weights, &input, &output),
        Command::Eval { weights, data, split } => cmd_eval(&cfg, &weights, data, &split),
        Command::Bench {
            grid,
            image,
            data,
            macs_only,
            out,
        } => cmd_bench(&cfg, &grid, image, data, macs_only, out),
        Command::Gradcheck { list, corrupt } => cmd_gradcheck(cli.global.seed, list, corrupt.as_deref()),
        Command::Synth { out } => cmd_synth(&cfg, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
