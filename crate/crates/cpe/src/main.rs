use std::{path::PathBuf, process::ExitCode};

use clap::{Args, Parser, Subcommand};
use cpe::{
    alloc_track::CountingAlloc,
    bench::{self, BenchOptions},
    checkpoint::{Checkpoint, FormatError},
    image_io::{self, ImageError},
    selftest,
};
use cpe_core::{
    enhance_full,
    metrics::{psnr, ssim, SsimConfig},
    Model, ModelConfig,
};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

const EXIT_FAILURE: u8 = 1;
const EXIT_IMAGE: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "cpe", version, about = "Clifford pyramid low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance one PPM/PNG image.
    Enhance(EnhanceArgs),
    /// Time the pipeline on synthetic images at several resolutions.
    Bench(BenchArgs),
    /// Run the oracle suites and, optionally, golden fixtures.
    Selftest {
        /// Directory of `*.bin` golden fixtures.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Write a checkpoint with seeded random weights.
    Init(InitArgs),
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Ground truth to score the 8-bit output against.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Override the latent base size stored in the checkpoint.
    #[arg(long)]
    base_size: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated `WxH` list.
    #[arg(long, default_value = "512x512,1024x1024,2048x2048")]
    resolutions: String,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    iters: u64,
    #[arg(long, default_value_t = 1)]
    warmup: u64,
    #[arg(long, conflicts_with = "random_seed")]
    weights: Option<PathBuf>,
    #[arg(long)]
    random_seed: Option<u64>,
    /// Refuse rows estimated to need more than this many MiB (default: available memory).
    #[arg(long)]
    mem_limit_mib: Option<usize>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero the Γ/G heads so every pixel gets the midpoint mapping.
    #[arg(long)]
    zero_heads: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn image_failure(what: &str, e: ImageError) -> Failure {
    match e {
        ImageError::Io(io) => Failure::new(EXIT_IO, format!("{what}: {io}")),
        ImageError::Malformed(m) => Failure::new(EXIT_IMAGE, format!("{what}: {m}")),
    }
}

fn checkpoint_failure(path: &std::path::Path, e: FormatError) -> Failure {
    let code = if e.is_io() { EXIT_IO } else { EXIT_CHECKPOINT };
    Failure::new(code, format!("checkpoint {}: {e}", path.display()))
}

fn load_model(path: &std::path::Path, base_size: Option<usize>) -> Result<Model, Failure> {
    let mut ckpt = Checkpoint::load(path).map_err(|e| checkpoint_failure(path, e))?;
    if let Some(b) = base_size {
        ckpt.config.base_size = b;
    }
    ckpt.model().map_err(|e| checkpoint_failure(path, e))
}

fn enhance(args: EnhanceArgs) -> Result<(), Failure> {
    let model = load_model(&args.weights, args.base_size)?;
    let img = image_io::read_image(&args.input).map_err(|e| image_failure("input", e))?;
    let out = enhance_full(&image_io::to_tensor(&img), &model)
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("enhancement failed: {e}")))?;
    let out8 = image_io::from_tensor(&out).map_err(|e| image_failure("output", e))?;
    image_io::write_image(&args.output, &out8).map_err(|e| image_failure("output", e))?;
    if let Some(r) = args.reference {
        let reference = image_io::read_image(&r).map_err(|e| image_failure("reference", e))?;
        if (reference.width, reference.height) != (out8.width, out8.height) {
            return Err(Failure::new(
                EXIT_IMAGE,
                format!(
                    "reference is {}x{}, output is {}x{}",
                    reference.width, reference.height, out8.width, out8.height
                ),
            ));
        }
        let (a, b) = (image_io::to_tensor(&out8), image_io::to_tensor(&reference));
        let metric = |e: cpe_core::Error| Failure::new(EXIT_IMAGE, format!("reference metrics: {e}"));
        let p = psnr(&a, &b).map_err(metric)?;
        let s = ssim(&a, &b, &SsimConfig::default()).map_err(metric)?;
        println!("psnr_db={p:?} ssim={s:?}");
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    let resolutions = bench::parse_resolutions(&args.resolutions).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    let model = match (&args.weights, args.random_seed) {
        (Some(p), _) => load_model(p, None)?,
        (None, seed) => Model::seeded(ModelConfig::default(), seed.unwrap_or(0))
            .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?,
    };
    let opts = BenchOptions {
        resolutions,
        iters: args.iters as usize,
        warmup: args.warmup as usize,
        mem_limit: args.mem_limit_mib.map(|m| m << 20).or_else(bench::available_memory),
    };
    let rows = bench::run_bench(&model, &opts);
    print!("{}", bench::format_report(&rows, &model));
    if bench::latent_invariant(&rows) {
        Ok(())
    } else {
        Err(Failure::new(EXIT_FAILURE, "latent-stage op counters differ across resolutions"))
    }
}

fn run_selftest(fixtures: Option<PathBuf>) -> Result<(), Failure> {
    let mut results = selftest::run_builtin();
    if let Some(dir) = fixtures {
        results.extend(selftest::run_fixtures(&dir));
    }
    print!("{}", selftest::render_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_FAILURE, format!("failed: {}", failed.join(", "))))
    }
}

fn init(args: InitArgs) -> Result<(), Failure> {
    let cfg = ModelConfig::default();
    let mut model = Model::seeded(cfg, args.seed).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    if args.zero_heads {
        model.zero_heads();
    }
    let ckpt = Checkpoint::from_model(&model, args.seed).map_err(|e| checkpoint_failure(&args.output, e))?;
    ckpt.save(&args.output).map_err(|e| checkpoint_failure(&args.output, e))?;
    println!("params={}", model.param_count());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Enhance(a) => enhance(a),
        Command::Bench(a) => bench(a),
        Command::Selftest { fixtures } => run_selftest(fixtures),
        Command::Init(a) => init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
