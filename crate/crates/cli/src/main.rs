//! `cnet`: encode, decode, train and evaluate point cloud models.
//!
//! Results are printed as one JSON object per line. Exit codes: 0 success,
//! 1 usage or configuration error, 2 I/O or input error, 3 model mismatch,
//! 4 corrupt bitstream.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use cnet::blocktree::partition;
use cnet::codec::{self, DecodeOptions, EncodeOptions, DEFAULT_STRATEGY, DEFAULT_WORKERS};
use cnet::colorspace;
use cnet::models::{FeatureId, ModelBundle, ModelConfig};
use cnet::pcloud::{load_ply, voxelize_with_shift, write_ply, PlyFormat, RawPointCloud, SparseTensor};
use cnet::sparsenn::StepLr;
use cnet::trainer::{self, synthetic, TrainConfig, RHO_RANGE};

use config::ConfigFile;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] cnet::Error),
    #[error("{0} selftest suite(s) failed")]
    Selftest(usize),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        use cnet::Error as E;
        match self {
            CliError::Usage(_) | CliError::Selftest(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Io(_) | E::Parse { .. } | E::Range(_) => 2,
                E::ModelMismatch(_) => 3,
                E::Decode(_) | E::CorruptSignal(_) => 4,
                E::Config(_) | E::Shape(_) | E::Diverged(_) => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cnet", version, about = "Learned lossless point cloud codec")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Settings file of `key = value` lines; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for block-parallel coding.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Expected color space (rgb or ycocg); must agree with the model.
    #[arg(long, global = true)]
    colorspace: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a PLY file.
    Encode(EncodeArgs),
    /// Decompress to a PLY file.
    Decode(DecodeArgs),
    /// Train a model bundle.
    Train(TrainArgs),
    /// Report per-feature rate and model cost on a PLY file.
    Eval(EvalArgs),
    /// Run built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct EncodeArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Voxel grid bit depth; by default the smallest that fits the cloud.
    #[arg(long)]
    bits: Option<u8>,
    /// Block side as a power of two; defaults to the model's.
    #[arg(long)]
    block_log2: Option<u8>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Decoder strategy (incremental or reforward).
    #[arg(long)]
    strategy: Option<String>,
    /// Write ASCII PLY instead of binary.
    #[arg(long)]
    ascii: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Where to write the trained model bundle.
    #[arg(long)]
    output: PathBuf,
    /// Training clouds.
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Held-out clouds for per-epoch validation.
    #[arg(long, num_args = 1..)]
    validation: Vec<PathBuf>,
    /// Train on this many generated blocks instead of files.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Training loss log (CSV).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for per-epoch checkpoints.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Voxel grid bit depth for input clouds.
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    block_log2: Option<u8>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epoch_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    o_res_blocks: Option<usize>,
    #[arg(long)]
    c_res_blocks: Option<usize>,
    #[arg(long)]
    k_first: Option<usize>,
    /// Disable random sub-sampling of training blocks.
    #[arg(long)]
    no_subsample: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    input: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    bits: Option<u8>,
    /// Also encode and decode, checking the round trip.
    #[arg(long)]
    verify: bool,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Run a single suite.
    #[arg(long)]
    suite: Option<String>,
}

struct Ctx {
    cfg: ConfigFile,
    seed: u64,
    workers: usize,
    colorspace: Option<String>,
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let cfg = match &common.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let workers = cfg.get(common.workers, "workers", DEFAULT_WORKERS)?;
        if workers == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
        Ok(Ctx {
            seed: cfg.get(common.seed, "seed", 0)?,
            colorspace: cfg.pick(common.colorspace, "colorspace")?,
            workers,
            cfg,
        })
    }

    fn model_path(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.cfg
            .pick(flag, "model")?
            .ok_or_else(|| CliError::Usage("--model is required".into()))
    }

    fn load_models(&self, flag: Option<PathBuf>) -> Result<ModelBundle> {
        let path = self.model_path(flag)?;
        let models = ModelBundle::load(&path)?;
        if let Some(name) = &self.colorspace {
            let want = colorspace::by_name(name)?;
            if want.id() != models.colorspace.id() {
                return Err(cnet::Error::ModelMismatch(format!(
                    "model {} uses {}, requested {}",
                    path.display(),
                    models.colorspace.name(),
                    want.name()
                ))
                .into());
            }
        }
        Ok(models)
    }
}

fn print_json(v: serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Voxelizes relative to the floored minimum corner.
fn voxelize(pc: &RawPointCloud, bits: Option<u8>, floor: u8) -> Result<(SparseTensor, u8, [i32; 3])> {
    let shift = pc.min_corner();
    let n = bits.unwrap_or_else(|| pc.fitting_bit_depth(shift, floor));
    Ok((voxelize_with_shift(pc, n, shift)?, n, shift))
}

fn encode_cmd(ctx: &Ctx, a: EncodeArgs) -> Result<()> {
    let models = ctx.load_models(a.model)?;
    let log2 = ctx.cfg.get(a.block_log2, "block-log2", models.config().log2_d())?;
    let pc = load_ply(&a.input)?;
    let (cloud, n, shift) = voxelize(&pc, ctx.cfg.pick(a.bits, "bits")?, log2)?;
    let opts = EncodeOptions {
        workers: ctx.workers,
        log2_block: Some(log2),
        trace: false,
    };
    let enc = codec::encode(&cloud, n, shift, &models, &opts)?;
    write_file(&a.output, &enc.bitstream.to_bytes())?;
    let mut s = codec::stats(&enc.bitstream);
    s.encode_seconds = Some(enc.seconds);
    print_json(json!({ "command": "encode", "bits": n, "stats": s }));
    Ok(())
}

fn decode_cmd(ctx: &Ctx, a: DecodeArgs) -> Result<()> {
    let models = ctx.load_models(a.model)?;
    let strategy: String = ctx.cfg.get(a.strategy, "strategy", DEFAULT_STRATEGY.to_string())?;
    let data = fs::read(&a.input).map_err(|e| CliError::io(&a.input, e))?;
    let bitstream = codec::Bitstream::from_bytes(&data)?;
    let opts = DecodeOptions {
        workers: ctx.workers,
        strategy: codec::strategy_by_name(&strategy)?,
        trace: false,
    };
    let dec = codec::decode(&bitstream, &models, &opts)?;
    let format = if a.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    write_file(&a.output, &write_ply(&dec.cloud, dec.shift, format)?)?;
    let mut s = codec::stats(&bitstream);
    s.decode_seconds = Some(dec.seconds);
    print_json(json!({ "command": "decode", "strategy": strategy, "stats": s }));
    Ok(())
}

/// Splits clouds into blocks of side `2^log2`, in block-local coordinates.
fn load_blocks(paths: &[PathBuf], bits: Option<u8>, log2: u8) -> Result<Vec<SparseTensor>> {
    let mut out = Vec::new();
    for p in paths {
        let pc = load_ply(p)?;
        let (cloud, n, _) = voxelize(&pc, bits, log2)?;
        out.extend(partition(&cloud, n, log2)?.blocks.into_iter().map(|b| b.local));
    }
    Ok(out)
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let c = &ctx.cfg;
    let base = ModelConfig::default();
    let log2 = c.get(a.block_log2, "block-log2", base.log2_d())?;
    if !(1..=8).contains(&log2) {
        return Err(CliError::Usage(format!("--block-log2 {log2} outside [1, 8]")));
    }
    let model = ModelConfig {
        d: 1 << log2,
        channels: c.get(a.channels, "channels", base.channels)?,
        o_res_blocks: c.get(a.o_res_blocks, "o-res-blocks", base.o_res_blocks)?,
        c_res_blocks: c.get(a.c_res_blocks, "c-res-blocks", base.c_res_blocks)?,
        k_first: c.get(a.k_first, "k-first", base.k_first)?,
    };
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        model,
        seed: ctx.seed,
        epochs: c.get(a.epochs, "epochs", defaults.epochs)?,
        epoch_len: c.get(a.epoch_len, "epoch-len", defaults.epoch_len)?,
        batch_size: c.get(a.batch_size, "batch-size", defaults.batch_size)?,
        schedule: StepLr {
            base: c.get(a.lr, "lr", defaults.schedule.base)?,
            ..defaults.schedule
        },
        rho_range: (!a.no_subsample).then_some(RHO_RANGE),
        checkpoint_dir: a.checkpoints.clone(),
    };
    let cs = colorspace::by_name(ctx.colorspace.as_deref().unwrap_or("ycocg"))?;

    let synthetic_count = c.pick(a.synthetic, "synthetic")?;
    let bits = c.pick(a.bits, "bits")?;
    let (dataset, validation) = match synthetic_count {
        Some(count) => {
            if !a.input.is_empty() {
                return Err(CliError::Usage("--synthetic and --input are exclusive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            let side = model.d as u32;
            let val = synthetic::dataset(count.div_ceil(10), side, &mut rng);
            (synthetic::dataset(count, side, &mut rng), val)
        }
        None => {
            if a.input.is_empty() {
                return Err(CliError::Usage("give --input files or --synthetic N".into()));
            }
            (load_blocks(&a.input, bits, log2)?, load_blocks(&a.validation, bits, log2)?)
        }
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }

    let out = trainer::train(&dataset, &validation, cs, &cfg)?;
    out.models.save(&a.output)?;
    if let Some(path) = &a.metrics {
        let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        trainer::write_metrics_csv(&out.metrics, std::io::BufWriter::new(f))?;
    }
    for row in &out.validation {
        print_json(json!({ "validation": row }));
    }
    let last: Vec<_> = FeatureId::ALL
        .iter()
        .map(|&f| out.last(f).map(|r| r.loss_bits))
        .collect();
    print_json(json!({
        "command": "train",
        "blocks": dataset.len(),
        "colorspace": cs.name(),
        "final_loss_bits": last,
        "checkpoints": out.checkpoints,
    }));
    Ok(())
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let models = ctx.load_models(a.model)?;
    let log2 = models.config().log2_d();
    let pc = load_ply(&a.input)?;
    let (cloud, n, shift) = voxelize(&pc, ctx.cfg.pick(a.bits, "bits")?, log2)?;
    let opts = EncodeOptions {
        workers: ctx.workers,
        ..Default::default()
    };
    let enc = codec::encode(&cloud, n, shift, &models, &opts)?;
    let s = codec::stats(&enc.bitstream);
    let points = cloud.len();
    let bpp = |b: f64| if points == 0 { 0.0 } else { b / points as f64 };
    let names = models.colorspace.channel_names();
    for f in 0..4 {
        let symbols: u64 = enc.bitstream.payloads[f].iter().map(|p| u64::from(p.count)).sum();
        let symbols = if f == 0 { s.blocks as u64 * (1u64 << (3 * log2)) } else { symbols };
        print_json(json!({
            "feature": f,
            "name": if f == 0 { "occupancy" } else { names[f - 1] },
            "symbols": symbols,
            "payload_bits": s.feature_bits[f],
            "bpp": s.feature_bpp[f],
            "model_bits": enc.costs[f].model_bits,
            "model_bpp": bpp(enc.costs[f].model_bits),
        }));
    }
    print_json(json!({
        "feature": "total",
        "points": points,
        "blocks": s.blocks,
        "payload_bits": s.feature_bits.iter().sum::<u64>(),
        "overhead_bits": s.overhead_bits,
        "file_bits": s.total_bits,
        "bpp": s.total_bpp,
        "model_bpp": bpp(enc.costs.iter().map(|c| c.model_bits).sum()),
    }));

    if a.verify {
        let dec = codec::decode(
            &enc.bitstream,
            &models,
            &DecodeOptions {
                workers: ctx.workers,
                ..Default::default()
            },
        )?;
        let lossless = dec.cloud == cloud && dec.shift == shift;
        print_json(json!({ "verify": lossless, "encode_seconds": enc.seconds, "decode_seconds": dec.seconds }));
        if !lossless {
            return Err(cnet::Error::Decode("decoded cloud differs from input".into()).into());
        }
    }
    Ok(())
}

fn selftest_cmd(ctx: &Ctx, a: SelftestArgs) -> Result<()> {
    use cnet::selftest;
    let chosen = match &a.suite {
        None => selftest::suites(),
        Some(name) => {
            let s = selftest::suites().into_iter().find(|s| s.name() == name).ok_or_else(|| {
                let known: Vec<_> = selftest::suites().iter().map(|s| s.name()).collect();
                CliError::Usage(format!("unknown suite {name:?} (known: {})", known.join(", ")))
            })?;
            vec![s]
        }
    };
    let mut failed = 0;
    for s in chosen {
        let r = selftest::run_one(s, ctx.seed);
        failed += usize::from(!r.passed);
        print_json(json!(r));
    }
    if failed > 0 {
        return Err(CliError::Selftest(failed));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(cli.common)?;
    match cli.command {
        Command::Encode(a) => encode_cmd(&ctx, a),
        Command::Decode(a) => decode_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Selftest(a) => selftest_cmd(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cnet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
