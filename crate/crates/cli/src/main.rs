//! `pcac`: resample, train, encode, decode, eval and rd-report.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pcac::coder::CoderError;
use pcac::eval::{self, EvalError};
use pcac::network::{Codec, NetworkError};
use pcac::pcio::{self, PcioError, PlyFormat, PointCloud, ResampleConfig, VoxelTransform};
use pcac::pipeline::{self, PipelineError};
use pcac::train::{self, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "pcac", version, about = "Learned point cloud attribute codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a cloud into FPS + kNN training blocks.
    Resample(ResampleArgs),
    /// Train a model on a directory of blocks.
    Train(TrainArgs),
    /// Compress the attributes of a cloud.
    Encode(EncodeArgs),
    /// Reconstruct attributes from a bitstream and the shared geometry.
    Decode(DecodeArgs),
    /// Y-PSNR (and bpp when a bitstream is given) of a decoded cloud.
    Eval(EvalArgs),
    /// CSV of RD points plus BD tables against a reference codec.
    RdReport(RdReportArgs),
}

#[derive(Args)]
struct ResampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    cluster_points: usize,
    #[arg(long, default_value_t = 10)]
    bit_depth: u32,
    /// Frame number recorded in the block index.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Number of the first block file.
    #[arg(long, default_value_t = 0)]
    first_block: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of `.ply` blocks (or a single `.ply` file).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fine-tune from these weights at the fine-tune learning rate.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bit_depth: u32,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Geometry shared with the decoder; defaults to the input's own.
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bit_depth: u32,
    /// Also write the encoder-side reconstruction.
    #[arg(long)]
    reconstruction: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    geometry: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 10)]
    bit_depth: u32,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    decoded: PathBuf,
    #[arg(long)]
    bitstream: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bit_depth: u32,
}

#[derive(Args)]
struct RdReportArgs {
    /// CSV with columns codec,lambda,sequence,bpp,psnr_y.
    #[arg(long)]
    input: PathBuf,
    /// Codec label the BD numbers are computed against.
    #[arg(long)]
    reference: String,
    #[arg(long)]
    csv_out: Option<PathBuf>,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| data(format!("{}: {e}", path.display())))
}

impl From<PcioError> for CliError {
    fn from(e: PcioError) -> Self {
        data(e)
    }
}

impl From<CoderError> for CliError {
    fn from(e: CoderError) -> Self {
        data(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        data(e)
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Graph(g) => CliError::Internal(g.to_string()),
            other => data(other),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Network(n) => n.into(),
            PipelineError::Graph(g) => CliError::Internal(g.to_string()),
            other => data(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Network(n) => n.into(),
            TrainError::Graph(g) => CliError::Internal(g.to_string()),
            TrainError::NonFinite { .. } => CliError::Internal(e.to_string()),
            other => data(other),
        }
    }
}

fn load_cloud(path: &Path, bit_depth: u32) -> Result<PointCloud, CliError> {
    let raw = pcio::parse_ply(&read_file(path)?).map_err(|e| data(format!("{}: {e}", path.display())))?;
    Ok(pcio::voxelize(&raw, bit_depth)?)
}

fn load_weights(path: &Path) -> Result<Codec<f32>, CliError> {
    Codec::<f32>::load(path).map_err(|e| match e {
        NetworkError::Io(io) => data(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn resample(a: ResampleArgs) -> Result<(), CliError> {
    let pc = load_cloud(&a.input, a.bit_depth)?;
    let cfg = ResampleConfig {
        cluster_point_count: a.cluster_points,
    };
    let blocks = pcio::resample(&pc, &cfg)?;
    let source = a.input.display().to_string();
    let entries = pcio::write_blocks(&a.output_dir, &source, a.frame, &blocks, a.first_block)?;
    let index = serde_json::to_string_pretty(&entries).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&a.output_dir.join("index.json"), index.as_bytes())?;
    println!("{}", json!({ "points": pc.len(), "blocks": entries.len() }));
    Ok(())
}

fn block_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let dir = std::fs::read_dir(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = dir
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ply"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data(format!("no .ply blocks in {}", path.display())));
    }
    Ok(files)
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = String::from_utf8(read_file(p)?).map_err(data)?;
            toml::from_str::<TrainConfig>(&text).map_err(|e| data(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let blocks = block_files(&a.data)?
        .iter()
        .map(|p| load_cloud(p, a.bit_depth))
        .collect::<Result<Vec<_>, _>>()?;
    let start = match &a.init {
        Some(p) => {
            let codec = load_weights(p)?;
            cfg.codec = codec.config().clone();
            Some(Trainer::new(codec, cfg.adam(cfg.fine_tune_learning_rate), cfg.lambda))
        }
        None => None,
    };
    let log_every = cfg.log_every.max(1);
    let started = Instant::now();
    let out = train::fit(&cfg, &blocks, start, a.checkpoint_dir.as_deref(), |s| {
        if s.step % log_every == 0 {
            eprintln!(
                "{}",
                json!({ "step": s.step, "loss": s.loss, "bpp": s.bpp, "mse": s.mse })
            );
        }
    })?;
    out.codec.save(&a.output)?;
    let last = out.history.last();
    println!(
        "{}",
        json!({
            "steps": out.history.len(),
            "loss": last.map(|s| s.loss),
            "bpp": last.map(|s| s.bpp),
            "mse": last.map(|s| s.mse),
            "seconds": started.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

/// Attribute cloud aligned to the geometry file's voxel grid.
fn encode_input(a: &EncodeArgs) -> Result<PointCloud, CliError> {
    let Some(geo_path) = &a.geometry else {
        return load_cloud(&a.input, a.bit_depth);
    };
    let geo_raw = pcio::parse_ply(&read_file(geo_path)?)?;
    let tf = VoxelTransform::fit(&geo_raw, a.bit_depth)?;
    let geometry = pcio::voxelize_with(&geo_raw, a.bit_depth, &tf)?;
    let raw = pcio::parse_ply(&read_file(&a.input)?)?;
    let pc = pcio::voxelize_with(&raw, a.bit_depth, &tf)?;
    if pc.coords != geometry.coords {
        return Err(data("input attributes do not cover exactly the geometry's voxels"));
    }
    Ok(pc)
}

fn encode(a: EncodeArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let codec = load_weights(&a.weights)?;
    let pc = encode_input(&a)?;
    let enc = pipeline::encode_cloud(&codec, &pc)?;
    write_file(&a.output, &enc.bytes)?;
    if let Some(p) = &a.reconstruction {
        let rec = pipeline::with_attrs(&pc, &enc.reconstruction);
        write_file(p, &pcio::write_ply(&rec.to_raw(), PlyFormat::BinaryLittleEndian))?;
    }
    let bpp = eval::bpp(enc.bytes.len() as f64 * 8.0, pc.len())?;
    println!(
        "{}",
        json!({ "points": pc.len(), "bpp": bpp, "seconds": started.elapsed().as_secs_f64() })
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<(), CliError> {
    let codec = load_weights(&a.weights)?;
    let bytes = read_file(&a.input)?;
    let geometry = load_cloud(&a.geometry, a.bit_depth)?;
    let dec = pipeline::decode_cloud(&codec, &bytes, geometry.coords.clone())?;
    let rec = pipeline::with_attrs(&geometry, &dec.reconstruction);
    write_file(&a.output, &pcio::write_ply(&rec.to_raw(), PlyFormat::BinaryLittleEndian))?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let reference = load_cloud(&a.reference, a.bit_depth)?;
    let decoded = load_cloud(&a.decoded, a.bit_depth)?;
    let psnr = eval::psnr_y(&reference, &decoded)?;
    let bpp = match &a.bitstream {
        Some(p) => Some(eval::bpp(read_file(p)?.len() as f64 * 8.0, reference.len())?),
        None => None,
    };
    println!("{}", json!({ "points": reference.len(), "psnr_y": psnr, "bpp": bpp }));
    Ok(())
}

fn rd_report(a: RdReportArgs) -> Result<(), CliError> {
    let text = String::from_utf8(read_file(&a.input)?).map_err(data)?;
    let rows = eval::rows_from_csv(&text)?;
    let (csv, report) = eval::emit_rd_report(&rows, &a.reference)?;
    if let Some(p) = &a.csv_out {
        write_file(p, csv.as_bytes())?;
    }
    match &a.json_out {
        Some(p) => write_file(p, report.as_bytes())?,
        None => println!("{report}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Resample(a) => resample(a),
        Command::Train(a) => train_cmd(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval_cmd(a),
        Command::RdReport(a) => rd_report(a),
    };
    match result {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            match &e {
                CliError::Data(m) => eprintln!("error: {m}"),
                CliError::Internal(m) => eprintln!("internal error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
