//! The `refsr` command line: data preparation, the three training phases,
//! inference and evaluation behind one binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{ingest_manifest, load_triples, make_triples, select_by_ppi, write_manifest, write_triples, TripleConfig};
use crate::features::FeatureExtractor;
use crate::imaging::{load_image, save_image, BitDepth};
use crate::metrics::{evaluate_pairs, fit_niqe, read_ma_scores, write_table, NiqeModel};
use crate::networks::{load_params, ArchConfig, Generator, NetworkParams, PARAMS_VERSION};
use crate::training::{
    pretrain_generator, prepare_samples, super_resolve, train_degrader, train_full, RunOptions, TrainConfig, GENERATOR_FILE,
    STATE_VERSION,
};
use crate::Error;

/// Name of the effective configuration written next to a command's outputs.
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(Error::Configuration(_)) => 2,
            CliError::Run(_) => 1,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Data-preparation settings; the scale and seed come from `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub min_ppi: f64,
    /// Train paintings; unset takes every qualifying painting not used for test.
    pub n_train: Option<usize>,
    pub n_test: usize,
    pub tile_hr: usize,
    pub refs_per_tile: usize,
    pub max_tiles_per_painting: Option<usize>,
    pub min_tile_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_ppi: 0.0,
            n_train: None,
            n_test: 100,
            tile_hr: 256,
            refs_per_tile: 1,
            max_tiles_per_painting: None,
            min_tile_std: 0.0,
        }
    }
}

/// Contents of a `--config` file. The `[invocation]` table of an echoed
/// configuration is accepted and ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing)]
    pub invocation: Option<toml::Table>,
}

impl CliConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "refsr", about = "Reference-based super-resolution of painting images at 8x and 16x")]
pub struct Cli {
    /// TOML file with `[data]` and `[train]` tables; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data sampling, initialization and batch order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a manifest, split by PPI and write HR/LR/reference tiles.
    PrepareData(PrepareDataArgs),
    /// Train the degradation network on HR/LR tile pairs.
    TrainDegradation(TrainDegradationArgs),
    /// Pretrain and then fully train the generator.
    Train(TrainArgs),
    /// Super-resolve one image with a reference.
    SuperResolve(SuperResolveArgs),
    /// Score `<id>_sr` / `<id>_gt` image pairs in a directory.
    Evaluate(EvaluateArgs),
    /// Fit a NIQE model to a directory of pristine images.
    FitNiqe(FitNiqeArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PrepareData(_) => "prepare-data",
            Command::TrainDegradation(_) => "train-degradation",
            Command::Train(_) => "train",
            Command::SuperResolve(_) => "super-resolve",
            Command::Evaluate(_) => "evaluate",
            Command::FitNiqe(_) => "fit-niqe",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PrepareDataArgs {
    /// Manifest CSV: id,image_path,width_px,height_px,phys_width_in,phys_height_in.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Receives train.csv, test.csv and the train/ and test/ tile directories.
    #[arg(long)]
    pub out: PathBuf,
    /// Print the counts without writing anything.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, value_parser = parse_scale)]
    pub scale: Option<usize>,
    /// HR tile side in pixels.
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub min_ppi: Option<f64>,
    #[arg(long)]
    pub max_tiles: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainDegradationArgs {
    /// Directory of `<key>_{hr,lr,ref}.png` tiles.
    #[arg(long)]
    pub tiles: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_scale)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop (and checkpoint) after this many steps.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Continue from the state checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Directory of `<key>_{hr,lr,ref}.png` tiles.
    #[arg(long)]
    pub tiles: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained degradation network; needed when the full phase uses the degradation loss.
    #[arg(long)]
    pub degrader: Option<PathBuf>,
    #[arg(long, value_parser = parse_scale)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub epochs_pretrain: Option<usize>,
    #[arg(long)]
    pub epochs_full: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Match cache directory (default: `<out>/match_cache`).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Stop (and checkpoint) each phase after this many steps.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Continue from the state checkpoints in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SuperResolveArgs {
    #[arg(long)]
    pub lr: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Generator checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_scale)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Output bit depth, 8 or 16.
    #[arg(long, default_value_t = 8)]
    pub bit_depth: u32,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Directory holding `<id>_sr.<ext>` and `<id>_gt.<ext>` files.
    #[arg(long)]
    pub dir: PathBuf,
    /// NIQE model written by `fit-niqe`; without it the niqe and pi columns are n/a.
    #[arg(long)]
    pub niqe_model: Option<PathBuf>,
    /// CSV with header `image_id,ma` holding externally computed Ma scores.
    #[arg(long)]
    pub ma_scores: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitNiqeArgs {
    /// Directory of pristine images (png, jpg, tif).
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_scale(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (8 | 16)) => Ok(v),
        _ => Err(format!("scale must be 8 or 16, got {s:?}")),
    }
}

pub fn version_string() -> String {
    format!(
        "{} (checkpoint format {}, parameter layout {}, training state {})",
        env!("CARGO_PKG_VERSION"),
        checkpoint::FORMAT_VERSION,
        PARAMS_VERSION,
        STATE_VERSION
    )
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let version = version_string();
    let matches = match Cli::command().version(version.clone()).long_version(version).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("worker pool already configured: {e}");
        }
    }
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match &cli.command {
        Command::PrepareData(a) => prepare_data(a, cfg),
        Command::TrainDegradation(a) => train_degradation(a, cfg),
        Command::Train(a) => train(a, cfg),
        Command::SuperResolve(a) => super_resolve_cmd(a, cfg),
        Command::Evaluate(a) => evaluate(a, cfg),
        Command::FitNiqe(a) => fit_niqe_cmd(a, cfg),
    }
    .map_err(|e| match e {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", cli.command.name())),
        other => other,
    })
}

/// The resolved configuration with the command's flags under `[invocation]`.
pub fn effective_config(command: &str, args: &impl Serialize, cfg: &CliConfig) -> CliResult<String> {
    let fail = |e: toml::ser::Error| CliError::Usage(format!("cannot render configuration: {e}"));
    let mut invocation = toml::Table::try_from(args).map_err(fail)?;
    invocation.insert("command".into(), command.into());
    let mut table = toml::Table::try_from(cfg).map_err(fail)?;
    table.insert("invocation".into(), invocation.into());
    let body = toml::to_string(&table).map_err(fail)?;
    Ok(format!("# refsr {} {command}: effective configuration\n{body}", env!("CARGO_PKG_VERSION")))
}

/// Prints the effective configuration to stderr and, when given, saves it in `dir`.
fn echo_config(command: &str, args: &impl Serialize, cfg: &CliConfig, dir: Option<&Path>) -> CliResult {
    let text = effective_config(command, args, cfg)?;
    eprint!("{text}");
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        checkpoint::write_atomic(&d.join(CONFIG_ECHO_FILE), text.as_bytes())?;
    }
    Ok(())
}

fn validate_train(cfg: &TrainConfig) -> CliResult {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

fn prepare_data(a: &PrepareDataArgs, mut cfg: CliConfig) -> CliResult {
    if !a.manifest.is_file() {
        return Err(CliError::Usage(format!("manifest not found: {}", a.manifest.display())));
    }
    if let Some(s) = a.scale {
        cfg.train.scale = s;
    }
    let d = &mut cfg.data;
    d.tile_hr = a.tile.unwrap_or(d.tile_hr);
    d.n_test = a.n_test.unwrap_or(d.n_test);
    d.min_ppi = a.min_ppi.unwrap_or(d.min_ppi);
    d.n_train = a.n_train.or(d.n_train);
    d.max_tiles_per_painting = a.max_tiles.or(d.max_tiles_per_painting);
    validate_train(&cfg.train)?;
    let tcfg = TripleConfig {
        scale: cfg.train.scale,
        tile_hr: cfg.data.tile_hr,
        refs_per_tile: cfg.data.refs_per_tile,
        max_tiles_per_painting: cfg.data.max_tiles_per_painting,
        min_tile_std: cfg.data.min_tile_std,
        seed: cfg.train.seed,
    };
    tcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let manifest = ingest_manifest(&a.manifest)?;
    let qualifying = manifest.records.iter().filter(|r| r.ppi >= cfg.data.min_ppi).count();
    let n_train = cfg.data.n_train.unwrap_or(qualifying.saturating_sub(cfg.data.n_test));
    cfg.data.n_train = Some(n_train);
    echo_config("prepare-data", a, &cfg, None)?;
    let split = select_by_ppi(&manifest.records, cfg.data.min_ppi, n_train, cfg.data.n_test, cfg.train.seed)?;
    let train = make_triples(&split.train, &tcfg)?;
    let test = if split.test.len() >= 2 {
        make_triples(&split.test, &tcfg)?
    } else {
        log::warn!("test split has {} painting(s); test tiles need at least 2 for references", split.test.len());
        Vec::new()
    };
    println!("manifest rows: {} accepted, {} rejected", manifest.records.len(), manifest.rejections.len());
    println!("paintings: {} train, {} test", split.train.len(), split.test.len());
    println!("triples: {} train, {} test", train.len(), test.len());
    if a.dry_run {
        println!("dry run: nothing written");
        return Ok(());
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_manifest(&split.train, &a.out.join("train.csv"))?;
    write_manifest(&split.test, &a.out.join("test.csv"))?;
    write_triples(&train, &a.out.join("train"))?;
    write_triples(&test, &a.out.join("test"))?;
    echo_config_file("prepare-data", a, &cfg, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn echo_config_file(command: &str, args: &impl Serialize, cfg: &CliConfig, dir: &Path) -> CliResult {
    let text = effective_config(command, args, cfg)?;
    checkpoint::write_atomic(&dir.join(CONFIG_ECHO_FILE), text.as_bytes())?;
    Ok(())
}

fn train_degradation(a: &TrainDegradationArgs, mut cfg: CliConfig) -> CliResult {
    if let Some(s) = a.scale {
        cfg.train.scale = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.degrader_epochs = e;
    }
    validate_train(&cfg.train)?;
    echo_config("train-degradation", a, &cfg, Some(&a.out))?;
    let triples = load_triples(&a.tiles, cfg.train.scale)?;
    if triples.is_empty() {
        return Err(Error::Argument(format!("no complete tile triples in {}", a.tiles.display())).into());
    }
    let pairs: Vec<_> = triples.into_iter().map(|t| (t.hr, t.lr)).collect();
    let opts = RunOptions { out_dir: Some(a.out.clone()), cache_dir: None, resume: a.resume, stop_after: a.stop_after };
    let out = train_degrader(&pairs, &cfg.train, &opts)?;
    println!(
        "degrader: {} steps, validation l1 {:.6} -> best {:.6}",
        out.records.len(),
        out.initial_val,
        out.best_val
    );
    if out.completed {
        println!("wrote {}", a.out.join(crate::training::DEGRADER_FILE).display());
    } else {
        println!("stopped early; rerun with --resume to continue");
    }
    Ok(())
}

fn train(a: &TrainArgs, mut cfg: CliConfig) -> CliResult {
    let t = &mut cfg.train;
    t.scale = a.scale.unwrap_or(t.scale);
    t.pretrain_epochs = a.epochs_pretrain.unwrap_or(t.pretrain_epochs);
    t.full_epochs = a.epochs_full.unwrap_or(t.full_epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    validate_train(&cfg.train)?;
    let t = &cfg.train;
    let needs_degrader = t.full_epochs > 0 && t.weights.w_deg > 0.0;
    if needs_degrader && a.degrader.is_none() {
        return Err(CliError::Usage("--degrader is required when the full phase uses the degradation loss".into()));
    }
    echo_config("train", a, &cfg, Some(&a.out))?;
    let extractor = FeatureExtractor::from_config(&t.extractor)?;
    let init = t.init_generator(&extractor)?;
    if t.pretrain_epochs == 0 && t.full_epochs == 0 {
        init.save(&a.out.join(GENERATOR_FILE))?;
        println!("no epochs requested; wrote the initial generator to {}", a.out.join(GENERATOR_FILE).display());
        return Ok(());
    }
    let degrader = match &a.degrader {
        Some(p) => load_params(p)?,
        None => NetworkParams::init(ArchConfig::Degrader(t.degrader_config()), t.seed)?,
    };
    let triples = load_triples(&a.tiles, t.scale)?;
    if triples.is_empty() {
        return Err(Error::Argument(format!("no complete tile triples in {}", a.tiles.display())).into());
    }
    let cache = a.cache.clone().unwrap_or_else(|| a.out.join("match_cache"));
    let samples = prepare_samples(&triples, t, &extractor, Some(&cache))?;
    println!("prepared {} samples", samples.len());
    let opts = RunOptions { out_dir: Some(a.out.clone()), cache_dir: Some(cache), resume: a.resume, stop_after: a.stop_after };
    let pre = pretrain_generator(&samples, t, a.degrader.as_ref().map(|_| &degrader), &extractor, init, &opts)?;
    report("pretrain", &pre.records);
    if !pre.completed {
        println!("stopped early; rerun with --resume to continue");
        return Ok(());
    }
    if t.full_epochs > 0 {
        let full = train_full(&samples, t, &degrader, &extractor, pre.generator, &opts)?;
        report("full", &full.records);
        if !full.completed {
            println!("stopped early; rerun with --resume to continue");
            return Ok(());
        }
    }
    println!("wrote {}", a.out.join(GENERATOR_FILE).display());
    Ok(())
}

fn report(phase: &str, records: &[crate::training::StepRecord]) {
    match records.last() {
        Some(r) => println!("{phase}: {} steps, last total {:.6} (rec {:.6})", records.len(), r.total, r.rec),
        None => println!("{phase}: nothing left to run"),
    }
}

fn super_resolve_cmd(a: &SuperResolveArgs, cfg: CliConfig) -> CliResult {
    let depth = BitDepth::from_bits(a.bit_depth).map_err(|e| CliError::Usage(e.to_string()))?;
    echo_config("super-resolve", a, &cfg, None)?;
    let gen = Generator::load(&a.checkpoint)?;
    if gen.scale() != a.scale {
        return Err(Error::Configuration(format!(
            "{} is a scale {} generator, --scale is {}",
            a.checkpoint.display(),
            gen.scale(),
            a.scale
        ))
        .into());
    }
    let extractor = FeatureExtractor::from_config(&cfg.train.extractor)?;
    let lr = load_image(&a.lr)?;
    let reference = load_image(&a.reference)?;
    let sr = super_resolve(&lr, &reference, &gen, &extractor, &cfg.train.matching)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_image(&sr, &a.out, depth)?;
    println!("wrote {}x{} image to {}", sr.width(), sr.height(), a.out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs, cfg: CliConfig) -> CliResult {
    echo_config("evaluate", a, &cfg, None)?;
    let model = a.niqe_model.as_deref().map(NiqeModel::load).transpose()?;
    let ma = match &a.ma_scores {
        Some(p) => read_ma_scores(p)?,
        None => Default::default(),
    };
    let rows = evaluate_pairs(&a.dir, model.as_ref(), &ma)?;
    if rows.is_empty() {
        return Err(Error::Argument(format!("no <id>_sr / <id>_gt pairs in {}", a.dir.display())).into());
    }
    let mut buf = Vec::new();
    write_table(&rows, &mut buf)?;
    std::io::stdout().write_all(&buf).map_err(|e| Error::io("<stdout>", e))?;
    if let Some(p) = &a.out {
        checkpoint::write_atomic(p, &buf)?;
    }
    let n = rows.len() as f64;
    let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|v| v.is_finite()).collect();
    let mean_psnr = if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    eprintln!(
        "{} pairs: mean psnr {mean_psnr:.4} dB (finite rows), mean ssim {:.6}",
        rows.len(),
        rows.iter().map(|r| r.ssim).sum::<f64>() / n
    );
    Ok(())
}

fn fit_niqe_cmd(a: &FitNiqeArgs, cfg: CliConfig) -> CliResult {
    echo_config("fit-niqe", a, &cfg, None)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.images)
        .map_err(|e| Error::io(&a.images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "tif" | "tiff"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!("no images in {}", a.images.display())).into());
    }
    let corpus = paths.iter().map(load_image).collect::<crate::Result<Vec<_>>>()?;
    let model = fit_niqe(&corpus)?;
    model.save(&a.out)?;
    println!("fitted NIQE on {} patches from {} images; wrote {}", model.n_patches, corpus.len(), a.out.display());
    Ok(())
}
