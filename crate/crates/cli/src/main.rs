use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use dcgmm::checkpoint;
use dcgmm::data::{filter_classes, load_idx_labels, load_images, write_png_grid, Dataset};
use dcgmm::evaluation::{export_alphabet, RocCurve};
use dcgmm::generation::{inpaint, sample, InpaintMask, SamplerConfig, SharpenConfig};
use dcgmm::model::{parse_config, preset, DcgmmModel, ModelConfig, PRESETS};
use dcgmm::tensor::{Shape3, Tensor4};
use dcgmm::training::{sample_scores, train, TrainSchedule};
use dcgmm::Error;

#[derive(Parser)]
#[command(
    name = "dcgmm",
    version,
    about = "Train, evaluate and sample deep convolutional Gaussian mixture models"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Per-sample losses of every cGMM layer.
    Density(DensityArgs),
    /// ROC curve and AUC for separating two class sets by layer loss.
    Outlier(OutlierArgs),
    /// Draw samples and write them as a PNG grid.
    Sample(SampleArgs),
    /// Complete occluded images.
    Inpaint(InpaintArgs),
    /// Render the centroids of a cGMM layer.
    Alphabet(AlphabetArgs),
    /// Show layer shapes and parameter counts of an architecture.
    Info(InfoArgs),
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file or raw tensor file.
    #[arg(long)]
    images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Keep only these classes, e.g. `1-9` or `0,2,4`.
    #[arg(long)]
    classes: Option<String>,
    /// At most this many samples per class.
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Args)]
struct ArchArgs {
    /// Architecture string, e.g. `F(28,1)-G(49)`.
    #[arg(long, conflicts_with = "preset")]
    arch: Option<String>,
    /// Named architecture `A` to `G`.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Held-out images evaluated during training.
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    test_labels: Option<PathBuf>,
    /// File of `key = value` training overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, e.g. `--set epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV (default: checkpoint path with `.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    /// Per-sample loss CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OutlierArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "1-9")]
    inliers: String,
    #[arg(long, default_value = "0")]
    outliers: String,
    /// At most this many samples per class.
    #[arg(long)]
    cap: Option<usize>,
    /// 1-based cGMM layer whose loss is the score (default: topmost).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    /// ROC curve CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the S strongest control entries per position.
    #[arg(long)]
    top_s: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    variance_scale: f64,
    /// Enable sharpening (300 iterations, step 1.0 unless overridden).
    #[arg(long)]
    sharpen: bool,
    #[arg(long, requires = "sharpen")]
    sharpen_iterations: Option<usize>,
    #[arg(long, requires = "sharpen")]
    sharpen_step: Option<f64>,
}

impl SamplerArgs {
    fn configs(&self) -> (SamplerConfig, SharpenConfig) {
        let sampler = SamplerConfig {
            top_s: self.top_s,
            seed: self.seed,
            variance_scale: self.variance_scale,
        };
        let mut sharpening = if self.sharpen {
            SharpenConfig::standard()
        } else {
            SharpenConfig::disabled()
        };
        if let Some(i) = self.sharpen_iterations {
            sharpening.iterations = i;
        }
        if let Some(s) = self.sharpen_step {
            sharpening.step = s;
        }
        (sampler, sharpening)
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(short, long, default_value_t = 16)]
    n: usize,
    /// Condition on a class (needs a classifier layer).
    #[arg(long)]
    class: Option<usize>,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-sample losses of the re-forwarded samples.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Known {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(short, long, default_value_t = 8)]
    n: usize,
    /// The half of each image that stays visible.
    #[arg(long, value_enum, default_value_t = Known::Left)]
    known: Known,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// PNG with one row per image: original, occluded, completed.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AlphabetArgs {
    #[arg(long)]
    model: PathBuf,
    /// 1-based cGMM layer (default: lowest).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 7)]
    cols: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InfoArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value = "28x28x1")]
    input: String,
    /// Tabulate every named architecture.
    #[arg(long, conflicts_with_all = ["arch", "preset"])]
    presets: bool,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data { .. }
        | Error::Io { .. }
        | Error::Checkpoint { .. }
        | Error::ShapeMismatch { .. }
        | Error::DimensionMismatch { .. } => 2,
        Error::Numerical { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Density(a) => cmd_density(a),
        Command::Outlier(a) => cmd_outlier(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Inpaint(a) => cmd_inpaint(a),
        Command::Alphabet(a) => cmd_alphabet(a),
        Command::Info(a) => cmd_info(a),
    }
}

/// Parses `1-9`, `0,2,4` or mixtures such as `0-3,7`.
fn parse_classes(text: &str) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Failure::Usage(format!("bad class list {text:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u8, u8) = (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                );
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return usage(format!("empty class list {text:?}"));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn load_data(
    images: &Path,
    labels: Option<&Path>,
    classes: Option<&str>,
    cap: Option<usize>,
) -> CliResult<Dataset> {
    let images = load_images(images)?;
    let ds = match labels {
        Some(path) => {
            let labels = load_idx_labels(path)?;
            if labels.len() != images.n() {
                return Err(Error::Data {
                    path: path.to_path_buf(),
                    reason: format!("{} labels for {} images", labels.len(), images.n()),
                }
                .into());
            }
            Dataset::new(images, labels)?
        }
        None => Dataset::unlabeled(images),
    };
    if classes.is_none() && cap.is_none() {
        return Ok(ds);
    }
    if labels.is_none() {
        return usage("--classes and --cap need --labels");
    }
    let keep = match classes {
        Some(c) => parse_classes(c)?,
        None => ds.classes().into_iter().collect(),
    };
    Ok(filter_classes(&ds, &keep, cap)?)
}

impl DataArgs {
    fn load(&self) -> CliResult<Dataset> {
        load_data(
            &self.images,
            self.labels.as_deref(),
            self.classes.as_deref(),
            self.cap,
        )
    }
}

impl ArchArgs {
    fn resolve(&self, input: Shape3) -> CliResult<ModelConfig> {
        match (&self.arch, &self.preset) {
            (Some(arch), None) => Ok(parse_config(arch, input).map_err(arch_error)?),
            (None, Some(name)) => {
                let p = preset(name)
                    .ok_or_else(|| Failure::Usage(format!("unknown preset {name:?}")))?;
                let mut config = parse_config(p.arch, input).map_err(arch_error)?;
                config.name = format!("DCGMM-{}", p.name);
                Ok(config)
            }
            _ => usage("give --arch or --preset"),
        }
    }
}

fn arch_error(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| {
        Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| {
        Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn sets_seed(overrides: &str) -> bool {
    overrides.lines().any(|l| {
        let l = l.split('#').next().unwrap_or("");
        l.split_once('=').is_some_and(|(k, _)| k.trim() == "seed")
    })
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let data = a.data.load()?;
    let config = a.arch.resolve(data.shape())?;
    let mut overrides = match &a.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    for o in &a.overrides {
        overrides.push('\n');
        overrides.push_str(o);
    }
    let mut schedule = TrainSchedule::default()
        .apply_overrides(&overrides)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = a.seed {
        schedule.seed = seed;
    } else if !sets_seed(&overrides) {
        let text = format!("{}\n{overrides}", config.arch());
        schedule.seed = crc32fast::hash(text.as_bytes()) as u64;
        info!(
            "no seed given; derived seed {} from the configuration",
            schedule.seed
        );
    }
    let held_out = match &a.test_images {
        Some(images) => Some(load_data(
            images,
            a.test_labels.as_deref(),
            a.data.classes.as_deref(),
            None,
        )?),
        None => None,
    };
    let mut model = DcgmmModel::new(config, schedule.seed)?;
    info!(
        "training {} on {} samples for {} epochs",
        model.config().arch(),
        data.len(),
        schedule.epochs
    );
    let log = train(&mut model, &data, &schedule, held_out.as_ref())?;
    checkpoint::save(&model, &a.out)?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("csv"));
    write_text(&log_path, &log.to_csv())?;
    println!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

fn cmd_density(a: DensityArgs) -> CliResult<()> {
    let model = checkpoint::load(&a.model)?;
    let data = a.data.load()?;
    let scores = sample_scores(&model, &data.images, a.batch_size.max(1))?;
    let mut csv = String::from("sample,layer,loss\n");
    for i in 0..data.len() {
        for (layer, s) in &scores {
            writeln!(csv, "{i},{},{}", layer + 1, s[i]).expect("string write");
        }
    }
    for (layer, s) in &scores {
        println!(
            "layer {}: mean loss {:.6}",
            layer + 1,
            s.iter().sum::<f64>() / s.len() as f64
        );
    }
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    Ok(())
}

fn cgmm_layer(model: &DcgmmModel, one_based: Option<usize>, default: usize) -> CliResult<usize> {
    let Some(l) = one_based else {
        return Ok(default);
    };
    if l == 0 || !model.cgmm_layers().contains(&(l - 1)) {
        return usage(format!("layer {l} is not a cGMM layer"));
    }
    Ok(l - 1)
}

fn cmd_outlier(a: OutlierArgs) -> CliResult<()> {
    let model = checkpoint::load(&a.model)?;
    let layer = cgmm_layer(&model, a.layer, model.top_cgmm())?;
    let inliers = load_data(&a.images, Some(&a.labels), Some(&a.inliers), a.cap)?;
    let outliers = load_data(&a.images, Some(&a.labels), Some(&a.outliers), a.cap)?;
    let score = |data: &Tensor4| -> CliResult<Vec<f64>> {
        let all = sample_scores(&model, data, a.batch_size.max(1))?;
        Ok(all
            .into_iter()
            .find(|(l, _)| *l == layer)
            .expect("cGMM layer")
            .1)
    };
    let roc = RocCurve::from_scores(&score(&inliers.images)?, &score(&outliers.images)?)?;
    if let Some(out) = &a.out {
        write_text(out, &roc.to_csv())?;
    }
    println!("layer {} AUC {:.6}", layer + 1, roc.auc);
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> CliResult<()> {
    let model = checkpoint::load(&a.model)?;
    if let Some(c) = a.class {
        match model.classifier() {
            None => return usage("--class needs a model with a classifier layer"),
            Some(cl) if c >= cl.classes() => {
                return usage(format!(
                    "class {c} out of range for {} classes",
                    cl.classes()
                ))
            }
            _ => {}
        }
    }
    if a.n == 0 {
        return usage("-n must be at least 1");
    }
    let (sampler, sharpening) = a.sampler.configs();
    let images = sample(&model, a.class, &sampler, &sharpening, a.n)?;
    let clamped = write_png_grid(&images, a.cols.max(1), &a.out)?;
    if clamped > 0 {
        warn!("{clamped} pixel values clamped to [0, 1]");
    }
    if let Some(path) = &a.losses {
        let scores = sample_scores(&model, &images, 100)?;
        let mut csv = String::from("sample,layer,loss\n");
        for i in 0..images.n() {
            for (layer, s) in &scores {
                writeln!(csv, "{i},{},{}", layer + 1, s[i]).expect("string write");
            }
        }
        write_text(path, &csv)?;
    }
    println!("wrote {} samples to {}", images.n(), a.out.display());
    Ok(())
}

fn cmd_inpaint(a: InpaintArgs) -> CliResult<()> {
    let model = checkpoint::load(&a.model)?;
    let data = a.data.load()?;
    let n = a.n.min(data.len());
    if n == 0 {
        return usage("-n must be at least 1");
    }
    let images = data.images.select(&(0..n).collect::<Vec<_>>());
    let Shape3 { h, w, .. } = images.shape();
    let known = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            match a.known {
                Known::Left => c < w / 2,
                Known::Right => c >= w / 2,
                Known::Top => r < h / 2,
                Known::Bottom => r >= h / 2,
            }
        })
        .collect();
    let mask = InpaintMask::new(h, w, known)?;
    let (sampler, sharpening) = a.sampler.configs();
    let completed = inpaint(&model, &images, &mask, &sampler, &sharpening)?;
    let occluded = mask.occlude(&images)?;
    let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i, 2 * n + i]).collect();
    let sheet = Tensor4::concat(&[images, occluded, completed])?.select(&order);
    write_png_grid(&sheet, 3, &a.out)?;
    println!("wrote {n} in-paintings to {}", a.out.display());
    Ok(())
}

fn cmd_alphabet(a: AlphabetArgs) -> CliResult<()> {
    let model = checkpoint::load(&a.model)?;
    let layer = cgmm_layer(&model, a.layer, model.cgmm_layers()[0])?;
    let sheet = export_alphabet(&model, layer).map_err(|e| Failure::Usage(e.to_string()))?;
    write_png_grid(&sheet.patches, a.cols.max(1), &a.out)?;
    println!(
        "wrote {} centroids of layer {} to {}",
        sheet.patches.n(),
        layer + 1,
        a.out.display()
    );
    Ok(())
}

fn cmd_info(a: InfoArgs) -> CliResult<()> {
    let input = Shape3::parse(&a.input).map_err(|e| Failure::Usage(e.to_string()))?;
    if a.presets {
        println!(
            "{:<8} {:>10} {:>10}  status",
            "preset", "published", "computed"
        );
        for p in &PRESETS {
            let computed = parse_config(p.arch, input).and_then(|c| c.count_parameters());
            let (count, status) = match (&computed, p.verified) {
                (Ok(c), true) if c.centroids == p.published => {
                    (c.centroids.to_string(), "reproduced".to_string())
                }
                (Ok(c), _) => (c.centroids.to_string(), format!("DISCREPANCY: {}", p.note)),
                (Err(_), _) => ("-".to_string(), format!("DISCREPANCY: {}", p.note)),
            };
            println!(
                "DCGMM-{:<2} {:>10} {:>10}  {status}",
                p.name, p.published, count
            );
        }
        return Ok(());
    }
    let named = a.arch.preset.as_deref().and_then(preset).or_else(|| {
        let arch = a.arch.arch.as_deref()?;
        let canonical = parse_config(arch, input).ok()?.arch();
        PRESETS
            .iter()
            .find(|p| parse_config(p.arch, input).is_ok_and(|c| c.arch() == canonical))
    });
    let discrepancy = |p: &dcgmm::model::Preset, e: &dyn std::fmt::Display| {
        println!("DCGMM-{}: {}", p.name, p.arch);
        println!("published parameters: {}", p.published);
        println!("flag: DISCREPANCY ({})", p.note);
        println!("shape inference: {e}");
    };
    let config = match a.arch.resolve(input) {
        Ok(c) => c,
        Err(Failure::Lib(e)) => return Err(Failure::Lib(e)),
        Err(Failure::Usage(e)) => match named {
            Some(p) if !p.verified => {
                discrepancy(p, &e);
                return Ok(());
            }
            _ => return usage(e),
        },
    };
    let shapes = match config.shapes() {
        Ok(s) => s,
        Err(e) => match named {
            Some(p) if !p.verified => {
                discrepancy(p, &e);
                return Ok(());
            }
            _ => return usage(e.to_string()),
        },
    };
    println!("architecture: {}", config.arch());
    println!("input: {}", shapes[0]);
    for (i, (layer, shape)) in config.layers.iter().zip(&shapes[1..]).enumerate() {
        println!("  {:>2} {:<10} -> {}", i + 1, layer.to_string(), shape);
    }
    let count = config.count_parameters()?;
    println!("parameters: {}", count.centroids);
    println!("trainable values: {}", count.total);
    if let Some(p) = named {
        let flag = if p.verified && p.published == count.centroids {
            "reproduced".to_string()
        } else {
            format!("DISCREPANCY ({})", p.note)
        };
        println!("preset DCGMM-{}: published {}, {flag}", p.name, p.published);
    }
    Ok(())
}
