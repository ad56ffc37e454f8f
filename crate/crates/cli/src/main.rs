//! `rgbdseg`: figures, data generation, training, evaluation, gradient
//! checks and ablations from the command line.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 I/O or file format,
//! 3 numeric failure (divergence, failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rgbdseg::ablation;
use rgbdseg::data::{self, SceneSpec, Split};
use rgbdseg::gradcheck::{self, Suite};
use rgbdseg::model::TableRow;
use rgbdseg::netpbm;
use rgbdseg::posenc::{self, PeMode, PeScales, PeSpec, TokenCoords};
use rgbdseg::run::RunConfig;
use rgbdseg::train;
use rgbdseg::Error;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 3,
            CliError::Core(e) if e.is_io() => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "rgbdseg", version, about = "Depth-aware RGB-D segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cosine-similarity map of positional encodings around a target pixel.
    PeMap {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        disparity: PathBuf,
        /// Target pixel as `u,v` (column, row).
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "3d")]
        mode: PeMode,
        #[arg(long)]
        out: PathBuf,
        /// Encoding dimension.
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Spatial scale; defaults to the image side.
        #[arg(long)]
        spatial_scale: Option<f64>,
        /// Disparity normaliser; defaults to the largest disparity present.
        #[arg(long)]
        max_disparity: Option<f64>,
        /// Frequency scale of the disparity encoding; defaults to the normaliser.
        #[arg(long)]
        depth_scale: Option<f64>,
    },
    /// Image of 1-D encodings: one row per position, one column per component.
    EmbeddingMatrix {
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Largest position (the scale `I`).
        #[arg(long, default_value_t = 512.0)]
        max: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a synthetic dataset.
    GenData {
        /// Run or scene config file (`key = value`).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Total samples; split between train and val by `val_fraction`.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` settings, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Trains a model; writes config echo, metrics CSV and checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluates a checkpoint and prints per-class IoU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Finite-difference gradient verification.
    GradCheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Trains every table configuration across seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated subset of rows (keys such as `rgbd,total`).
        #[arg(long)]
        rows: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::io(path.display().to_string(), e).into()
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_run_config(path: Option<&Path>, seed: Option<u64>, steps: Option<usize>, set: &[String]) -> CliResult<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(set.iter().map(String::as_str))?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    if let Some(s) = steps {
        config.train.steps = s;
    }
    config.validate()?;
    Ok(config)
}

fn parse_target(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--target {s:?}: expected u,v pixel coordinates"));
    let (u, v) = s.split_once(',').ok_or_else(bad)?;
    Ok((u.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
}

#[allow(clippy::too_many_arguments)]
fn pe_map(
    image: &Path,
    disparity: &Path,
    target: &str,
    mode: PeMode,
    out: &Path,
    dim: usize,
    spatial_scale: Option<f64>,
    max_disparity: Option<f64>,
    depth_scale: Option<f64>,
) -> CliResult {
    let rgb = netpbm::read_ppm(image)?;
    let disp = netpbm::read_pgm(disparity)?;
    let (w, h) = (rgb.width, rgb.height);
    if (disp.width, disp.height) != (w, h) {
        return Err(CliError::Usage(format!(
            "disparity {}x{} does not match image {w}x{h}",
            disp.width, disp.height
        )));
    }
    let (u, v) = parse_target(target)?;
    if u >= w || v >= h {
        return Err(CliError::Usage(format!("target ({u}, {v}) outside {w}x{h} image")));
    }
    let raw: Vec<f64> = disp.data.iter().map(|&d| f64::from(d)).collect();
    let max_d = max_disparity.unwrap_or_else(|| raw.iter().copied().fold(1.0, f64::max));
    let norm = posenc::normalize_disparity(&raw, h, w, max_d)?;
    let side = w.max(h) as f64;
    let coords = TokenCoords::for_stage(h, w, 1, side, &norm)?;
    let scales = PeScales {
        spatial: PeSpec::new(dim, spatial_scale.unwrap_or(side))?,
        depth: PeSpec::new(dim, depth_scale.unwrap_or(max_d))?,
    };
    let sim = posenc::similarity_map((v, u), &coords, &scales, mode)?;
    netpbm::write_pgm(out, &netpbm::signed_unit_to_pgm(w, h, &sim)?)?;
    Ok(())
}

fn embedding_matrix(dim: usize, max: f64, out: &Path) -> CliResult {
    let spec = PeSpec::new(dim, max)?;
    let rows = posenc::embedding_matrix(&spec);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    netpbm::write_pgm(out, &netpbm::signed_unit_to_pgm(dim, rows.len(), &flat)?)?;
    Ok(())
}

fn gen_data(spec_path: Option<&Path>, count: usize, out: &Path, seed: Option<u64>, set: &[String]) -> CliResult {
    let mut config = match spec_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(set.iter().map(String::as_str))?;
    let mut scene: SceneSpec = config.scene;
    if let Some(s) = seed {
        scene.seed = s;
    }
    scene.validate()?;
    let val = (count as f64 * scene.val_fraction).round() as usize;
    data::write_dataset(out, &scene, count - val, val)?;
    println!("wrote {} train and {val} val samples to {}", count - val, out.display());
    Ok(())
}

fn load_splits(root: &Path) -> CliResult<(Vec<data::RgbdSample>, Vec<data::RgbdSample>)> {
    Ok((data::load_split(root, Split::Train)?, data::load_split(root, Split::Val)?))
}

fn train_cmd(config: RunConfig, data_dir: &Path, out: &Path) -> CliResult {
    let (train_set, val_set) = load_splits(data_dir)?;
    create_dir(out)?;
    write_text(&out.join("config.txt"), &config.render())?;
    let outcome = train::train(&config.model, &config.train, &train_set, &val_set)?;
    train::write_outputs(&outcome, out)?;
    match &outcome.final_val {
        Some(r) => println!(
            "trained {} steps; val loss {:.4}, mIoU {}",
            config.train.steps,
            r.loss,
            r.miou().map_or("-".into(), |m| format!("{m:.4}"))
        ),
        None => println!("trained {} steps (no validation samples)", config.train.steps),
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data_dir: &Path, split: &str) -> CliResult {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return Err(CliError::Usage(format!("--split {other:?}: expected train|val"))),
    };
    let model = train::load_checkpoint(checkpoint)?;
    let samples = data::load_split(data_dir, split)?;
    let report = train::evaluate(&model, &samples)?;
    let k = model.config().num_classes;
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mut header = format!("{:<10}", "split");
    let mut row = format!("{:<10}", split.name());
    for c in 0..k {
        header.push_str(&format!("{:>9}", format!("class{c}")));
        row.push_str(&format!("{:>9}", cell(report.confusion.iou(c))));
    }
    header.push_str(&format!("{:>9}", "mIoU"));
    row.push_str(&format!("{:>9}", cell(report.miou())));
    println!("{header}\n{row}");
    println!("samples {}  loss {:.6}  mIoU {}", samples.len(), report.loss, report.miou().map_or("-".into(), |m| m.to_string()));
    Ok(())
}

fn grad_check(module: &str, seeds: usize) -> CliResult {
    let suites: Vec<Suite> = match module {
        "all" => Suite::ALL.to_vec(),
        m => vec![m.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?],
    };
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for suite in suites {
        for r in gradcheck::run_suite(suite, seeds)? {
            println!(
                "{:<10} {:<24} max_rel {:.3e}  max_abs {:.3e}  tol {:.0e}  {}",
                r.suite,
                r.name,
                r.report.max_rel,
                r.report.max_abs,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            );
            worst = worst.max(r.report.max_rel / r.tolerance);
            if !r.passed() {
                failed.push(r.name.clone());
            }
        }
    }
    println!("max relative error / tolerance: {worst:.3e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn ablate(config: RunConfig, data_dir: &Path, out: &Path, seeds: u64, rows: Option<&str>) -> CliResult {
    let rows: Vec<TableRow> = match rows {
        None => TableRow::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<TableRow>())
            .collect::<Result<_, _>>()?,
    };
    let (train_set, val_set) = load_splits(data_dir)?;
    create_dir(out)?;
    write_text(&out.join("config.txt"), &config.render())?;
    let seed_list: Vec<u64> = (0..seeds).map(|s| config.train.seed + s).collect();
    let records = ablation::run_ablation(
        &config.model,
        &config.train,
        &rows,
        &seed_list,
        &train_set,
        &val_set,
        |r| {
            let status = match &r.status {
                ablation::RunStatus::Completed => "ok".to_string(),
                ablation::RunStatus::Failed(m) => format!("FAILED ({m})"),
            };
            eprintln!(
                "{:<16} seed {:<3} mIoU {}  {status}",
                r.row.label(),
                r.seed,
                r.miou.map_or("-".into(), |m| format!("{m:.4}"))
            );
        },
    );
    let k = config.model.num_classes;
    write_text(&out.join("ablation.csv"), &ablation::render_csv(k, &records))?;
    let table = ablation::render_table(k, &records);
    write_text(&out.join("table.txt"), &table)?;
    print!("{table}");
    if ablation::all_completed(&records) {
        Ok(())
    } else {
        Err(CliError::Numeric("one or more runs diverged".into()))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::PeMap {
            image,
            disparity,
            target,
            mode,
            out,
            dim,
            spatial_scale,
            max_disparity,
            depth_scale,
        } => pe_map(&image, &disparity, &target, mode, &out, dim, spatial_scale, max_disparity, depth_scale),
        Command::EmbeddingMatrix { dim, max, out } => embedding_matrix(dim, max, &out),
        Command::GenData {
            spec,
            count,
            out,
            seed,
            set,
        } => gen_data(spec.as_deref(), count, &out, seed, &set),
        Command::Train {
            config,
            data,
            out,
            seed,
            steps,
            set,
        } => train_cmd(load_run_config(config.as_deref(), seed, steps, &set)?, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval_cmd(&checkpoint, &data, &split),
        Command::GradCheck { module, seeds } => grad_check(&module, seeds),
        Command::Ablate {
            data,
            out,
            seeds,
            config,
            steps,
            rows,
            set,
        } => ablate(
            load_run_config(config.as_deref(), None, steps, &set)?,
            &data,
            &out,
            seeds,
            rows.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
