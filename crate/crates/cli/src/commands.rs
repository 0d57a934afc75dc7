use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use partwhole::features::{read_feature_file, write_feature_file, FeatureMap, FEATURE_EXTENSION};
use partwhole::gradcheck::{self, GradcheckConfig};
use partwhole::inference::{self, EvalImage};
use partwhole::synth::{self, Layout, SceneConfig};
use partwhole::trainer::{Checkpoint, StepRecord, TrainConfig, Trainer};
use partwhole::Error;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } | Error::NonFinite(_) | Error::DegenerateRow { .. } | Error::UndefinedMetric(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "partwhole", version, about = "Slot-based object discovery trained with part-whole cycle walks")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labeled synthetic scenes as feature files.
    Gen(GenArgs),
    /// Train a model on a directory of feature files.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled feature files.
    Eval(EvalArgs),
    /// Finite-difference check of the training gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Parser, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// Grid size as HxW.
    #[arg(long, default_value = "8x8", value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "random-rectangles")]
    layout: Layout,
    /// Minimum angle between class means, in degrees.
    #[arg(long, default_value_t = 60.0)]
    separation: f64,
    /// Seed of the class-mean palette shared by all scenes.
    #[arg(long, default_value_t = 0)]
    palette_seed: u64,
}

#[derive(Parser, Debug)]
struct TrainArgs {
    /// Directory of `.ocwf` files (or a `gen` output directory).
    #[arg(long)]
    data: PathBuf,
    /// `key = value` configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint, appending to the loss trace.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many steps are complete.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Fg,
    Discovery,
    Semantic,
}

#[derive(Parser, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    task: Task,
    /// Number of classes for the semantic task.
    #[arg(long)]
    classes: Option<usize>,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write one PGM mask per image into this directory.
    #[arg(long, requires = "grid")]
    masks: Option<PathBuf>,
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Seed of the k-means used by the semantic task.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Parser, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 12)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, found `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen(a: GenArgs) -> CmdResult {
    let cfg = SceneConfig {
        height: a.grid.0,
        width: a.grid.1,
        classes: a.classes,
        input_dim: a.dim,
        noise_std: a.noise,
        layout: a.layout,
        mean_separation_deg: a.separation,
        mean_seed: a.palette_seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dir = a.out.join("scenes");
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let means = synth::class_means(&cfg)?;
    let mut manifest = String::new();
    for i in 0..a.scenes {
        let scene = synth::generate_with_means(&cfg, &means, synth::scene_seed(a.seed, i as u64))?;
        let map = scene.into_feature_map();
        let rel = format!("scenes/{i:04}.{FEATURE_EXTENSION}");
        write_feature_file(a.out.join(&rel), &map)?;
        let line = format!(
            "{rel}\t{}x{}\t{}\t{:016x}",
            cfg.height,
            cfg.width,
            map.input_dim(),
            map.digest()
        );
        println!("{line}");
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let path = a.out.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| io_error(&path, e))
}

/// Feature files of a data directory in name order, with their stems.
fn load_dir(dir: &Path) -> std::result::Result<Vec<(String, FeatureMap)>, Failure> {
    let nested = dir.join("scenes");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_error(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == FEATURE_EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(data_error(format!("no .{FEATURE_EXTENSION} files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_feature_file(&p)?))
        })
        .collect()
}

fn read_config(path: Option<&Path>) -> std::result::Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            Ok(TrainConfig::parse(&text)?)
        }
    }
}

/// Keeps the trace lines of steps before `step`.
fn truncate_trace(path: &Path, step: u64) -> CmdResult {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_error(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let s: u64 = line
            .split('\t')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| data_error(format!("malformed trace line `{line}` in {}", path.display())))?;
        if s < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| io_error(path, e))
}

fn train(a: TrainArgs) -> CmdResult {
    let config = read_config(a.config.as_deref())?;
    let data: Vec<_> = load_dir(&a.data)?.into_iter().map(|(_, m)| m.values).collect();
    let dim = data[0].cols();
    if let Some(bad) = data.iter().position(|m| m.cols() != dim) {
        return Err(data_error(format!("feature file {bad} has width {}, expected {dim}", data[bad].cols())));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let trace_path = a.out.join("loss.tsv");

    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if a.config.is_some() && ck.config.hash() != config.hash() {
                return Err(Error::Compatibility(format!(
                    "checkpoint config hash {:016x} differs from --config ({:016x})",
                    ck.config.hash(),
                    config.hash()
                ))
                .into());
            }
            if ck.model.input_dim() != dim {
                return Err(Error::Compatibility(format!("checkpoint expects width {}, data has {dim}", ck.model.input_dim())).into());
            }
            truncate_trace(&trace_path, ck.step)?;
            Trainer::from_checkpoint(ck)?
        }
        None => {
            fs::write(&trace_path, "").map_err(|e| io_error(&trace_path, e))?;
            Trainer::new(config, dim)?
        }
    };

    let mut trace = fs::OpenOptions::new()
        .append(true)
        .open(&trace_path)
        .map_err(|e| io_error(&trace_path, e))?;
    let out = a.out.clone();
    let mut last: Option<StepRecord> = None;
    trainer.run(&data, a.until, |t, rec| {
        writeln!(trace, "{}", rec.trace_line()).map_err(|e| Error::Io {
            path: trace_path.clone(),
            source: e,
        })?;
        let every = t.config.checkpoint_interval;
        if every > 0 && t.step % every == 0 {
            t.checkpoint().save(out.join(format!("checkpoint-{:06}.ocwc", t.step)))?;
        }
        last = Some(rec.clone());
        Ok(())
    })?;
    trainer.checkpoint().save(a.out.join("checkpoint.ocwc"))?;
    match last {
        Some(r) => println!("step {}\tloss {}\tlr {}", trainer.step, r.loss, r.lr),
        None => println!("step {}\tnothing to do", trainer.step),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let maps = load_dir(&a.data)?;
    let mut images = Vec::with_capacity(maps.len());
    for (name, m) in maps {
        let labels = m
            .labels
            .ok_or_else(|| data_error(format!("{name} has no ground-truth labels; eval needs labeled feature files")))?;
        images.push(EvalImage {
            name,
            features: m.values,
            labels,
        });
    }
    let (slot, walk) = (&ck.config.slot, &ck.config.walk);
    let report = match a.task {
        Task::Fg => inference::evaluate_foreground(&ck.model, &images, slot, walk)?,
        Task::Discovery => inference::evaluate_discovery(&ck.model, &images, slot, walk)?,
        Task::Semantic => {
            let c = a.classes.ok_or_else(|| usage("--classes is required for the semantic task"))?;
            inference::semantic_segment(&ck.model, &images, slot, walk, c, a.seed)?
        }
    };
    if let (Some(dir), Some((h, w))) = (&a.masks, a.grid) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        for img in &images {
            let m = inference::slot_masks(&ck.model, &img.features, slot, walk)?;
            inference::write_mask_pgm(&m.hard, ck.model.num_slots(), h, w, dir.join(format!("{}.pgm", img.name)))?;
        }
    }
    let text = report.to_string();
    print!("{text}");
    if let Some(p) = &a.report {
        fs::write(p, &text).map_err(|e| io_error(p, e))?;
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut cfg = GradcheckConfig {
        num_parts: a.n,
        num_slots: a.k,
        dim: a.d,
        iterations: a.iterations,
        seed: a.seed,
        tol: a.tol,
        ..GradcheckConfig::default()
    };
    cfg.walk.walk_dim = a.d;
    let report = gradcheck::run(&cfg)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("max relative error {:.3e} exceeds tolerance {:.1e}", report.max_rel_error(), a.tol),
        })
    }
}
