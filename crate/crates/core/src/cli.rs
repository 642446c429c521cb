//! The `nucfuse` command line: `synth`, `extract`, `fuse`, `eval`,
//! `counts`, `augment` and `render` over scene packages.
//!
//! Exit codes: 0 success, 1 internal error, 2 input or validation error.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::detection::extract_detections;
use crate::error::Error;
use crate::fusion::{fuse, FusionConfig, VotingWeights};
use crate::io::{
    is_package, list_packages, read_json, read_scene, render_overlay, write_counts_csv, write_json, write_scene,
    DetectionsFile,
};
use crate::metrics::{count_cells, evaluate};
use crate::scene::Source;
use crate::synth::{constructed_producers, generate_scene, SynthCell, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "nucfuse", version, about = "Fuse and evaluate nuclei segmentations")]
pub struct Cli {
    /// Report errors on stderr as JSON lines.
    #[arg(long, global = true)]
    pub json_errors: bool,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON file with per-subcommand settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProducerArg {
    Semantic,
    Instance,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the detections of a scene package as JSON.
    Extract {
        input: PathBuf,
        #[arg(long, value_enum)]
        source: ProducerArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse a semantic and an instance package (or two directories of
    /// packages paired by name).
    Fuse {
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iou_threshold: Option<f64>,
        /// JSON file `{"semantic": [6], "instance": [6]}`.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        drop_unmatched_semantic: bool,
        #[arg(long)]
        drop_unmatched_instance: bool,
    },
    /// Score predicted packages against ground truth, paired by name.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write predicted per-scene counts as CSV.
        #[arg(long)]
        counts_csv: Option<PathBuf>,
    },
    /// Per-class cell counts of every package as CSV.
    Counts {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the augmentation pipeline over packages that carry an image.
    Augment {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        target_size: Option<u32>,
    },
    /// Generate synthetic ground truth, optionally with emulated producers.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_cells: Option<usize>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        /// Also write `semantic/` and `instance/` producer packages.
        #[arg(long)]
        producers: bool,
    },
    /// Draw a class-coloured overlay of a package onto its image.
    Render {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FuseSettings {
    iou_threshold: Option<f64>,
    weights: Option<VotingWeights>,
    keep_unmatched_semantic: Option<bool>,
    keep_unmatched_instance: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    threads: Option<usize>,
    fuse: FuseSettings,
    augment: Option<AugmentConfig>,
    synth: Option<SynthConfig>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: if e.is_input_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct JsonError<'a> {
    level: &'static str,
    code: i32,
    message: &'a str,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json_errors = args.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            if json_errors {
                report(&CliError::input(e.to_string().trim_end()), true);
            } else {
                let _ = e.print();
            }
            return 2;
        }
    };
    let json_errors = cli.json_errors;
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e, json_errors);
            e.code
        }
    }
}

fn report(e: &CliError, json: bool) {
    if json {
        let line = serde_json::to_string(&JsonError {
            level: "error",
            code: e.code,
            message: &e.message,
        })
        .expect("plain struct serialises");
        eprintln!("{line}");
    } else {
        eprintln!("error: {}", e.message);
    }
}

fn execute(cli: Cli) -> CliResult {
    let config: ConfigFile = match &cli.config {
        Some(path) => read_json(path)?,
        None => ConfigFile::default(),
    };
    let threads = cli.threads.or(config.threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError {
            code: 1,
            message: format!("thread pool: {e}"),
        })?;
    pool.install(|| dispatch(cli.command, config))
}

fn dispatch(command: Command, config: ConfigFile) -> CliResult {
    match command {
        Command::Extract { input, source, out } => cmd_extract(&input, source, &out),
        Command::Fuse {
            semantic,
            instance,
            out,
            iou_threshold,
            weights,
            drop_unmatched_semantic,
            drop_unmatched_instance,
        } => {
            let settings = config.fuse;
            let weights = match weights {
                Some(path) => read_json::<VotingWeights>(&path)?,
                None => settings.weights.unwrap_or_default(),
            };
            let cfg = FusionConfig {
                iou_threshold: iou_threshold
                    .or(settings.iou_threshold)
                    .unwrap_or(FusionConfig::DEFAULT_IOU_THRESHOLD),
                keep_unmatched_semantic: !drop_unmatched_semantic && settings.keep_unmatched_semantic.unwrap_or(true),
                keep_unmatched_instance: !drop_unmatched_instance && settings.keep_unmatched_instance.unwrap_or(true),
                ..FusionConfig::default()
            };
            cfg.validate()?;
            cmd_fuse(&semantic, &instance, &out, &weights, &cfg)
        }
        Command::Eval {
            gt,
            pred,
            out,
            counts_csv,
        } => cmd_eval(&gt, &pred, &out, counts_csv.as_deref()),
        Command::Counts { input, out } => cmd_counts(&input, &out),
        Command::Augment {
            input,
            out,
            seed,
            target_size,
        } => {
            let mut cfg = config.augment.unwrap_or_default();
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(size) = target_size {
                cfg.target_size = size;
            }
            cfg.validate()?;
            cmd_augment(&input, &out, &cfg)
        }
        Command::Synth {
            out,
            scenes,
            seed,
            n_cells,
            width,
            height,
            producers,
        } => {
            let mut cfg = config.synth.unwrap_or_default();
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.n_cells = n_cells.unwrap_or(cfg.n_cells);
            cfg.width = width.unwrap_or(cfg.width);
            cfg.height = height.unwrap_or(cfg.height);
            cfg.validate()?;
            cmd_synth(&out, scenes, &cfg, producers)
        }
        Command::Render { input, out } => cmd_render(&input, &out),
    }
}

pub fn cmd_extract(input: &Path, source: ProducerArg, out: &Path) -> CliResult {
    let source = match source {
        ProducerArg::Semantic => Source::Semantic,
        ProducerArg::Instance => Source::Instance,
    };
    let pkg = read_scene(input)?;
    let set = extract_detections(&pkg.scene, source);
    write_json(out, &DetectionsFile::from_set(&set, source))?;
    Ok(())
}

/// Pairs two package collections by name; a single package on both sides
/// pairs with itself regardless of its directory name.
fn pair_packages(left: &Path, right: &Path, left_name: &str, right_name: &str) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    if is_package(left) && is_package(right) {
        let name = left
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(vec![(name, left.to_owned(), right.to_owned())]);
    }
    let a = list_packages(left)?;
    let b = list_packages(right)?;
    if a.is_empty() {
        return Err(CliError::input(format!("no scene packages in {}", left.display())));
    }
    if b.is_empty() {
        return Err(CliError::input(format!("no scene packages in {}", right.display())));
    }
    let names_a: Vec<&String> = a.iter().map(|(n, _)| n).collect();
    let names_b: Vec<&String> = b.iter().map(|(n, _)| n).collect();
    let only_a: Vec<&str> = names_a.iter().filter(|n| !names_b.contains(n)).map(|n| n.as_str()).collect();
    let only_b: Vec<&str> = names_b.iter().filter(|n| !names_a.contains(n)).map(|n| n.as_str()).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(CliError::input(format!(
            "unpaired scenes: only in {left_name}: [{}]; only in {right_name}: [{}]",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    Ok(a.into_iter().zip(b).map(|((name, pa), (_, pb))| (name, pa, pb)).collect())
}

pub fn cmd_fuse(semantic: &Path, instance: &Path, out: &Path, weights: &VotingWeights, cfg: &FusionConfig) -> CliResult {
    let single = is_package(semantic) && is_package(instance);
    let pairs = pair_packages(semantic, instance, "semantic", "instance")?;
    pairs.par_iter().try_for_each(|(name, s, i)| -> CliResult {
        let sem = read_scene(s)?;
        let inst = read_scene(i)?;
        let fused = fuse(
            &extract_detections(&sem.scene, Source::Semantic),
            &extract_detections(&inst.scene, Source::Instance),
            weights,
            cfg,
        )?;
        let image = sem.image.as_ref().or(inst.image.as_ref());
        let target = if single { out.to_owned() } else { out.join(name) };
        write_scene(&target, &fused, image, Some(Source::Fused))?;
        Ok(())
    })
}

pub fn cmd_eval(gt: &Path, pred: &Path, out: &Path, counts_csv: Option<&Path>) -> CliResult {
    let pairs = pair_packages(gt, pred, "gt", "pred")?;
    let loaded: Vec<_> = pairs
        .par_iter()
        .map(|(_, g, p)| Ok((read_scene(g)?.scene, read_scene(p)?.scene)))
        .collect::<CliResult<_>>()?;
    let (gts, preds): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    let report = evaluate(&gts, &preds)?;
    write_json(out, &report)?;
    if let Some(path) = counts_csv {
        let rows: Vec<_> = pairs
            .iter()
            .map(|(n, _, _)| n.clone())
            .zip(report.per_scene_counts.iter().copied())
            .collect();
        write_counts_csv(path, &rows)?;
    }
    Ok(())
}

pub fn cmd_counts(input: &Path, out: &Path) -> CliResult {
    let packages = list_packages(input)?;
    if packages.is_empty() {
        return Err(CliError::input(format!("no scene packages in {}", input.display())));
    }
    let rows = packages
        .par_iter()
        .map(|(name, path)| Ok((name.clone(), count_cells(&read_scene(path)?.scene))))
        .collect::<CliResult<Vec<_>>>()?;
    write_counts_csv(out, &rows)?;
    Ok(())
}

pub fn cmd_augment(input: &Path, out: &Path, cfg: &AugmentConfig) -> CliResult {
    let single = is_package(input);
    let packages = list_packages(input)?;
    if packages.is_empty() {
        return Err(CliError::input(format!("no scene packages in {}", input.display())));
    }
    packages
        .par_iter()
        .enumerate()
        .try_for_each(|(i, (name, path))| -> CliResult {
            let pkg = read_scene(path)?;
            let image = pkg
                .image
                .ok_or_else(|| CliError::input(format!("{} has no image.png to augment", path.display())))?;
            let item_cfg = AugmentConfig {
                seed: cfg.seed ^ i as u64,
                ..cfg.clone()
            };
            let (img, scene) = augment(&image, &pkg.scene, &item_cfg)?;
            let target = if single { out.to_owned() } else { out.join(name) };
            write_scene(&target, &scene, Some(&img), pkg.source)?;
            Ok(())
        })
}

#[derive(Debug, Serialize)]
struct ManifestScene {
    name: String,
    seed: u64,
    n_cells: usize,
    cells: Vec<SynthCell>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a SynthConfig,
    producers: bool,
    scenes: Vec<ManifestScene>,
}

/// Scene `i` is generated with seed `cfg.seed + i`.
pub fn cmd_synth(out: &Path, scenes: usize, cfg: &SynthConfig, producers: bool) -> CliResult {
    if scenes == 0 {
        return Err(CliError::input("--scenes must be at least 1"));
    }
    let width = scenes.saturating_sub(1).to_string().len().max(3);
    let entries = (0..scenes)
        .into_par_iter()
        .map(|i| -> CliResult<ManifestScene> {
            let seed = cfg.seed.wrapping_add(i as u64);
            let name = format!("scene_{i:0width$}");
            let generated = generate_scene(&SynthConfig { seed, ..cfg.clone() })?;
            write_scene(&out.join("gt").join(&name), &generated.scene, Some(&generated.image), None)?;
            if producers {
                let (sem, inst) = constructed_producers(&generated.scene, seed)?;
                write_scene(&out.join("semantic").join(&name), &sem, Some(&generated.image), Some(Source::Semantic))?;
                write_scene(&out.join("instance").join(&name), &inst, Some(&generated.image), Some(Source::Instance))?;
            }
            Ok(ManifestScene {
                name,
                seed,
                n_cells: generated.cells.len(),
                cells: generated.cells,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            config: cfg,
            producers,
            scenes: entries,
        },
    )?;
    Ok(())
}

pub fn cmd_render(input: &Path, out: &Path) -> CliResult {
    let pkg = read_scene(input)?;
    let (w, h) = pkg.scene.dims();
    let image = pkg.image.unwrap_or_else(|| image::RgbImage::new(w, h));
    let overlay = render_overlay(&image, &pkg.scene)?;
    overlay.save(out).map_err(|source| Error::Image {
        path: out.to_owned(),
        source,
    })?;
    Ok(())
}
