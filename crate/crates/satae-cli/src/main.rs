//! `satae` — batch front end for the saturating auto-encoder toolkit.
//!
//! Subcommands: `gen-data` (toy manifolds to the native cache format),
//! `train` (SGD with alpha annealing; writes model, log, manifest),
//! `energy-grid` (reconstruction-energy maps for 2-D models as CSV + PGM),
//! `export-filters` (decoder columns as a tiled PGM/PPM image), and
//! `comp-table` (penalty tables, exact or via the smoothed numeric rule).
//!
//! Exit codes: 0 on success, 1 on runtime failures (bad input files,
//! diverging training), 2 on usage errors (malformed flags).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use satae::analysis::{energy_grid, tile_filters, GridBounds};
use satae::data::{gen_toy, Dataset, NormMode, ToyKind, ToyManifoldSpec};
use satae::model::{load_model, save_model};
use satae::nonlin::{
    numeric_comp, Nonlinearity, SampledActivation, VariationWeights,
};
use satae::train::{train, Stage, TrainConfig};

#[derive(Parser)]
#[command(name = "satae", version, about = "Saturating auto-encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset and save it in the native cache format.
    GenData(GenDataArgs),
    /// Train a model on a cached dataset; writes model, log, and manifest.
    Train(TrainArgs),
    /// Evaluate reconstruction energy on a grid (2-D models only).
    EnergyGrid(EnergyGridArgs),
    /// Export decoder columns as a tiled grayscale or RGB image.
    ExportFilters(ExportFiltersArgs),
    /// Write a `z,fc` penalty table for an activation over a range.
    CompTable(CompTableArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Arc,
    Sine,
    LineSegment,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    PerDim,
    Global,
}

#[derive(Args)]
struct GenDataArgs {
    /// Manifold shape.
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Number of samples.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Seed for the data-generation stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Isotropic Gaussian noise added to each sample.
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Normalization baked into the cache.
    #[arg(long, value_enum, default_value_t = NormArg::None)]
    norm_mode: NormArg,
    /// Output path for the cache file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FnArg {
    Shrink,
    Relu,
    Satlin,
    Linear,
    Cubic,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset: native cache (.satd), image tensor (.idx/-ubyte), or a
    /// CIFAR-style binary batch (.bin).
    #[arg(long)]
    data: PathBuf,
    /// Activation function.
    #[arg(long, value_enum)]
    kind: FnArg,
    /// Width parameter for shrink/satlin.
    #[arg(long)]
    lambda: Option<f64>,
    /// Hidden layer size.
    #[arg(long)]
    hidden: usize,
    /// Directory for model.satae, log.csv, and manifest.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// JSON file with a full training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Normalization applied after loading (default: use the data as-is).
    #[arg(long, value_enum, default_value_t = NormArg::None)]
    norm_mode: NormArg,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Share one weight matrix between encoder and decoder.
    #[arg(long)]
    tied: bool,
    /// Rescale decoder columns to unit norm every N updates (0 disables).
    #[arg(long)]
    reproject_every: Option<u64>,
    /// Final penalty weight of the annealing schedule.
    #[arg(long)]
    alpha_max: Option<f64>,
    /// Penalty-weight increment between stages.
    #[arg(long)]
    alpha_step: Option<f64>,
    /// Epochs per annealing stage.
    #[arg(long)]
    epochs_per_stage: Option<usize>,
    /// Visit samples in storage order instead of reshuffling each epoch.
    #[arg(long)]
    no_shuffle: bool,
    /// Keep the decoder bias fixed at zero.
    #[arg(long)]
    no_dec_bias: bool,
}

#[derive(Args)]
struct EnergyGridArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Grid bounds as `xlo:xhi:ylo:yhi`.
    #[arg(long, allow_hyphen_values = true, default_value = "-1:1:-1:1")]
    bounds: String,
    /// Nodes per axis.
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// Logarithmic brightness mapping in the PGM export.
    #[arg(long)]
    log_scale: bool,
    /// Output prefix; writes `<prefix>.csv` and `<prefix>.pgm`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct ExportFiltersArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Tile shape as `ROWSxCOLS`, e.g. `12x12`.
    #[arg(long)]
    tile: String,
    /// Channels per pixel: 1 (PGM) or 3 (PPM).
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompTableArgs {
    /// Activation function.
    #[arg(long = "fn", value_enum)]
    func: FnArg,
    /// Width parameter for shrink/satlin.
    #[arg(long)]
    lambda: Option<f64>,
    /// Evaluation grid as `lo:hi:step`.
    #[arg(long, allow_hyphen_values = true, default_value = "-3:3:0.01")]
    range: String,
    /// Use the smoothed numeric rule even when a closed form exists.
    #[arg(long)]
    numeric: bool,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::EnergyGrid(a) => cmd_energy_grid(a),
        Command::ExportFilters(a) => cmd_export_filters(a),
        Command::CompTable(a) => cmd_comp_table(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn apply_norm(ds: Dataset, mode: NormArg) -> Dataset {
    match mode {
        NormArg::None => ds,
        NormArg::PerDim => ds.normalize(NormMode::PerDim),
        NormArg::Global => ds.normalize(NormMode::Global),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Arc => ToyKind::Arc,
        KindArg::Sine => ToyKind::Sine,
        KindArg::LineSegment => ToyKind::LineSegment,
    };
    let spec = ToyManifoldSpec { kind, n: a.n, noise_std: a.noise_std, seed: a.seed };
    let ds = apply_norm(gen_toy(&spec)?, a.norm_mode);
    ds.save_cache(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} ({} samples, dim {})", a.out.display(), ds.len(), ds.dim());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("unreadable file name in {}", path.display()))?;
    let ds = if name.ends_with(".satd") {
        Dataset::load_cache(path)
    } else if name.ends_with(".idx") || name.ends_with("-ubyte") {
        satae::data::load_idx(path)
    } else if name.ends_with(".bin") {
        satae::data::load_cifar_batch(path)
    } else {
        bail!(
            "unrecognized dataset extension in {} (expected .satd, .idx/-ubyte, or .bin)",
            path.display()
        );
    };
    ds.with_context(|| format!("loading {}", path.display()))
}

/// Activation from CLI flags. Shrink and satlin take their width from
/// `--lambda` (default 1); the width is rejected for the others.
fn resolve_activation(func: FnArg, lambda: Option<f64>) -> Result<Nonlinearity> {
    match func {
        FnArg::Shrink => Ok(Nonlinearity::shrink(lambda.unwrap_or(1.0))),
        FnArg::Satlin => Ok(Nonlinearity::satlin(lambda.unwrap_or(1.0))),
        FnArg::Relu => {
            if lambda.is_some() {
                bail!("--lambda does not apply to relu");
            }
            Ok(Nonlinearity::relu())
        }
        FnArg::Linear => {
            if lambda.is_some() {
                bail!("--lambda does not apply to linear");
            }
            Ok(Nonlinearity::linear())
        }
        FnArg::Cubic => bail!("cubic is only available in comp-table"),
    }
}

/// Evenly spaced schedule from 0 to `max` in increments of `step`.
fn build_schedule(max: f64, step: f64, epochs: usize) -> Result<Vec<Stage>> {
    if max < 0.0 || !max.is_finite() {
        bail!("--alpha-max must be finite and >= 0, got {max}");
    }
    if step <= 0.0 || !step.is_finite() {
        bail!("--alpha-step must be finite and > 0, got {step}");
    }
    let mut stages = vec![Stage { alpha: 0.0, epochs }];
    let count = (max / step).round() as usize;
    for k in 1..=count {
        stages.push(Stage { alpha: k as f64 * step, epochs });
    }
    Ok(stages)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let f = resolve_activation(a.kind, a.lambda)?;
    let data_bytes =
        fs::read(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let data_sha = hex(&Sha256::digest(&data_bytes));
    let ds = apply_norm(load_dataset(&a.data)?, a.norm_mode);

    let mut cfg = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default_for(&f),
    };
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(s) = a.init_scale {
        cfg.init_scale = s;
    }
    if a.tied {
        cfg.tied = true;
        cfg.reproject_every = None;
    }
    if let Some(n) = a.reproject_every {
        cfg.reproject_every = (n > 0).then_some(n);
    }
    if a.no_shuffle {
        cfg.shuffle = false;
    }
    if a.no_dec_bias {
        cfg.dec_bias = false;
    }
    if a.alpha_max.is_some() || a.alpha_step.is_some() || a.epochs_per_stage.is_some() {
        let default = TrainConfig::default_for(&f);
        let default_step = default.alpha_schedule.get(1).map_or(0.05, |s| s.alpha);
        let default_max = default.alpha_schedule.last().map_or(0.5, |s| s.alpha);
        let default_epochs = default.alpha_schedule[0].epochs;
        cfg.alpha_schedule = build_schedule(
            a.alpha_max.unwrap_or(default_max),
            a.alpha_step.unwrap_or(default_step),
            a.epochs_per_stage.unwrap_or(default_epochs),
        )?;
    }

    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let model_path = a.out_dir.join("model.satae");
    let log_path = a.out_dir.join("log.csv");
    let manifest_path = a.out_dir.join("manifest.json");

    let (params, log) = train(&f, &ds, a.hidden, &cfg)?;
    save_model(&model_path, &params, &f)?;
    fs::write(&log_path, log.to_csv())
        .with_context(|| format!("writing {}", log_path.display()))?;

    let manifest = serde_json::json!({
        "command": "train",
        "nonlinearity": { "kind": f.kind_name(), "width": f.width() },
        "hidden": a.hidden,
        "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json())?,
        "data": {
            "path": a.data.display().to_string(),
            "source_tag": ds.source_tag(),
            "sha256": data_sha,
            "n": ds.len(),
            "dim": ds.dim(),
            "norm_mode": match a.norm_mode {
                NormArg::None => "none",
                NormArg::PerDim => "per-dim",
                NormArg::Global => "global",
            },
        },
        "seed": cfg.seed,
        "artifacts": {
            "model": model_path.display().to_string(),
            "log": log_path.display().to_string(),
        },
        "duration_seconds": start.elapsed().as_secs_f64(),
    });
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;

    let last = log.records.last().expect("non-empty schedule");
    println!(
        "trained {} epochs: recon_mean {:.6}, sat_frac {:.4}; artifacts in {}",
        log.records.len(),
        last.recon_mean,
        last.sat_frac,
        a.out_dir.display()
    );
    Ok(())
}

fn parse_bounds(s: &str) -> Result<GridBounds> {
    let parts: Vec<&str> = s.split(':').collect();
    let [xlo, xhi, ylo, yhi] = parts.as_slice() else {
        bail!("--bounds must be xlo:xhi:ylo:yhi, got {s:?}");
    };
    let p = |t: &str| -> Result<f64> {
        t.parse::<f64>().map_err(|_| anyhow!("bad bound {t:?} in {s:?}"))
    };
    Ok(GridBounds::new(p(xlo)?, p(xhi)?, p(ylo)?, p(yhi)?)?)
}

fn cmd_energy_grid(a: EnergyGridArgs) -> Result<()> {
    let bounds = parse_bounds(&a.bounds)?;
    let (params, f) = load_model(&a.model)?;
    let grid = match thread_cap()? {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .context("building thread pool")?
            .install(|| energy_grid(&params, &f, bounds, a.resolution)),
        None => energy_grid(&params, &f, bounds, a.resolution),
    }?;

    let csv_path = a.out_prefix.with_extension("csv");
    let pgm_path = a.out_prefix.with_extension("pgm");
    let mut csv = Vec::new();
    grid.write_csv(&mut csv)?;
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    fs::write(&pgm_path, grid.to_pgm_bytes(a.log_scale))
        .with_context(|| format!("writing {}", pgm_path.display()))?;
    println!(
        "wrote {} and {} ({r}x{r} nodes, energy {:.3e}..{:.3e})",
        csv_path.display(),
        pgm_path.display(),
        grid.min(),
        grid.max(),
        r = a.resolution,
    );
    Ok(())
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("SATAE_THREADS") {
        Ok(v) => {
            let k: usize =
                v.parse().map_err(|_| anyhow!("SATAE_THREADS must be a positive integer"))?;
            if k == 0 {
                bail!("SATAE_THREADS must be a positive integer");
            }
            Ok(Some(k))
        }
        Err(_) => Ok(None),
    }
}

fn cmd_export_filters(a: ExportFiltersArgs) -> Result<()> {
    let (rows, cols) = a
        .tile
        .split_once('x')
        .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
        .ok_or_else(|| anyhow!("--tile must be ROWSxCOLS, got {:?}", a.tile))?;
    let (params, _) = load_model(&a.model)?;
    let tiling = tile_filters(&params, rows, cols, a.channels)?;
    let mut bytes = Vec::new();
    tiling.write_netpbm(&mut bytes)?;
    fs::write(&a.out, bytes).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} ({}x{} tiles of {rows}x{cols})",
        a.out.display(),
        tiling.grid_rows(),
        tiling.grid_cols(),
    );
    Ok(())
}

fn parse_range(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        bail!("--range must be lo:hi:step, got {s:?}");
    };
    let p = |t: &str| -> Result<f64> {
        t.parse::<f64>().map_err(|_| anyhow!("bad number {t:?} in {s:?}"))
    };
    let (lo, hi, step) = (p(lo)?, p(hi)?, p(step)?);
    if !(hi > lo) || !(step > 0.0) {
        bail!("--range needs hi > lo and step > 0, got {s:?}");
    }
    Ok((lo, hi, step))
}

fn cmd_comp_table(a: CompTableArgs) -> Result<()> {
    let (lo, hi, step) = parse_range(&a.range)?;
    let grid: Vec<f64> = {
        let n = ((hi - lo) / step).round() as usize + 1;
        (0..n).map(|i| lo + i as f64 * step).collect()
    };

    // Activations with a closed-form penalty use it unless --numeric asks for
    // the smoothed rule; cubic has an isolated critical point and linear has
    // no flat region at all, so both always go through the numeric rule.
    let numeric_samples = match a.func {
        FnArg::Cubic => {
            if a.lambda.is_some() {
                bail!("--lambda does not apply to cubic");
            }
            Some(SampledActivation::sample(lo, hi, step, |z| z * z * z, |z| 3.0 * z * z)?)
        }
        FnArg::Linear => {
            if a.lambda.is_some() {
                bail!("--lambda does not apply to linear");
            }
            Some(SampledActivation::sample(lo, hi, step, |z| z, |_| 1.0)?)
        }
        FnArg::Shrink | FnArg::Relu | FnArg::Satlin if a.numeric => {
            let f = resolve_activation(a.func, a.lambda)?;
            Some(SampledActivation::from_nonlinearity(&f, lo, hi, step)?)
        }
        _ => None,
    };

    let mut csv = Vec::new();
    match numeric_samples {
        Some(samples) => {
            let table = numeric_comp(&samples, &VariationWeights::default())?;
            let Nonlinearity::Tabulated(tab) = &table else {
                unreachable!("numeric_comp returns a tabulated activation");
            };
            tab.write_csv(&mut csv)?;
        }
        None => {
            let f = resolve_activation(a.func, a.lambda)?;
            let fcs = grid
                .iter()
                .map(|&z| f.eval_comp(z))
                .collect::<Result<Vec<f64>, _>>()?;
            satae::nonlin::write_comp_table_csv(&mut csv, &grid, &fcs)?;
        }
    }
    fs::write(&a.out, csv).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} ({} rows)", a.out.display(), grid.len());
    Ok(())
}

/// Lowercase hex of a digest.
fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
