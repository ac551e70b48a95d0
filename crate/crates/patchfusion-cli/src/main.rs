//! Command-line pipeline: synthetic data, stain normalization, tiling,
//! two-stage training, prediction, evaluation, and cross-validation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error, 3 numerical
//! abort.

use clap::{Args, Parser, Subcommand};
use patchfusion::error::Error;
use patchfusion::eval::{confusion_and_accuracy, roc_auc, run_cv, save_roc_csv, two_class_map};
use patchfusion::fusion::{
    fuse_mlp, fuse_vote, predict_image, FusionSpec, ProbabilityMap, VoteStrategy,
};
use patchfusion::patchnet::ModelSpec;
use patchfusion::report::write_report;
use patchfusion::stain::{estimate_from_image, normalize_stains, StainProfile};
use patchfusion::tensor::Mode;
use patchfusion::tiling::{
    crop_to_grid, extract_patches, load_image, save_png, BiasedSynthSpec, DatasetManifest,
    RgbImage, SynthSpec,
};
use patchfusion::train::{
    fusion_from_checkpoint, infer_probability_map, infer_probability_maps,
    patchnet_from_checkpoint, save_loss_log, train_fusion_on_maps, train_fusion_stage,
    train_patch_stage, Checkpoint, StageHyper,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "patchfusion", version, about = "Two-stage patch/fusion image classifier")]
struct Cli {
    /// RNG seed (falls back to $PATCHFUSION_SEED, then 0)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 is the bitwise-deterministic mode
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Optional TOML config file; explicit flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset with a manifest
    Synth(SynthArgs),
    /// Stain-normalize one image to the built-in reference profile
    Normalize(NormalizeArgs),
    /// Cut an image into a patch grid on disk
    Tile(TileArgs),
    /// Stage 1: train the patch network under image-level labels
    TrainPatch(TrainPatchArgs),
    /// Run the frozen patch network and materialize probability maps
    InferMaps(InferMapsArgs),
    /// Stage 2: train the spatial fusion MLP
    TrainFusion(TrainFusionArgs),
    /// Classify one image with trained checkpoints
    Predict(PredictArgs),
    /// Score trained checkpoints on a manifest split
    Evaluate(EvaluateArgs),
    /// Stratified k-fold cross-validation with full per-fold retraining
    Cv(CvArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    test_per_class: usize,
    #[arg(long, default_value_t = 192)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    #[arg(long, default_value_t = 64)]
    patch_size: u32,
    /// Positionally biased 4-class variant (class identity lives in patch
    /// location, not texture alone)
    #[arg(long)]
    biased: bool,
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write the estimated source stain profile as JSON
    #[arg(long)]
    profile_out: Option<PathBuf>,
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    patch_size: u32,
    /// Defaults to patch size (non-overlapping)
    #[arg(long)]
    stride: Option<u32>,
}

fn parse_channels(s: &str) -> Result<Channels, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad channel count `{p}`")))
        .collect::<Result<_, _>>()?;
    let arr: [usize; 4] = parts
        .try_into()
        .map_err(|_| "expected 4 comma-separated channel counts".to_string())?;
    Ok(Channels(arr))
}

#[derive(Clone)]
struct Channels([usize; 4]);

fn parse_hidden(s: &str) -> Result<Hidden, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad layer size `{p}`")))
        .collect::<Result<_, _>>()?;
    let arr: [usize; 3] = parts
        .try_into()
        .map_err(|_| "expected 3 comma-separated hidden sizes".to_string())?;
    Ok(Hidden(arr))
}

#[derive(Clone)]
struct Hidden([usize; 3]);

#[derive(Args)]
struct TrainPatchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    #[arg(long, value_parser = parse_channels, default_value = "8,16,32,64")]
    channels: Channels,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct InferMapsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFusionArgs {
    #[arg(long)]
    patch_checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    /// Directory produced by `infer-maps`; skips re-running the patch net
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = parse_hidden, default_value = "128,64,32")]
    hidden: Hidden,
    #[arg(long)]
    dropout: Option<f64>,
}

fn parse_fusion_choice(s: &str) -> Result<FusionChoice, String> {
    if s == "mlp" {
        return Ok(FusionChoice::Mlp);
    }
    if let Some(rest) = s.strip_prefix("vote:") {
        return VoteStrategy::from_str(rest)
            .map(FusionChoice::Vote)
            .map_err(|e| e.to_string());
    }
    Err(format!("unknown fusion mode `{s}` (expected mlp or vote:majority|max|sum)"))
}

#[derive(Clone, Copy)]
enum FusionChoice {
    Mlp,
    Vote(VoteStrategy),
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    patch_checkpoint: PathBuf,
    #[arg(long)]
    fusion_checkpoint: Option<PathBuf>,
    /// `mlp` (default) or `vote:majority|max|sum`
    #[arg(long, value_parser = parse_fusion_choice, default_value = "mlp")]
    fusion: FusionChoice,
    /// Write the per-patch probability map as CSV
    #[arg(long)]
    map_out: Option<PathBuf>,
    /// Center-crop untileable images to the largest tileable region
    #[arg(long)]
    resize_to_grid: bool,
    /// Stain-normalize to the built-in reference before tiling
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    patch_checkpoint: PathBuf,
    #[arg(long)]
    fusion_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    #[arg(long, value_parser = parse_channels, default_value = "8,16,32,64")]
    channels: Channels,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    fusion_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

/// Values a TOML config file may provide; explicit flags win.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    epochs: Option<usize>,
    fusion_epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    dropout: Option<f64>,
}

struct Resolved {
    seed: u64,
    threads: usize,
    file: FileConfig,
}

impl Resolved {
    fn from(cli: &Cli) -> Result<Resolved, Error> {
        let file = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
                toml::from_str(&text)
                    .map_err(|e| Error::InvalidArgument(format!("bad config file: {e}")))?
            }
            None => FileConfig::default(),
        };
        let env_seed = match std::env::var("PATCHFUSION_SEED") {
            Ok(s) => Some(s.parse::<u64>().map_err(|_| {
                Error::InvalidArgument(format!("PATCHFUSION_SEED must be an integer, got `{s}`"))
            })?),
            Err(_) => None,
        };
        let seed = cli.seed.or(file.seed).or(env_seed).unwrap_or(0);
        let threads = cli.threads.or(file.threads).unwrap_or(1);
        if threads == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        Ok(Resolved { seed, threads, file })
    }

    fn patch_hyper(&self, epochs: Option<usize>, batch: Option<usize>, lr: Option<f64>) -> StageHyper {
        let d = StageHyper::patch_defaults();
        StageHyper {
            epochs: epochs.or(self.file.epochs).unwrap_or(d.epochs),
            batch_size: batch.or(self.file.batch_size).unwrap_or(d.batch_size),
            lr: lr.or(self.file.lr).unwrap_or(d.lr),
        }
    }

    fn fusion_hyper(&self, epochs: Option<usize>, batch: Option<usize>, lr: Option<f64>) -> StageHyper {
        let d = StageHyper::fusion_defaults();
        StageHyper {
            epochs: epochs.or(self.file.fusion_epochs).unwrap_or(d.epochs),
            batch_size: batch.or(self.file.batch_size).unwrap_or(d.batch_size),
            lr: lr.or(self.file.lr).unwrap_or(d.lr),
        }
    }
}

/// Record the fully resolved parameters next to the command's outputs so
/// any output directory is re-runnable.
fn write_snapshot(output: &Path, snapshot: &impl Serialize) -> Result<(), Error> {
    let path = if output.is_dir() {
        output.join("resolved-config.toml")
    } else {
        let name = output
            .file_name()
            .map(|n| format!("{}.config.toml", n.to_string_lossy()))
            .unwrap_or_else(|| "resolved-config.toml".into());
        output.with_file_name(name)
    };
    let text = toml::to_string_pretty(snapshot)
        .map_err(|e| Error::InvalidArgument(format!("config snapshot: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn run_synth(r: &Resolved, a: &SynthArgs) -> Result<(), Error> {
    let manifest = if a.biased {
        patchfusion::tiling::synth_biased_dataset(
            &BiasedSynthSpec {
                per_class: a.per_class,
                test_per_class: a.test_per_class,
                patch_size: a.patch_size,
                seed: r.seed,
            },
            &a.out,
        )?
    } else {
        patchfusion::tiling::synth_dataset(
            &SynthSpec {
                classes: a.classes,
                per_class: a.per_class,
                test_per_class: a.test_per_class,
                width: a.width,
                height: a.height,
                patch_size: a.patch_size,
                seed: r.seed,
            },
            &a.out,
        )?
    };
    #[derive(Serialize)]
    struct Snap {
        command: &'static str,
        seed: u64,
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        width: u32,
        height: u32,
        patch_size: u32,
        biased: bool,
    }
    write_snapshot(
        &a.out,
        &Snap {
            command: "synth",
            seed: r.seed,
            classes: if a.biased { 4 } else { a.classes },
            per_class: a.per_class,
            test_per_class: a.test_per_class,
            width: a.width,
            height: a.height,
            patch_size: a.patch_size,
            biased: a.biased,
        },
    )?;
    println!(
        "{}",
        serde_json::json!({
            "manifest": a.out.join("manifest.csv"),
            "images": manifest.entries.len(),
        })
    );
    Ok(())
}

fn run_normalize(a: &NormalizeArgs) -> Result<(), Error> {
    let img = load_image(&a.input)?;
    let source = estimate_from_image(&img)?;
    let normalized = normalize_stains(&img, &source, &StainProfile::reference());
    if let Some(parent) = a.output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    save_png(&normalized, &a.output)?;
    if let Some(profile_out) = &a.profile_out {
        std::fs::write(profile_out, source.to_json()).map_err(|e| io_err(profile_out, e))?;
    }
    Ok(())
}

fn run_tile(a: &TileArgs) -> Result<(), Error> {
    let img = load_image(&a.input)?;
    let stride = a.stride.unwrap_or(a.patch_size);
    let grid = extract_patches(&img, a.patch_size, stride)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut index = String::from("i,j,x,y,path\n");
    for (n, (patch, &(x, y))) in grid.patches.iter().zip(&grid.offsets).enumerate() {
        let (i, j) = (n / grid.cols, n % grid.cols);
        let name = format!("patch_{i}_{j}.png");
        save_png(patch, &a.out.join(&name))?;
        index.push_str(&format!("{i},{j},{x},{y},{name}\n"));
    }
    let index_path = a.out.join("offsets.csv");
    std::fs::write(&index_path, index).map_err(|e| io_err(&index_path, e))?;
    println!(
        "{}",
        serde_json::json!({"rows": grid.rows, "cols": grid.cols, "patches": grid.patches.len()})
    );
    Ok(())
}

fn run_train_patch(r: &Resolved, a: &TrainPatchArgs) -> Result<(), Error> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let spec = ModelSpec::with_channels(a.input_size, &a.channels.0, manifest.num_classes());
    let hyper = r.patch_hyper(a.epochs, a.batch_size, a.lr);
    let (ckpt, logs, warnings) = train_patch_stage(&manifest, &a.split, &spec, &hyper, r.seed)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    ckpt.save(&a.out)?;
    let log_path = a.out.with_file_name(format!(
        "{}.loss.csv",
        a.out.file_name().unwrap_or_default().to_string_lossy()
    ));
    save_loss_log(&logs, &log_path)?;
    #[derive(Serialize)]
    struct Snap<'a> {
        command: &'static str,
        seed: u64,
        threads: usize,
        manifest: String,
        split: &'a str,
        input_size: usize,
        channels: [usize; 4],
        epochs: usize,
        batch_size: usize,
        lr: f64,
    }
    write_snapshot(
        &a.out,
        &Snap {
            command: "train-patch",
            seed: r.seed,
            threads: r.threads,
            manifest: a.manifest.display().to_string(),
            split: &a.split,
            input_size: a.input_size,
            channels: a.channels.0,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            lr: hyper.lr,
        },
    )?;
    let last = logs.last();
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": a.out,
            "final_loss": last.map(|l| l.loss),
            "final_acc": last.map(|l| l.acc),
        })
    );
    Ok(())
}

fn run_infer_maps(r: &Resolved, a: &InferMapsArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let maps = infer_probability_maps(&ckpt, &manifest, &a.split)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut index = String::from("image,label,map\n");
    for (n, (path, label, map)) in maps.iter().enumerate() {
        let name = format!("map_{n:04}.csv");
        map.save_csv(&a.out.join(&name))?;
        index.push_str(&format!("{},{label},{name}\n", path.display()));
    }
    let index_path = a.out.join("index.csv");
    std::fs::write(&index_path, index).map_err(|e| io_err(&index_path, e))?;
    #[derive(Serialize)]
    struct Snap {
        command: &'static str,
        seed: u64,
        checkpoint: String,
        manifest: String,
        split: String,
        maps: usize,
    }
    write_snapshot(
        &a.out,
        &Snap {
            command: "infer-maps",
            seed: r.seed,
            checkpoint: a.checkpoint.display().to_string(),
            manifest: a.manifest.display().to_string(),
            split: a.split.clone(),
            maps: maps.len(),
        },
    )?;
    println!("{}", serde_json::json!({"maps": maps.len(), "index": index_path}));
    Ok(())
}

fn load_map_dir(dir: &Path) -> Result<Vec<(ProbabilityMap, usize)>, Error> {
    let index_path = dir.join("index.csv");
    let text = std::fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Csv(format!("{}: bad row `{line}`", index_path.display())));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| Error::Csv(format!("bad label `{}`", fields[1])))?;
        let map = ProbabilityMap::load_csv(&dir.join(fields[2]))?;
        out.push((map, label));
    }
    Ok(out)
}

fn run_train_fusion(r: &Resolved, a: &TrainFusionArgs) -> Result<(), Error> {
    let hyper = r.fusion_hyper(a.epochs, a.batch_size, a.lr);
    let dropout = a.dropout.or(r.file.dropout).unwrap_or(0.5);
    let build_spec = |rows, cols, classes| FusionSpec {
        rows,
        cols,
        classes,
        hidden_sizes: a.hidden.0,
        dropout_p: dropout,
    };
    let (ckpt, logs) = if let Some(maps_dir) = &a.maps {
        let maps = load_map_dir(maps_dir)?;
        let first = maps.first().ok_or_else(|| Error::Manifest("no maps in directory".into()))?;
        let spec = build_spec(first.0.rows, first.0.cols, first.0.classes);
        train_fusion_on_maps(&maps, &spec, &hyper, r.seed)?
    } else {
        let manifest_path = a.manifest.as_ref().ok_or_else(|| {
            Error::InvalidArgument("either --manifest or --maps is required".into())
        })?;
        let patch_ckpt = Checkpoint::load(&a.patch_checkpoint)?;
        let manifest = DatasetManifest::load(manifest_path)?;
        let entries = manifest.split(&a.split);
        let first = entries
            .first()
            .ok_or_else(|| Error::Manifest(format!("no entries with split `{}`", a.split)))?;
        let (mut net, stdz) = patchnet_from_checkpoint(&patch_ckpt)?;
        let probe = infer_probability_map(&mut net, &stdz, &load_image(&first.path)?)?;
        let spec = build_spec(probe.rows, probe.cols, probe.classes);
        train_fusion_stage(&patch_ckpt, &manifest, &a.split, &spec, &hyper, r.seed)?
    };
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    ckpt.save(&a.out)?;
    let log_path = a.out.with_file_name(format!(
        "{}.loss.csv",
        a.out.file_name().unwrap_or_default().to_string_lossy()
    ));
    save_loss_log(&logs, &log_path)?;
    #[derive(Serialize)]
    struct Snap {
        command: &'static str,
        seed: u64,
        threads: usize,
        patch_checkpoint: String,
        hidden: [usize; 3],
        dropout: f64,
        epochs: usize,
        batch_size: usize,
        lr: f64,
    }
    write_snapshot(
        &a.out,
        &Snap {
            command: "train-fusion",
            seed: r.seed,
            threads: r.threads,
            patch_checkpoint: a.patch_checkpoint.display().to_string(),
            hidden: a.hidden.0,
            dropout,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            lr: hyper.lr,
        },
    )?;
    let last = logs.last();
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": a.out,
            "final_loss": last.map(|l| l.loss),
            "final_acc": last.map(|l| l.acc),
        })
    );
    Ok(())
}

fn prepared_image(a: &PredictArgs, patch_size: u32) -> Result<RgbImage, Error> {
    let mut img = load_image(&a.image)?;
    if a.normalize {
        let source = estimate_from_image(&img)?;
        img = normalize_stains(&img, &source, &StainProfile::reference());
    }
    let (w, h) = (img.width(), img.height());
    let tileable = w >= patch_size && h >= patch_size && w % patch_size == 0 && h % patch_size == 0;
    if !tileable {
        if !a.resize_to_grid {
            return Err(Error::InvalidArgument(format!(
                "image {w}x{h} is not tileable by patch size {patch_size}; \
                 pass --resize-to-grid to center-crop to the largest tileable region"
            )));
        }
        img = crop_to_grid(&img, patch_size)?;
    }
    Ok(img)
}

fn run_predict(r: &Resolved, a: &PredictArgs) -> Result<(), Error> {
    let patch_ckpt = Checkpoint::load(&a.patch_checkpoint)?;
    let (mut net, stdz) = patchnet_from_checkpoint(&patch_ckpt)?;
    let img = prepared_image(a, net.spec.input_size as u32)?;
    let map = infer_probability_map(&mut net, &stdz, &img)?;
    if let Some(map_out) = &a.map_out {
        map.save_csv(map_out)?;
    }
    let (label, class_probs, mode_name) = match a.fusion {
        FusionChoice::Mlp => {
            let fusion_path = a.fusion_checkpoint.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--fusion-checkpoint is required for the mlp fuser".into())
            })?;
            let fusion_net = fusion_from_checkpoint(&Checkpoint::load(fusion_path)?)?;
            let mut rng = rand_stub();
            let probs = fuse_mlp(&fusion_net, &map, Mode::Eval, &mut rng)?;
            (predict_image(&probs)?, probs, "mlp".to_string())
        }
        FusionChoice::Vote(strategy) => {
            let label = fuse_vote(&map, strategy);
            // per-class mean over fibers, for reporting only
            let k = map.classes;
            let mut probs = vec![0.0; k];
            for n in 0..map.num_patches() {
                let fiber = map.fiber(n / map.cols, n % map.cols);
                for c in 0..k {
                    probs[c] += fiber[c] / map.num_patches() as f64;
                }
            }
            (label, probs, format!("vote:{strategy:?}").to_lowercase())
        }
    };
    let two_class = if class_probs.len() == 4 {
        let (non, car) = two_class_map(&class_probs)?;
        Some(serde_json::json!({"non_carcinoma": non, "carcinoma": car}))
    } else {
        None
    };
    let _ = r;
    println!(
        "{}",
        serde_json::json!({
            "image": a.image,
            "label": label,
            "fusion": mode_name,
            "class_probs": class_probs,
            "two_class": two_class,
            "grid": {"rows": map.rows, "cols": map.cols},
        })
    );
    Ok(())
}

// eval-mode forwards never sample; any RNG satisfies the signature
fn rand_stub() -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha_stub::StubRng::seed_from_u64(0)
}

mod rand_chacha_stub {
    // tiny deterministic RngCore so the CLI does not depend on rand_chacha
    pub struct StubRng(u64);

    impl rand::RngCore for StubRng {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }
        fn next_u64(&mut self) -> u64 {
            // splitmix64 step
            self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for chunk in dest.chunks_mut(8) {
                let bytes = self.next_u64().to_le_bytes();
                chunk.copy_from_slice(&bytes[..chunk.len()]);
            }
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
            self.fill_bytes(dest);
            Ok(())
        }
    }

    impl rand::SeedableRng for StubRng {
        type Seed = [u8; 8];
        fn from_seed(seed: Self::Seed) -> StubRng {
            StubRng(u64::from_le_bytes(seed))
        }
    }
}

fn run_evaluate(r: &Resolved, a: &EvaluateArgs) -> Result<(), Error> {
    let patch_ckpt = Checkpoint::load(&a.patch_checkpoint)?;
    let fusion_net = fusion_from_checkpoint(&Checkpoint::load(&a.fusion_checkpoint)?)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (mut net, stdz) = patchnet_from_checkpoint(&patch_ckpt)?;
    let entries = manifest.split(&a.split);
    if entries.is_empty() {
        return Err(Error::Manifest(format!("no entries with split `{}`", a.split)));
    }
    let classes = manifest.num_classes();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut binary_labels = Vec::new();
    let mut rng = rand_stub();
    for e in &entries {
        let img = load_image(&e.path)?;
        let map = infer_probability_map(&mut net, &stdz, &img)?;
        let probs = fuse_mlp(&fusion_net, &map, Mode::Eval, &mut rng)?;
        preds.push(predict_image(&probs)?);
        labels.push(e.label);
        if classes == 4 {
            let (_, car) = two_class_map(&probs)?;
            scores.push(car);
            binary_labels.push(e.label >= 2);
        }
    }
    let (cm, acc4) = confusion_and_accuracy(&preds, &labels, classes)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    cm.save_csv(&a.out.join("confusion.csv"))?;

    let mut acc2 = None;
    let mut auc = None;
    if classes == 4 {
        let correct2 = preds
            .iter()
            .zip(&labels)
            .filter(|&(&p, &t)| (p >= 2) == (t >= 2))
            .count();
        acc2 = Some(correct2 as f64 / preds.len() as f64);
        if binary_labels.iter().any(|&b| b) && binary_labels.iter().any(|&b| !b) {
            let (a_, points) = roc_auc(&scores, &binary_labels)?;
            save_roc_csv(&points, &a.out.join("roc.csv"))?;
            auc = Some(a_);
        }
    }
    let summary = serde_json::json!({
        "images": preds.len(),
        "acc4": acc4,
        "acc2": acc2,
        "auc": auc,
    });
    let metrics_path = a.out.join("metrics.csv");
    let mut metrics = String::from("metric,value\n");
    metrics.push_str(&format!("acc4,{acc4:.6}\n"));
    if let Some(v) = acc2 {
        metrics.push_str(&format!("acc2,{v:.6}\n"));
    }
    if let Some(v) = auc {
        metrics.push_str(&format!("auc,{v:.6}\n"));
    }
    std::fs::write(&metrics_path, metrics).map_err(|e| io_err(&metrics_path, e))?;
    #[derive(Serialize)]
    struct Snap {
        command: &'static str,
        seed: u64,
        manifest: String,
        split: String,
        patch_checkpoint: String,
        fusion_checkpoint: String,
    }
    write_snapshot(
        &a.out,
        &Snap {
            command: "evaluate",
            seed: r.seed,
            manifest: a.manifest.display().to_string(),
            split: a.split.clone(),
            patch_checkpoint: a.patch_checkpoint.display().to_string(),
            fusion_checkpoint: a.fusion_checkpoint.display().to_string(),
        },
    )?;
    println!("{summary}");
    Ok(())
}

fn run_cv_cmd(r: &Resolved, a: &CvArgs) -> Result<(), Error> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let spec = ModelSpec::with_channels(a.input_size, &a.channels.0, manifest.num_classes());
    let patch_hyper = r.patch_hyper(a.epochs, a.batch_size, a.lr);
    let fusion_hyper = r.fusion_hyper(a.fusion_epochs, a.batch_size, a.lr);
    let report = run_cv(&manifest, a.k, &spec, &patch_hyper, &fusion_hyper, r.seed)?;
    write_report(&report, &a.out)?;
    #[derive(Serialize)]
    struct Snap {
        command: &'static str,
        seed: u64,
        threads: usize,
        manifest: String,
        k: usize,
        input_size: usize,
        channels: [usize; 4],
        epochs: usize,
        fusion_epochs: usize,
        batch_size: usize,
        lr: f64,
    }
    write_snapshot(
        &a.out,
        &Snap {
            command: "cv",
            seed: r.seed,
            threads: r.threads,
            manifest: a.manifest.display().to_string(),
            k: a.k,
            input_size: a.input_size,
            channels: a.channels.0,
            epochs: patch_hyper.epochs,
            fusion_epochs: fusion_hyper.epochs,
            batch_size: patch_hyper.batch_size,
            lr: patch_hyper.lr,
        },
    )?;
    println!(
        "{}",
        serde_json::json!({
            "folds": report.folds.len(),
            "mean_acc4": report.mean_acc4,
            "std_acc4": report.std_acc4,
            "mean_acc2": report.mean_acc2,
            "mean_auc": report.mean_auc,
            "report": a.out,
        })
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let resolved = Resolved::from(cli)?;
    match &cli.command {
        Command::Synth(a) => run_synth(&resolved, a),
        Command::Normalize(a) => run_normalize(a),
        Command::Tile(a) => run_tile(a),
        Command::TrainPatch(a) => run_train_patch(&resolved, a),
        Command::InferMaps(a) => run_infer_maps(&resolved, a),
        Command::TrainFusion(a) => run_train_fusion(&resolved, a),
        Command::Predict(a) => run_predict(&resolved, a),
        Command::Evaluate(a) => run_evaluate(&resolved, a),
        Command::Cv(a) => run_cv_cmd(&resolved, a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is a
            // usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_numerical() { 3 } else { 2 });
        }
    }
}
