//! Multi-command driver for the HCRF pipeline: segmentation, attention patch
//! selection, image-level classification, evaluation, proportion grid search
//! and synthetic dataset generation — all through the library's file formats.
//!
//! Exit codes: 0 success, 1 data error (an input exists but is malformed or
//! inconsistent), 2 usage error (bad flags or a missing input file). Every
//! failure prints a one-line machine-readable JSON object to stderr:
//! `{"error": "...", "kind": "data" | "usage"}`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hcrf::io::{
    read_json, read_manifest, read_mask, read_pmap, write_json, write_manifest, write_mask,
    write_pmap, IoError, Manifest, ManifestEntry,
};
use hcrf::{
    classification_metrics, confusion_from_decisions, cpel_classify_map, gen_ground_truth,
    gen_probmaps, grid_search_threshold, segment, segmentation_counts, segmentation_report,
    select_attention_patches, ClassLabel, ConfusionCounts, CoreError, DecisionRecord, HcrfWeights,
    Objective, PatchRecord, PipelineConfig,
};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    Io(IoError),
    Core(CoreError),
    Usage(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(e) => e.fmt(f),
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(message) => f.write_str(message),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// Missing inputs and bad invocations are usage errors; everything else
    /// is a data error.
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(e) if e.is_missing_input() => "usage",
            _ => "data",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "usage" => 2,
            _ => 1,
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: String,
    kind: &'a str,
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

/// Hierarchical-CRF histology pipeline: fuse pixel- and patch-level
/// probability maps into segmentation masks, attention patches and
/// image-level labels.
#[derive(Parser)]
#[command(name = "hcrf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment every manifest image and write its MAP mask and posterior.
    Segment(SegmentArgs),
    /// Select attention patches from segmentation masks.
    Attend(AttendArgs),
    /// Classify images from patch-probability maps by summed log scores.
    Classify(ClassifyArgs),
    /// Score masks against ground truth, or decisions against true labels.
    Evaluate(EvaluateArgs),
    /// Tune the attention proportion threshold over the 10%–90% grid.
    GridSearch(GridSearchArgs),
    /// Generate a seeded synthetic dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SegmentArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Potential weights (JSON); all-ones when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Pipeline configuration (JSON); library defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving `<id>_mask.pgm` and `<id>_posterior.pmap`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AttendArgs {
    /// Segmentation masks (PGM), one per image.
    #[arg(long, num_args = 1.., required = true)]
    masks: Vec<PathBuf>,
    /// Tile edge in pixels.
    #[arg(long, default_value_t = 256)]
    patch_size: usize,
    /// A tile is an attention patch when its abnormal fraction strictly
    /// exceeds this proportion.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Patch-probability maps (PMAP), one per image; every site is a patch.
    #[arg(long = "patch-probs", num_args = 1.., required = true)]
    patch_probs: Vec<PathBuf>,
    /// Probability floor applied before the log.
    #[arg(long, default_value_t = 1e-12)]
    epsilon: f64,
    /// Output JSON path for the decision records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted masks (PGM); pairs with --gt by position.
    #[arg(long, num_args = 1..)]
    pred: Vec<PathBuf>,
    /// Ground-truth masks (PGM).
    #[arg(long, num_args = 1..)]
    gt: Vec<PathBuf>,
    /// Decision records JSON (as written by `classify`).
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// True labels JSON: image id → "normal" | "abnormal".
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Report JSON output path; the text table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridSearchArgs {
    /// Dataset manifest (JSON); entries without a GT mask are skipped.
    #[arg(long)]
    manifest: PathBuf,
    /// Objective to maximize: f1, dice, iou, accuracy, precision or recall.
    #[arg(long, default_value = "f1")]
    objective: Objective,
    /// Potential weights (JSON); all-ones when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Pipeline configuration (JSON); library defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output JSON path for the proportion table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
    /// Number of images to generate.
    #[arg(long, default_value_t = 8)]
    images: usize,
    /// Noise level σ in [0, 1]: 0 reproduces ground truth, 1 is pure noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Master seed; image i uses seeds `seed + 2i` (mask) and `seed + 2i + 1`
    /// (maps).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tile edge for the simulated backbone patch maps.
    #[arg(long, default_value_t = 256)]
    patch_size: usize,
    /// Elliptical blobs per ground-truth mask; 0 gives all-normal images.
    #[arg(long, default_value_t = 3)]
    blobs: usize,
    /// Blob radius scale as a fraction of the shorter image side.
    #[arg(long, default_value_t = 0.25)]
    blob_scale: f64,
    /// Directory receiving the image files and `manifest.json`.
    #[arg(long)]
    out_dir: PathBuf,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let report = ErrorReport {
                error: err.to_string(),
                kind: err.kind(),
            };
            match serde_json::to_string(&report) {
                Ok(line) => eprintln!("{line}"),
                Err(_) => eprintln!("{{\"error\":\"{err}\",\"kind\":\"{}\"}}", err.kind()),
            }
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Segment(args) => cmd_segment(args),
        Command::Attend(args) => cmd_attend(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::GridSearch(args) => cmd_grid_search(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| {
        CliError::Io(IoError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn load_weights(path: Option<&PathBuf>) -> Result<HcrfWeights, CliError> {
    Ok(match path {
        Some(p) => hcrf::io::read_weights(p)?,
        None => HcrfWeights::default(),
    })
}

fn load_config(path: Option<&PathBuf>) -> Result<PipelineConfig, CliError> {
    Ok(match path {
        Some(p) => hcrf::io::read_config(p)?,
        None => PipelineConfig::default(),
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_patch_maps(entry: &ManifestEntry) -> Result<[hcrf::ProbMap; 3], CliError> {
    Ok([
        read_pmap(&entry.patch_pmaps[0])?,
        read_pmap(&entry.patch_pmaps[1])?,
        read_pmap(&entry.patch_pmaps[2])?,
    ])
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

fn cmd_segment(args: SegmentArgs) -> Result<(), CliError> {
    let manifest = read_manifest(&args.manifest)?;
    let weights = load_weights(args.weights.as_ref())?;
    let config = load_config(args.config.as_ref())?;
    ensure_dir(&args.out_dir)?;

    for entry in &manifest.images {
        let started = Instant::now();
        let pixel = read_pmap(&entry.pixel_pmap)?;
        let patch = read_patch_maps(entry)?;
        let result = segment(&pixel, &patch, &weights, &config)?;
        write_mask(
            &result.mask,
            &args.out_dir.join(format!("{}_mask.pgm", entry.image_id)),
        )?;
        write_pmap(
            &result.posterior.to_probmap()?,
            &args
                .out_dir
                .join(format!("{}_posterior.pmap", entry.image_id)),
        )?;
        eprintln!(
            "segmented {} ({}x{}) in {:.1} ms",
            entry.image_id,
            pixel.height(),
            pixel.width(),
            started.elapsed().as_secs_f64() * 1e3
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attend
// ---------------------------------------------------------------------------

/// Per-mask output of `attend`: grid shape plus the attention tiles only.
#[derive(Serialize)]
struct AttentionReport {
    image_id: String,
    patch_size: usize,
    threshold: f64,
    rows: usize,
    cols: usize,
    attention: Vec<PatchRecord>,
}

fn cmd_attend(args: AttendArgs) -> Result<(), CliError> {
    let mut reports = Vec::with_capacity(args.masks.len());
    for path in &args.masks {
        let mask = read_mask(path)?;
        let grid = select_attention_patches(&mask, args.patch_size, args.threshold)?;
        reports.push(AttentionReport {
            image_id: file_stem(path),
            patch_size: args.patch_size,
            threshold: args.threshold,
            rows: grid.rows,
            cols: grid.cols,
            attention: grid.attention_patches().cloned().collect(),
        });
    }
    reports.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let selected: usize = reports.iter().map(|r| r.attention.len()).sum();
    write_json(&reports, &args.out)?;
    eprintln!(
        "selected {selected} attention patches across {} masks",
        reports.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// classify
// ---------------------------------------------------------------------------

fn cmd_classify(args: ClassifyArgs) -> Result<(), CliError> {
    let mut records = Vec::with_capacity(args.patch_probs.len());
    for path in &args.patch_probs {
        let map = read_pmap(path)?;
        let decision = cpel_classify_map(&map, args.epsilon)?;
        records.push(DecisionRecord::new(file_stem(path), &decision));
    }
    // Input order must not matter: emit in image-id order.
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    write_json(&records, &args.out)?;
    eprintln!("classified {} images", records.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let report = match (&args.decisions, &args.labels) {
        (Some(decisions_path), Some(labels_path)) => {
            if !args.pred.is_empty() || !args.gt.is_empty() {
                return Err(CliError::Usage(
                    "--decisions/--labels and --pred/--gt are mutually exclusive".into(),
                ));
            }
            let records: Vec<DecisionRecord> = read_json(decisions_path)?;
            let labels: BTreeMap<String, ClassLabel> = read_json(labels_path)?;
            let counts = confusion_from_decisions(&records, &labels)?;
            classification_metrics(counts)?
        }
        (None, None) => {
            if args.pred.is_empty() || args.gt.is_empty() {
                return Err(CliError::Usage(
                    "provide --pred and --gt mask files, or --decisions and --labels".into(),
                ));
            }
            if args.pred.len() != args.gt.len() {
                return Err(CliError::Usage(format!(
                    "--pred lists {} masks but --gt lists {}",
                    args.pred.len(),
                    args.gt.len()
                )));
            }
            let mut counts = ConfusionCounts::default();
            for (pred_path, gt_path) in args.pred.iter().zip(&args.gt) {
                let pred = read_mask(pred_path)?;
                let gt = read_mask(gt_path)?;
                counts.add(&segmentation_counts(&pred, &gt)?);
            }
            segmentation_report(counts)?
        }
        _ => {
            return Err(CliError::Usage(
                "--decisions and --labels must be given together".into(),
            ));
        }
    };
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        write_json(&report, out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grid-search
// ---------------------------------------------------------------------------

fn cmd_grid_search(args: GridSearchArgs) -> Result<(), CliError> {
    let manifest = read_manifest(&args.manifest)?;
    let weights = load_weights(args.weights.as_ref())?;
    let config = load_config(args.config.as_ref())?;

    let mut pairs = Vec::new();
    for entry in &manifest.images {
        let Some(gt_path) = &entry.gt_mask else {
            continue;
        };
        let pixel = read_pmap(&entry.pixel_pmap)?;
        let patch = read_patch_maps(entry)?;
        let result = segment(&pixel, &patch, &weights, &config)?;
        pairs.push((result.mask, read_mask(gt_path)?));
    }
    let result = grid_search_threshold(&pairs, config.patch_size, args.objective)?;

    println!("{:<12} {}", "proportion", result.objective.name());
    for row in &result.table {
        match row.score {
            Some(score) => println!("{:<12.1} {score:.4}", row.proportion),
            None => println!("{:<12.1} undefined", row.proportion),
        }
    }
    println!("{:<12} {:.1}", "best", result.best_proportion);
    write_json(&result, &args.out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    ensure_dir(&args.out_dir)?;
    let mut manifest = Manifest::default();
    for index in 0..args.images {
        let i = index as u64;
        let gt = gen_ground_truth(
            args.height,
            args.width,
            args.blobs,
            args.blob_scale,
            args.seed.wrapping_add(2 * i),
        )?;
        let maps = gen_probmaps(
            &gt,
            args.noise,
            args.patch_size,
            1e-12,
            args.seed.wrapping_add(2 * i + 1),
        )?;

        let stem = format!("img_{index:03}");
        let gt_name = format!("{stem}.gt.pgm");
        let pixel_name = format!("{stem}.pixel.pmap");
        write_mask(&gt, &args.out_dir.join(&gt_name))?;
        write_pmap(&maps.pixel, &args.out_dir.join(&pixel_name))?;
        let mut patch_names = Vec::with_capacity(3);
        for (lane, map) in maps.patch.iter().enumerate() {
            let name = format!("{stem}.patch{lane}.pmap");
            write_pmap(map, &args.out_dir.join(&name))?;
            patch_names.push(PathBuf::from(name));
        }

        let label = if gt.count_label(1) > 0 {
            ClassLabel::Abnormal
        } else {
            ClassLabel::Normal
        };
        // Relative paths keep whole output trees byte-comparable.
        manifest.images.push(ManifestEntry {
            image_id: stem,
            label,
            pixel_pmap: PathBuf::from(pixel_name),
            patch_pmaps: patch_names,
            gt_mask: Some(PathBuf::from(gt_name)),
        });
    }
    write_manifest(&manifest, &args.out_dir.join("manifest.json"))?;
    eprintln!(
        "wrote {} synthetic images to {}",
        args.images,
        args.out_dir.display()
    );
    Ok(())
}
