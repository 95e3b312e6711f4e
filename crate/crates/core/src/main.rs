use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use detbench::annotations::{self, AnnotationError};
use detbench::augment::{self, AugmentError, AugmentSpec};
use detbench::deformattn;
use detbench::harness::{self, BenchmarkReport, HarnessError, ReportFormat, RunConfig};
use detbench::metrics::{self, EvalParams, ReportMeta};
use detbench::split::{self, FoldPlan, SplitError};

#[derive(Parser)]
#[command(name = "detbench", version, about = "Object detection benchmarking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an annotation file for schema, reference and geometry problems.
    Validate { annotations: PathBuf },
    /// Print image, annotation and per-category counts.
    Stats {
        annotations: PathBuf,
        /// Also list the box count of every image.
        #[arg(long)]
        per_image: bool,
    },
    /// Build a stratified k-fold plan, or print one fold of an existing plan.
    Split(SplitArgs),
    /// Apply the seeded augmentation pipeline to every image of a dataset.
    Augment {
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detections file against ground truth.
    Evaluate {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.5)]
        score: f64,
        #[arg(long)]
        per_class: bool,
        /// Print the full report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Verify the deformable attention kernel against its oracle and gradients.
    KernelCheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Evaluate every (model, dataset, fold) of a run config and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Normalize and combine a loss log into per-model curves.
    Losses {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate report files from a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "csv,json")]
        format: Vec<ReportFormat>,
        /// Output directory; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SplitArgs {
    /// Annotation file to split.
    #[arg(required_unless_present = "materialize", conflicts_with = "materialize")]
    annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, required_unless_present = "materialize")]
    out: Option<PathBuf>,
    /// Plan file whose fold should be printed.
    #[arg(long, requires = "fold")]
    materialize: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
}

/// A failure with its process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn integrity(message: impl ToString) -> Self {
        Failure { code: 1, message: message.to_string() }
    }

    fn config(message: impl ToString) -> Self {
        Failure { code: 2, message: message.to_string() }
    }
}

impl From<AnnotationError> for Failure {
    fn from(e: AnnotationError) -> Self {
        match e {
            AnnotationError::Io { .. } => Failure::config(e),
            _ => Failure::integrity(e),
        }
    }
}

impl From<SplitError> for Failure {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::Io { .. } | SplitError::TooFewFolds(_) | SplitError::FoldOutOfRange { .. } => {
                Failure::config(e)
            }
            _ => Failure::integrity(e),
        }
    }
}

impl From<AugmentError> for Failure {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::Io { .. }
            | AugmentError::Spec { .. }
            | AugmentError::Sigma(_)
            | AugmentError::Radius(_)
            | AugmentError::Probability { .. } => Failure::config(e),
            _ => Failure::integrity(e),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { annotations } => validate(&annotations),
        Command::Stats { annotations, per_image } => stats(&annotations, per_image),
        Command::Split(args) => split_cmd(args),
        Command::Augment { annotations, images, spec, out } => augment_cmd(&annotations, &images, &spec, &out),
        Command::Evaluate { ann, dets, iou, score, per_class, json } => {
            evaluate(&ann, &dets, EvalParams { iou_threshold: iou, score_threshold: score }, per_class, json)
        }
        Command::KernelCheck { seed, trials, h } => kernel_check(seed, trials, h),
        Command::Run { config } => run(&config),
        Command::Losses { input, out } => losses(&input, &out),
        Command::Report { input, format, out } => report(&input, &format, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn validate(path: &Path) -> Outcome {
    let ds = annotations::parse_dataset(path)?;
    let report = annotations::validate(&ds);
    for finding in &report.findings {
        println!("{finding}");
    }
    if report.is_empty() {
        println!("ok: {} images, {} annotations, {} categories", ds.images.len(), ds.annotations.len(), ds.categories.len());
        Ok(())
    } else {
        Err(Failure::integrity(format!("{} finding(s)", report.len())))
    }
}

fn stats(path: &Path, per_image: bool) -> Outcome {
    let ds = annotations::parse_dataset(path)?;
    let s = annotations::stats(&ds);
    println!("images: {}", s.image_count);
    println!("annotations: {}", s.annotation_count);
    for c in &s.per_category {
        println!("category {} ({}): {}", c.name, c.category_id, c.count);
    }
    let hist: Vec<String> = s.boxes_per_image.iter().map(|(boxes, images)| format!("{boxes}:{images}")).collect();
    println!("boxes per image: {}", hist.join(" "));
    if let Some(a) = s.box_area {
        println!("box area: min {} median {} max {}", a.min, a.median, a.max);
    }
    if per_image {
        for (id, count) in annotations::per_image_counts(&ds) {
            println!("image {id}: {count}");
        }
    }
    Ok(())
}

fn split_cmd(args: SplitArgs) -> Outcome {
    if let Some(plan_path) = args.materialize {
        let plan = FoldPlan::load(&plan_path)?;
        let fold = plan.materialize_fold(args.fold.expect("clap requires --fold"))?;
        println!("{}", serde_json::to_string_pretty(&fold).expect("fold serializes"));
        return Ok(());
    }
    let (ann, out) = (args.annotations.expect("clap requires annotations"), args.out.expect("clap requires --out"));
    let ds = annotations::parse_dataset(&ann)?;
    let plan = split::stratified_kfold(&ds, args.k, args.seed)?;
    plan.save(&out)?;
    let audit = split::audit(&ds, &plan);
    let sizes: Vec<String> = audit.fold_sizes.iter().map(usize::to_string).collect();
    println!("wrote {} ({} folds, sizes {})", out.display(), plan.k, sizes.join(" "));
    if !audit.within_bounds() {
        eprintln!("warning: per-class balance exceeds the allowance by up to {:.3} instances", audit.worst_excess);
    }
    Ok(())
}

fn augment_cmd(ann: &Path, images: &Path, spec_path: &Path, out: &Path) -> Outcome {
    let ds = annotations::parse_dataset(ann)?;
    let spec = AugmentSpec::load(spec_path)?;
    for w in spec.validate()? {
        eprintln!("warning: {w}");
    }
    let (augmented, ops) = augment::augment_dataset(&ds, images, &spec, out)?;
    let write = |name: &str, text: String| {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Failure::config(format!("failed to write {}: {e}", path.display())))
    };
    write("annotations.json", augmented.to_json_string())?;
    write("augment_log.json", serde_json::to_string_pretty(&ops).expect("log serializes"))?;
    println!("augmented {} images into {}", ops.len(), out.display());
    Ok(())
}

fn evaluate(ann: &Path, dets_path: &Path, params: EvalParams, per_class: bool, json: bool) -> Outcome {
    if !(params.iou_threshold > 0.0 && params.iou_threshold <= 1.0) || !(0.0..=1.0).contains(&params.score_threshold) {
        return Err(Failure::config("--iou must lie in (0, 1] and --score in [0, 1]"));
    }
    let ds = annotations::parse_dataset(ann)?;
    let dets = annotations::parse_detections(dets_path)?;
    annotations::check_detection_refs(&ds, &dets)?;
    let meta = ReportMeta { model: String::new(), dataset: ann.display().to_string(), fold: None, training_time_seconds: None };
    let r = metrics::evaluate(&ds, &dets, params, meta).map_err(Failure::integrity)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        return Ok(());
    }
    let pct = metrics::percent;
    println!("precision {}  recall {}  f1 {}", pct(r.precision), pct(r.recall), pct(r.f1));
    println!("mAP@50 {}  mAP@75 {}  mAP {}", pct(r.map50), pct(r.map75), pct(r.map));
    println!("tp {}  fp {}  fn {}", r.counts.tp, r.counts.fp, r.counts.fn_);
    if per_class {
        for c in &r.per_class {
            println!(
                "{}: precision {} recall {} f1 {} ap50 {} ap75 {} ap {}",
                c.name,
                pct(c.precision),
                pct(c.recall),
                pct(c.f1),
                pct(c.ap50),
                pct(c.ap75),
                pct(c.ap)
            );
        }
    }
    Ok(())
}

fn kernel_check(seed: u64, trials: usize, h: f64) -> Outcome {
    let r = deformattn::kernel_check(seed, trials, h).map_err(Failure::config)?;
    println!("instances: {} (seed {seed})", trials + 1);
    println!("max |fused - naive|: {:e} (limit {:e})", r.max_oracle_deviation, deformattn::ORACLE_TOLERANCE);
    for (wrt, e) in &r.max_relative_error {
        println!("gradcheck {wrt}: max relative error {e:e} (limit {:e})", deformattn::GRADIENT_TOLERANCE);
    }
    if r.passed {
        println!("kernel check passed");
        Ok(())
    } else {
        Err(Failure::integrity("kernel check exceeded tolerance"))
    }
}

fn run(config: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let report = harness::run_evaluation(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for g in &report.gaps {
        eprintln!("gap: {}/{} fold {}: {} not found", g.model, g.dataset, g.fold, g.path);
    }
    let out = cfg.resolve(&cfg.output_dir);
    for path in harness::emit_report(&report, &out, &[ReportFormat::Csv, ReportFormat::Json])? {
        println!("{}", path.display());
    }
    Ok(())
}

fn losses(input: &Path, out: &Path) -> Outcome {
    let log = harness::ingest_loss_log(input)?;
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    let curves = harness::normalize_and_combine_losses(&log);
    std::fs::write(out, harness::loss_curves_csv(&curves))
        .map_err(|e| Failure::config(format!("failed to write {}: {e}", out.display())))?;
    for c in &curves.curves {
        let notes = if c.notes.is_empty() { String::new() } else { format!(" ({})", c.notes.join("; ")) };
        println!("{}: {} epochs, strictly decreasing: {}{notes}", c.label(), c.values.len(), c.strictly_decreasing);
    }
    Ok(())
}

fn report(input: &Path, formats: &[ReportFormat], out: Option<&Path>) -> Outcome {
    let report = BenchmarkReport::load(input)?;
    for path in harness::emit_report(&report, out.unwrap_or(input), formats)? {
        println!("{}", path.display());
    }
    Ok(())
}
