//! Command-line front end: corpus synthesis, pair scoring, viewpoint
//! expansion, and the numeric audits.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 empty corpus,
//! 3 I/O failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spatialgen_core::attention::{
    gradient_check, init_plus_from_base, named_configs, param_overhead, AttentionParams,
    TokenMatrix,
};
use spatialgen_core::io;
use spatialgen_core::pipeline::{run_synthesis, PipelineConfig, PipelineError};
use spatialgen_core::rng::{mix, SeededRng};
use spatialgen_core::stages::{plan, Stage};
use spatialgen_core::synthetic::{generate_manifest, SyntheticSpec};
use spatialgen_core::view::{
    expand_viewpoints, score_pairs, AdmissionBand, DistanceValidator, FileBackend, Frame,
    PerceptualBackend, ProxyBackend, ViewPair,
};

#[derive(Parser)]
#[command(
    name = "spatialgen",
    version,
    about = "Synthesizes multi-turn spatial reasoning corpora and audits the attention kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run corpus synthesis over a manifest.
    Synth(SynthArgs),
    /// Score all frame pairs against the admission band.
    Pairs(PairsArgs),
    /// Expand an admitted pair to a 4/8-view set via the stub validator.
    Expand(ExpandArgs),
    /// Check analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Report the dual-channel parameter overhead per named encoder shape.
    ParamAudit,
    /// Print the per-stage freeze plans.
    PlanStages,
    /// Generate a synthetic demo dataset and manifest.
    Demo(DemoArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Manifest file; scene references resolve relative to it.
    #[arg(long)]
    manifest: PathBuf,
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output corpus path (one record per line).
    #[arg(long)]
    out: PathBuf,
    /// Optional path for the summary report (also printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Override the config worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PairsArgs {
    /// Directory of PNG frames, scored with the luminance proxy.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Precomputed `(frame_a, frame_b, score)` file; frame ids come from
    /// the file when no frames directory is given.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = AdmissionBand::DEFAULT_LOW)]
    band_low: f64,
    #[arg(long, default_value_t = AdmissionBand::DEFAULT_HIGH)]
    band_high: f64,
}

#[derive(Args)]
struct ExpandArgs {
    /// Directory of PNG frames for the proxy backend.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Precomputed score file used instead of the proxy.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// First anchor frame id.
    #[arg(long)]
    anchor_a: String,
    /// Second anchor frame id.
    #[arg(long)]
    anchor_b: String,
    /// Interpolated candidate frame ids (0, 2 or 6 of them).
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<String>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fail the run when any group exceeds this relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct DemoArgs {
    /// Directory to generate into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Every k-th scene becomes a multi-view scene (0 disables).
    #[arg(long, default_value_t = 5)]
    multi_view_every: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/usage text
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Pairs(args) => cmd_pairs(args),
        Command::Expand(args) => cmd_expand(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::ParamAudit => cmd_param_audit(),
        Command::PlanStages => cmd_plan_stages(),
        Command::Demo(args) => cmd_demo(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

/// Maps failures onto the documented exit codes.
fn classify(error: &CliError) -> u8 {
    match error {
        CliError::Pipeline(PipelineError::EmptyCorpus(_)) => 2,
        CliError::Pipeline(
            PipelineError::Read { .. } | PipelineError::WriteOut { .. } | PipelineError::Io(_),
        ) => 3,
        CliError::Pipeline(_) => 1,
        CliError::Io(_) => 3,
        CliError::Usage(_) => 1,
        CliError::CheckFailed(_) => 1,
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Pipeline(PipelineError::Io(e))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode, CliError> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::from_path(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let report = match run_synthesis(&args.manifest, &config, &args.out) {
        Ok(report) => report,
        Err(PipelineError::EmptyCorpus(report)) => {
            print!("{report}");
            return Err(CliError::Pipeline(PipelineError::EmptyCorpus(report)));
        }
        Err(e) => return Err(e.into()),
    };
    print!("{report}");
    println!("corpus written to {}", args.out.display());
    if let Some(report_path) = args.report {
        let rendered = format!("{report}");
        std::fs::write(&report_path, rendered)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", report_path.display())))?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Builds frames and a backend from the --frames / --scores flags.
fn load_frames_and_backend(
    frames_dir: Option<&Path>,
    scores: Option<&Path>,
) -> Result<(Vec<Frame>, Box<dyn PerceptualBackend>), CliError> {
    let backend: Box<dyn PerceptualBackend> = match scores {
        Some(path) => Box::new(FileBackend::new(io::read_pair_scores(path)?)),
        None => Box::new(ProxyBackend),
    };
    let frames = match frames_dir {
        Some(dir) => {
            let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", dir.display())))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            names.sort();
            let mut frames = Vec::with_capacity(names.len());
            for path in names {
                let id = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| CliError::Usage(format!("bad frame name {path:?}")))?
                    .to_string();
                if scores.is_some() {
                    frames.push(Frame::id_only(id));
                } else {
                    frames.push(Frame::with_image(id, io::read_luma(&path)?));
                }
            }
            frames
        }
        None => {
            let Some(path) = scores else {
                return Err(CliError::Usage(
                    "provide --frames with PNG images, --scores with precomputed distances, or both"
                        .into(),
                ));
            };
            FileBackend::new(io::read_pair_scores(path)?)
                .frame_ids()
                .into_iter()
                .map(Frame::id_only)
                .collect()
        }
    };
    Ok((frames, backend))
}

fn cmd_pairs(args: PairsArgs) -> Result<ExitCode, CliError> {
    let band = AdmissionBand::new(args.band_low, args.band_high)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (frames, backend) =
        load_frames_and_backend(args.frames.as_deref(), args.scores.as_deref())?;
    let pairs =
        score_pairs(&frames, backend.as_ref(), band).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("frame_a\tframe_b\tdistance\tadmitted");
    let mut admitted = 0;
    for pair in &pairs {
        if pair.admitted {
            admitted += 1;
        }
        println!(
            "{}\t{}\t{:.6}\t{}",
            pair.ref_a,
            pair.ref_b,
            pair.distance,
            if pair.admitted { "yes" } else { "no" }
        );
    }
    println!(
        "# {} of {} pairs admitted by band [{}, {}]",
        admitted,
        pairs.len(),
        band.low,
        band.high
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_expand(args: ExpandArgs) -> Result<ExitCode, CliError> {
    let (frames, backend) =
        load_frames_and_backend(args.frames.as_deref(), args.scores.as_deref())?;
    let find = |id: &str| frames.iter().find(|f| f.id == id).cloned();
    let (Some(a), Some(b)) = (find(&args.anchor_a), find(&args.anchor_b)) else {
        return Err(CliError::Usage(format!(
            "anchors {} / {} not found among the loaded frames",
            args.anchor_a, args.anchor_b
        )));
    };
    let distance =
        backend.distance(&a, &b).map_err(|e| CliError::Usage(e.to_string()))?;
    let band = AdmissionBand::default();
    let pair = ViewPair {
        ref_a: args.anchor_a.clone(),
        ref_b: args.anchor_b.clone(),
        distance,
        admitted: band.admits(distance),
    };
    let validator = DistanceValidator::new(backend.as_ref(), frames.clone());
    let set = expand_viewpoints(&pair, &args.candidates, &[], &validator)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    println!("anchor pair: {} {} (distance {:.6})", pair.ref_a, pair.ref_b, pair.distance);
    for (frame, vote) in &set.validation_votes {
        println!("vote {frame}: {}", if *vote { "valid" } else { "invalid" });
    }
    println!("view set ({}): {}", set.frames.len(), set.frames.join(" "));
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<ExitCode, CliError> {
    if args.instances == 0 {
        return Err(CliError::Usage("need at least one instance".into()));
    }
    println!(
        "gradient check: {} instances, central differences, epsilon {:.1e}",
        args.instances, args.epsilon
    );
    let shapes = [(2usize, 4usize, 2usize), (3, 6, 3), (4, 8, 2), (3, 8, 4)];
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for i in 0..args.instances {
        let (n, d, h) = shapes[i % shapes.len()];
        let mut rng = SeededRng::new(mix(args.seed, i as u64));
        let x = TokenMatrix::random(n, d, &mut rng);
        let base = AttentionParams::random(d, h, 1.0, &mut rng)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let mut dc = init_plus_from_base(base);
        for g in 0..AttentionParams::GROUP_NAMES.len() {
            for v in dc.plus.group_mut(g).iter_mut() {
                *v += rng.next_range_f64(-0.5, 0.5);
            }
        }
        for a in dc.gate.iter_mut() {
            *a = rng.next_range_f64(-1.5, 1.5);
        }
        let upstream = TokenMatrix::random(n, d, &mut rng);
        let report = gradient_check(&x, &dc, &upstream, args.epsilon)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if worst.is_empty() {
            worst = report;
        } else {
            for (slot, (_, err)) in worst.iter_mut().zip(report) {
                slot.1 = slot.1.max(err);
            }
        }
    }
    println!("max relative error per parameter group:");
    let mut overall: f64 = 0.0;
    for (name, err) in &worst {
        println!("  {name:<4} {err:.3e}");
        overall = overall.max(*err);
    }
    println!("overall max relative error: {overall:.3e} (tolerance {:.1e})", args.tolerance);
    if overall <= args.tolerance {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Err(CliError::CheckFailed(format!(
            "gradient error {overall:.3e} exceeds tolerance {:.1e}",
            args.tolerance
        )))
    }
}

fn cmd_param_audit() -> Result<ExitCode, CliError> {
    println!("dual-channel parameter overhead (added / base):");
    println!("{:<20} {:>14} {:>14} {:>9}", "config", "base params", "added params", "overhead");
    for cfg in named_configs() {
        let fraction = param_overhead(&cfg);
        println!(
            "{:<20} {:>14.0} {:>14.0} {:>8.2}%",
            cfg.name,
            cfg.base_params(),
            cfg.added_params(),
            fraction * 100.0
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan_stages() -> Result<ExitCode, CliError> {
    println!("{:<6} {:<35} frozen", "stage", "trainable");
    for stage in Stage::ALL {
        let p = plan(stage);
        let join = |set: &BTreeSet<spatialgen_core::stages::Component>| {
            set.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        };
        println!("{:<6} {:<35} {}", p.stage.number(), join(&p.trainable), join(&p.frozen()));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_demo(args: DemoArgs) -> Result<ExitCode, CliError> {
    let spec = SyntheticSpec {
        scenes: args.scenes,
        seed: args.seed,
        multi_view_every: args.multi_view_every,
        ..SyntheticSpec::default()
    };
    let manifest = generate_manifest(&args.out, &spec)?;
    println!("wrote {} scenes under {}", args.scenes, args.out.display());
    println!("manifest: {}", manifest.display());
    println!(
        "next: spatialgen synth --manifest {} --out {}",
        manifest.display(),
        args.out.join("corpus.jsonl").display()
    );
    Ok(ExitCode::SUCCESS)
}
