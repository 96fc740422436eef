mod manifest;
mod run;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use manifest::{digest, digest_file, manifest_path, read_manifest, write_manifest, RunManifest};
use run::{FilterRun, MatchRun, MatchSummary, PipelineRun, Run, SimulateRun, SweepRun};
use xmodal_core::sweep::SweepConfig;
use xmodal_core::{Ablation, MatchStrategy, MatcherConfig, PipelineConfig, SimConfig, StageConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "xmodal", version, about = "Cross-modality pseudo-label assignment experiments")]
#[command(args_conflicts_with_subcommands = true, arg_required_else_help = true)]
struct Cli {
    /// Re-run the command recorded in a manifest and compare artifact digests.
    #[arg(long, value_name = "MANIFEST")]
    verify: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic misaligned IR/RGB scenes.
    Simulate(SimulateArgs),
    /// Batch-filter the RGB pseudo-labels of each scene.
    Filter(FilterArgs),
    /// Filter, then pair IR objects with RGB pseudo-labels.
    Match(MatchArgs),
    /// Run the three-stage teacher-student schedule.
    Pipeline(PipelineArgs),
    /// Sweep a uniform RGB offset over a grid.
    SweepShift(SweepArgs),
}

#[derive(Debug, Args)]
struct OutputArg {
    /// Output file; defaults to a fixed name inside $XMODAL_OUT_DIR (or the current directory).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 8)]
    boxes: usize,
    #[arg(long, default_value_t = 15.0)]
    shift_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    spurious: f64,
    #[arg(long, default_value_t = 1.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0.05)]
    confidence_noise: f64,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 16.0)]
    min_size: f64,
    #[arg(long, default_value_t = 96.0)]
    max_size: f64,
    /// Same offset for every scene, as `dx,dy`.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    offset: Option<[f64; 2]>,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Scene records.
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// One threshold per predicted class.
    #[arg(long)]
    per_class: bool,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct MatchArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    no_plf: bool,
    #[arg(long)]
    iou_match_only: bool,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 20)]
    k1: u32,
    #[arg(long, default_value_t = 10)]
    k2: u32,
    #[arg(long, default_value_t = 15)]
    k3: u32,
    #[arg(long, default_value_t = 20)]
    k4: u32,
    #[arg(long, default_value_t = 0.9999)]
    ema_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    steps_per_epoch: u32,
    /// Step size for the offset estimates.
    #[arg(long, default_value_t = 0.25)]
    lr_box: f64,
    /// Step size for the confidence-noise parameters.
    #[arg(long, default_value_t = 0.05)]
    lr_cls: f64,
    #[arg(long)]
    skip_stage1: bool,
    #[arg(long)]
    skip_stage3: bool,
    #[arg(long)]
    no_plf: bool,
    #[arg(long)]
    no_sdlm: bool,
    #[arg(long)]
    no_dlc: bool,
    #[arg(long)]
    no_dynamic_update: bool,
    #[arg(long)]
    dlc_improve_only: bool,
    #[arg(long)]
    iou_match_only: bool,
    #[arg(long)]
    ema_reset: bool,
    #[arg(long)]
    per_class_plf: bool,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, default_value_t = -15.0, allow_hyphen_values = true)]
    min: f64,
    #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
    max: f64,
    #[arg(long, default_value_t = 3.0)]
    step: f64,
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    #[arg(long, default_value_t = 8)]
    boxes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    no_plf: bool,
    #[command(flatten)]
    out: OutputArg,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `dx,dy`, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok([num(a)?, num(b)?])
}

/// A flag combination that parses but makes no sense.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn resolve_output(out: &OutputArg, default_name: &str) -> PathBuf {
    out.output.clone().unwrap_or_else(|| {
        let dir = std::env::var_os("XMODAL_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        dir.join(default_name)
    })
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("input {} not found", path.display()))
}

fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| UsageError(format!("output path {} has no file name", path.display())).into())
}

/// Turns parsed flags into a resolved run plus the directory its artifacts go to.
fn resolve(command: Command) -> Result<(Run, PathBuf)> {
    let (run, out) = match command {
        Command::Simulate(a) => {
            let out = resolve_output(&a.out, "scenes.jsonl");
            let sim = SimConfig {
                count: a.scenes,
                boxes_per_scene: a.boxes,
                shift_max: a.shift_max,
                jitter: a.jitter,
                dropout_rate: a.dropout,
                spurious_rate: a.spurious,
                class_count: a.classes,
                confidence_noise: a.confidence_noise,
                min_size: a.min_size,
                max_size: a.max_size,
                seed: a.seed,
                fixed_offset: a.offset,
                ..SimConfig::default()
            };
            (Run::Simulate(SimulateRun { sim, output: file_name(&out)? }), out)
        }
        Command::Filter(a) => {
            let out = resolve_output(&a.out, "filtered.jsonl");
            let run = FilterRun {
                input: absolute(&a.input)?,
                batch_size: a.batch_size,
                per_class: a.per_class,
                output: file_name(&out)?,
            };
            (Run::Filter(run), out)
        }
        Command::Match(a) => {
            let out = resolve_output(&a.out, "pairs.jsonl");
            let strategy = if a.iou_match_only { MatchStrategy::IouOnly } else { MatchStrategy::ShapeAware };
            let run = MatchRun {
                input: absolute(&a.input)?,
                matcher: MatcherConfig { beta: a.beta, strategy },
                use_plf: !a.no_plf,
                batch_size: a.batch_size,
                output: file_name(&out)?,
            };
            (Run::Match(run), out)
        }
        Command::Pipeline(a) => {
            let out = resolve_output(&a.out, "report.json");
            let pipeline = PipelineConfig {
                stages: StageConfig { k1: a.k1, k2: a.k2, k3: a.k3, k4: a.k4 },
                ema_decay: a.ema_decay,
                beta: a.beta,
                batch_size: a.batch_size,
                steps_per_epoch: a.steps_per_epoch,
                lr_box: a.lr_box,
                lr_cls: a.lr_cls,
                ablation: Ablation {
                    skip_stage1: a.skip_stage1,
                    skip_stage3: a.skip_stage3,
                    no_plf: a.no_plf,
                    no_sdlm: a.no_sdlm,
                    no_dlc: a.no_dlc,
                    no_dynamic_update: a.no_dynamic_update,
                    dlc_improve_only: a.dlc_improve_only,
                    iou_match_only: a.iou_match_only,
                    ema_reset: a.ema_reset,
                    per_class_plf: a.per_class_plf,
                },
                ..PipelineConfig::default()
            };
            pipeline.validate()?;
            (Run::Pipeline(PipelineRun { input: absolute(&a.input)?, pipeline, output: file_name(&out)? }), out)
        }
        Command::SweepShift(a) => {
            let out = resolve_output(&a.out, "sweep.csv");
            let sweep = SweepConfig {
                min: a.min,
                max: a.max,
                step: a.step,
                sim: SimConfig { count: a.scenes, boxes_per_scene: a.boxes, seed: a.seed, ..SimConfig::default() },
                matcher: MatcherConfig { beta: a.beta, ..MatcherConfig::default() },
                use_plf: !a.no_plf,
                ..SweepConfig::default()
            };
            xmodal_core::sweep::grid(sweep.min, sweep.max, sweep.step)?;
            (Run::SweepShift(SweepRun { sweep, output: file_name(&out)? }), out)
        }
    };
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((run, dir))
}

fn input_digests(run: &Run) -> Result<BTreeMap<String, String>> {
    run.input().map(|p| Ok((p.display().to_string(), digest_file(p)?))).into_iter().collect()
}

fn execute(command: Command) -> Result<()> {
    let (run, dir) = resolve(command)?;
    let inputs = input_digests(&run)?;
    let artifacts = run.execute()?;
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut digests = BTreeMap::new();
    for a in &artifacts {
        let path = dir.join(&a.name);
        fs::write(&path, &a.bytes).with_context(|| format!("writing {}", path.display()))?;
        digests.insert(a.name.clone(), digest(&a.bytes));
        eprintln!("wrote {}", path.display());
    }
    if let Run::Match(m) = &run {
        let stats = artifacts.iter().find(|a| a.name != m.output).expect("match writes a summary");
        let summary: MatchSummary = serde_json::from_slice(&stats.bytes)?;
        println!("{}", serde_json::to_string(&summary)?);
    }
    if let Run::Pipeline(_) = &run {
        let report: xmodal_core::PipelineReport = serde_json::from_slice(&artifacts[0].bytes)?;
        let mut summary = serde_json::to_value(&report.summary)?;
        if let Some(fields) = summary.as_object_mut() {
            fields.remove("student");
            fields.remove("teacher");
        }
        println!("{summary}");
    }
    let manifest = RunManifest {
        subcommand: run.name().to_string(),
        config: run.config()?,
        seed: run.seed(),
        inputs,
        artifacts: digests,
    };
    let path = manifest_path(&dir.join(run.primary()));
    write_manifest(&path, &manifest)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// A rerun whose artifacts differ from the recorded ones.
#[derive(Debug)]
struct VerifyMismatch(Vec<String>);

impl std::fmt::Display for VerifyMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "digest mismatch: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerifyMismatch {}

fn verify(path: &Path) -> Result<()> {
    let manifest = read_manifest(path)?;
    let run = Run::from_manifest(&manifest.subcommand, &manifest.config)?;
    let mut mismatched = Vec::new();
    for (input, expected) in &manifest.inputs {
        if digest_file(Path::new(input))? != *expected {
            mismatched.push(format!("input {input}"));
        }
    }
    if !mismatched.is_empty() {
        return Err(VerifyMismatch(mismatched).into());
    }
    let produced: BTreeMap<String, String> = run.execute()?.into_iter().map(|a| (a.name, digest(&a.bytes))).collect();
    for name in manifest.artifacts.keys().chain(produced.keys()) {
        let ok = manifest.artifacts.get(name) == produced.get(name);
        if !ok && !mismatched.contains(name) {
            mismatched.push(name.clone());
        }
    }
    for (name, d) in &produced {
        let status = if mismatched.contains(name) { "MISMATCH" } else { "ok" };
        println!("{status} {name} {d}");
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(VerifyMismatch(mismatched).into())
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<xmodal_core::Error>() {
            return match e {
                xmodal_core::Error::InvalidArgument(_) | xmodal_core::Error::OutOfRange { .. } => EXIT_USAGE,
                xmodal_core::Error::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match (cli.verify, cli.command) {
        (Some(path), None) => verify(&path),
        (None, Some(command)) => execute(command),
        _ => Err(UsageError("give either a subcommand or --verify <manifest>".into()).into()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
