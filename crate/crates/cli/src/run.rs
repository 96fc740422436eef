//! Fully resolved runs. Each one turns into a list of named artifacts in memory,
//! which is what both a fresh invocation and `--verify` need.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use xmodal_core::eval::{correspondence_score, CorrespondenceScore};
use xmodal_core::filter::filter_grouped;
use xmodal_core::records::{read_records, write_records};
use xmodal_core::sweep::{sweep_shift, write_sweep_csv, SweepConfig};
use xmodal_core::{
    generate_scenes, match_scene_with, run_pipeline, BatchThreshold, BoxId, MatchResult, MatcherConfig, PipelineConfig,
    Scene, ScoredBox, SimConfig,
};

/// One output file, named relative to the output directory.
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRun {
    pub sim: SimConfig,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRun {
    pub input: PathBuf,
    pub batch_size: usize,
    pub per_class: bool,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRun {
    pub input: PathBuf,
    pub matcher: MatcherConfig,
    pub use_plf: bool,
    pub batch_size: usize,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub input: PathBuf,
    pub pipeline: PipelineConfig,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub sweep: SweepConfig,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "config", rename_all = "kebab-case")]
pub enum Run {
    Simulate(SimulateRun),
    Filter(FilterRun),
    Match(MatchRun),
    Pipeline(PipelineRun),
    SweepShift(SweepRun),
}

/// Survivors of one scene after batch filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredScene {
    pub scene_id: u64,
    pub threshold: BatchThreshold,
    pub kept: Vec<ScoredBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMatch {
    pub scene_id: u64,
    #[serde(flatten)]
    pub result: MatchResult,
}

/// What `match` prints and stores next to its pairs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub scenes: usize,
    pub candidates: usize,
    pub kept: usize,
    pub score: CorrespondenceScore,
}

impl Run {
    pub fn name(&self) -> &'static str {
        match self {
            Run::Simulate(_) => "simulate",
            Run::Filter(_) => "filter",
            Run::Match(_) => "match",
            Run::Pipeline(_) => "pipeline",
            Run::SweepShift(_) => "sweep-shift",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Run::Simulate(r) => r.sim.seed,
            Run::SweepShift(r) => r.sweep.sim.seed,
            _ => 0,
        }
    }

    pub fn primary(&self) -> &str {
        match self {
            Run::Simulate(r) => &r.output,
            Run::Filter(r) => &r.output,
            Run::Match(r) => &r.output,
            Run::Pipeline(r) => &r.output,
            Run::SweepShift(r) => &r.output,
        }
    }

    pub fn input(&self) -> Option<&Path> {
        match self {
            Run::Filter(r) => Some(&r.input),
            Run::Match(r) => Some(&r.input),
            Run::Pipeline(r) => Some(&r.input),
            Run::Simulate(_) | Run::SweepShift(_) => None,
        }
    }

    /// The resolved parameters as stored in a manifest.
    pub fn config(&self) -> Result<serde_json::Value> {
        let tagged = serde_json::to_value(self)?;
        Ok(tagged["config"].clone())
    }

    pub fn from_manifest(subcommand: &str, config: &serde_json::Value) -> Result<Self> {
        let tagged = serde_json::json!({ "subcommand": subcommand, "config": config });
        serde_json::from_value(tagged)
            .with_context(|| format!("manifest config does not describe a `{subcommand}` run"))
    }

    pub fn execute(&self) -> Result<Vec<Artifact>> {
        match self {
            Run::Simulate(r) => simulate(r),
            Run::Filter(r) => filter(r),
            Run::Match(r) => match_pairs(r),
            Run::Pipeline(r) => pipeline(r),
            Run::SweepShift(r) => sweep(r),
        }
    }
}

fn records_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_records(&mut buf, items)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    Ok(buf)
}

/// `pairs.jsonl` → `pairs.<suffix>`.
fn sibling(primary: &str, suffix: &str) -> String {
    let stem = Path::new(primary).file_stem().and_then(|s| s.to_str()).unwrap_or(primary);
    format!("{stem}.{suffix}")
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_records(BufReader::new(file)).with_context(|| format!("reading scenes from {}", path.display()))
}

fn simulate(r: &SimulateRun) -> Result<Vec<Artifact>> {
    let scenes = generate_scenes(&r.sim)?;
    Ok(vec![Artifact { name: r.output.clone(), bytes: records_bytes(&scenes)? }])
}

fn filtered_pools(scenes: &[Scene], batch_size: usize, per_class: bool) -> Vec<(Vec<ScoredBox>, BatchThreshold)> {
    let pools: Vec<_> = scenes.iter().map(Scene::rgb_pool).collect();
    pools
        .chunks(batch_size.max(1))
        .flat_map(|batch| {
            let (kept, threshold) = filter_grouped(batch, per_class);
            kept.into_iter().map(move |k| (k, threshold))
        })
        .collect()
}

fn filter(r: &FilterRun) -> Result<Vec<Artifact>> {
    anyhow::ensure!(r.batch_size > 0, xmodal_core::Error::InvalidArgument("batch size must be at least 1".into()));
    let scenes = load_scenes(&r.input)?;
    let rows: Vec<FilteredScene> = scenes
        .iter()
        .zip(filtered_pools(&scenes, r.batch_size, r.per_class))
        .map(|(s, (kept, threshold))| FilteredScene { scene_id: s.scene_id, threshold, kept })
        .collect();
    Ok(vec![Artifact { name: r.output.clone(), bytes: records_bytes(&rows)? }])
}

fn match_pairs(r: &MatchRun) -> Result<Vec<Artifact>> {
    anyhow::ensure!(r.batch_size > 0, xmodal_core::Error::InvalidArgument("batch size must be at least 1".into()));
    let scenes = load_scenes(&r.input)?;
    let pools: Vec<Vec<ScoredBox>> = if r.use_plf {
        filtered_pools(&scenes, r.batch_size, false).into_iter().map(|(k, _)| k).collect()
    } else {
        scenes.iter().map(Scene::rgb_pool).collect()
    };
    let mut rows = Vec::with_capacity(scenes.len());
    let mut scores = Vec::with_capacity(scenes.len());
    for (scene, pool) in scenes.iter().zip(&pools) {
        let ir: Vec<(BoxId, _)> = scene.ir_boxes();
        let result = match_scene_with(&ir, pool, &r.matcher)?;
        scores.push(correspondence_score(&result, scene));
        rows.push(SceneMatch { scene_id: scene.scene_id, result });
    }
    let summary = MatchSummary {
        scenes: scenes.len(),
        candidates: scenes.iter().map(|s| s.rgb_obs.len()).sum(),
        kept: pools.iter().map(Vec::len).sum(),
        score: CorrespondenceScore::combine(&scores),
    };
    Ok(vec![
        Artifact { name: r.output.clone(), bytes: records_bytes(&rows)? },
        Artifact { name: sibling(&r.output, "score.json"), bytes: json_bytes(&summary)? },
    ])
}

fn pipeline(r: &PipelineRun) -> Result<Vec<Artifact>> {
    let scenes = load_scenes(&r.input)?;
    let report = run_pipeline(&scenes, &r.pipeline)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    Ok(vec![
        Artifact { name: r.output.clone(), bytes: json_bytes(&report)? },
        Artifact { name: sibling(&r.output, "csv"), bytes: csv },
    ])
}

fn sweep(r: &SweepRun) -> Result<Vec<Artifact>> {
    let rows = sweep_shift(&r.sweep)?;
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows)?;
    Ok(vec![Artifact { name: r.output.clone(), bytes: csv }])
}
