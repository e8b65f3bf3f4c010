//! The seeded evaluation corpus: one failed job plus two successful runs of
//! the same workload per seed, and the harness that scores the pipeline on
//! it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{self, BaselineMethod, EventScores};
use super::{generate, generate_success, FaultInjection, FaultType, GroundTruth, SynthError, SyntheticJob, WorkloadSpec};
use crate::library::FaultLibrary;
use crate::model::JobBundle;
use crate::pipeline::{Diagnosis, Pipeline, PipelineError};
use crate::temporal::Stage;

/// Fault type by `seed % 10`.
pub const FAULT_CYCLE: [FaultType; 10] = [
    FaultType::Network,
    FaultType::Accelerator,
    FaultType::NodeCrash,
    FaultType::Storage,
    FaultType::Network,
    FaultType::Accelerator,
    FaultType::Hang,
    FaultType::Config,
    FaultType::Network,
    FaultType::Hang,
];

pub const HISTORY_RUNS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub seed: u64,
    pub spec: WorkloadSpec,
    pub injection: FaultInjection,
    pub history_seeds: Vec<u64>,
}

impl CaseSpec {
    /// 16 to 64 nodes, 55 to 65 iterations, onset in 25..=50.
    pub fn for_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let fault = FAULT_CYCLE[(seed % 10) as usize];
        let spec = WorkloadSpec {
            node_count: rng.gen_range(16..=64),
            iterations: rng.gen_range(55..=65),
            seed,
            ..WorkloadSpec::default()
        };
        let mut injection = FaultInjection::new(fault, rng.gen_range(25..=50));
        injection.stage = match fault {
            FaultType::Storage if rng.gen_bool(0.4) => Some(Stage::ModelInit),
            FaultType::Config if rng.gen_bool(0.5) => Some(Stage::ModelInit),
            _ => None,
        };
        let history_seeds = (1..=HISTORY_RUNS as u64).map(|k| seed.wrapping_mul(1000).wrapping_add(k) + 1_000_000).collect();
        CaseSpec { seed, spec, injection, history_seeds }
    }

    pub fn case_name(&self) -> String {
        format!("case_{:03}", self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct CaseJobs {
    pub case: CaseSpec,
    pub failed: SyntheticJob,
    pub truth: GroundTruth,
    pub history: Vec<SyntheticJob>,
}

pub fn generate_case(case: &CaseSpec) -> Result<CaseJobs, SynthError> {
    let name = case.case_name();
    let (failed, truth) = generate(&case.spec, &case.injection, &format!("{name}_failed"))?;
    let history = case
        .history_seeds
        .iter()
        .enumerate()
        .map(|(k, &s)| generate_success(&WorkloadSpec { seed: s, ..case.spec.clone() }, &format!("{name}_history_{k}")))
        .collect::<Result<_, _>>()?;
    Ok(CaseJobs { case: case.clone(), failed, truth, history })
}

/// Writes `failed/`, `history_<k>/`, `truth.json` and `case.toml` under `dir`.
pub fn write_case(jobs: &CaseJobs, dir: &Path) -> Result<(), SynthError> {
    jobs.failed.write(&dir.join("failed"))?;
    for (k, h) in jobs.history.iter().enumerate() {
        h.write(&dir.join(format!("history_{k}")))?;
    }
    jobs.truth.save(&dir.join("truth.json"))?;
    let path = dir.join("case.toml");
    let text = toml::to_string(&jobs.case).expect("case serializes");
    std::fs::write(&path, text).map_err(SynthError::io(&path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub seed: u64,
    pub fault_type: FaultType,
    pub node_count: usize,
    pub records: usize,
    pub events: EventScores,
    /// Rank of the faulty node by the pipeline and by the two baselines.
    pub rank: Option<usize>,
    pub error_time_rank: Option<usize>,
    pub error_count_rank: Option<usize>,
    pub first_flagged: Option<usize>,
    pub faulty_iteration: Option<usize>,
    pub removed_fraction: f64,
    /// Injected signatures the cross-job filter dropped.
    pub truth_removed: usize,
    pub level_only: EventScores,
    pub frequency_only: EventScores,
    pub failing_stage: Option<Stage>,
    pub stage_correct: bool,
    pub library_matches: usize,
    /// Flags raised on the case's successful runs.
    pub healthy_flags: usize,
    pub seconds: f64,
}

/// A case ready for diagnosis, generated in memory or read back from disk.
#[derive(Clone, Debug)]
pub struct CaseInput {
    pub case: CaseSpec,
    pub failed: JobBundle,
    pub history: Vec<JobBundle>,
    pub truth: GroundTruth,
}

impl CaseJobs {
    pub fn input(&self) -> CaseInput {
        CaseInput {
            case: self.case.clone(),
            failed: self.failed.to_bundle(),
            history: self.history.iter().map(SyntheticJob::to_bundle).collect(),
            truth: self.truth.clone(),
        }
    }
}

/// Reads a directory written by [`write_case`].
pub fn read_case(dir: &Path, pipeline: &Pipeline) -> Result<CaseInput, CorpusError> {
    let case: CaseSpec = super::load_toml(&dir.join("case.toml"))?;
    let truth = GroundTruth::load(&dir.join("truth.json"))?;
    let failed = pipeline.load(&dir.join("failed"))?;
    let history = (0..case.history_seeds.len())
        .map(|k| pipeline.load(&dir.join(format!("history_{k}"))))
        .collect::<Result<_, _>>()?;
    Ok(CaseInput { case, failed, history, truth })
}

/// Case directories (those holding a `case.toml`) directly under `root`,
/// sorted by name.
pub fn case_dirs(root: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let io = |e| CorpusError::Synth(SynthError::io(root)(e));
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.join("case.toml").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Flagged iterations when each successful run is diagnosed against the
/// others. Any flag here is a false positive.
pub fn healthy_flags(pipeline: &Pipeline, history: &[JobBundle]) -> Result<usize, PipelineError> {
    let mut flags = 0;
    for (i, run) in history.iter().enumerate() {
        let others: Vec<JobBundle> =
            history.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, h)| h.clone()).collect();
        flags += pipeline.diagnose(run, &others, None)?.temporal.flagged_iterations.len();
    }
    Ok(flags)
}

/// Diagnoses one case and scores it against its ground truth.
pub fn evaluate_case(
    pipeline: &Pipeline,
    input: &CaseInput,
    library: Option<&FaultLibrary>,
) -> Result<(CaseResult, Diagnosis), PipelineError> {
    let start = Instant::now();
    let d = pipeline.diagnose(&input.failed, &input.history, library)?;
    let seconds = start.elapsed().as_secs_f64();
    let truth = &input.truth;
    let kept: BTreeSet<&str> = d.filtered.records().map(|r| d.filtered.signature(r.event_id)).collect();
    let result = CaseResult {
        seed: input.case.seed,
        fault_type: input.case.injection.fault_type,
        node_count: input.case.spec.node_count,
        records: d.parsed.record_count(),
        events: eval::evaluate_events(&d.report, truth),
        rank: eval::faulty_rank(&d.report.ranked_nodes(), truth),
        error_time_rank: eval::faulty_rank(&eval::baseline_rank(&d.parsed, BaselineMethod::ErrorTime), truth),
        error_count_rank: eval::faulty_rank(&eval::baseline_rank(&d.parsed, BaselineMethod::ErrorCount), truth),
        first_flagged: d.temporal.first_flagged(),
        faulty_iteration: truth.faulty_iteration,
        removed_fraction: d.filter_stats.removed_fraction(),
        truth_removed: truth.failure_indicating_signatures.iter().filter(|s| !kept.contains(s.as_str())).count(),
        level_only: eval::score_sets(eval::level_only(&d.parsed), &truth.failure_indicating_signatures),
        frequency_only: eval::score_sets(eval::frequency_only(&d.parsed), &truth.failure_indicating_signatures),
        failing_stage: d.report.failing_stage.as_ref().map(|f| f.stage),
        stage_correct: d.report.failing_stage.as_ref().map(|f| f.stage) == truth.failing_stage,
        library_matches: d.report.library_matches.len(),
        healthy_flags: healthy_flags(pipeline, &input.history)?,
        seconds,
    };
    Ok((result, d))
}

/// Generates and evaluates the cases for `seeds`.
pub fn run_corpus(
    pipeline: &Pipeline,
    seeds: impl IntoIterator<Item = u64>,
    library: Option<&FaultLibrary>,
) -> Result<Vec<CaseResult>, CorpusError> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    seeds
        .par_iter()
        .map(|&seed| {
            let jobs = generate_case(&CaseSpec::for_seed(seed))?;
            Ok(evaluate_case(pipeline, &jobs.input(), library)?.0)
        })
        .collect()
}

/// Evaluates every case directory under `root`.
pub fn run_corpus_dir(
    pipeline: &Pipeline,
    root: &Path,
    library: Option<&FaultLibrary>,
) -> Result<Vec<CaseResult>, CorpusError> {
    case_dirs(root)?
        .par_iter()
        .map(|dir| {
            let input = read_case(dir, pipeline)?;
            Ok(evaluate_case(pipeline, &input, library)?.0)
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const CSV_HEADER: &str = "seed,fault,nodes,records,precision,recall,f1,rank,error_time_rank,error_count_rank,\
first_flagged,faulty_iteration,removed_fraction,truth_removed,level_precision,level_recall,freq_precision,\
freq_recall,failing_stage,stage_correct,library_matches,healthy_flags,seconds";

impl CaseResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{},{},{},{},{},{:.4},{},{:.4},{:.4},{:.4},{:.4},{},{},{},{},{:.3}",
            self.seed,
            self.fault_type,
            self.node_count,
            self.records,
            self.events.precision,
            self.events.recall,
            self.events.f1,
            opt(self.rank),
            opt(self.error_time_rank),
            opt(self.error_count_rank),
            opt(self.first_flagged),
            opt(self.faulty_iteration),
            self.removed_fraction,
            self.truth_removed,
            self.level_only.precision,
            self.level_only.recall,
            self.frequency_only.precision,
            self.frequency_only.recall,
            opt(self.failing_stage),
            self.stage_correct,
            self.library_matches,
            self.healthy_flags,
            self.seconds,
        )
    }
}

/// Corpus-level metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub cases: usize,
    pub events: EventScores,
    pub level_only: EventScores,
    pub frequency_only: EventScores,
    pub hardware_cases: usize,
    pub top1: f64,
    pub top5: f64,
    pub top8: f64,
    pub error_time_top1: f64,
    pub error_count_top1: f64,
    pub temporal_cases: usize,
    /// Share of HANG/NETWORK cases whose first flag is within one
    /// iteration of the onset.
    pub onset_within_one: f64,
    pub min_removed_fraction: f64,
    pub truth_removed: usize,
    pub stage_accuracy: f64,
    pub healthy_flags: usize,
}

fn within(rank: Option<usize>, k: usize) -> bool {
    rank.is_some_and(|r| r <= k)
}

fn share(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub fn summarize(results: &[CaseResult]) -> CorpusSummary {
    let all = |f: fn(&CaseResult) -> EventScores| eval::macro_average(&results.iter().map(f).collect::<Vec<_>>());
    let hw: Vec<&CaseResult> = results.iter().filter(|r| r.fault_type.is_hardware()).collect();
    let top = |f: fn(&CaseResult) -> Option<usize>, k| share(hw.iter().filter(|r| within(f(r), k)).count(), hw.len());
    let temporal: Vec<&CaseResult> = results
        .iter()
        .filter(|r| matches!(r.fault_type, FaultType::Hang | FaultType::Network) && r.faulty_iteration.is_some_and(|o| o >= 25))
        .collect();
    let onset_hits = temporal
        .iter()
        .filter(|r| match (r.first_flagged, r.faulty_iteration) {
            (Some(f), Some(o)) => f.abs_diff(o) <= 1,
            _ => false,
        })
        .count();
    CorpusSummary {
        cases: results.len(),
        events: all(|r| r.events),
        level_only: all(|r| r.level_only),
        frequency_only: all(|r| r.frequency_only),
        hardware_cases: hw.len(),
        top1: top(|r| r.rank, 1),
        top5: top(|r| r.rank, 5),
        top8: top(|r| r.rank, 8),
        error_time_top1: top(|r| r.error_time_rank, 1),
        error_count_top1: top(|r| r.error_count_rank, 1),
        temporal_cases: temporal.len(),
        onset_within_one: share(onset_hits, temporal.len()),
        min_removed_fraction: results.iter().map(|r| r.removed_fraction).fold(f64::INFINITY, f64::min),
        truth_removed: results.iter().map(|r| r.truth_removed).sum(),
        stage_accuracy: share(results.iter().filter(|r| r.stage_correct).count(), results.len()),
        healthy_flags: results.iter().map(|r| r.healthy_flags).sum(),
    }
}

impl CorpusSummary {
    /// `metric,value` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let rows: [(&str, f64); 20] = [
            ("cases", self.cases as f64),
            ("precision", self.events.precision),
            ("recall", self.events.recall),
            ("f1", self.events.f1),
            ("level_only_precision", self.level_only.precision),
            ("level_only_f1", self.level_only.f1),
            ("frequency_only_recall", self.frequency_only.recall),
            ("frequency_only_f1", self.frequency_only.f1),
            ("hardware_cases", self.hardware_cases as f64),
            ("top1", self.top1),
            ("top5", self.top5),
            ("top8", self.top8),
            ("error_time_top1", self.error_time_top1),
            ("error_count_top1", self.error_count_top1),
            ("temporal_cases", self.temporal_cases as f64),
            ("onset_within_one", self.onset_within_one),
            ("min_removed_fraction", self.min_removed_fraction),
            ("truth_removed", self.truth_removed as f64),
            ("stage_accuracy", self.stage_accuracy),
            ("healthy_flags", self.healthy_flags as f64),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v:.4}");
        }
        s
    }
}
