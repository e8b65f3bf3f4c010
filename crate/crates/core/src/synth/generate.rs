use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::vocab::{self, Msg};
use super::{FaultInjection, FaultType, GroundTruth, SynthError, WorkloadSpec};
use crate::drain::{preprocess, Masks};
use crate::model::{parse_lines, IngestOptions, JobBundle, Level, Timestamp};
use crate::temporal::Stage;

/// 2024-03-01T00:00:00Z
const BASE_MS: i64 = 1_709_251_200_000;

#[derive(Clone, Debug)]
struct Entry {
    msg: Msg,
    injected: bool,
}

#[derive(Clone, Debug)]
struct Block {
    stage: Stage,
    iteration: Option<usize>,
    start_ms: i64,
    duration_ms: i64,
    entries: Vec<Entry>,
}

impl Block {
    fn new(stage: Stage, iteration: Option<usize>, start_ms: i64, duration_ms: i64, msgs: Vec<Msg>) -> Self {
        let entries = msgs.into_iter().map(|msg| Entry { msg, injected: false }).collect();
        Block { stage, iteration, start_ms, duration_ms, entries }
    }
}

/// One node's log as a list of stage blocks.
#[derive(Clone, Debug)]
struct NodeLog {
    blocks: Vec<Block>,
}

impl NodeLog {
    fn block(&self, stage: Stage, iteration: Option<usize>) -> usize {
        self.blocks
            .iter()
            .position(|b| b.stage == stage && (iteration.is_none() || b.iteration == iteration))
            .expect("block exists")
    }

    fn iteration_block(&self, i: usize) -> usize {
        self.block(Stage::IterTrain, Some(i))
    }

    /// Inserts fault lines at `pos` of block `b`; returns the index after them.
    fn inject(&mut self, b: usize, pos: usize, msgs: Vec<Msg>) -> usize {
        let entries = &mut self.blocks[b].entries;
        let pos = pos.min(entries.len());
        let n = msgs.len();
        entries.splice(pos..pos, msgs.into_iter().map(|msg| Entry { msg, injected: true }));
        pos + n
    }

    /// Keeps the first `keep` entries of block `b` and drops everything later.
    fn truncate(&mut self, b: usize, keep: usize) {
        self.blocks[b].entries.truncate(keep);
        self.blocks.truncate(b + 1);
    }

    fn lines(&self, rng: &mut ChaCha8Rng) -> Vec<(i64, Entry)> {
        let mut out = Vec::new();
        let skew = rng.gen_range(0..20);
        for b in &self.blocks {
            let step = (b.duration_ms / (b.entries.len() as i64 + 1)).max(2);
            for (k, e) in b.entries.iter().enumerate() {
                let jitter = rng.gen_range(0..(step / 2).clamp(1, 6));
                out.push((BASE_MS + b.start_ms + skew + (k as i64 + 1) * step + jitter, e.clone()));
            }
        }
        out
    }
}

/// Healthy log of one node, noise included.
fn healthy_node(spec: &WorkloadSpec, rank: usize, rng: &mut ChaCha8Rng) -> NodeLog {
    let world = spec.node_count;
    let benign = spec.noise.benign_errors;
    let keep = |msgs: Vec<Msg>| -> Vec<Msg> { msgs.into_iter().filter(|m| benign || m.level != Level::Error).collect() };

    let mut env = keep(vocab::env_init(world, rank));
    if rank == 0 {
        env.extend(vocab::env_rank0(world));
    }
    if rank.is_multiple_of(8) {
        env.push(vocab::env_host_leader(rank / 8));
    }
    let data = keep(vocab::data_load(rank, spec.stages.data_shards, rng));
    let mut model = vocab::model_init(rng);
    if rank == 0 && benign {
        model.push(vocab::model_rank0());
    }
    let mut blocks = vec![
        Block::new(Stage::EnvInit, None, 0, 1900, env),
        Block::new(Stage::DataLoad, None, 2000, 1900, data),
        Block::new(Stage::ModelInit, None, 4000, 1900, model),
    ];
    let interval = spec.stages.checkpoint_interval;
    let mut t = 10_000;
    for i in 0..spec.iterations {
        let mut body = vocab::iteration(i, spec.events_per_iteration, rng);
        if (i + 1) % vocab::THROUGHPUT_PERIOD == 0 {
            body.push(vocab::throughput(rng));
        }
        blocks.push(Block::new(Stage::IterTrain, Some(i), t, 950, body));
        t += 1000;
        if (i + 1) % interval == 0 || i + 1 == spec.iterations {
            let mut ck = vocab::checkpoint(i, rng);
            if benign && rng.gen_bool(spec.noise.checkpoint_retry_prob) {
                ck.insert(1, vocab::checkpoint_retry(rank));
            }
            blocks.push(Block::new(Stage::Checkpoint, Some(i), t, 450, ck));
            t += 500;
        }
    }
    blocks.push(Block::new(Stage::Teardown, None, t + 500, 900, vocab::teardown(spec.iterations)));

    // common benign noise outside the training loop
    let quiet: Vec<usize> = (0..blocks.len()).filter(|&b| blocks[b].stage != Stage::IterTrain).collect();
    for k in 0..vocab::COMMON_NOISE_KINDS {
        if rng.gen_bool(spec.noise.common_noise_prob) {
            let b = quiet[rng.gen_range(0..quiet.len())];
            // after the block's opening line, so the noise stays in its stage
            let pos = rng.gen_range(1..=blocks[b].entries.len());
            let msg = vocab::common_noise(k, rng);
            blocks[b].entries.insert(pos, Entry { msg, injected: false });
        }
    }
    NodeLog { blocks }
}

/// Job-level choices, fixed before nodes are generated in parallel.
#[derive(Clone, Debug)]
struct Plan {
    /// (rank, early stage, kind)
    novel: Vec<(usize, Stage, usize)>,
    fault: Option<FaultPlan>,
}

#[derive(Clone, Debug)]
struct FaultPlan {
    kind: FaultType,
    stage: Stage,
    target: usize,
    neighbors: BTreeSet<usize>,
    onset: usize,
    end_iteration: usize,
    /// Body position of the fault lines on the target.
    pos: usize,
    device: usize,
    /// Rank named in a rank-table error.
    bad_rank: usize,
}

fn ring_neighbors(target: usize, n: usize, k: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut d = 1;
    while out.len() < k.min(n - 1) {
        out.insert((target + d) % n);
        if out.len() < k.min(n - 1) {
            out.insert((target + n - d) % n);
        }
        d += 1;
    }
    out
}

fn plan(spec: &WorkloadSpec, injection: Option<&FaultInjection>) -> Plan {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.node_count;
    let rate = spec.noise.novel_events_per_job;
    let count = rate.floor() as usize + usize::from(rng.gen_bool(rate.fract()));
    let early = [Stage::EnvInit, Stage::DataLoad, Stage::ModelInit];
    let novel = (0..count)
        .map(|_| (rng.gen_range(0..n), early[rng.gen_range(0..3)], rng.gen_range(0..vocab::NOVEL_NOISE_KINDS)))
        .collect();
    let fault = injection.map(|inj| {
        let target = inj.target_nodes.first().copied().unwrap_or_else(|| rng.gen_range(0..n));
        let default_neighbors = match inj.fault_type {
            FaultType::Network => 7,
            FaultType::Hang => 3,
            _ => 0,
        };
        let neighbors = ring_neighbors(target, n, inj.neighbors.unwrap_or(default_neighbors));
        let stage = inj.stage.unwrap_or(match inj.fault_type {
            FaultType::Config => Stage::EnvInit,
            _ => Stage::IterTrain,
        });
        let extra = match inj.fault_type {
            FaultType::Network => inj.continue_iterations.unwrap_or_else(|| rng.gen_range(0..=2)),
            _ => 0,
        };
        let body = spec.events_per_iteration;
        FaultPlan {
            kind: inj.fault_type,
            stage,
            target,
            neighbors,
            onset: inj.onset_iteration,
            end_iteration: (inj.onset_iteration + extra).min(spec.iterations - 1),
            pos: rng.gen_range(2..=body - 2),
            device: target % 8,
            bad_rank: rng.gen_range(0..n),
        }
    });
    Plan { novel, fault }
}

/// Applies the fault to one node's log.
fn inject(log: &mut NodeLog, rank: usize, f: &FaultPlan, body: usize, rng: &mut ChaCha8Rng) {
    let is_target = rank == f.target;
    // where a healthy node notices trouble within the failing iteration
    let mut notice = rng.gen_range(f.pos..body.max(f.pos + 1));
    notice = notice.max(1);
    match (f.kind, f.stage) {
        (FaultType::Network, _) => {
            let b = log.iteration_block(f.onset);
            let mut end_keep = 0;
            if is_target {
                end_keep = log.inject(b, f.pos, vec![vocab::nic_down(), vocab::cqe_error(), vocab::cqe_error(), vocab::cqe_error()]);
                for i in f.onset + 1..=f.end_iteration {
                    let bi = log.iteration_block(i);
                    end_keep = log.inject(bi, f.pos, vec![vocab::cqe_error(), vocab::cqe_error()]);
                }
            } else if f.neighbors.contains(&rank) {
                end_keep = log.inject(b, f.pos, vec![vocab::cqe_error(), vocab::send_failed(f.target)]);
            }
            let last = log.iteration_block(f.end_iteration);
            let keep = if last == b || is_target { notice.max(end_keep) } else { notice };
            log.truncate(last, keep);
        }
        (FaultType::Accelerator, _) => {
            let b = log.iteration_block(f.onset);
            let keep = if is_target {
                log.inject(b, f.pos, vec![vocab::ecc_error(f.device), vocab::aicore_failed(f.device)])
            } else {
                log.inject(b, notice, vec![vocab::notify_register_timeout()])
            };
            log.truncate(b, keep);
        }
        (FaultType::NodeCrash, _) => {
            let b = log.iteration_block(f.onset);
            let keep = if is_target {
                f.pos
            } else {
                log.inject(b, notice, vec![vocab::connection_reset(f.target), vocab::notify_register_timeout()])
            };
            log.truncate(b, keep);
        }
        (FaultType::Storage, Stage::ModelInit) => {
            let b = log.block(Stage::ModelInit, None);
            let loaded = log.blocks[b]
                .entries
                .iter()
                .position(|e| e.msg.text.starts_with("checkpoint loaded"))
                .expect("healthy model init loads a checkpoint");
            let keep = if is_target {
                log.blocks[b].entries.truncate(loaded);
                log.inject(b, loaded, vec![vocab::checkpoint_load_failed(rank)])
            } else {
                log.inject(b, loaded + 1, vec![vocab::notify_register_timeout()])
            };
            log.truncate(b, keep);
        }
        (FaultType::Storage, _) => {
            let b = log.iteration_block(f.onset);
            let keep = if is_target {
                log.inject(b, f.pos, vocab::data_read_failed(rank * 100 + f.onset))
            } else {
                log.inject(b, notice, vec![vocab::notify_register_timeout()])
            };
            log.truncate(b, keep);
        }
        (FaultType::Hang, _) => {
            let b = log.iteration_block(f.onset);
            let keep = if is_target {
                f.pos
            } else if f.neighbors.contains(&rank) {
                log.inject(b, notice, vec![vocab::notify_wait_timeout(f.target)])
            } else {
                notice
            };
            log.truncate(b, keep);
        }
        (FaultType::Config, Stage::ModelInit) => {
            let b = log.block(Stage::ModelInit, None);
            let keep = log.inject(b, 1, vec![vocab::stream_mode_unsupported()]);
            log.truncate(b, keep);
        }
        (FaultType::Config, _) => {
            // the rank table is checked when the world group is created
            let b = log.block(Stage::EnvInit, None);
            let group = log.blocks[b]
                .entries
                .iter()
                .position(|e| e.msg.text.starts_with("comm group world"))
                .expect("healthy init creates the world group");
            let keep = log.inject(b, group, vec![vocab::ranktable_invalid(f.bad_rank)]);
            log.truncate(b, keep);
        }
    }
}

/// A generated job held in memory: per node, timestamped lines.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticJob {
    pub job_id: String,
    pub nodes: BTreeMap<String, Vec<String>>,
}

impl SyntheticJob {
    pub fn line_count(&self) -> usize {
        self.nodes.values().map(Vec::len).sum()
    }

    /// Writes one `<node>.log` per node into `dir` (created if missing).
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(SynthError::io(dir))?;
        self.nodes.par_iter().try_for_each(|(node, lines)| {
            let path = dir.join(format!("{node}.log"));
            let mut text = lines.join("\n");
            text.push('\n');
            fs::write(&path, text).map_err(SynthError::io(&path))
        })
    }

    /// The bundle ingestion would produce from the written files.
    pub fn to_bundle(&self) -> JobBundle {
        let opts = IngestOptions::default();
        let nodes = self
            .nodes
            .par_iter()
            .map(|(node, lines)| (node.clone(), parse_lines(node, lines.iter().map(String::as_str), &opts)))
            .collect();
        let mut metadata = BTreeMap::new();
        metadata.insert("node_count".to_string(), self.nodes.len().to_string());
        JobBundle { job_id: self.job_id.clone(), nodes, metadata }
    }
}

fn render(ts: i64, e: &Entry) -> String {
    format!("{} {} {}", Timestamp(ts), e.msg.level, e.msg.text)
}

fn build(spec: &WorkloadSpec, injection: Option<&FaultInjection>, job_id: &str) -> (SyntheticJob, Option<GroundTruth>) {
    let plan = plan(spec, injection);
    let per_node: Vec<(String, Vec<(i64, Entry)>)> = (0..spec.node_count)
        .into_par_iter()
        .map(|rank| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(rank as u64 + 1);
            let mut log = healthy_node(spec, rank, &mut rng);
            for &(r, stage, kind) in &plan.novel {
                if r == rank {
                    let b = log.block(stage, None);
                    let pos = rng.gen_range(1..=log.blocks[b].entries.len());
                    let msg = vocab::novel_noise(kind, &mut rng);
                    log.blocks[b].entries.insert(pos, Entry { msg, injected: false });
                }
            }
            if let Some(f) = &plan.fault {
                inject(&mut log, rank, f, spec.events_per_iteration, &mut rng);
            }
            (vocab::rank_name(rank), log.lines(&mut rng))
        })
        .collect();

    let masks = Masks::standard();
    let mut injected = BTreeSet::new();
    let mut nodes = BTreeMap::new();
    for (node, lines) in per_node {
        for (_, e) in lines.iter().filter(|(_, e)| e.injected) {
            injected.insert(preprocess(&e.msg.text, &masks).join(" "));
        }
        nodes.insert(node, lines.iter().map(|(ts, e)| render(*ts, e)).collect());
    }
    let truth = plan.fault.map(|f| {
        let iter_fault = f.stage == Stage::IterTrain;
        GroundTruth {
            job_id: job_id.to_string(),
            fault_type: Some(f.kind),
            faulty_nodes: if f.kind == FaultType::Config { Vec::new() } else { vec![vocab::rank_name(f.target)] },
            failure_indicating_signatures: injected.into_iter().collect(),
            faulty_iteration: iter_fault.then_some(f.onset),
            failing_stage: Some(f.stage),
        }
    });
    (SyntheticJob { job_id: job_id.to_string(), nodes }, truth)
}

/// Generates a failed job. The same spec, injection and seed always give
/// the same lines.
pub fn generate(
    spec: &WorkloadSpec,
    injection: &FaultInjection,
    job_id: &str,
) -> Result<(SyntheticJob, GroundTruth), SynthError> {
    spec.validate()?;
    injection.validate(spec)?;
    let (job, truth) = build(spec, Some(injection), job_id);
    Ok((job, truth.expect("fault planned")))
}

/// Generates a job that runs to completion.
pub fn generate_success(spec: &WorkloadSpec, job_id: &str) -> Result<SyntheticJob, SynthError> {
    spec.validate()?;
    Ok(build(spec, None, job_id).0)
}
