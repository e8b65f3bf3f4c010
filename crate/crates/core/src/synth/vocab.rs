//! Message vocabulary of the synthetic training-log dialect. Variable parts
//! are numbers, paths and IPs only, so the standard masks recover each
//! template exactly.

use rand::Rng;

use crate::model::Level;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Msg {
    pub level: Level,
    pub text: String,
}

pub fn info(text: impl Into<String>) -> Msg {
    Msg { level: Level::Info, text: text.into() }
}

pub fn warn(text: impl Into<String>) -> Msg {
    Msg { level: Level::Warning, text: text.into() }
}

pub fn error(text: impl Into<String>) -> Msg {
    Msg { level: Level::Error, text: text.into() }
}

pub fn rank_name(rank: usize) -> String {
    format!("rank_{rank:02}")
}

// --- healthy stages ---

pub fn env_init(world: usize, rank: usize) -> Vec<Msg> {
    vec![
        info(format!("initializing distributed environment, world size {world}")),
        info(format!("rank {rank} bound to device {} on host node{}", rank % 8, rank / 8)),
        info("HCCL version 7.1.0 loaded"),
        info("set environment variable HCCL_CONNECT_TIMEOUT to 1800"),
        error("query device health status failed, retry later"),
        info(format!("comm group world created with {world} ranks")),
        error("Building wheel for apex failed, falling back to source install"),
        info("distributed environment ready"),
    ]
}

pub fn env_rank0(world: usize) -> Vec<Msg> {
    vec![info("master address 10.0.0.1 port 29500"), info(format!("launching {world} worker processes"))]
}

pub fn env_host_leader(host: usize) -> Msg {
    info(format!("host node{host} driver check passed"))
}

pub fn data_load(rank: usize, shards: usize, rng: &mut impl Rng) -> Vec<Msg> {
    let mut v = vec![
        info(format!("start data loading from /data/corpus/set_{}", rank % 4)),
        error("failed to set CPU affinity for worker thread, using default"),
    ];
    for s in 0..shards {
        v.push(info(format!("loaded {} samples from shard {}", rng.gen_range(90_000..110_000), rank * shards + s)));
    }
    v.push(info("data loader workers started: 8"));
    v
}

pub fn model_init(rng: &mut impl Rng) -> Vec<Msg> {
    vec![
        info("building model: layers=48 hidden=8192 heads=64"),
        info("model parameters: 13.2 billion"),
        info("resuming from checkpoint /ckpt/latest"),
        info(format!("checkpoint loaded in {} s", rng.gen_range(20..40))),
        info("optimizer state allocated on device"),
        info("model initialization complete"),
    ]
}

pub fn model_rank0() -> Msg {
    error("tensorboard writer failed to flush events, will retry")
}

pub const ITERATION_BODY: usize = 7;

/// Marker plus the first `events - 1` body events of iteration `i`.
pub fn iteration(i: usize, events: usize, rng: &mut impl Rng) -> Vec<Msg> {
    let all = [
        info(format!("training iteration {i} begins")),
        info("fetched batch of 512 samples"),
        info(format!("forward pass finished in {} ms", rng.gen_range(300..340))),
        info(format!("loss computed: {:.4}", 2.5 - i as f64 * 0.001 + rng.gen_range(0.0..0.01))),
        info(format!("backward pass finished in {} ms", rng.gen_range(500..560))),
        info(format!("allreduce of gradients finished in {} ms", rng.gen_range(80..120))),
        info(format!("optimizer step applied, lr {:e}", 1.5e-4)),
    ];
    all.into_iter().take(events.clamp(2, ITERATION_BODY)).collect()
}

pub const THROUGHPUT_PERIOD: usize = 5;

pub fn throughput(rng: &mut impl Rng) -> Msg {
    info(format!("throughput {} tokens/s over last 5 iterations", rng.gen_range(150_000..160_000)))
}

pub fn checkpoint(i: usize, rng: &mut impl Rng) -> Vec<Msg> {
    vec![
        info(format!("saving checkpoint to /ckpt/iter_{i}")),
        info(format!("checkpoint saved in {} s", rng.gen_range(10..20))),
    ]
}

pub fn checkpoint_retry(shard: usize) -> Msg {
    error(format!("checkpoint write retry 1 of 3 for shard {shard}"))
}

pub fn teardown(iterations: usize) -> Vec<Msg> {
    vec![
        info(format!("training finished, total iterations {iterations}")),
        info("releasing communication resources"),
        info("process exited with code 0"),
    ]
}

/// Benign events that show up now and then on any node, outside the
/// training loop.
pub fn common_noise(k: usize, rng: &mut impl Rng) -> Msg {
    match k {
        0 => warn(format!("slow disk detected on /dev/nvme0n1, latency {} ms", rng.gen_range(20..80))),
        1 => info("page cache dropped by system agent"),
        2 => warn(format!("clock skew of {} ms against ntp server", rng.gen_range(5..40))),
        3 => error("failed to report metrics to monitoring endpoint 10.2.0.4:9091"),
        4 => info(format!("core dump directory cleanup removed {} files", rng.gen_range(1..9))),
        5 => info("kernel module peermem reloaded"),
        6 => error("ssh session from 10.1.2.3 closed unexpectedly"),
        _ => warn(format!("memory usage at {} percent of host limit", rng.gen_range(80..95))),
    }
}

pub const COMMON_NOISE_KINDS: usize = 8;

/// Benign events rare enough that no history is likely to contain them.
pub fn novel_noise(k: usize, rng: &mut impl Rng) -> Msg {
    match k {
        0 => warn(format!("user ops{} attached debugger to process {}", rng.gen_range(1..9), rng.gen_range(1000..9000))),
        1 => info(format!("hot patch {} applied to driver", rng.gen_range(100..200))),
        2 => warn(format!("fan speed of chassis {} raised to 80 percent", rng.gen_range(1..9))),
        3 => info(format!("cgroup memory limit updated to {} GB", rng.gen_range(900..1000))),
        4 => error("license server heartbeat lost, retrying"),
        5 => info("firmware inventory refreshed by platform agent"),
        6 => warn("power supply redundancy degraded on chassis"),
        7 => info("audit log rotated by security agent"),
        8 => error("failed to pull sidecar image, keeping cached version"),
        _ => warn(format!("bmc reported inlet temperature {} C", rng.gen_range(30..40))),
    }
}

pub const NOVEL_NOISE_KINDS: usize = 10;

// --- faults ---

pub fn nic_down() -> Msg {
    error("NIC port link down")
}

pub fn cqe_error() -> Msg {
    error("ROCE(,hccp_service.bin):error cqe status.")
}

pub fn send_failed(peer: usize) -> Msg {
    error(format!("send to {} failed, ret 5", rank_name(peer)))
}

pub fn ecc_error(device: usize) -> Msg {
    error(format!("double bit ecc error detected on device {device}"))
}

pub fn aicore_failed(device: usize) -> Msg {
    error(format!("Aicore kernel execute failed, device_id={device}, stream_id=2"))
}

pub fn notify_register_timeout() -> Msg {
    error("The wait execution of the Notify register times out.")
}

pub fn connection_reset(peer: usize) -> Msg {
    error(format!("connection to {} reset by peer", rank_name(peer)))
}

pub fn data_read_failed(shard: usize) -> Vec<Msg> {
    vec![
        error(format!("read data shard /data/corpus/part_{shard} failed: Input/output error")),
        error("data loader worker process exited unexpectedly"),
    ]
}

pub fn checkpoint_load_failed(rank: usize) -> Msg {
    error(format!("Failed to load checkpoint /ckpt/latest/model_{}.pt: Input/output error", rank_name(rank)))
}

pub fn notify_wait_timeout(peer: usize) -> Msg {
    error(format!("notify wait from {} timeout", rank_name(peer)))
}

pub fn ranktable_invalid(rank: usize) -> Msg {
    error(format!(
        "The ranktable or rank is invalid,Reason:[The ranktable config is missing the device ip of rank {rank}]."
    ))
}

pub fn stream_mode_unsupported() -> Msg {
    error("Stream mode cannot be set in current driver version")
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::drain::{preprocess, Masks};
    use crate::testutil::job;

    /// Two instances of every message kind, with different variable parts.
    fn everything() -> Vec<Vec<Msg>> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut kinds: Vec<Vec<Msg>> = Vec::new();
        let mut add = |a: Vec<Msg>, b: Vec<Msg>| {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.into_iter().zip(b) {
                kinds.push(vec![x, y]);
            }
        };
        add(env_init(16, 3), env_init(64, 41));
        add(env_rank0(16), env_rank0(32));
        add(vec![env_host_leader(0)], vec![env_host_leader(7)]);
        add(data_load(3, 1, &mut rng), data_load(17, 1, &mut rng));
        add(model_init(&mut rng), model_init(&mut rng));
        add(vec![model_rank0()], vec![model_rank0()]);
        add(iteration(3, 7, &mut rng), iteration(48, 7, &mut rng));
        add(vec![throughput(&mut rng)], vec![throughput(&mut rng)]);
        add(checkpoint(9, &mut rng), checkpoint(59, &mut rng));
        add(vec![checkpoint_retry(1)], vec![checkpoint_retry(22)]);
        add(teardown(60), teardown(58));
        for k in 0..COMMON_NOISE_KINDS {
            add(vec![common_noise(k, &mut rng)], vec![common_noise(k, &mut rng)]);
        }
        for k in 0..NOVEL_NOISE_KINDS {
            add(vec![novel_noise(k, &mut rng)], vec![novel_noise(k, &mut rng)]);
        }
        add(vec![nic_down(), cqe_error(), notify_register_timeout(), stream_mode_unsupported()], vec![
            nic_down(),
            cqe_error(),
            notify_register_timeout(),
            stream_mode_unsupported(),
        ]);
        add(vec![send_failed(3), ecc_error(1), aicore_failed(1), connection_reset(2)], vec![
            send_failed(44),
            ecc_error(6),
            aicore_failed(7),
            connection_reset(63),
        ]);
        add(data_read_failed(12), data_read_failed(4077));
        add(vec![checkpoint_load_failed(3), notify_wait_timeout(5), ranktable_invalid(9)], vec![
            checkpoint_load_failed(40),
            notify_wait_timeout(60),
            ranktable_invalid(33),
        ]);
        kinds
    }

    #[test]
    fn instances_share_a_masked_signature() {
        let masks = Masks::standard();
        for pair in everything() {
            assert_eq!(preprocess(&pair[0].text, &masks), preprocess(&pair[1].text, &masks), "{pair:?}");
        }
    }

    #[test]
    fn no_two_kinds_merge_under_parsing() {
        let kinds = everything();
        let masks = Masks::standard();
        let expected: BTreeSet<String> = kinds.iter().map(|p| preprocess(&p[0].text, &masks).join(" ")).collect();
        let mut seen = BTreeSet::new();
        for p in &kinds {
            let sig = preprocess(&p[0].text, &masks).join(" ");
            assert!(seen.insert(sig.clone()), "two kinds share {sig:?}");
        }
        // interleave so every kind meets every other in the same tree
        let texts: Vec<String> = kinds.iter().flatten().map(|m| m.text.clone()).collect();
        let lines: Vec<&str> = texts.iter().map(String::as_str).collect();
        let b = job("vocab", &[("n", &lines)]);
        let got: BTreeMap<String, u64> =
            b.templates.iter().map(|t| (t.signature(), t.occurrence_count)).collect();
        let got_set: BTreeSet<String> = got.keys().cloned().collect();
        assert_eq!(got_set, expected);
        assert!(got.values().all(|&c| c == 2));
    }
}
