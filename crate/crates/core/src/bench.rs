//! Throughput and latency benchmarks with emulated attestation delays.
//!
//! In the `sim` transport every figure is simulated device time, so a
//! `(seed, config)` pair fixes the CSV row and the event trace byte for byte.
//! The `socket` transport runs a raw channel over loopback TCP with the delay
//! spent as a busy wait, and reports wall-clock time.

use std::io::Write;
use std::net::TcpListener;
use std::path::Path;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::device::{
    batch, DelayMode, DeviceConfig, DeviceError, Endpoint, NetHandle, AMD_SEV_DELAY, SGX_DELAY, TNIC_DELAY,
};
use crate::kernel::{DeviceId, SessionId, SessionKey, KEY_LEN};
use crate::net::socket::{SocketBridge, SocketError};
use crate::net::{NetConfig, SimNet};
use crate::protocols::a2m::{A2m, A2mError, LogId};
use crate::protocols::bft::{BftCluster, BftConfig, BftError, Behavior};
use crate::protocols::chain::{ChainBehavior, ChainCluster};
use crate::protocols::peer_review::{PeerReview, ROOT};

/// Column order of every CSV this module writes.
pub const CSV_HEADER: [&str; 14] = [
    "protocol",
    "delay",
    "delay_ns",
    "batch",
    "payload",
    "requests",
    "transport",
    "seed",
    "ops",
    "elapsed_ns",
    "throughput_ops",
    "lat_mean_us",
    "lat_median_us",
    "lat_p99_us",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    A2m,
    Bft,
    Cr,
    Peerreview,
    RawChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DelayModel {
    None,
    #[default]
    Tnic,
    Sgx,
    Amdsev,
}

impl DelayModel {
    pub fn preset(self) -> Duration {
        match self {
            DelayModel::None => Duration::ZERO,
            DelayModel::Tnic => TNIC_DELAY,
            DelayModel::Sgx => SGX_DELAY,
            DelayModel::Amdsev => AMD_SEV_DELAY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    #[default]
    Sim,
    Socket,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("batch must be 1, 8 or 16, got {0}")]
    BadBatch(usize),
    #[error("{0:?} has no batched mode; use batch = 1")]
    BatchUnsupported(Protocol),
    #[error("request count must be positive")]
    NoRequests,
    #[error("payload of {0} bytes does not fit one frame")]
    PayloadTooLarge(usize),
    #[error("the socket transport only runs raw-channel, not {0:?}")]
    SocketUnsupported(Protocol),
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Socket(#[from] SocketError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Bft(#[from] BftError),
    #[error(transparent)]
    A2m(#[from] A2mError),
    #[error("run stalled after {done} of {wanted} operations")]
    Stalled { done: usize, wanted: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub protocol: Protocol,
    #[serde(default)]
    pub delay: DelayModel,
    /// Overrides the preset of `delay` when set.
    #[serde(default)]
    pub delay_ns: Option<u64>,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default = "default_payload")]
    pub payload: usize,
    #[serde(default = "default_requests")]
    pub requests: usize,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_payload() -> usize {
    64
}

fn default_requests() -> usize {
    1024
}

impl BenchConfig {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            delay: DelayModel::Tnic,
            delay_ns: None,
            batch: 1,
            payload: default_payload(),
            requests: default_requests(),
            transport: Transport::Sim,
            seed: 0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        Ok(toml::from_str(text)?)
    }

    pub fn delay_duration(&self) -> Duration {
        self.delay_ns.map_or(self.delay.preset(), Duration::from_nanos)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if ![1, 8, 16].contains(&self.batch) {
            return Err(BenchError::BadBatch(self.batch));
        }
        if self.batch > 1 && matches!(self.protocol, Protocol::Cr | Protocol::Peerreview) {
            return Err(BenchError::BatchUnsupported(self.protocol));
        }
        if self.requests == 0 {
            return Err(BenchError::NoRequests);
        }
        // room for the batch framing: 4-byte count plus 4 bytes per record
        if self.batch * (self.payload + 4) + 4 > crate::kernel::DEFAULT_MAX_PAYLOAD {
            return Err(BenchError::PayloadTooLarge(self.payload));
        }
        if self.transport == Transport::Socket && self.protocol != Protocol::RawChannel {
            return Err(BenchError::SocketUnsupported(self.protocol));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub protocol: Protocol,
    pub delay: DelayModel,
    pub delay_ns: u64,
    pub batch: usize,
    pub payload: usize,
    pub requests: usize,
    pub transport: Transport,
    pub seed: u64,
    pub ops: usize,
    pub elapsed_ns: u64,
    pub throughput_ops: f64,
    pub lat_mean_us: f64,
    pub lat_median_us: f64,
    pub lat_p99_us: f64,
}

impl BenchRecord {
    fn from_samples(cfg: &BenchConfig, elapsed_ns: u64, mut lat_ns: Vec<u64>) -> Self {
        lat_ns.sort_unstable();
        let ops = lat_ns.len();
        let us = |ns: u64| ns as f64 / 1_000.0;
        let mean = if ops == 0 {
            0.0
        } else {
            lat_ns.iter().map(|&n| n as f64).sum::<f64>() / ops as f64 / 1_000.0
        };
        Self {
            protocol: cfg.protocol,
            delay: cfg.delay,
            delay_ns: cfg.delay_duration().as_nanos() as u64,
            batch: cfg.batch,
            payload: cfg.payload,
            requests: cfg.requests,
            transport: cfg.transport,
            seed: cfg.seed,
            ops,
            elapsed_ns,
            throughput_ops: if elapsed_ns == 0 {
                0.0
            } else {
                ops as f64 * 1e9 / elapsed_ns as f64
            },
            lat_mean_us: mean,
            lat_median_us: us(percentile(&lat_ns, 50)),
            lat_p99_us: us(percentile(&lat_ns, 99)),
        }
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], p: usize) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (p * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub record: BenchRecord,
    /// JSONL network trace; empty for runs without a simulated network.
    pub trace: String,
}

/// Writes `records` as CSV, header first.
pub fn write_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one row per record, writing the header only if the file is new
/// or empty.
pub fn append_csv(path: &Path, records: &[BenchRecord]) -> Result<(), BenchError> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome, BenchError> {
    cfg.validate()?;
    match (cfg.transport, cfg.protocol) {
        (Transport::Socket, _) => raw_socket(cfg),
        (Transport::Sim, Protocol::RawChannel) => raw_sim(cfg),
        (Transport::Sim, Protocol::A2m) => a2m(cfg),
        (Transport::Sim, Protocol::Bft) => bft(cfg),
        (Transport::Sim, Protocol::Cr) => chain(cfg),
        (Transport::Sim, Protocol::Peerreview) => peer_review(cfg),
    }
}

fn session_key(seed: u64, label: u64) -> SessionKey {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ label.rotate_left(32));
    let mut k = [0u8; KEY_LEN];
    rng.fill_bytes(&mut k);
    SessionKey::new(k)
}

fn records(cfg: &BenchConfig, first: usize, count: usize) -> Vec<Vec<u8>> {
    (first..first + count)
        .map(|i| {
            let mut r = vec![0u8; cfg.payload];
            for (j, b) in r.iter_mut().enumerate() {
                *b = (i.wrapping_mul(31) ^ j) as u8;
            }
            r
        })
        .collect()
}

const RAW_SESSION: SessionId = SessionId(1);
const SENDER: DeviceId = DeviceId(1);
const RECEIVER: DeviceId = DeviceId(2);

fn raw_pair(cfg: &BenchConfig, mode: DelayMode) -> (DeviceConfig, DeviceConfig) {
    let key = session_key(cfg.seed, 1);
    let mut a = DeviceConfig::new(SENDER).with_delay(cfg.delay_duration()).with_session(RAW_SESSION, RECEIVER, key.clone());
    let mut b = DeviceConfig::new(RECEIVER).with_delay(cfg.delay_duration()).with_session(RAW_SESSION, SENDER, key);
    a.delay_mode = mode;
    b.delay_mode = mode;
    (a, b)
}

/// One sender streams batches to one receiver; a batch completes when the
/// receiver has verified and unpacked it.
fn raw_sim(cfg: &BenchConfig) -> Result<BenchOutcome, BenchError> {
    let mut net = SimNet::new([SENDER, RECEIVER], NetConfig::default());
    let h = net.handle();
    let (a, b) = raw_pair(cfg, DelayMode::Simulated);
    net.attach(Endpoint::connect(a, &h)?);
    net.attach(Endpoint::connect(b, &h)?);
    let mut lat = Vec::with_capacity(cfg.requests);
    let mut sent = 0;
    let start = 0;
    let mut end = 0;
    while sent < cfg.requests {
        let k = cfg.batch.min(cfg.requests - sent);
        let payload = batch::pack(&records(cfg, sent, k));
        let ep = net.endpoint_mut(SENDER).unwrap();
        let t0 = ep.clock();
        ep.auth_send(RAW_SESSION, &payload)?;
        net.run_until_quiescent();
        let rx = net.endpoint_mut(RECEIVER).unwrap();
        let got = rx.poll(RAW_SESSION, usize::MAX);
        let n: usize = got.iter().map(|m| batch::unpack(&m.payload).map_or(0, |r| r.len())).sum();
        if n != k {
            return Err(BenchError::Stalled { done: sent, wanted: cfg.requests });
        }
        let t1 = rx.clock();
        // the sender may only reuse its NIC once the frame is out
        lat.extend(std::iter::repeat_n(t1 - t0, k));
        end = t1;
        sent += k;
    }
    Ok(BenchOutcome {
        record: BenchRecord::from_samples(cfg, end - start, lat),
        trace: net.trace_jsonl(),
    })
}

/// Same workload over loopback TCP, busy-waiting each delay and timing with
/// the wall clock. Not deterministic.
fn raw_socket(cfg: &BenchConfig) -> Result<BenchOutcome, BenchError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let (a, b) = raw_pair(cfg, DelayMode::BusyWait);
    let (arrivals_tx, arrivals_rx) = mpsc::channel::<(usize, Instant)>();
    let expected = cfg.requests;
    let receiver = std::thread::spawn(move || -> Result<(), BenchError> {
        let (stream, _) = listener.accept()?;
        let (bridge, handle) = SocketBridge::from_stream(stream, SENDER)?;
        let mut ep = Endpoint::connect(b, &handle)?;
        let mut seen = 0;
        while seen < expected {
            match bridge.recv_into(&mut ep, Duration::from_secs(5))? {
                Some(verdict) => verdict?,
                None => break,
            }
            for m in ep.poll(RAW_SESSION, usize::MAX) {
                let n = batch::unpack(&m.payload).map_or(0, |r| r.len());
                seen += n;
                let _ = arrivals_tx.send((n, Instant::now()));
            }
        }
        bridge.close();
        Ok(())
    });

    let (bridge, handle) = SocketBridge::connect(addr, RECEIVER)?;
    let mut ep = Endpoint::connect(a, &handle)?;
    let mut lat = Vec::with_capacity(cfg.requests);
    let start = Instant::now();
    let mut sent = 0;
    while sent < cfg.requests {
        let k = cfg.batch.min(cfg.requests - sent);
        let payload = batch::pack(&records(cfg, sent, k));
        let t0 = Instant::now();
        ep.auth_send(RAW_SESSION, &payload)?;
        let (n, t1) = arrivals_rx
            .recv_timeout(Duration::from_secs(5))
            .map_err(|_| BenchError::Stalled { done: sent, wanted: cfg.requests })?;
        lat.extend(std::iter::repeat_n((t1 - t0).as_nanos() as u64, n));
        sent += k;
    }
    let elapsed = start.elapsed().as_nanos() as u64;
    drop(ep);
    drop(handle);
    bridge.close();
    receiver.join().expect("receiver thread panicked")?;
    Ok(BenchOutcome {
        record: BenchRecord::from_samples(cfg, elapsed, lat),
        trace: String::new(),
    })
}

/// Appends batches of records to one attested log on a single device.
fn a2m(cfg: &BenchConfig) -> Result<BenchOutcome, BenchError> {
    let (tx, _rx) = mpsc::channel();
    let me = DeviceId(1);
    let dc = DeviceConfig::new(me)
        .with_delay(cfg.delay_duration())
        .with_session(SessionId(100), me, session_key(cfg.seed, 100))
        .with_session(SessionId(101), me, session_key(cfg.seed, 101));
    let mut ep = Endpoint::connect(dc, &NetHandle::new(tx, []))?;
    let mut log = A2m::new(me, SessionId(100));
    log.create_log(LogId(1), SessionId(101))?;
    let mut lat = Vec::with_capacity(cfg.requests);
    let mut done = 0;
    while done < cfg.requests {
        let k = cfg.batch.min(cfg.requests - done);
        let t0 = ep.clock();
        log.append(&mut ep, LogId(1), &batch::pack(&records(cfg, done, k)))?;
        lat.extend(std::iter::repeat_n(ep.clock() - t0, k));
        done += k;
    }
    Ok(BenchOutcome {
        record: BenchRecord::from_samples(cfg, ep.clock(), lat),
        trace: String::new(),
    })
}

/// Closed loop: one client keeps exactly one batch outstanding at the
/// leader and submits the next as soon as the leader commits.
fn bft(cfg: &BenchConfig) -> Result<BenchOutcome, BenchError> {
    let bc = BftConfig::new(1, cfg.seed).with_delay(cfg.delay_duration());
    let behaviors = vec![Behavior::Honest; bc.replicas.len()];
    let mut cluster = BftCluster::new(bc, behaviors, 1, NetConfig::default())?;
    let mut lat = Vec::with_capacity(cfg.requests);
    let start = cluster.leader_clock();
    let mut end = start;
    let mut done = 0;
    while done < cfg.requests {
        let k = cfg.batch.min(cfg.requests - done);
        let t0 = cluster.leader_clock();
        let reqs = cluster.submit(1, k)?;
        while reqs.iter().any(|r| cluster.commit_time(*r).is_none()) {
            if !cluster.step()? {
                return Err(BenchError::Stalled { done, wanted: cfg.requests });
            }
        }
        for r in &reqs {
            let t1 = cluster.commit_time(*r).unwrap();
            lat.push(t1 - t0);
            end = end.max(t1);
        }
        done += k;
    }
    cluster.run()?;
    Ok(BenchOutcome {
        record: BenchRecord::from_samples(cfg, end - start, lat),
        trace: cluster.net.trace_jsonl(),
    })
}

/// Closed loop over a 3-node chain; a request completes when the client
/// accepts the tail's signed reply.
fn chain(cfg: &BenchConfig) -> Result<BenchOutcome, BenchError> {
    let behaviors = [ChainBehavior::Honest; 3];
    let mut c = ChainCluster::with_delay(3, &behaviors, cfg.seed, NetConfig::default(), cfg.delay_duration())?;
    let mut lat = Vec::with_capacity(cfg.requests);
    let mut end = 0;
    for done in 0..cfg.requests {
        let t0 = c.head_clock();
        let req = c.submit()?;
        c.run()?;
        let t1 = c.reply_time(req).ok_or(BenchError::Stalled { done, wanted: cfg.requests })?;
        lat.push(t1.saturating_sub(t0));
        end = t1;
    }
    Ok(BenchOutcome {
        record: BenchRecord::from_samples(cfg, end, lat),
        trace: c.net.trace_jsonl(),
    })
}

/// One operation is one logged round trip between the root and both
/// children.
fn peer_review(cfg: &BenchConfig) -> Result<BenchOutcome, BenchError> {
    let mut pr = PeerReview::with_delay(cfg.seed, NetConfig::default(), cfg.delay_duration())?;
    let mut lat = Vec::with_capacity(cfg.requests);
    for _ in 0..cfg.requests {
        let t0 = pr.clock(ROOT);
        pr.round()?;
        lat.push(pr.clock(ROOT) - t0);
    }
    Ok(BenchOutcome {
        record: BenchRecord::from_samples(cfg, pr.clock(ROOT), lat),
        trace: pr.net.trace_jsonl(),
    })
}
