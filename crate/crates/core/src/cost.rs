//! Analytic wall-time and communication accounting.
//!
//! Units: payload sizes in megabytes (MiB, 2^20 bytes), bandwidth in
//! megabytes per second, throughput in batches per second, times in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per megabyte used throughout the cost model.
pub const BYTES_PER_MB: f64 = 1_048_576.0;

/// Server work per megabyte of aggregated payload: one f32 add and one
/// scale per parameter across a 4-byte encoding, i.e. four operations per
/// byte. `T_agg = K · S · FLOP_PER_MB / ζ`.
pub const FLOP_PER_MB: f64 = 4.0 * BYTES_PER_MB;

/// Payload size in MB of `param_count` values of `bytes_per_param` bytes.
pub fn payload_mb(param_count: usize, bytes_per_param: usize) -> f64 {
    (param_count * bytes_per_param) as f64 / BYTES_PER_MB
}

/// Symmetric per-link bandwidths between named sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthMatrix {
    pub sites: Vec<String>,
    /// `mbps[i][j]`; `None` marks a missing link (and the diagonal).
    pub mbps: Vec<Vec<Option<f64>>>,
}

impl BandwidthMatrix {
    pub fn new(sites: Vec<String>, mbps: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let n = sites.len();
        if n == 0 || mbps.len() != n || mbps.iter().any(|r| r.len() != n) {
            return Err(Error::Config("bandwidth matrix must be square and non-empty".into()));
        }
        for i in 0..n {
            for j in 0..n {
                if mbps[i][j] != mbps[j][i] {
                    return Err(Error::Config(format!(
                        "bandwidth between {} and {} is not symmetric",
                        sites[i], sites[j]
                    )));
                }
                if let Some(b) = mbps[i][j] {
                    if !(b > 0.0 && b.is_finite()) {
                        return Err(Error::Config(format!(
                            "bandwidth {b} between {} and {} must be positive",
                            sites[i], sites[j]
                        )));
                    }
                }
            }
        }
        Ok(Self { sites, mbps })
    }

    /// Parses a whitespace-separated table: a header row of site names, then
    /// one row per site starting with its name. `-` marks no link.
    /// Blank lines and `#` comments are ignored.
    ///
    /// ```text
    /// #        england utah quebec
    /// england  -       120  80
    /// utah     120     -    300
    /// quebec   80      300  -
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Config("empty bandwidth table".into()))?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let n = header.len();
        let mut mbps = vec![vec![None; n]; n];
        let mut seen = vec![false; n];
        for line in lines {
            let mut fields = line.split_whitespace();
            let name = fields.next().expect("non-empty line");
            let i = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("row for unknown site `{name}`")))?;
            let values: Vec<&str> = fields.collect();
            if values.len() != n {
                return Err(Error::Config(format!(
                    "row `{name}` has {} values for {n} sites",
                    values.len()
                )));
            }
            for (j, v) in values.iter().enumerate() {
                mbps[i][j] = match *v {
                    "-" => None,
                    s => Some(s.parse::<f64>().map_err(|_| {
                        Error::Config(format!("bad bandwidth `{s}` in row `{name}`"))
                    })?),
                };
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("no row for site `{}`", header[missing])));
        }
        Self::new(header, mbps)
    }

    pub fn index_of(&self, site: &str) -> Result<usize> {
        self.sites
            .iter()
            .position(|s| s == site)
            .ok_or_else(|| Error::Lookup {
                kind: "site",
                name: site.to_string(),
            })
    }

    pub fn link(&self, a: usize, b: usize) -> Result<f64> {
        self.mbps[a][b].ok_or_else(|| {
            Error::Config(format!(
                "no link between {} and {}",
                self.sites[a], self.sites[b]
            ))
        })
    }
}

/// Network description for one round.
#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    /// One bandwidth figure for every link.
    Uniform { mbps: f64 },
    /// Per-link bandwidths. Participant `i` of a round sits at `ring[i]`;
    /// `server` is the aggregator's site.
    Matrix {
        matrix: BandwidthMatrix,
        ring: Vec<usize>,
        server: usize,
    },
}

impl Network {
    pub fn uniform(mbps: f64) -> Result<Self> {
        if !(mbps > 0.0 && mbps.is_finite()) {
            return Err(Error::Config(format!("bandwidth {mbps} must be positive")));
        }
        Ok(Network::Uniform { mbps })
    }

    /// Ring in ascending site order unless `ring` names an explicit order.
    pub fn matrix(matrix: BandwidthMatrix, server: &str, ring: Option<&[String]>) -> Result<Self> {
        let server = matrix.index_of(server)?;
        let ring = match ring {
            Some(names) => names
                .iter()
                .map(|n| matrix.index_of(n))
                .collect::<Result<Vec<_>>>()?,
            None => (0..matrix.sites.len()).filter(|&i| i != server).collect(),
        };
        Ok(Network::Matrix {
            matrix,
            ring,
            server,
        })
    }

    fn participants(&self, k: usize) -> Result<&[usize]> {
        match self {
            Network::Uniform { .. } => Ok(&[]),
            Network::Matrix { ring, .. } => ring.get(..k).ok_or_else(|| {
                Error::Config(format!("{k} participants but only {} sites in the ring", ring.len()))
            }),
        }
    }
}

/// One aggregation topology: how long a round's exchange takes and how much
/// it moves.
pub trait Topology: Send + Sync {
    fn name(&self) -> &'static str;

    /// Communication time for `k` participants exchanging `payload_mb` each.
    fn comm_time(&self, k: usize, payload_mb: f64, network: &Network) -> Result<f64>;

    /// Megabytes moved per round under this topology's counting convention.
    fn megabytes_per_round(&self, k: usize, payload_mb: f64) -> f64;

    /// Whether a round can complete from the surviving participants.
    fn tolerates_dropout(&self) -> bool;
}

fn check_comm_inputs(k: usize, payload_mb: f64) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("communication needs at least one participant".into()));
    }
    if !(payload_mb > 0.0 && payload_mb.is_finite()) {
        return Err(Error::Config(format!("payload {payload_mb} MB must be positive")));
    }
    Ok(())
}

/// Parameter server: `T_C = K·S/B`, with `B` the server's slowest client link.
#[derive(Clone, Copy, Debug, Default)]
pub struct ParameterServer;

impl Topology for ParameterServer {
    fn name(&self) -> &'static str {
        "ps"
    }

    fn comm_time(&self, k: usize, payload_mb: f64, network: &Network) -> Result<f64> {
        check_comm_inputs(k, payload_mb)?;
        if k == 1 {
            return Ok(0.0);
        }
        let b = match network {
            Network::Uniform { mbps } => *mbps,
            Network::Matrix { matrix, server, .. } => {
                let mut slowest = f64::INFINITY;
                for &site in network.participants(k)? {
                    slowest = slowest.min(matrix.link(*server, site)?);
                }
                slowest
            }
        };
        Ok(k as f64 * payload_mb / b)
    }

    fn megabytes_per_round(&self, k: usize, payload_mb: f64) -> f64 {
        if k <= 1 {
            return 0.0;
        }
        2.0 * k as f64 * payload_mb
    }

    fn tolerates_dropout(&self) -> bool {
        true
    }
}

/// All-to-all exchange: `T_C = (K−1)·S/B`, with `B` the slowest pairwise link.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllReduce;

impl Topology for AllReduce {
    fn name(&self) -> &'static str {
        "ar"
    }

    fn comm_time(&self, k: usize, payload_mb: f64, network: &Network) -> Result<f64> {
        check_comm_inputs(k, payload_mb)?;
        if k == 1 {
            return Ok(0.0);
        }
        let b = match network {
            Network::Uniform { mbps } => *mbps,
            Network::Matrix { matrix, .. } => {
                let sites = network.participants(k)?;
                let mut slowest = f64::INFINITY;
                for (i, &a) in sites.iter().enumerate() {
                    for &c in &sites[i + 1..] {
                        slowest = slowest.min(matrix.link(a, c)?);
                    }
                }
                slowest
            }
        };
        Ok((k - 1) as f64 * payload_mb / b)
    }

    fn megabytes_per_round(&self, k: usize, payload_mb: f64) -> f64 {
        2.0 * (k.max(1) - 1) as f64 * payload_mb
    }

    fn tolerates_dropout(&self) -> bool {
        true
    }
}

/// Ring all-reduce: `T_C = 2·S·(K−1)/(K·B)`, with `B` the slowest ring edge
/// including the wrap-around edge.
#[derive(Clone, Copy, Debug, Default)]
pub struct RingAllReduce;

impl Topology for RingAllReduce {
    fn name(&self) -> &'static str {
        "rar"
    }

    fn comm_time(&self, k: usize, payload_mb: f64, network: &Network) -> Result<f64> {
        check_comm_inputs(k, payload_mb)?;
        if k == 1 {
            return Ok(0.0);
        }
        let b = match network {
            Network::Uniform { mbps } => *mbps,
            Network::Matrix { matrix, .. } => {
                let ring = network.participants(k)?;
                let mut slowest = f64::INFINITY;
                for i in 0..ring.len() {
                    slowest = slowest.min(matrix.link(ring[i], ring[(i + 1) % ring.len()])?);
                }
                slowest
            }
        };
        let k = k as f64;
        Ok(2.0 * payload_mb * (k - 1.0) / (k * b))
    }

    fn megabytes_per_round(&self, k: usize, payload_mb: f64) -> f64 {
        let k = k.max(1) as f64;
        2.0 * payload_mb * (k - 1.0) / k
    }

    fn tolerates_dropout(&self) -> bool {
        false
    }
}

/// `T_L = τ/ν`.
pub fn local_time(local_steps: u64, throughput: f64) -> Result<f64> {
    if !(throughput > 0.0 && throughput.is_finite()) {
        return Err(Error::Config(format!("throughput {throughput} must be positive")));
    }
    Ok(local_steps as f64 / throughput)
}

/// `T_agg = K·S/ζ` with the payload converted through [`FLOP_PER_MB`].
pub fn agg_time(k: usize, payload_mb: f64, server_flops: f64) -> Result<f64> {
    if !(server_flops > 0.0 && server_flops.is_finite()) {
        return Err(Error::Config(format!("server capacity {server_flops} must be positive")));
    }
    Ok(k as f64 * payload_mb * FLOP_PER_MB / server_flops)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelParams {
    /// Model payload `S` in MB; `0` derives it from the parameter count at
    /// eight bytes per value.
    pub payload_mb: f64,
    /// Uniform bandwidth `B` in MB/s.
    pub bandwidth_mbps: f64,
    /// Client throughput `ν` in batches per second.
    pub throughput: f64,
    /// Server capacity `ζ` in FLOP/s.
    pub server_flops: f64,
    /// Channel count above which a congestion factor would apply. Recorded
    /// but unused: both branches of the parameter-server formula coincide.
    pub channel_threshold: usize,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            payload_mb: 0.0,
            bandwidth_mbps: 125.0,
            throughput: 2.0,
            server_flops: 5e12,
            channel_threshold: 100,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.payload_mb < 0.0 || !self.payload_mb.is_finite() {
            return Err(Error::Config("cost.payload_mb must be >= 0".into()));
        }
        for (name, v) in [
            ("bandwidth_mbps", self.bandwidth_mbps),
            ("throughput", self.throughput),
            ("server_flops", self.server_flops),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("cost.{name} must be positive")));
            }
        }
        if self.channel_threshold == 0 {
            return Err(Error::Config("cost.channel_threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallTimeBreakdown {
    pub t_local: f64,
    pub t_comm: f64,
    pub t_agg: f64,
    pub t_round: f64,
    pub t_total: f64,
    pub mb_per_round: f64,
    pub total_mb: f64,
}

impl WallTimeBreakdown {
    /// Share of total time spent communicating, in percent.
    pub fn comm_percentage(&self) -> f64 {
        if self.t_total == 0.0 {
            return 0.0;
        }
        100.0 * self.t_comm * self.rounds() / self.t_total
    }

    fn rounds(&self) -> f64 {
        if self.t_round == 0.0 {
            0.0
        } else {
            self.t_total / self.t_round
        }
    }
}

/// Per-round inputs to [`total_wall_time`].
#[derive(Clone, Copy)]
pub struct RoundCost<'a> {
    pub topology: &'a dyn Topology,
    pub network: &'a Network,
    pub clients: usize,
    pub payload_mb: f64,
    pub local_steps: u64,
    pub throughput: f64,
    pub server_flops: f64,
}

impl RoundCost<'_> {
    pub fn breakdown(&self, rounds: u64) -> Result<WallTimeBreakdown> {
        total_wall_time(rounds, self)
    }
}

/// `T_round = T_L + T_C`, `T_total = R · T_round`; `T_agg` is reported but
/// not added.
pub fn total_wall_time(rounds: u64, cost: &RoundCost<'_>) -> Result<WallTimeBreakdown> {
    if rounds < 1 {
        return Err(Error::Config("total wall time needs at least one round".into()));
    }
    let t_local = local_time(cost.local_steps, cost.throughput)?;
    let t_comm = cost
        .topology
        .comm_time(cost.clients, cost.payload_mb, cost.network)?;
    let t_agg = agg_time(cost.clients, cost.payload_mb, cost.server_flops)?;
    let t_round = t_local + t_comm;
    let mb = cost.topology.megabytes_per_round(cost.clients, cost.payload_mb);
    Ok(WallTimeBreakdown {
        t_local,
        t_comm,
        t_agg,
        t_round,
        t_total: rounds as f64 * t_round,
        mb_per_round: mb,
        total_mb: rounds as f64 * mb,
    })
}

/// Counts synchronization events of a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncCounter {
    pub events: u64,
    pub steps: u64,
}

impl SyncCounter {
    pub fn record_steps(&mut self, steps: u64) {
        self.steps += steps;
    }

    pub fn record_sync(&mut self) {
        self.events += 1;
    }

    /// Data-parallel cadence: one gradient all-reduce per step.
    pub fn data_parallel(total_steps: u64) -> Self {
        let mut c = Self::default();
        for _ in 0..total_steps {
            c.record_steps(1);
            c.record_sync();
        }
        c
    }

    /// Federated cadence: one model exchange after every `local_steps`
    /// (the last round may be shorter).
    pub fn federated(total_steps: u64, local_steps: u64) -> Result<Self> {
        if local_steps == 0 {
            return Err(Error::Config("local steps must be at least 1".into()));
        }
        let mut c = Self::default();
        let mut done = 0;
        while done < total_steps {
            let chunk = local_steps.min(total_steps - done);
            c.record_steps(chunk);
            c.record_sync();
            done += chunk;
        }
        Ok(c)
    }
}

/// DDP sync events over federated sync events at equal total steps:
/// `T / ⌈T/τ⌉`.
pub fn comm_reduction_ratio(total_steps: u64, local_steps: u64) -> Result<f64> {
    if local_steps == 0 || total_steps == 0 {
        return Err(Error::Config("ratio needs positive step counts".into()));
    }
    let ddp = SyncCounter::data_parallel(total_steps);
    let fed = SyncCounter::federated(total_steps, local_steps)?;
    Ok(ddp.events as f64 / fed.events as f64)
}
