//! Deterministic multi-source telemetry generator with fault injection.
//!
//! A seeded run produces byte-identical traces, logs, KPIs and ground-truth
//! labels for a layered service DAG. Requests walk the call graph from an
//! entry service; invocation latency composes additively (own compute plus
//! downstream subtree time) with lognormal noise, so a delay injected deep
//! in a chain inflates every caller above it while services off the chain
//! stay untouched.
//!
//! Fault behaviors:
//! - `network_delay` on s: every invocation into s gains `delay_ms`.
//! - `packet_loss` on s: invocations into s drop with `drop_prob`; dropped
//!   calls record `status=dropped` with a timeout-shaped duration and
//!   suppress the whole downstream subtree, including completion logs.
//! - `cpu_exhaustion` on s: the three CPU indicators rise by `cpu_delta`
//!   with per-second jitter; latency and logs stay at baseline.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::telemetry::{
    FaultLabel, FaultType, KpiRow, LogLine, TraceRecord, TraceStatus, WindowConfig,
};

/// Per-service log template: a pattern whose `{}` slots are filled with
/// generated values, and a base Poisson emission rate per second. A rate of
/// zero marks the completion template, emitted once per finished request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTemplate {
    pub pattern: String,
    pub rate_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub base_latency_ms: f64,
    pub base_cpu: f64,
    pub base_mem: f64,
    pub req_bytes: f64,
    pub log_templates: Vec<LogTemplate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallEdge {
    pub caller: usize,
    pub callee: usize,
    pub prob: f64,
}

/// Layered call DAG rooted at the entry services.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub services: Vec<ServiceSpec>,
    pub edges: Vec<CallEdge>,
    pub entries: Vec<usize>,
}

impl Topology {
    pub fn service_names(&self) -> Vec<String> {
        self.services.iter().map(|s| s.name.clone()).collect()
    }

    /// Edges are layer-ordered by construction; a cycle would need an edge
    /// into an earlier layer, so checking caller < callee suffices for the
    /// generated topologies. Kept as a runtime assertion for hand-built ones.
    pub fn is_acyclic(&self) -> bool {
        // Kahn over the caller→callee digraph
        let m = self.services.len();
        let mut indeg = vec![0usize; m];
        for e in &self.edges {
            indeg[e.callee] += 1;
        }
        let mut stack: Vec<usize> = (0..m).filter(|i| indeg[*i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = stack.pop() {
            seen += 1;
            for e in self.edges.iter().filter(|e| e.caller == v) {
                indeg[e.callee] -= 1;
                if indeg[e.callee] == 0 {
                    stack.push(e.callee);
                }
            }
        }
        seen == m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub services: usize,
    pub entries: usize,
    pub max_fanout: usize,
    pub edge_prob_min: f64,
    pub edge_prob_max: f64,
    pub base_latency_ms_min: f64,
    pub base_latency_ms_max: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            services: 10,
            entries: 1,
            max_fanout: 3,
            edge_prob_min: 0.55,
            edge_prob_max: 0.9,
            base_latency_ms_min: 5.0,
            base_latency_ms_max: 25.0,
        }
    }
}

const BACKGROUND_TEMPLATES: [(&str, f64); 4] = [
    ("Health check status ok", 0.10),
    ("Connected to peer {}", 0.05),
    ("Cache refresh took {} ms", 0.06),
    ("Scheduled maintenance scan finished", 0.03),
];

pub const COMPLETION_PATTERN: &str = "Completed request {} in {} ms";

/// Letters-only alias for a service index, used inside log text. Digit-free
/// on purpose: template mining masks digit-bearing tokens, and the
/// per-service heartbeat should mine into a distinct template per service.
pub fn service_alias(i: usize) -> String {
    let mut n = i;
    let mut s = String::new();
    loop {
        s.insert(0, (b'a' + (n % 26) as u8) as char);
        n /= 26;
        if n == 0 {
            return s;
        }
        n -= 1;
    }
}

/// Deterministically generates a connected DAG of `cfg.services` services.
/// Entry services form layer 0; every later service gets at least one
/// caller from an earlier layer.
pub fn generate_topology(seed: u64, cfg: &TopologyConfig) -> Result<Topology> {
    if cfg.services < 2 {
        return Err(Error::config("topology needs at least 2 services"));
    }
    if cfg.entries == 0 || cfg.entries >= cfg.services {
        return Err(Error::config("entries must be in [1, services)"));
    }
    if cfg.max_fanout == 0 {
        return Err(Error::config(
            "max_fanout of 0 cannot connect any non-entry service",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_706f);
    let m = cfg.services;

    // baselines are spaced per service with a little jitter: distinct
    // operating points give every node a recognizable signature in KPIs,
    // latency and log rates
    let lat_span = (cfg.base_latency_ms_max - cfg.base_latency_ms_min).max(0.1);
    let services: Vec<ServiceSpec> = (0..m)
        .map(|i| {
            let frac = i as f64 / m as f64;
            let mut templates = vec![
                LogTemplate {
                    pattern: COMPLETION_PATTERN.to_string(),
                    rate_per_sec: 0.0,
                },
                LogTemplate {
                    pattern: format!("Heartbeat from {} ok", service_alias(i)),
                    rate_per_sec: 0.5,
                },
            ];
            for (pattern, rate) in BACKGROUND_TEMPLATES {
                templates.push(LogTemplate {
                    pattern: pattern.to_string(),
                    rate_per_sec: rate * rng.random_range(0.5..1.5),
                });
            }
            ServiceSpec {
                name: format!("svc{i:02}"),
                base_latency_ms: cfg.base_latency_ms_min
                    + frac * lat_span
                    + rng.random_range(0.0..lat_span / m as f64),
                base_cpu: 0.05 + 0.15 * frac + rng.random_range(0.0..0.01),
                base_mem: 1.5e8 + 6.0e8 * frac + rng.random_range(0.0..2e7),
                req_bytes: 500.0 + 1400.0 * frac + rng.random_range(0.0..60.0),
                log_templates: templates,
            }
        })
        .collect();

    // layer assignment: entries at 0, the rest spread over later layers
    let depth = ((m - cfg.entries) as f64).sqrt().ceil() as usize + 1;
    let mut layer = vec![0usize; m];
    for (i, l) in layer.iter_mut().enumerate().skip(cfg.entries) {
        *l = 1 + (i - cfg.entries) % depth;
    }

    let mut edges: Vec<CallEdge> = Vec::new();
    for callee in cfg.entries..m {
        let pool: Vec<usize> = (0..m).filter(|i| layer[*i] < layer[callee]).collect();
        debug_assert!(!pool.is_empty());
        let caller = pool[rng.random_range(0..pool.len())];
        edges.push(CallEdge {
            caller,
            callee,
            prob: rng.random_range(cfg.edge_prob_min..cfg.edge_prob_max),
        });
    }
    // extra fan-out up to the cap
    for caller in 0..m {
        let out = edges.iter().filter(|e| e.caller == caller).count();
        let budget = cfg.max_fanout.saturating_sub(out);
        for _ in 0..budget {
            let pool: Vec<usize> = (0..m)
                .filter(|i| {
                    layer[*i] > layer[caller]
                        && !edges.iter().any(|e| e.caller == caller && e.callee == *i)
                })
                .collect();
            if pool.is_empty() {
                break;
            }
            if rng.random_range(0.0..1.0) < 0.5 {
                let callee = pool[rng.random_range(0..pool.len())];
                edges.push(CallEdge {
                    caller,
                    callee,
                    prob: rng.random_range(cfg.edge_prob_min..cfg.edge_prob_max),
                });
            }
        }
    }
    edges.sort_by_key(|e| (e.caller, e.callee));

    let topology = Topology {
        services,
        edges,
        entries: (0..cfg.entries).collect(),
    };
    debug_assert!(topology.is_acyclic());
    Ok(topology)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultMagnitudes {
    pub cpu_delta: f64,
    pub delay_ms: f64,
    pub drop_prob: f64,
    pub timeout_ms: f64,
}

impl Default for FaultMagnitudes {
    fn default() -> Self {
        FaultMagnitudes {
            cpu_delta: 0.5,
            delay_ms: 500.0,
            drop_prob: 0.8,
            timeout_ms: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledFault {
    pub service: usize,
    pub fault_type: FaultType,
    pub start_us: u64,
    pub end_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub faults: Vec<ScheduledFault>,
    pub magnitudes: FaultMagnitudes,
}

impl FaultSchedule {
    pub fn validate(&self, service_count: usize) -> Result<()> {
        let m = &self.magnitudes;
        if !(0.0..=1.0).contains(&m.drop_prob) {
            return Err(Error::config("drop_prob must be in [0,1]"));
        }
        if m.cpu_delta < 0.0 || m.delay_ms < 0.0 || m.timeout_ms < 0.0 {
            return Err(Error::config("fault magnitudes must be >= 0"));
        }
        for f in &self.faults {
            if f.service >= service_count {
                return Err(Error::data(format!(
                    "schedule references unknown service index {}",
                    f.service
                )));
            }
            if f.start_us >= f.end_us {
                return Err(Error::data("fault interval must have start < end"));
            }
        }
        for (i, a) in self.faults.iter().enumerate() {
            for b in self.faults.iter().skip(i + 1) {
                if a.service == b.service && a.start_us < b.end_us && b.start_us < a.end_us {
                    return Err(Error::data(format!(
                        "overlapping faults on service {}",
                        a.service
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_labels(&self, topology: &Topology) -> Vec<FaultLabel> {
        self.faults
            .iter()
            .map(|f| FaultLabel {
                start_us: f.start_us,
                end_us: f.end_us,
                fault_type: f.fault_type,
                service: topology.services[f.service].name.clone(),
            })
            .collect()
    }

    fn active(&self, service: usize, fault_type: FaultType, t_us: u64) -> bool {
        self.faults.iter().any(|f| {
            f.service == service
                && f.fault_type == fault_type
                && t_us >= f.start_us
                && t_us < f.end_us
        })
    }
}

/// Injects each (service, fault type) pair exactly once: after a warmup, a
/// repeating cycle of `fault_windows` faulty plus `gap_windows` quiet
/// windows, type rotation arranged so any contiguous split sees every type.
pub fn round_robin_schedule(
    service_count: usize,
    window: &WindowConfig,
    warmup_windows: usize,
    fault_windows: usize,
    gap_windows: usize,
    magnitudes: FaultMagnitudes,
) -> FaultSchedule {
    let w_us = window.window_us();
    let cycle = fault_windows + gap_windows;
    // rotation stride coprime with 3 so the three types interleave
    let k = if (service_count + 1) % 3 != 0 {
        service_count + 1
    } else {
        service_count + 2
    };
    let faults = (0..3 * service_count)
        .map(|i| {
            let block = i / service_count;
            let service = i % service_count;
            let fault_type = FaultType::ALL[(service + block * k) % 3];
            let start = (warmup_windows + i * cycle) as u64 * w_us;
            ScheduledFault {
                service,
                fault_type,
                start_us: start,
                end_us: start + fault_windows as u64 * w_us,
            }
        })
        .collect();
    FaultSchedule {
        faults,
        magnitudes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration_s: u64,
    pub request_rate: f64,
    pub latency_sigma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration_s: 600,
            request_rate: 2.0,
            latency_sigma: 0.25,
        }
    }
}

/// Receives generated records in deterministic order. Traces arrive grouped
/// by request, logs and KPIs sorted by timestamp.
pub trait TelemetrySink {
    fn trace(&mut self, record: &TraceRecord) -> Result<()>;
    fn log(&mut self, line: &LogLine) -> Result<()>;
    fn kpi(&mut self, row: &KpiRow) -> Result<()>;
}

/// In-memory output, mostly for tests and small runs.
#[derive(Debug, Default)]
pub struct SimOutput {
    pub traces: Vec<TraceRecord>,
    pub logs: Vec<LogLine>,
    pub kpis: Vec<KpiRow>,
    pub labels: Vec<FaultLabel>,
}

impl TelemetrySink for SimOutput {
    fn trace(&mut self, record: &TraceRecord) -> Result<()> {
        self.traces.push(record.clone());
        Ok(())
    }
    fn log(&mut self, line: &LogLine) -> Result<()> {
        self.logs.push(line.clone());
        Ok(())
    }
    fn kpi(&mut self, row: &KpiRow) -> Result<()> {
        self.kpis.push(row.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SimStats {
    pub requests: u64,
    pub invocations: u64,
    pub dropped: u64,
    pub log_lines: u64,
    pub kpi_rows: u64,
}

struct Walker<'a> {
    topology: &'a Topology,
    schedule: &'a FaultSchedule,
    rng: ChaCha8Rng,
    lognorm: LogNormal<f64>,
    out_edges: Vec<Vec<CallEdge>>,
    // (service, completion ts, duration_ms) of finished work
    completions: Vec<(usize, u64, f64)>,
    completed_per_sec: Vec<Vec<u32>>,
    span_counter: u64,
    stats: SimStats,
}

impl<'a> Walker<'a> {
    /// Simulates one invocation into `svc` starting at `t_us` and returns
    /// its duration in µs. Emits the trace record and queues completions.
    fn invoke(
        &mut self,
        trace_id: &str,
        parent_span: Option<String>,
        caller: usize,
        svc: usize,
        t_us: u64,
        sink: &mut impl TelemetrySink,
    ) -> Result<u64> {
        let span_id = format!("s{:06x}", self.span_counter);
        self.span_counter += 1;
        self.stats.invocations += 1;
        let mags = &self.schedule.magnitudes;

        let dropped = self.schedule.active(svc, FaultType::PacketLoss, t_us)
            && self.rng.random_range(0.0..1.0) < mags.drop_prob;

        let duration_us = if dropped {
            self.stats.dropped += 1;
            let jitter = self.rng.random_range(0.95..1.05);
            (mags.timeout_ms * 1000.0 * jitter) as u64
        } else {
            let delay_us = if self.schedule.active(svc, FaultType::NetworkDelay, t_us) {
                (mags.delay_ms * 1000.0) as u64
            } else {
                0
            };
            let own_ms =
                self.topology.services[svc].base_latency_ms * self.lognorm.sample(&mut self.rng);
            let mut cursor = t_us + delay_us + (own_ms * 500.0) as u64; // half of own compute before fan-out
            for edge in self.out_edges[svc].clone() {
                if self.rng.random_range(0.0..1.0) < edge.prob {
                    let child =
                        self.invoke(trace_id, Some(span_id.clone()), svc, edge.callee, cursor, sink)?;
                    cursor += child;
                }
            }
            let end = cursor + (own_ms * 500.0) as u64;
            let duration = end - t_us;
            let sec = (end / 1_000_000) as usize;
            if sec < self.completed_per_sec[svc].len() {
                self.completed_per_sec[svc][sec] += 1;
                self.completions.push((svc, end, duration as f64 / 1000.0));
            }
            duration
        };

        sink.trace(&TraceRecord {
            trace_id: trace_id.to_string(),
            span_id,
            parent_span_id: parent_span,
            caller: self.topology.services[caller].name.clone(),
            callee: self.topology.services[svc].name.clone(),
            start_us: t_us,
            duration_us,
            status: if dropped {
                TraceStatus::Dropped
            } else {
                TraceStatus::Ok
            },
        })?;
        Ok(duration_us)
    }
}

/// Runs the simulation, pushing records into `sink`. Fully deterministic
/// for a fixed (topology, schedule, config, seed).
pub fn simulate_into(
    topology: &Topology,
    schedule: &FaultSchedule,
    cfg: &SimConfig,
    seed: u64,
    sink: &mut impl TelemetrySink,
) -> Result<SimStats> {
    if cfg.duration_s == 0 || cfg.request_rate <= 0.0 {
        return Err(Error::config("simulate needs duration > 0 and rate > 0"));
    }
    schedule.validate(topology.services.len())?;
    let m = topology.services.len();
    let secs = cfg.duration_s as usize;

    let mut out_edges: Vec<Vec<CallEdge>> = vec![Vec::new(); m];
    for e in &topology.edges {
        out_edges[e.caller].push(*e);
    }

    // phase 1: requests and traces
    let mut walker = Walker {
        topology,
        schedule,

        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7265_7175),
        lognorm: LogNormal::new(0.0, cfg.latency_sigma)
            .map_err(|e| Error::config(format!("bad latency sigma: {e}")))?,
        out_edges,
        completions: Vec::new(),
        completed_per_sec: vec![vec![0u32; secs]; m],
        span_counter: 0,
        stats: SimStats::default(),
    };
    let horizon_us = cfg.duration_s * 1_000_000;
    let mut t = 0.0f64;
    let mut req_idx = 0u64;
    let mut arrival_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6172_7269);
    loop {
        t += (1.0 / cfg.request_rate) * arrival_rng.random_range(0.8..1.2);
        let t_us = (t * 1_000_000.0) as u64;
        if t_us >= horizon_us {
            break;
        }
        let entry = topology.entries[(req_idx % topology.entries.len() as u64) as usize];
        let trace_id = format!("t{req_idx:08x}");
        // the user→entry root step is recorded as a self-invocation
        walker.invoke(&trace_id, None, entry, entry, t_us, sink)?;
        walker.stats.requests += 1;
        req_idx += 1;
    }
    let mut stats = walker.stats;

    // phase 2: logs = one completion line per finished unit of work plus
    // Poisson background chatter, merged in timestamp order
    let mut log_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_6773);
    let mut events: Vec<(u64, usize, String)> = Vec::new();
    for (svc, end_us, dur_ms) in &walker.completions {
        let msg = COMPLETION_PATTERN
            .replacen("{}", &format!("{:06x}", end_us % 0xffffff), 1)
            .replacen("{}", &format!("{dur_ms:.0}"), 1);
        events.push((*end_us, *svc, msg));
    }
    for (svc, spec) in topology.services.iter().enumerate() {
        for tpl in &spec.log_templates {
            if tpl.rate_per_sec <= 0.0 {
                continue;
            }
            let pois = Poisson::new(tpl.rate_per_sec)
                .map_err(|e| Error::config(format!("bad log rate: {e}")))?;
            for sec in 0..secs {
                let n = pois.sample(&mut log_rng) as u64;
                for _ in 0..n {
                    let ts = sec as u64 * 1_000_000 + log_rng.random_range(0..1_000_000);
                    let mut msg = tpl.pattern.clone();
                    while msg.contains("{}") {
                        let v: u32 = log_rng.random_range(1..10_000);
                        msg = msg.replacen("{}", &v.to_string(), 1);
                    }
                    events.push((ts, svc, msg));
                }
            }
        }
    }
    events.sort_by(|a, b| (a.0, a.1, &a.2).cmp(&(b.0, b.1, &b.2)));
    for (ts_us, svc, message) in events {
        sink.log(&LogLine {
            ts_us,
            service: topology.services[svc].name.clone(),
            message,
        })?;
        stats.log_lines += 1;
    }

    // phase 3: one KPI row per service per second
    let mut kpi_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b70_6973);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut mem_state: Vec<f64> = topology.services.iter().map(|s| s.base_mem).collect();
    for sec in 0..secs {
        let t_us = sec as u64 * 1_000_000;
        for (svc, spec) in topology.services.iter().enumerate() {
            let completed = walker.completed_per_sec[svc][sec] as f64;
            let mut cpu_user = spec.base_cpu * (1.0 + 0.10 * completed)
                + 0.01 * noise.sample(&mut kpi_rng);
            if schedule.active(svc, FaultType::CpuExhaustion, t_us) {
                let jitter = 1.0 + 0.3 * kpi_rng.random_range(-1.0..1.0);
                cpu_user += schedule.magnitudes.cpu_delta * jitter;
            }
            cpu_user = cpu_user.max(0.0);
            let cpu_system = (0.35 * cpu_user + 0.005 * noise.sample(&mut kpi_rng)).max(0.0);
            let cpu_total = cpu_user + cpu_system;

            // mean-reverting wander: stationary, so memory level carries
            // service identity but no usable wall-clock signal
            mem_state[svc] += 0.05 * (spec.base_mem - mem_state[svc])
                + spec.base_mem * 0.001 * noise.sample(&mut kpi_rng);
            let mem_usage = mem_state[svc].max(0.0);
            let mem_working_set =
                (0.7 * mem_usage + spec.base_mem * 0.0005 * noise.sample(&mut kpi_rng)).max(0.0);

            let rx_bytes =
                (completed * spec.req_bytes + 30.0 * noise.sample(&mut kpi_rng).abs()).max(0.0);
            let tx_bytes = (0.8 * rx_bytes + 20.0 * noise.sample(&mut kpi_rng).abs()).max(0.0);

            sink.kpi(&KpiRow {
                ts_s: sec as u64,
                service: spec.name.clone(),
                cpu_system,
                cpu_total,
                cpu_user,
                mem_usage,
                mem_working_set,
                rx_bytes,
                tx_bytes,
            })?;
            stats.kpi_rows += 1;
        }
    }

    Ok(stats)
}

/// In-memory convenience wrapper around [`simulate_into`].
pub fn simulate(
    topology: &Topology,
    schedule: &FaultSchedule,
    cfg: &SimConfig,
    seed: u64,
) -> Result<SimOutput> {
    let mut out = SimOutput::default();
    simulate_into(topology, schedule, cfg, seed, &mut out)?;
    out.labels = schedule.to_labels(topology);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_topology(seed: u64) -> Topology {
        generate_topology(
            seed,
            &TopologyConfig {
                services: 6,
                ..TopologyConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn topology_is_deterministic_and_acyclic() {
        let a = generate_topology(42, &TopologyConfig::default()).unwrap();
        let b = generate_topology(42, &TopologyConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_acyclic());
        let c = generate_topology(43, &TopologyConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn minimal_two_service_topology() {
        let t = generate_topology(
            1,
            &TopologyConfig {
                services: 2,
                max_fanout: 1,
                ..TopologyConfig::default()
            },
        )
        .unwrap();
        assert_eq!(t.edges.len(), 1);
        assert_eq!(t.edges[0].caller, 0);
        assert_eq!(t.edges[0].callee, 1);
    }

    #[test]
    fn every_non_entry_service_is_reachable() {
        let t = small_topology(7);
        let mut reach = vec![false; t.services.len()];
        for &e in &t.entries {
            reach[e] = true;
        }
        // edges are layer-ordered, one forward sweep suffices
        for _ in 0..t.services.len() {
            for e in &t.edges {
                if reach[e.caller] {
                    reach[e.callee] = true;
                }
            }
        }
        assert!(reach.iter().all(|r| *r));
    }

    fn quick_sim(
        schedule: &FaultSchedule,
        duration_s: u64,
        seed: u64,
    ) -> (Topology, SimOutput) {
        let topology = small_topology(7);
        let cfg = SimConfig {
            duration_s,
            request_rate: 4.0,
            latency_sigma: 0.25,
        };
        let out = simulate(&topology, schedule, &cfg, seed).unwrap();
        (topology, out)
    }

    fn empty_schedule() -> FaultSchedule {
        FaultSchedule {
            faults: vec![],
            magnitudes: FaultMagnitudes::default(),
        }
    }

    #[test]
    fn identical_seeds_give_identical_output() {
        let (_, a) = quick_sim(&empty_schedule(), 30, 5);
        let (_, b) = quick_sim(&empty_schedule(), 30, 5);
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.kpis, b.kpis);
        let (_, c) = quick_sim(&empty_schedule(), 30, 6);
        assert_ne!(a.traces, c.traces);
    }

    #[test]
    fn kpi_conservation_one_row_per_service_second() {
        let (topology, out) = quick_sim(&empty_schedule(), 25, 9);
        assert_eq!(out.kpis.len(), 25 * topology.services.len());
        for sec in 0..25u64 {
            for spec in &topology.services {
                assert_eq!(
                    out.kpis
                        .iter()
                        .filter(|k| k.ts_s == sec && k.service == spec.name)
                        .count(),
                    1
                );
            }
        }
    }

    #[test]
    fn logs_are_sorted_by_timestamp() {
        let (_, out) = quick_sim(&empty_schedule(), 30, 11);
        assert!(out.logs.windows(2).all(|w| w[0].ts_us <= w[1].ts_us));
        assert!(!out.logs.is_empty());
    }

    fn mean_latency_into(
        out: &SimOutput,
        svc: &str,
        from_us: u64,
        to_us: u64,
        statuses: bool,
    ) -> f64 {
        let durs: Vec<f64> = out
            .traces
            .iter()
            .filter(|t| {
                t.callee == svc
                    && t.start_us >= from_us
                    && t.start_us < to_us
                    && (statuses || t.status == TraceStatus::Ok)
            })
            .map(|t| t.duration_us as f64 / 1000.0)
            .collect();
        durs.iter().sum::<f64>() / durs.len().max(1) as f64
    }

    #[test]
    fn network_delay_inflates_callee_and_callers() {
        let topology = small_topology(7);
        // pick a mid-chain service: callee of someone, caller of someone
        let victim = topology
            .edges
            .iter()
            .find_map(|e| {
                let has_out = topology.edges.iter().any(|f| f.caller == e.callee);
                has_out.then_some(e.callee)
            })
            .expect("mid-chain service exists");
        let schedule = FaultSchedule {
            faults: vec![ScheduledFault {
                service: victim,
                fault_type: FaultType::NetworkDelay,
                start_us: 60_000_000,
                end_us: 120_000_000,
            }],
            magnitudes: FaultMagnitudes::default(),
        };
        let cfg = SimConfig {
            duration_s: 120,
            request_rate: 4.0,
            latency_sigma: 0.25,
        };
        let out = simulate(&topology, &schedule, &cfg, 13).unwrap();
        let name = &topology.services[victim].name;
        let base = mean_latency_into(&out, name, 0, 60_000_000, true);
        let faulted = mean_latency_into(&out, name, 60_000_000, 120_000_000, true);
        assert!(
            faulted >= 5.0 * base,
            "delay should dominate baseline: base {base} ms vs faulted {faulted} ms"
        );
        // the caller of the victim inflates too (propagation up the chain)
        let caller = topology
            .edges
            .iter()
            .find(|e| e.callee == victim)
            .map(|e| e.caller)
            .unwrap();
        let cname = &topology.services[caller].name;
        let cbase = mean_latency_into(&out, cname, 0, 60_000_000, true);
        let cfaulted = mean_latency_into(&out, cname, 60_000_000, 120_000_000, true);
        assert!(
            cfaulted > cbase + 0.3 * schedule.magnitudes.delay_ms,
            "caller {cname}: {cbase} → {cfaulted}"
        );
    }

    #[test]
    fn cpu_fault_moves_kpis_not_latency() {
        let topology = small_topology(7);
        let victim = topology.edges[0].callee;
        let schedule = FaultSchedule {
            faults: vec![ScheduledFault {
                service: victim,
                fault_type: FaultType::CpuExhaustion,
                start_us: 60_000_000,
                end_us: 120_000_000,
            }],
            magnitudes: FaultMagnitudes::default(),
        };
        let cfg = SimConfig {
            duration_s: 120,
            request_rate: 4.0,
            latency_sigma: 0.25,
        };
        let out = simulate(&topology, &schedule, &cfg, 17).unwrap();
        let name = &topology.services[victim].name;

        let cpu: Vec<f64> = out
            .kpis
            .iter()
            .filter(|k| k.service == *name)
            .map(|k| k.cpu_total)
            .collect();
        let (base, faulted): (Vec<_>, Vec<_>) =
            cpu.iter().enumerate().partition(|(sec, _)| *sec < 60);
        let mean = |v: &[(usize, &f64)]| v.iter().map(|(_, x)| **x).sum::<f64>() / v.len() as f64;
        let mb = mean(&base);
        let mf = mean(&faulted);
        let sd = (base.iter().map(|(_, x)| (**x - mb).powi(2)).sum::<f64>()
            / base.len() as f64)
            .sqrt();
        assert!(
            mf > mb + 3.0 * sd,
            "cpu_total should rise: base {mb:.3}±{sd:.3} vs faulted {mf:.3}"
        );

        // latency stays within 3σ of baseline
        let durs = |lo: u64, hi: u64| -> Vec<f64> {
            out.traces
                .iter()
                .filter(|t| t.callee == *name && t.start_us >= lo && t.start_us < hi)
                .map(|t| t.duration_us as f64 / 1000.0)
                .collect()
        };
        let b = durs(0, 60_000_000);
        let f = durs(60_000_000, 120_000_000);
        let bm = b.iter().sum::<f64>() / b.len() as f64;
        let bs = (b.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / b.len() as f64).sqrt();
        let fm = f.iter().sum::<f64>() / f.len() as f64;
        assert!(
            (fm - bm).abs() <= 3.0 * bs,
            "latency should stay near baseline: {bm:.2}±{bs:.2} vs {fm:.2}"
        );
    }

    #[test]
    fn packet_loss_drops_completion_events() {
        let topology = small_topology(7);
        let victim = topology.edges[0].callee;
        let schedule = FaultSchedule {
            faults: vec![ScheduledFault {
                service: victim,
                fault_type: FaultType::PacketLoss,
                start_us: 60_000_000,
                end_us: 120_000_000,
            }],
            magnitudes: FaultMagnitudes::default(),
        };
        let cfg = SimConfig {
            duration_s: 120,
            request_rate: 4.0,
            latency_sigma: 0.25,
        };
        let out = simulate(&topology, &schedule, &cfg, 19).unwrap();
        let name = &topology.services[victim].name;
        let completions = |lo: u64, hi: u64| {
            out.logs
                .iter()
                .filter(|l| {
                    l.service == *name
                        && l.ts_us >= lo
                        && l.ts_us < hi
                        && l.message.starts_with("Completed request")
                })
                .count() as f64
        };
        let base_rate = completions(0, 60_000_000) / 60.0;
        let fault_rate = completions(60_000_000, 120_000_000) / 60.0;
        assert!(
            fault_rate < 0.5 * base_rate,
            "completions should drop: {base_rate:.3}/s → {fault_rate:.3}/s"
        );
        // dropped invocations are visible in traces
        assert!(out
            .traces
            .iter()
            .any(|t| t.callee == *name && t.status == TraceStatus::Dropped));
    }

    #[test]
    fn fault_locality_leaves_off_chain_services_unshifted() {
        let topology = small_topology(7);
        let m = topology.services.len();
        let victim = topology.edges.last().unwrap().callee;
        // ancestors of the victim are on the affected chain
        let mut on_chain = vec![false; m];
        on_chain[victim] = true;
        for _ in 0..m {
            for e in &topology.edges {
                if on_chain[e.callee] {
                    on_chain[e.caller] = true;
                }
            }
        }
        let schedule = FaultSchedule {
            faults: vec![ScheduledFault {
                service: victim,
                fault_type: FaultType::NetworkDelay,
                start_us: 90_000_000,
                end_us: 180_000_000,
            }],
            magnitudes: FaultMagnitudes::default(),
        };
        let cfg = SimConfig {
            duration_s: 180,
            request_rate: 4.0,
            latency_sigma: 0.25,
        };
        let out = simulate(&topology, &schedule, &cfg, 23).unwrap();
        for (svc, spec) in topology.services.iter().enumerate() {
            if on_chain[svc] {
                continue;
            }
            let collect = |lo: u64, hi: u64| -> Vec<f64> {
                out.traces
                    .iter()
                    .filter(|t| t.callee == spec.name && t.start_us >= lo && t.start_us < hi)
                    .map(|t| t.duration_us as f64 / 1000.0)
                    .collect()
            };
            let b = collect(0, 90_000_000);
            let f = collect(90_000_000, 180_000_000);
            if b.len() < 30 || f.len() < 30 {
                continue;
            }
            let bm = b.iter().sum::<f64>() / b.len() as f64;
            let fm = f.iter().sum::<f64>() / f.len() as f64;
            let bv = b.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / b.len() as f64;
            let fv = f.iter().map(|x| (x - fm).powi(2)).sum::<f64>() / f.len() as f64;
            // two-sample z on means
            let z = (fm - bm).abs() / (bv / b.len() as f64 + fv / f.len() as f64).sqrt();
            assert!(z < 4.0, "{}: off-chain latency shifted, z = {z:.2}", spec.name);
        }
    }

    #[test]
    fn unknown_service_in_schedule_is_an_error() {
        let topology = small_topology(7);
        let schedule = FaultSchedule {
            faults: vec![ScheduledFault {
                service: 99,
                fault_type: FaultType::CpuExhaustion,
                start_us: 0,
                end_us: 1,
            }],
            magnitudes: FaultMagnitudes::default(),
        };
        assert!(simulate(&topology, &schedule, &SimConfig::default(), 1).is_err());
    }

    #[test]
    fn overlapping_same_service_faults_rejected() {
        let schedule = FaultSchedule {
            faults: vec![
                ScheduledFault {
                    service: 0,
                    fault_type: FaultType::CpuExhaustion,
                    start_us: 0,
                    end_us: 10,
                },
                ScheduledFault {
                    service: 0,
                    fault_type: FaultType::NetworkDelay,
                    start_us: 5,
                    end_us: 15,
                },
            ],
            magnitudes: FaultMagnitudes::default(),
        };
        assert!(schedule.validate(3).is_err());
    }

    #[test]
    fn round_robin_covers_every_pair_once() {
        let w = WindowConfig::default();
        let s = round_robin_schedule(10, &w, 300, 30, 10, FaultMagnitudes::default());
        assert_eq!(s.faults.len(), 30);
        let mut seen = std::collections::HashSet::new();
        for f in &s.faults {
            assert!(seen.insert((f.service, f.fault_type)), "duplicate pair");
        }
        s.validate(10).unwrap();
        // faults are window-aligned and ordered
        for f in &s.faults {
            assert_eq!((f.end_us - f.start_us) / w.window_us(), 30);
            assert_eq!(f.start_us % w.window_us(), 0);
        }
    }
}
