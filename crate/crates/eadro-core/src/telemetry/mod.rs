//! Domain types for the three telemetry sources, window partitioning,
//! dependency-graph extraction and sample assembly.
//!
//! Raw records arrive as NDJSON (one JSON object per line); see the file
//! constants for the expected names. Timestamps are integer microseconds
//! except KPI rows, which are sampled on a 1-second cadence.

mod dataset;

pub use dataset::{load_dataset, persist_dataset, Dataset};

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACES_FILE: &str = "traces.ndjson";
pub const LOGS_FILE: &str = "logs.ndjson";
pub const KPIS_FILE: &str = "kpis.ndjson";
pub const LABELS_FILE: &str = "labels.ndjson";

/// Number of KPI indicators per service.
pub const KPI_COUNT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceStatus {
    Ok,
    Error,
    Dropped,
}

/// One caller→callee invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub span_id: String,
    pub parent_span_id: Option<String>,
    pub caller: String,
    pub callee: String,
    pub start_us: u64,
    pub duration_us: u64,
    pub status: TraceStatus,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.caller.is_empty() || self.callee.is_empty() {
            return Err(Error::data("trace record with empty caller or callee"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub ts_us: u64,
    pub service: String,
    pub message: String,
}

/// Per-second resource/performance indicators of one service, in the fixed
/// order cpu_system, cpu_total, cpu_user, mem_usage, mem_working_set,
/// rx_bytes, tx_bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiRow {
    pub ts_s: u64,
    pub service: String,
    pub cpu_system: f64,
    pub cpu_total: f64,
    pub cpu_user: f64,
    pub mem_usage: f64,
    pub mem_working_set: f64,
    pub rx_bytes: f64,
    pub tx_bytes: f64,
}

impl KpiRow {
    pub fn values(&self) -> [f64; KPI_COUNT] {
        [
            self.cpu_system,
            self.cpu_total,
            self.cpu_user,
            self.mem_usage,
            self.mem_working_set,
            self.rx_bytes,
            self.tx_bytes,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let vals = self.values();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite KPI value for {} at {}",
                self.service, self.ts_s
            )));
        }
        if self.rx_bytes < 0.0 || self.tx_bytes < 0.0 {
            return Err(Error::data("negative byte rate in KPI row"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultType {
    CpuExhaustion,
    NetworkDelay,
    PacketLoss,
}

impl FaultType {
    pub const ALL: [FaultType; 3] = [
        FaultType::CpuExhaustion,
        FaultType::NetworkDelay,
        FaultType::PacketLoss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FaultType::CpuExhaustion => "cpu_exhaustion",
            FaultType::NetworkDelay => "network_delay",
            FaultType::PacketLoss => "packet_loss",
        }
    }
}

/// Ground-truth injection interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultLabel {
    pub start_us: u64,
    pub end_us: u64,
    pub fault_type: FaultType,
    pub service: String,
}

impl FaultLabel {
    pub fn validate(&self) -> Result<()> {
        if self.start_us >= self.end_us {
            return Err(Error::data(format!(
                "fault label on {} has start {} >= end {}",
                self.service, self.start_us, self.end_us
            )));
        }
        Ok(())
    }
}

/// One observation window, fully featurized. Float arrays are row-major:
/// `log_intensity[m*l + e]`, `kpi[(m*KPI_COUNT + k)*t + slot]` (channel-major
/// per service, ready for convolution), `latency[m*t + slot]` in
/// milliseconds with empty slots zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window_index: u32,
    pub log_intensity: Vec<f32>,
    pub kpi: Vec<f32>,
    pub latency: Vec<f32>,
    pub label_y: bool,
    pub label_culprit: Option<u32>,
}

/// Directed service graph: the edge `(a, b)` means "b invoked a", so the
/// in-neighbors of a node are its callees. Self-loops are always added so
/// every node aggregates at least itself.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    pub services: Vec<String>,
    pub edges: BTreeSet<(u32, u32)>,
    pub self_loops: bool,
}

impl DependencyGraph {
    pub fn service_count(&self) -> usize {
        self.services.len()
    }

    pub fn index_of(&self, service: &str) -> Option<usize> {
        self.services.iter().position(|s| s == service)
    }

    /// Row-major M×M adjacency mask: `mask[a*M + b]` is true when `b` is an
    /// in-neighbor of `a` (i.e. a invoked b, or a == b).
    pub fn neighbor_mask(&self) -> Vec<bool> {
        let m = self.services.len();
        let mut mask = vec![false; m * m];
        for a in 0..m {
            mask[a * m + a] = true;
        }
        for (x, y) in &self.edges {
            // (x, y): y invoked x ⇒ x is an in-neighbor of y
            mask[(*y as usize) * m + *x as usize] = true;
        }
        mask
    }

    /// Plain-text persistence: `service <name>` lines in index order, then
    /// `edge <a> <b>` lines (indices).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for s in &self.services {
                writeln!(w, "service {s}")?;
            }
            for (a, b) in &self.edges {
                writeln!(w, "edge {a} {b}")?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut services = Vec::new();
        let mut edges = BTreeSet::new();
        for line in r.lines() {
            let line = line?;
            if let Some(name) = line.strip_prefix("service ") {
                services.push(name.to_string());
            } else if let Some(rest) = line.strip_prefix("edge ") {
                let mut it = rest.split_whitespace();
                let a: u32 = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::data("bad graph edge line"))?;
                let b: u32 = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::data("bad graph edge line"))?;
                if a as usize >= services.len() || b as usize >= services.len() {
                    return Err(Error::data("graph edge references unknown service index"));
                }
                edges.insert((a, b));
            } else if !line.trim().is_empty() {
                return Err(Error::data(format!("unrecognized graph line: {line}")));
            }
        }
        Ok(DependencyGraph {
            services,
            edges,
            self_loops: true,
        })
    }
}

/// Assigns a timestamp to its half-open window `[t0 + i·W, t0 + (i+1)·W)`.
pub fn window_index(ts_us: u64, t0_us: u64, window_us: u64) -> Result<u64> {
    if window_us == 0 {
        return Err(Error::config("window length must be positive"));
    }
    if ts_us < t0_us {
        return Err(Error::data(format!(
            "timestamp {ts_us} precedes window origin {t0_us}"
        )));
    }
    Ok((ts_us - t0_us) / window_us)
}

/// Groups records into consecutive windows by timestamp. Every record lands
/// in exactly one group; records before `t0_us` are a range error.
pub fn window_partition<R>(
    records: Vec<R>,
    ts_us: impl Fn(&R) -> u64,
    t0_us: u64,
    window_us: u64,
) -> Result<Vec<Vec<R>>> {
    let mut windows: Vec<Vec<R>> = Vec::new();
    for r in records {
        let idx = window_index(ts_us(&r), t0_us, window_us)? as usize;
        if idx >= windows.len() {
            windows.resize_with(idx + 1, Vec::new);
        }
        windows[idx].push(r);
    }
    Ok(windows)
}

/// Incremental dependency-graph construction over streamed invocations.
pub struct GraphBuilder {
    services: Vec<String>,
    index: HashMap<String, u32>,
    edges: BTreeSet<(u32, u32)>,
}

impl GraphBuilder {
    pub fn new(services: &[String]) -> Result<Self> {
        if services.is_empty() {
            return Err(Error::config("service roster is empty"));
        }
        let index = services
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Ok(GraphBuilder {
            services: services.to_vec(),
            index,
            edges: BTreeSet::new(),
        })
    }

    pub fn index_of(&self, service: &str) -> Result<u32> {
        self.index
            .get(service)
            .copied()
            .ok_or_else(|| Error::data(format!("trace names unknown service {service:?}")))
    }

    /// Record that `caller` invoked `callee` (stored as edge (callee, caller)).
    pub fn observe(&mut self, caller: &str, callee: &str) -> Result<()> {
        let caller = self.index_of(caller)?;
        let callee = self.index_of(callee)?;
        self.edges.insert((callee, caller));
        Ok(())
    }

    pub fn finish(mut self) -> DependencyGraph {
        let m = self.services.len() as u32;
        for i in 0..m {
            self.edges.insert((i, i));
        }
        DependencyGraph {
            services: self.services,
            edges: self.edges,
            self_loops: true,
        }
    }
}

/// Extracts the dependency graph from historical invocations. Deduplicated,
/// order-independent, self-loops always present.
pub fn build_dependency_graph(
    traces: &[TraceRecord],
    services: &[String],
) -> Result<DependencyGraph> {
    let mut b = GraphBuilder::new(services)?;
    for t in traces {
        b.observe(&t.caller, &t.callee)?;
    }
    Ok(b.finish())
}

/// Window geometry: `slots` slots of `slot_secs` each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub slots: usize,
    pub slot_secs: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            slots: 30,
            slot_secs: 1,
        }
    }
}

impl WindowConfig {
    pub fn window_us(&self) -> u64 {
        self.slots as u64 * self.slot_secs * 1_000_000
    }

    pub fn window_secs(&self) -> u64 {
        self.slots as u64 * self.slot_secs
    }
}

/// Minimal invocation view used for latency featurization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Invocation {
    pub callee: u32,
    pub start_us: u64,
    pub duration_us: u64,
}

/// KPI row resolved to a service index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KpiSlot {
    pub service: u32,
    pub ts_s: u64,
    pub values: [f64; KPI_COUNT],
}

/// Fault interval resolved to a service index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultSpan {
    pub service: u32,
    pub start_us: u64,
    pub end_us: u64,
    pub fault_type: FaultType,
}

impl FaultSpan {
    pub fn resolve(labels: &[FaultLabel], services: &[String]) -> Result<Vec<FaultSpan>> {
        let index: HashMap<&str, u32> = services
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        labels
            .iter()
            .map(|l| {
                l.validate()?;
                let service = index
                    .get(l.service.as_str())
                    .copied()
                    .ok_or_else(|| Error::data(format!("fault names unknown service {:?}", l.service)))?;
                Ok(FaultSpan {
                    service,
                    start_us: l.start_us,
                    end_us: l.end_us,
                    fault_type: l.fault_type,
                })
            })
            .collect()
    }
}

/// Joins one window's per-service intensities, KPI rows and invocations into
/// a [`Sample`].
///
/// Latency slot `t` holds the mean duration in ms of invocations whose
/// callee is the service and whose start falls in that slot; empty slots are
/// zero. Missing KPI slots forward-fill from the previous slot, the first
/// slot falling back to zeros. The window is abnormal when any fault span
/// overlaps it; the culprit is the earliest-starting overlapping fault.
#[allow(clippy::too_many_arguments)]
pub fn assemble_sample(
    window_index: u32,
    win_start_us: u64,
    cfg: &WindowConfig,
    m: usize,
    l: usize,
    intensities: &[Vec<f32>],
    kpis: &[KpiSlot],
    invocations: &[Invocation],
    faults: &[FaultSpan],
) -> Result<Sample> {
    let t = cfg.slots;
    if intensities.len() != m || intensities.iter().any(|v| v.len() != l) {
        return Err(Error::data(format!(
            "assemble_sample: expected {m} intensity vectors of length {l}"
        )));
    }
    let win_end_us = win_start_us + cfg.window_us();
    let slot_us = cfg.slot_secs * 1_000_000;

    let mut log_intensity = Vec::with_capacity(m * l);
    for v in intensities {
        log_intensity.extend_from_slice(v);
    }

    // latency: per-slot mean duration (ms) of invocations into each service
    let mut lat_sum = vec![0.0f64; m * t];
    let mut lat_cnt = vec![0u32; m * t];
    for inv in invocations {
        if inv.start_us < win_start_us || inv.start_us >= win_end_us {
            return Err(Error::data("invocation outside its window"));
        }
        let slot = ((inv.start_us - win_start_us) / slot_us) as usize;
        let idx = inv.callee as usize * t + slot;
        lat_sum[idx] += inv.duration_us as f64 / 1_000.0; // µs → ms, single conversion point
        lat_cnt[idx] += 1;
    }
    let latency: Vec<f32> = lat_sum
        .iter()
        .zip(&lat_cnt)
        .map(|(s, c)| if *c > 0 { (*s / *c as f64) as f32 } else { 0.0 })
        .collect();

    // KPIs: slot-aligned rows, forward-filled within the window
    let win_start_s = win_start_us / 1_000_000;
    let mut kpi_rows: Vec<Option<[f64; KPI_COUNT]>> = vec![None; m * t];
    for row in kpis {
        let rel_s = row
            .ts_s
            .checked_sub(win_start_s)
            .ok_or_else(|| Error::data("kpi row precedes its window"))?;
        let slot = (rel_s / cfg.slot_secs) as usize;
        if slot >= t {
            return Err(Error::data("kpi row outside its window"));
        }
        kpi_rows[row.service as usize * t + slot] = Some(row.values);
    }
    let mut kpi = vec![0.0f32; m * KPI_COUNT * t];
    for svc in 0..m {
        let mut prev = [0.0f64; KPI_COUNT];
        for slot in 0..t {
            let vals = kpi_rows[svc * t + slot].unwrap_or(prev);
            for k in 0..KPI_COUNT {
                kpi[(svc * KPI_COUNT + k) * t + slot] = vals[k] as f32;
            }
            prev = vals;
        }
    }

    // label: any overlap with a fault interval marks the window abnormal
    let mut culprit: Option<(u64, u32)> = None;
    for f in faults {
        if f.start_us < win_end_us && f.end_us > win_start_us {
            let better = culprit.map(|(s, _)| f.start_us < s).unwrap_or(true);
            if better {
                culprit = Some((f.start_us, f.service));
            }
        }
    }

    Ok(Sample {
        window_index,
        log_intensity,
        kpi,
        latency,
        label_y: culprit.is_some(),
        label_culprit: culprit.map(|(_, svc)| svc),
    })
}

/// Reads a whole NDJSON file into memory.
pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for_each_ndjson(path, |v: T| {
        out.push(v);
        Ok(())
    })?;
    Ok(out)
}

/// Streams an NDJSON file record by record.
pub fn for_each_ndjson<T: DeserializeOwned>(
    path: &Path,
    mut f: impl FnMut(T) -> Result<()>,
) -> Result<()> {
    let r = BufReader::new(File::open(path)?);
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: T = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!(
                "{}:{}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        f(v)?;
    }
    Ok(())
}

/// Writes records as NDJSON with serde's deterministic formatting.
pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
