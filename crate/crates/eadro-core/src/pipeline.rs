//! End-to-end orchestration: simulate → featurize → train → evaluate →
//! troubleshoot, with every stage writing its artifacts to disk.
//!
//! Featurization streams the NDJSON files once each. Logs must be sorted by
//! timestamp (the simulator emits them that way); because the split is a
//! time split, the template index finishes fitting on the training prefix
//! before the first test-window line arrives, and Hawkes parameters and
//! normalization statistics likewise see training windows only.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{evaluate_end_to_end, EvalReport};
use crate::hawkes::{self, EventSeq};
use crate::logparse::{LogParseConfig, TemplateIndex};
use crate::model::{init_params, predict, ModelConfig, RankedVerdict, Variant};
use crate::simulator::{
    simulate_into, FaultSchedule, SimConfig, TelemetrySink, Topology,
};
use crate::telemetry::{
    assemble_sample, for_each_ndjson, load_dataset, persist_dataset, window_index, Dataset,
    DependencyGraph, FaultLabel, FaultSpan, GraphBuilder, Invocation, KpiRow, KpiSlot, LogLine,
    Sample, TraceRecord, WindowConfig, KPIS_FILE, LABELS_FILE, LOGS_FILE, TRACES_FILE,
};
use crate::tensorcore::{load_checkpoint, save_checkpoint, ParameterStore};
use crate::train::{split_dataset, train_model, SplitReport, TrainConfig};

pub const DATASET_FILE: &str = "dataset.bin";
pub const TEMPLATES_FILE: &str = "templates.txt";
pub const HAWKES_FILE: &str = "hawkes.txt";
pub const GRAPH_FILE: &str = "graph.txt";
pub const FEATURIZE_MANIFEST: &str = "featurize.json";
pub const REPORTS_FILE: &str = "reports.ndjson";

/// Stamp written next to each stage's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub duration_ms: u128,
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer_pretty(&mut w, self)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

struct NdjsonSink {
    traces: BufWriter<File>,
    logs: BufWriter<File>,
    kpis: BufWriter<File>,
}

impl TelemetrySink for NdjsonSink {
    fn trace(&mut self, record: &TraceRecord) -> Result<()> {
        serde_json::to_writer(&mut self.traces, record)?;
        self.traces.write_all(b"\n")?;
        Ok(())
    }
    fn log(&mut self, line: &LogLine) -> Result<()> {
        serde_json::to_writer(&mut self.logs, line)?;
        self.logs.write_all(b"\n")?;
        Ok(())
    }
    fn kpi(&mut self, row: &KpiRow) -> Result<()> {
        serde_json::to_writer(&mut self.kpis, row)?;
        self.kpis.write_all(b"\n")?;
        Ok(())
    }
}

/// Simulation stage inputs: the topology and fault plan are given explicitly
/// so runs are reproducible from the manifest alone.
#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub topology: Topology,
    pub schedule: FaultSchedule,
    pub sim: SimConfig,
    pub seed: u64,
    pub config_hash: Option<String>,
}

/// Emits the four NDJSON telemetry files plus `manifest.json` into `out`.
/// Files are written to temporaries and renamed, so failures leave no
/// partial outputs behind.
pub fn run_simulate(args: &SimulateArgs, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let started = Instant::now();
    let tmp = |name: &str| out.join(format!("{name}.tmp"));
    let mut sink = NdjsonSink {
        traces: BufWriter::new(File::create(tmp(TRACES_FILE))?),
        logs: BufWriter::new(File::create(tmp(LOGS_FILE))?),
        kpis: BufWriter::new(File::create(tmp(KPIS_FILE))?),
    };
    let stats = simulate_into(&args.topology, &args.schedule, &args.sim, args.seed, &mut sink)?;
    sink.traces.flush()?;
    sink.logs.flush()?;
    sink.kpis.flush()?;
    drop(sink);
    for name in [TRACES_FILE, LOGS_FILE, KPIS_FILE] {
        std::fs::rename(tmp(name), out.join(name))?;
    }
    let labels = args.schedule.to_labels(&args.topology);
    crate::telemetry::write_ndjson(&out.join(LABELS_FILE), &labels)?;

    let manifest = Manifest {
        kind: "simulate".into(),
        seed: args.seed,
        config_hash: args.config_hash.clone(),
        duration_ms: started.elapsed().as_millis(),
        details: serde_json::json!({
            "duration_s": args.sim.duration_s,
            "request_rate": args.sim.request_rate,
            "services": args.topology.services.len(),
            "faults": args.schedule.faults.len(),
            "stats": stats,
        }),
    };
    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct FeaturizeArgs {
    pub window: WindowConfig,
    pub logparse: LogParseConfig,
    pub hawkes_beta: f64,
    pub split_ratio: f64,
    pub config_hash: Option<String>,
}

/// Provenance and shape summary of a featurize run. `train_window_end` is
/// the exclusive window bound that every fitted artifact saw; nothing beyond
/// it leaks into the template index, Hawkes parameters or the graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturizeSummary {
    pub windows: usize,
    pub train_window_end: usize,
    pub services: Vec<String>,
    pub event_types: usize,
    pub log_events: u64,
    pub unseen_events: u64,
    pub invocations: u64,
    pub out_of_range: u64,
    pub abnormal_windows: usize,
}

/// Streams raw telemetry from `data_dir` into a featurized dataset plus the
/// fitted artifacts (template index, Hawkes parameters, dependency graph).
pub fn run_featurize(args: &FeaturizeArgs, data_dir: &Path, out: &Path) -> Result<FeaturizeSummary> {
    std::fs::create_dir_all(out)?;
    let started = Instant::now();
    let window_us = args.window.window_us();
    let t_slots = args.window.slots;

    // roster and horizon come from the KPI stream: every service reports
    // every second, making it the authoritative service list
    let mut names = std::collections::BTreeSet::new();
    let mut max_ts_s = 0u64;
    for_each_ndjson(&data_dir.join(KPIS_FILE), |row: KpiRow| {
        row.validate()?;
        names.insert(row.service.clone());
        max_ts_s = max_ts_s.max(row.ts_s);
        Ok(())
    })?;
    let services: Vec<String> = names.into_iter().collect();
    let m = services.len();
    if m == 0 {
        return Err(Error::data("no KPI rows found; cannot derive a roster"));
    }
    let svc_index: std::collections::HashMap<String, u32> = services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    let windows = ((max_ts_s + 1) / args.window.window_secs()) as usize;
    if windows == 0 {
        return Err(Error::data("telemetry shorter than one window"));
    }
    let boundary = (args.split_ratio * windows as f64).floor() as usize;
    if boundary == 0 || boundary >= windows {
        return Err(Error::data("split leaves an empty side"));
    }

    let labels: Vec<FaultLabel> = crate::telemetry::read_ndjson(&data_dir.join(LABELS_FILE))?;
    let faults = FaultSpan::resolve(&labels, &services)?;

    let mut out_of_range = 0u64;

    // logs: fit on the training prefix, frozen-parse the rest
    let mut index = TemplateIndex::new(&args.logparse)?;
    let mut lanes: Vec<Vec<Vec<f64>>> = Vec::new(); // [window][svc*L + type] once L known
    let mut raw_events: Vec<(u64, u32, Option<usize>)> = Vec::new();
    let mut last_ts = 0u64;
    let mut log_events = 0u64;
    let mut unseen_events = 0u64;
    for_each_ndjson(&data_dir.join(LOGS_FILE), |line: LogLine| {
        if line.ts_us < last_ts {
            return Err(Error::data(
                "logs must be sorted by ts_us for streaming featurization",
            ));
        }
        last_ts = line.ts_us;
        let w = window_index(line.ts_us, 0, window_us)? as usize;
        if w >= windows {
            out_of_range += 1;
            return Ok(());
        }
        let svc = *svc_index
            .get(&line.service)
            .ok_or_else(|| Error::data(format!("log names unknown service {:?}", line.service)))?;
        let id = if w < boundary {
            Some(index.fit_insert(&line.message))
        } else {
            index.parse_frozen(&line.message)
        };
        log_events += 1;
        if id.is_none() {
            unseen_events += 1;
        }
        raw_events.push((line.ts_us, svc, id));
        Ok(())
    })?;
    let l = index.len();
    if l == 0 {
        return Err(Error::data("no log templates mined from the training split"));
    }
    lanes.resize_with(windows, || vec![Vec::new(); m * l]);
    for (ts_us, svc, id) in &raw_events {
        if let Some(id) = id {
            let w = (*ts_us / window_us) as usize;
            let rel_s = (*ts_us - w as u64 * window_us) as f64 / 1e6;
            lanes[w][*svc as usize * l + *id].push(rel_s);
        }
    }
    drop(raw_events);

    // traces: graph edges from the training prefix, invocations everywhere
    let mut builder = GraphBuilder::new(&services)?;
    let mut invocations: Vec<Vec<Invocation>> = vec![Vec::new(); windows];
    let mut invocation_count = 0u64;
    for_each_ndjson(&data_dir.join(TRACES_FILE), |r: TraceRecord| {
        r.validate()?;
        let w = window_index(r.start_us, 0, window_us)? as usize;
        if w >= windows {
            out_of_range += 1;
            return Ok(());
        }
        let callee = builder.index_of(&r.callee)?;
        if w < boundary {
            builder.observe(&r.caller, &r.callee)?;
        } else {
            builder.index_of(&r.caller)?;
        }
        invocations[w].push(Invocation {
            callee,
            start_us: r.start_us,
            duration_us: r.duration_us,
        });
        invocation_count += 1;
        Ok(())
    })?;
    let graph = builder.finish();

    // KPI rows per window
    let mut kpi_slots: Vec<Vec<KpiSlot>> = vec![Vec::new(); windows];
    for_each_ndjson(&data_dir.join(KPIS_FILE), |row: KpiRow| {
        let ts_us = row.ts_s * 1_000_000;
        let w = (ts_us / window_us) as usize;
        if w >= windows {
            out_of_range += 1;
            return Ok(());
        }
        let svc = svc_index[&row.service];
        kpi_slots[w].push(KpiSlot {
            service: svc,
            ts_s: row.ts_s,
            values: row.values(),
        });
        Ok(())
    })?;

    // Hawkes parameters from training-window sequences
    let window_secs = args.window.window_secs() as f64;
    let per_type: Vec<Vec<EventSeq>> = (0..l)
        .map(|ty| {
            let mut seqs = Vec::with_capacity(boundary * m);
            for lane_set in lanes.iter().take(boundary) {
                for svc in 0..m {
                    let mut times = lane_set[svc * l + ty].clone();
                    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
                    seqs.push(EventSeq {
                        times,
                        duration: window_secs,
                    });
                }
            }
            seqs
        })
        .collect();
    let params = hawkes::fit(&per_type, args.hawkes_beta)?;

    // assemble every window in parallel
    let wcfg = args.window;
    let samples: Vec<Result<Sample>> = crate::par::par_map_range(windows, |w| {
        let mut intensities = Vec::with_capacity(m);
        for svc in 0..m {
            let mut by_type: Vec<Vec<f64>> = Vec::with_capacity(l);
            for ty in 0..l {
                let mut times = lanes[w][svc * l + ty].clone();
                times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
                by_type.push(times);
            }
            intensities.push(hawkes::featurize_window(&params, &by_type, window_secs)?);
        }
        assemble_sample(
            w as u32,
            w as u64 * window_us,
            &wcfg,
            m,
            l,
            &intensities,
            &kpi_slots[w],
            &invocations[w],
            &faults,
        )
    });
    let samples: Vec<Sample> = samples.into_iter().collect::<Result<_>>()?;
    let abnormal_windows = samples.iter().filter(|s| s.label_y).count();

    let dataset = Dataset {
        services: services.clone(),
        l,
        t: t_slots,
        samples,
    };
    persist_dataset(&dataset, &out.join(DATASET_FILE))?;
    index.save(&out.join(TEMPLATES_FILE))?;
    hawkes::save_params(&params, &out.join(HAWKES_FILE))?;
    graph.save(&out.join(GRAPH_FILE))?;

    let summary = FeaturizeSummary {
        windows,
        train_window_end: boundary,
        services,
        event_types: l,
        log_events,
        unseen_events,
        invocations: invocation_count,
        out_of_range,
        abnormal_windows,
    };
    let manifest = Manifest {
        kind: "featurize".into(),
        seed: 0,
        config_hash: args.config_hash.clone(),
        duration_ms: started.elapsed().as_millis(),
        details: serde_json::to_value(&summary)?,
    };
    manifest.write(&out.join(FEATURIZE_MANIFEST))?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub train: TrainConfig,
    pub variant: Variant,
    pub config_hash: Option<String>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<f32>,
    pub split: SplitReport,
}

pub fn checkpoint_name(variant: Variant) -> String {
    format!("model-{}.ckpt", variant.name())
}

/// Splits the dataset in time, trains the selected variant and writes the
/// checkpoint plus a manifest with the loss history and split balance.
pub fn run_train(args: &TrainArgs, features: &Path, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let started = Instant::now();
    let dataset = load_dataset(&features.join(DATASET_FILE))?;
    let graph = DependencyGraph::load(&features.join(GRAPH_FILE))?;
    if graph.services != dataset.services {
        return Err(Error::data("graph and dataset rosters disagree"));
    }
    let (train, _test, split) = split_dataset(&dataset.samples, args.train.split_ratio, dataset.m())?;
    let model_cfg = ModelConfig::new(dataset.m(), dataset.l, dataset.t).with_variant(args.variant);
    let output = train_model(train, &graph, &model_cfg, &args.train)?;

    let checkpoint = out.join(checkpoint_name(args.variant));
    save_checkpoint(&output.store, &checkpoint)?;
    let manifest = Manifest {
        kind: "train".into(),
        seed: args.train.seed,
        config_hash: args.config_hash.clone(),
        duration_ms: started.elapsed().as_millis(),
        details: serde_json::json!({
            "variant": args.variant.name(),
            "epochs": args.train.epochs,
            "batch": args.train.effective_batch(split.train_total),
            "loss_first": output.history.first(),
            "loss_last": output.history.last(),
            "history": output.history,
            "split": split,
        }),
    };
    manifest.write(&out.join(format!("train-{}.json", args.variant.name())))?;
    Ok(TrainSummary {
        checkpoint,
        history: output.history,
        split,
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub variant: Variant,
    pub split_ratio: f64,
    pub eval_batch: usize,
}

/// Evaluates a checkpoint on the test side of the dataset's time split,
/// printing nothing: the caller renders the table. Appends the ten-field
/// record as one NDJSON line to `reports.ndjson`.
pub fn run_evaluate(
    args: &EvaluateArgs,
    features: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<EvalReport> {
    std::fs::create_dir_all(out)?;
    let dataset = load_dataset(&features.join(DATASET_FILE))?;
    let graph = DependencyGraph::load(&features.join(GRAPH_FILE))?;
    let store = load_checkpoint(checkpoint)?;
    let (_, test, _) = split_dataset(&dataset.samples, args.split_ratio, dataset.m())?;
    let model_cfg = ModelConfig::new(dataset.m(), dataset.l, dataset.t).with_variant(args.variant);
    check_store_matches(&store, &model_cfg)?;
    let report = evaluate_end_to_end(&store, &model_cfg, &graph, test, args.eval_batch)?;

    let mut line = serde_json::to_string(&report.metrics)?;
    line.push('\n');
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(REPORTS_FILE))?;
    f.write_all(line.as_bytes())?;
    Ok(report)
}

fn check_store_matches(store: &ParameterStore<f32>, cfg: &ModelConfig) -> Result<()> {
    let probe = init_params(cfg, 0)?;
    for (name, tensor) in probe.iter() {
        let loaded = store.get(name).map_err(|_| {
            Error::data(format!(
                "checkpoint is missing {name:?}; wrong variant or model shape"
            ))
        })?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::data(format!(
                "checkpoint entry {name:?} has shape {:?}, expected {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TroubleshootVerdict {
    pub anomalous: bool,
    pub y_hat: f32,
    /// (service, probability) sorted by descending probability.
    pub ranked: Vec<(String, f32)>,
}

impl TroubleshootVerdict {
    pub fn render(&self) -> String {
        if !self.anomalous {
            return format!("no anomaly (detector score {:.3})\n", self.y_hat);
        }
        let mut out = format!(
            "anomaly detected (detector score {:.3}); suspected culprits:\n",
            self.y_hat
        );
        for (i, (svc, p)) in self.ranked.iter().enumerate() {
            out.push_str(&format!("{:>3}. {svc:<12} {p:.4}\n", i + 1));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TroubleshootArgs {
    pub window: WindowConfig,
    pub logparse: LogParseConfig,
    pub variant: Variant,
    /// Window start in µs; records outside [start, start+window) are ignored.
    pub window_start_us: u64,
}

/// Featurizes one window of raw telemetry with the frozen artifacts and runs
/// the model on it: the live troubleshooting path.
pub fn run_troubleshoot(
    args: &TroubleshootArgs,
    features: &Path,
    checkpoint: &Path,
    traces: &Path,
    logs: &Path,
    kpis: &Path,
) -> Result<TroubleshootVerdict> {
    let graph = DependencyGraph::load(&features.join(GRAPH_FILE))?;
    let index = TemplateIndex::load(&features.join(TEMPLATES_FILE), &args.logparse)?;
    let params = hawkes::load_params(&features.join(HAWKES_FILE))?;
    let store = load_checkpoint(checkpoint)?;
    let services = graph.services.clone();
    let m = services.len();
    let l = index.len();
    if params.per_type.len() != l {
        return Err(Error::data(
            "template index and hawkes parameters disagree on the vocabulary size",
        ));
    }
    let svc_index: std::collections::HashMap<&str, u32> = services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();
    let start = args.window_start_us;
    let end = start + args.window.window_us();

    let mut lanes: Vec<Vec<f64>> = vec![Vec::new(); m * l];
    let mut unseen = 0u64;
    for_each_ndjson(logs, |line: LogLine| {
        if line.ts_us < start || line.ts_us >= end {
            return Ok(());
        }
        let svc = *svc_index
            .get(line.service.as_str())
            .ok_or_else(|| Error::data(format!("log names unknown service {:?}", line.service)))?;
        match index.parse_frozen(&line.message) {
            Some(id) => lanes[svc as usize * l + id].push((line.ts_us - start) as f64 / 1e6),
            None => unseen += 1,
        }
        Ok(())
    })?;
    let _ = unseen;

    let mut invocations = Vec::new();
    for_each_ndjson(traces, |r: TraceRecord| {
        if r.start_us < start || r.start_us >= end {
            return Ok(());
        }
        let callee = *svc_index
            .get(r.callee.as_str())
            .ok_or_else(|| Error::data(format!("trace names unknown service {:?}", r.callee)))?;
        invocations.push(Invocation {
            callee,
            start_us: r.start_us,
            duration_us: r.duration_us,
        });
        Ok(())
    })?;

    let mut kpi_slots = Vec::new();
    for_each_ndjson(kpis, |row: KpiRow| {
        let ts_us = row.ts_s * 1_000_000;
        if ts_us < start || ts_us >= end {
            return Ok(());
        }
        let svc = *svc_index
            .get(row.service.as_str())
            .ok_or_else(|| Error::data(format!("kpi names unknown service {:?}", row.service)))?;
        kpi_slots.push(KpiSlot {
            service: svc,
            ts_s: row.ts_s,
            values: row.values(),
        });
        Ok(())
    })?;

    let window_secs = args.window.window_secs() as f64;
    let mut intensities = Vec::with_capacity(m);
    for svc in 0..m {
        let mut by_type = Vec::with_capacity(l);
        for ty in 0..l {
            let mut times = lanes[svc * l + ty].clone();
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
            by_type.push(times);
        }
        intensities.push(hawkes::featurize_window(&params, &by_type, window_secs)?);
    }
    let sample = assemble_sample(
        0,
        start,
        &args.window,
        m,
        l,
        &intensities,
        &kpi_slots,
        &invocations,
        &[],
    )?;

    let model_cfg = ModelConfig::new(m, l, args.window.slots).with_variant(args.variant);
    check_store_matches(&store, &model_cfg)?;
    let verdicts: Vec<RankedVerdict> = predict(&store, &model_cfg, &graph, &[sample], 1)?;
    let v = &verdicts[0];
    let ranked = v
        .ranking
        .iter()
        .map(|&s| (services[s].clone(), v.p[s]))
        .collect();
    Ok(TroubleshootVerdict {
        anomalous: v.is_anomalous(),
        y_hat: v.y_hat,
        ranked,
    })
}
