//! The joint detector/localizer network.
//!
//! Per service, three modality encoders produce 64-wide embeddings: a fully
//! connected layer over log-event intensities, and for KPIs and latency a
//! causal convolution → batch norm → self-attention over time → temporal
//! mean. The per-service embeddings are concatenated, projected to the
//! fusion width and gated (GLU), then a multi-head graph attention layer
//! propagates state along the dependency graph (in-neighbors = callees plus
//! self). Global attention pooling folds node embeddings into one system
//! vector feeding two heads: a sigmoid anomaly detector and a softmax
//! culprit localizer trained jointly with a weighted sum of losses.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::telemetry::{DependencyGraph, Sample, KPI_COUNT};
use crate::tensorcore::{Mode, NodeId, ParameterStore, Program, Scalar, Tape, Tensor};

/// Structural ablations: dropping one modality narrows the fusion input;
/// `NoGraph` swaps the graph attention layer for a fully connected one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    DropLogs,
    DropKpis,
    DropTraces,
    NoGraph,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::DropLogs,
        Variant::DropKpis,
        Variant::DropTraces,
        Variant::NoGraph,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DropLogs => "drop-logs",
            Variant::DropKpis => "drop-kpis",
            Variant::DropTraces => "drop-traces",
            Variant::NoGraph => "no-graph",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }

    fn uses_logs(&self) -> bool {
        *self != Variant::DropLogs
    }
    fn uses_kpis(&self) -> bool {
        *self != Variant::DropKpis
    }
    fn uses_traces(&self) -> bool {
        *self != Variant::DropTraces
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub m: usize,
    pub l: usize,
    pub t: usize,
    pub enc_width: usize,
    pub fusion_dim: usize,
    pub gat_hidden: usize,
    pub heads: usize,
    pub pooled_width: usize,
    pub conv_kernel: usize,
    pub conv_dilation: usize,
    pub leaky_slope: f64,
    pub attn_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(m: usize, l: usize, t: usize) -> Self {
        ModelConfig {
            m,
            l,
            t,
            enc_width: 64,
            fusion_dim: 128,
            gat_hidden: 128,
            heads: 4,
            pooled_width: 128,
            conv_kernel: 3,
            conv_dilation: 1,
            leaky_slope: 0.2,
            attn_scale: 64.0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            variant: Variant::Full,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion_dim % 2 != 0 {
            return Err(Error::config("fusion_dim must be even (GLU halves it)"));
        }
        if self.gat_hidden % self.heads != 0 {
            return Err(Error::config("gat_hidden must divide evenly across heads"));
        }
        if self.m == 0 || self.l == 0 || self.t == 0 {
            return Err(Error::config("model dims must be positive"));
        }
        Ok(())
    }

    fn modality_count(&self) -> usize {
        [self.variant.uses_logs(), self.variant.uses_kpis(), self.variant.uses_traces()]
            .iter()
            .filter(|b| **b)
            .count()
    }

    fn fused_width(&self) -> usize {
        self.fusion_dim / 2
    }

    fn head_width(&self) -> usize {
        self.gat_hidden / self.heads
    }
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::uniform(shape, bound, rng)
}

/// Fresh parameters plus identity normalization stats; creation order is
/// fixed, so a seed pins every weight.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let e = cfg.enc_width;

    let fc = |store: &mut ParameterStore<f32>, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        store.insert(&format!("{name}.w"), xavier(&[rows, cols], rows, cols, rng), true);
        store.insert(&format!("{name}.b"), Tensor::zeros(&[cols]), true);
    };

    if cfg.variant.uses_logs() {
        fc(&mut store, "enc.log", cfg.l, e, &mut rng);
    }
    for (used, name, c_in) in [
        (cfg.variant.uses_kpis(), "enc.kpi", KPI_COUNT),
        (cfg.variant.uses_traces(), "enc.trace", 1),
    ] {
        if !used {
            continue;
        }
        let k = cfg.conv_kernel;
        store.insert(
            &format!("{name}.conv.w"),
            xavier(&[e, c_in, k], c_in * k, e * k, &mut rng),
            true,
        );
        store.insert(&format!("{name}.conv.b"), Tensor::zeros(&[e]), true);
        store.insert(&format!("{name}.bn.gamma"), Tensor::from_vec(&[e], vec![1.0; e])?, true);
        store.insert(&format!("{name}.bn.beta"), Tensor::zeros(&[e]), true);
        store.insert(&format!("{name}.bn.running_mean"), Tensor::zeros(&[e]), false);
        store.insert(
            &format!("{name}.bn.running_var"),
            Tensor::from_vec(&[e], vec![1.0; e])?,
            false,
        );
        for proj in ["wq", "wk", "wv"] {
            store.insert(&format!("{name}.attn.{proj}"), xavier(&[e, e], e, e, &mut rng), true);
        }
    }

    fc(
        &mut store,
        "fuse",
        cfg.modality_count() * e,
        cfg.fusion_dim,
        &mut rng,
    );

    if cfg.variant == Variant::NoGraph {
        fc(&mut store, "nograph", cfg.fused_width(), cfg.gat_hidden, &mut rng);
    } else {
        let hw = cfg.head_width();
        for h in 0..cfg.heads {
            store.insert(
                &format!("gat.h{h}.w"),
                xavier(&[cfg.fused_width(), hw], cfg.fused_width(), hw, &mut rng),
                true,
            );
            store.insert(
                &format!("gat.h{h}.v_ctr"),
                xavier(&[hw, 1], 2 * hw, 1, &mut rng),
                true,
            );
            store.insert(
                &format!("gat.h{h}.v_nbr"),
                xavier(&[hw, 1], 2 * hw, 1, &mut rng),
                true,
            );
        }
    }

    // gate scores feed a softmax over nodes, which cancels any uniform
    // shift, so the gate projection carries no bias
    store.insert(
        "pool.gate.w",
        xavier(&[cfg.gat_hidden, 1], cfg.gat_hidden, 1, &mut rng),
        true,
    );
    fc(&mut store, "pool.feat", cfg.gat_hidden, cfg.pooled_width, &mut rng);
    fc(&mut store, "head.detect.fc1", cfg.pooled_width, e, &mut rng);
    fc(&mut store, "head.detect.fc2", e, 1, &mut rng);
    // the localizer scores every node with shared weights; a culprit
    // signature learned at one service transfers to any other, and the
    // softmax over nodes would cancel a final bias, so there is none
    fc(&mut store, "head.local.fc1", cfg.gat_hidden, e, &mut rng);
    store.insert("head.local.fc2.w", xavier(&[e, 1], e, 1, &mut rng), true);

    store.insert("norm.kpi_mean", Tensor::zeros(&[KPI_COUNT]), false);
    store.insert(
        "norm.kpi_std",
        Tensor::from_vec(&[KPI_COUNT], vec![1.0; KPI_COUNT])?,
        false,
    );
    store.insert("norm.latency_mean", Tensor::zeros(&[1]), false);
    store.insert("norm.latency_std", Tensor::from_vec(&[1], vec![1.0])?, false);
    Ok(store)
}

/// Standardized model inputs for one batch of samples, laid out service-major
/// within each sample (row `b*M + m`).
#[derive(Debug, Clone)]
pub struct BatchData<T: Scalar> {
    pub b: usize,
    pub logs: Option<Tensor<T>>,
    pub kpis: Option<Tensor<T>>,
    pub lats: Option<Tensor<T>>,
}

impl<T: Scalar> BatchData<T> {
    pub fn from_samples(
        samples: &[&Sample],
        cfg: &ModelConfig,
        store: &ParameterStore<T>,
    ) -> Result<Self> {
        let (m, l, t) = (cfg.m, cfg.l, cfg.t);
        let b = samples.len();
        if b == 0 {
            return Err(Error::data("empty batch"));
        }
        for s in samples {
            if s.log_intensity.len() != m * l
                || s.kpi.len() != m * KPI_COUNT * t
                || s.latency.len() != m * t
            {
                return Err(Error::data(format!(
                    "sample {} does not match model dims M={m} L={l} T={t}",
                    s.window_index
                )));
            }
        }

        let logs = if cfg.variant.uses_logs() {
            let mut data = Vec::with_capacity(b * m * l);
            for s in samples {
                data.extend(s.log_intensity.iter().map(|v| T::from_f64(*v as f64)));
            }
            Some(Tensor::from_vec(&[b * m, l], data)?)
        } else {
            None
        };

        let kpis = if cfg.variant.uses_kpis() {
            let mean = store.get("norm.kpi_mean")?;
            let std = store.get("norm.kpi_std")?;
            let mut data = Vec::with_capacity(b * m * KPI_COUNT * t);
            for s in samples {
                for svc in 0..m {
                    for k in 0..KPI_COUNT {
                        let mu = mean.data()[k];
                        let sd = std.data()[k];
                        for slot in 0..t {
                            let raw = T::from_f64(s.kpi[(svc * KPI_COUNT + k) * t + slot] as f64);
                            data.push((raw - mu) / sd);
                        }
                    }
                }
            }
            Some(Tensor::from_vec(&[b * m, KPI_COUNT, t], data)?)
        } else {
            None
        };

        let lats = if cfg.variant.uses_traces() {
            let mu = store.get("norm.latency_mean")?.data()[0];
            let sd = store.get("norm.latency_std")?.data()[0];
            let mut data = Vec::with_capacity(b * m * t);
            for s in samples {
                data.extend(
                    s.latency
                        .iter()
                        .map(|v| (T::from_f64(*v as f64) - mu) / sd),
                );
            }
            Some(Tensor::from_vec(&[b * m, 1, t], data)?)
        } else {
            None
        };

        Ok(BatchData { b, logs, kpis, lats })
    }
}

/// Forward outputs: detection probability per sample and the per-service
/// culprit distribution.
pub struct Forward {
    pub y_hat: NodeId,
    pub p: NodeId,
}

fn temporal_encoder<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let e = cfg.enc_width;
    let n = tape.value(x).dim(0);
    let t = tape.value(x).dim(2);

    let w = tape.param(store, &format!("{prefix}.conv.w"))?;
    let b = tape.param(store, &format!("{prefix}.conv.b"))?;
    let conv = tape.conv1d_causal(x, w, b, cfg.conv_dilation)?;

    let gamma = tape.param(store, &format!("{prefix}.bn.gamma"))?;
    let beta = tape.param(store, &format!("{prefix}.bn.beta"))?;
    let rm = store.get(&format!("{prefix}.bn.running_mean"))?.clone();
    let rv = store.get(&format!("{prefix}.bn.running_var"))?.clone();
    let bn = tape.batchnorm1d(
        conv,
        gamma,
        beta,
        &rm,
        &rv,
        &format!("{prefix}.bn"),
        cfg.bn_momentum,
        cfg.bn_eps,
    )?;

    // self-attention over time: X is [N,T,E]
    let xt = tape.transpose12(bn)?;
    let flat = tape.reshape(xt, &[n * t, e])?;
    let proj = |tape: &mut Tape<T>, name: &str| -> Result<NodeId> {
        let w = tape.param(store, &format!("{prefix}.attn.{name}"))?;
        let p = tape.matmul(flat, w)?;
        tape.reshape(p, &[n, t, e])
    };
    let q = proj(tape, "wq")?;
    let k = proj(tape, "wk")?;
    let v = proj(tape, "wv")?;
    let kt = tape.transpose12(k)?;
    let scores = tape.bmm_fast(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / cfg.attn_scale.sqrt())?;
    let attn = tape.softmax(scaled, 2)?;
    let ctx = tape.bmm_fast(attn, v)?;
    tape.mean(ctx, 1)
}

/// Builds the full forward graph over a batch.
pub fn build_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    neighbor_mask: &Arc<Vec<bool>>,
    data: &BatchData<T>,
) -> Result<Forward> {
    cfg.validate()?;
    let (b, m) = (data.b, cfg.m);
    if cfg.variant != Variant::NoGraph && neighbor_mask.len() != m * m {
        return Err(Error::data(format!(
            "neighbor mask has {} entries for M={m}",
            neighbor_mask.len()
        )));
    }

    let mut parts: Vec<NodeId> = Vec::new();
    if let Some(logs) = &data.logs {
        let x = tape.constant(logs.clone())?;
        let w = tape.param(store, "enc.log.w")?;
        let bias = tape.param(store, "enc.log.b")?;
        let h = tape.matmul(x, w)?;
        let h = tape.add_bias(h, bias)?;
        parts.push(tape.relu(h)?);
    }
    if let Some(kpis) = &data.kpis {
        let x = tape.constant(kpis.clone())?;
        parts.push(temporal_encoder(tape, store, cfg, "enc.kpi", x)?);
    }
    if let Some(lats) = &data.lats {
        let x = tape.constant(lats.clone())?;
        parts.push(temporal_encoder(tape, store, cfg, "enc.trace", x)?);
    }
    if parts.is_empty() {
        return Err(Error::config("variant disables every modality"));
    }

    // intermediate fusion with a gated linear unit
    let cat = tape.concat_cols(&parts)?;
    let fw = tape.param(store, "fuse.w")?;
    let fb = tape.param(store, "fuse.b")?;
    let proj = tape.matmul(cat, fw)?;
    let proj = tape.add_bias(proj, fb)?;
    let h_s = tape.glu(proj)?; // [B·M, E]

    // dependency-aware node update
    let node_h = if cfg.variant == Variant::NoGraph {
        let w = tape.param(store, "nograph.w")?;
        let bias = tape.param(store, "nograph.b")?;
        let h = tape.matmul(h_s, w)?;
        let h = tape.add_bias(h, bias)?;
        tape.relu(h)?
    } else {
        let hw = cfg.head_width();
        let mut heads = Vec::with_capacity(cfg.heads);
        for hidx in 0..cfg.heads {
            let w = tape.param(store, &format!("gat.h{hidx}.w"))?;
            let v_ctr = tape.param(store, &format!("gat.h{hidx}.v_ctr"))?;
            let v_nbr = tape.param(store, &format!("gat.h{hidx}.v_nbr"))?;
            let wh = tape.matmul(h_s, w)?; // [B·M, hw]
            let pc = tape.matmul(wh, v_ctr)?;
            let pc = tape.reshape(pc, &[b, m])?;
            let qn = tape.matmul(wh, v_nbr)?;
            let qn = tape.reshape(qn, &[b, m])?;
            let scores = tape.outer_sum(pc, qn)?; // s[a,b] = vᵀ[Wh_a ‖ Wh_b]
            let scores = tape.leaky_relu(scores, cfg.leaky_slope)?;
            let omega = tape.masked_softmax_rows(scores, Arc::clone(neighbor_mask))?;
            let wh3 = tape.reshape(wh, &[b, m, hw])?;
            let agg = tape.bmm(omega, wh3)?; // node-axis reduction: exact accumulation
            let act = tape.relu(agg)?;
            heads.push(tape.reshape(act, &[b * m, hw])?);
        }
        tape.concat_cols(&heads)?
    };

    // global attention pooling into one system vector
    let gw = tape.param(store, "pool.gate.w")?;
    let gates = tape.matmul(node_h, gw)?;
    let gates = tape.reshape(gates, &[b, m])?;
    let a = tape.softmax(gates, 1)?;
    let fw2 = tape.param(store, "pool.feat.w")?;
    let fb2 = tape.param(store, "pool.feat.b")?;
    let feat = tape.matmul(node_h, fw2)?;
    let feat = tape.add_bias(feat, fb2)?;
    let feat3 = tape.reshape(feat, &[b, m, cfg.pooled_width])?;
    let a3 = tape.reshape(a, &[b, 1, m])?;
    let pooled = tape.bmm(a3, feat3)?;
    let h_f = tape.reshape(pooled, &[b, cfg.pooled_width])?;

    let head = |tape: &mut Tape<T>, prefix: &str, out: usize| -> Result<NodeId> {
        let w1 = tape.param(store, &format!("{prefix}.fc1.w"))?;
        let b1 = tape.param(store, &format!("{prefix}.fc1.b"))?;
        let w2 = tape.param(store, &format!("{prefix}.fc2.w"))?;
        let b2 = tape.param(store, &format!("{prefix}.fc2.b"))?;
        let h = tape.matmul(h_f, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, w2)?;
        let h = tape.add_bias(h, b2)?;
        debug_assert_eq!(tape.value(h).dim(1), out);
        Ok(h)
    };

    let logit = head(tape, "head.detect", 1)?;
    let sig = tape.sigmoid(logit)?;
    let y_hat = tape.reshape(sig, &[b])?;

    // per-node culprit scores with shared weights, normalized over services
    let lw1 = tape.param(store, "head.local.fc1.w")?;
    let lb1 = tape.param(store, "head.local.fc1.b")?;
    let lw2 = tape.param(store, "head.local.fc2.w")?;
    let lh = tape.matmul(node_h, lw1)?;
    let lh = tape.add_bias(lh, lb1)?;
    let lh = tape.relu(lh)?;
    let scores = tape.matmul(lh, lw2)?;
    let scores = tape.reshape(scores, &[b, m])?;
    let p = tape.softmax(scores, 1)?;

    Ok(Forward { y_hat, p })
}

/// Joint objective: `β·BCE(ŷ, y) + (1−β)·CE(P, culprit)` where the
/// cross-entropy term averages over ground-truth-abnormal samples only and
/// vanishes when the batch has none.
pub fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fwd: &Forward,
    labels: &[(bool, Option<u32>)],
    m: usize,
    beta_loss: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&beta_loss) {
        return Err(Error::config("beta_loss must be in [0,1]"));
    }
    let b = labels.len();
    let targets: Vec<f64> = labels.iter().map(|(y, _)| *y as u8 as f64).collect();
    let mut onehot = vec![0.0f64; b * m];
    let mut mask = vec![false; b];
    for (i, (y, culprit)) in labels.iter().enumerate() {
        if *y {
            let c = culprit.ok_or_else(|| Error::data("abnormal sample without culprit"))?;
            onehot[i * m + c as usize] = 1.0;
            mask[i] = true;
        }
    }
    let l1 = tape.bce_loss(fwd.y_hat, Arc::new(targets))?;
    let l2 = tape.masked_ce_loss(fwd.p, Arc::new(onehot), Arc::new(mask))?;
    let l1s = tape.scale(l1, beta_loss)?;
    let l2s = tape.scale(l2, 1.0 - beta_loss)?;
    tape.add(l1s, l2s)
}

/// Detector decision plus the culprit distribution, services sorted by
/// descending probability with ascending-index tie-breaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedVerdict {
    pub y_hat: f32,
    pub p: Vec<f32>,
    pub ranking: Vec<usize>,
}

impl RankedVerdict {
    pub fn from_probs(y_hat: f32, p: Vec<f32>) -> Self {
        let mut ranking: Vec<usize> = (0..p.len()).collect();
        ranking.sort_by(|&a, &b| {
            p[b].partial_cmp(&p[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        RankedVerdict { y_hat, p, ranking }
    }

    /// Detection decision at the 0.5 threshold.
    pub fn is_anomalous(&self) -> bool {
        self.y_hat >= 0.5
    }

    /// 1-based rank of `service` in the verdict.
    pub fn rank_of(&self, service: usize) -> Option<usize> {
        self.ranking.iter().position(|s| *s == service).map(|r| r + 1)
    }
}

/// Evaluates samples in inference mode, chunked and parallel over a
/// read-only store. The culprit distribution is always computed; callers
/// gate on `is_anomalous()` where the protocol requires it.
pub fn predict(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    graph: &DependencyGraph,
    samples: &[Sample],
    chunk: usize,
) -> Result<Vec<RankedVerdict>> {
    if graph.service_count() != cfg.m {
        return Err(Error::data(format!(
            "graph has {} services, model expects {}",
            graph.service_count(),
            cfg.m
        )));
    }
    let mask = Arc::new(graph.neighbor_mask());
    let chunks: Vec<&[Sample]> = samples.chunks(chunk.max(1)).collect();
    let results = crate::par::par_map(&chunks, |chunk| -> Result<Vec<RankedVerdict>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::<f32>::new(Mode::Eval);
        let data = BatchData::from_samples(&refs, cfg, store)?;
        let fwd = build_forward(&mut tape, store, cfg, &mask, &data)?;
        let y = tape.value(fwd.y_hat).data().to_vec();
        let p = tape.value(fwd.p);
        Ok(chunk
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let row = p.data()[i * cfg.m..(i + 1) * cfg.m].to_vec();
                RankedVerdict::from_probs(y[i], row)
            })
            .collect())
    });
    let mut out = Vec::with_capacity(samples.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// The full joint loss over a fixed batch, rebuildable at any precision —
/// the gradient checker's entry point to the whole network.
pub struct LossProgram {
    pub samples: Vec<Sample>,
    pub cfg: ModelConfig,
    pub neighbor_mask: Arc<Vec<bool>>,
    pub beta_loss: f64,
}

impl Program for LossProgram {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>) -> Result<NodeId> {
        let refs: Vec<&Sample> = self.samples.iter().collect();
        let data = BatchData::from_samples(&refs, &self.cfg, store)?;
        let fwd = build_forward(tape, store, &self.cfg, &self.neighbor_mask, &data)?;
        let labels: Vec<(bool, Option<u32>)> = self
            .samples
            .iter()
            .map(|s| (s.label_y, s.label_culprit))
            .collect();
        build_loss(tape, &fwd, &labels, self.cfg.m, self.beta_loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::build_dependency_graph;
    use rand::Rng;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig::new(4, 5, 6).with_variant(variant)
    }

    fn roster(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("svc{i:02}")).collect()
    }

    fn chain_graph(m: usize) -> DependencyGraph {
        use crate::telemetry::{TraceRecord, TraceStatus};
        let traces: Vec<TraceRecord> = (0..m - 1)
            .map(|i| TraceRecord {
                trace_id: "t".into(),
                span_id: format!("s{i}"),
                parent_span_id: None,
                caller: format!("svc{i:02}"),
                callee: format!("svc{:02}", i + 1),
                start_us: 0,
                duration_us: 10,
                status: TraceStatus::Ok,
            })
            .collect();
        build_dependency_graph(&traces, &roster(m)).unwrap()
    }

    fn random_sample(cfg: &ModelConfig, idx: u32, abnormal: bool, rng: &mut impl Rng) -> Sample {
        let m = cfg.m;
        Sample {
            window_index: idx,
            log_intensity: (0..m * cfg.l).map(|_| rng.random_range(0.0..2.0)).collect(),
            kpi: (0..m * KPI_COUNT * cfg.t)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            latency: (0..m * cfg.t).map(|_| rng.random_range(0.0..3.0)).collect(),
            label_y: abnormal,
            label_culprit: abnormal.then(|| idx % m as u32),
        }
    }

    fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n as u32)
            .map(|i| random_sample(cfg, i, i % 2 == 0, &mut rng))
            .collect()
    }

    fn forward_values(
        cfg: &ModelConfig,
        store: &ParameterStore<f32>,
        graph: &DependencyGraph,
        samples: &[Sample],
    ) -> (Vec<f32>, Vec<f32>) {
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut tape = Tape::<f32>::new(Mode::Eval);
        let data = BatchData::from_samples(&refs, cfg, store).unwrap();
        let mask = Arc::new(graph.neighbor_mask());
        let fwd = build_forward(&mut tape, store, cfg, &mask, &data).unwrap();
        (
            tape.value(fwd.y_hat).data().to_vec(),
            tape.value(fwd.p).data().to_vec(),
        )
    }

    #[test]
    fn shape_chain_and_ranges() {
        let cfg = tiny_cfg(Variant::Full);
        let store = init_params(&cfg, 7).unwrap();
        let graph = chain_graph(cfg.m);
        let samples = batch(&cfg, 3, 1);
        let (y, p) = forward_values(&cfg, &store, &graph, &samples);
        assert_eq!(y.len(), 3);
        assert_eq!(p.len(), 3 * cfg.m);
        for v in &y {
            assert!(*v > 0.0 && *v < 1.0, "sigmoid range");
        }
        for row in p.chunks(cfg.m) {
            let s: f64 = row.iter().map(|v| *v as f64).sum();
            assert!((s - 1.0).abs() < 1e-5, "P sums to 1, got {s}");
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = tiny_cfg(Variant::Full);
        let store = init_params(&cfg, 7).unwrap();
        let graph = chain_graph(cfg.m);
        let samples = batch(&cfg, 2, 3);
        let a = forward_values(&cfg, &store, &graph, &samples);
        let b = forward_values(&cfg, &store, &graph, &samples);
        assert_eq!(a, b);
    }

    #[test]
    fn every_variant_builds_and_losses() {
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let store = init_params(&cfg, 11).unwrap();
            let graph = chain_graph(cfg.m);
            let samples = batch(&cfg, 4, 5);
            let refs: Vec<&Sample> = samples.iter().collect();
            let mut tape = Tape::<f32>::new(Mode::Train);
            let data = BatchData::from_samples(&refs, &cfg, &store).unwrap();
            let mask = Arc::new(graph.neighbor_mask());
            let fwd = build_forward(&mut tape, &store, &cfg, &mask, &data).unwrap();
            let labels: Vec<(bool, Option<u32>)> =
                samples.iter().map(|s| (s.label_y, s.label_culprit)).collect();
            let loss = build_loss(&mut tape, &fwd, &labels, cfg.m, 0.5).unwrap();
            assert!(tape.value(loss).item() > 0.0);
            tape.backward(loss).unwrap();
            let g = tape.grad(tape.param_node("fuse.w").unwrap()).unwrap();
            assert!(g.data().iter().any(|v| *v != 0.0), "{variant:?} gradients flow");
        }
    }

    #[test]
    fn dropped_modalities_shrink_params() {
        let full = init_params(&tiny_cfg(Variant::Full), 1).unwrap();
        let no_logs = init_params(&tiny_cfg(Variant::DropLogs), 1).unwrap();
        assert!(full.contains("enc.log.w"));
        assert!(!no_logs.contains("enc.log.w"));
        assert_eq!(full.get("fuse.w").unwrap().dim(0), 192);
        assert_eq!(no_logs.get("fuse.w").unwrap().dim(0), 128);
        let no_graph = init_params(&tiny_cfg(Variant::NoGraph), 1).unwrap();
        assert!(no_graph.contains("nograph.w"));
        assert!(!no_graph.contains("gat.h0.w"));
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let cfg = tiny_cfg(Variant::Full);
        let store = init_params(&cfg, 13).unwrap();
        let m = cfg.m;
        let graph = chain_graph(m);
        let samples = batch(&cfg, 3, 17);

        // permute services: π(i) = (i + 1) % m, new index of old i
        let perm: Vec<usize> = (0..m).map(|i| (i + 1) % m).collect();
        let mut services = roster(m);
        for (old, new) in perm.iter().enumerate() {
            services[*new] = format!("svc{old:02}");
        }
        let mut edges = std::collections::BTreeSet::new();
        for (a, b) in &graph.edges {
            edges.insert((perm[*a as usize] as u32, perm[*b as usize] as u32));
        }
        let pgraph = DependencyGraph {
            services,
            edges,
            self_loops: true,
        };
        let psamples: Vec<Sample> = samples
            .iter()
            .map(|s| {
                let mut out = s.clone();
                for (old, new) in perm.iter().enumerate() {
                    out.log_intensity[new * cfg.l..(new + 1) * cfg.l]
                        .copy_from_slice(&s.log_intensity[old * cfg.l..(old + 1) * cfg.l]);
                    out.kpi[new * KPI_COUNT * cfg.t..(new + 1) * KPI_COUNT * cfg.t]
                        .copy_from_slice(&s.kpi[old * KPI_COUNT * cfg.t..(old + 1) * KPI_COUNT * cfg.t]);
                    out.latency[new * cfg.t..(new + 1) * cfg.t]
                        .copy_from_slice(&s.latency[old * cfg.t..(old + 1) * cfg.t]);
                }
                out.label_culprit = s.label_culprit.map(|c| perm[c as usize] as u32);
                out
            })
            .collect();

        // no parameter depends on service order: the same store serves both
        let (y0, p0) = forward_values(&cfg, &store, &graph, &samples);
        let (y1, p1) = forward_values(&cfg, &store, &pgraph, &psamples);
        assert_eq!(y0, y1, "detection must ignore relabeling");
        for b in 0..samples.len() {
            for old in 0..m {
                assert_eq!(
                    p0[b * m + old],
                    p1[b * m + perm[old]],
                    "P must permute with the relabeling (sample {b}, service {old})"
                );
            }
        }
    }

    #[test]
    fn loss_examples() {
        // perfect predictions → zero loss (after clamping)
        let mut tape = Tape::<f32>::new(Mode::Eval);
        let y_hat = tape
            .leaf(Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap(), true)
            .unwrap();
        let p = tape
            .leaf(Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.2, 0.3, 0.5]).unwrap(), true)
            .unwrap();
        let fwd = Forward { y_hat, p };
        let labels = vec![(true, Some(0)), (false, None)];
        let loss = build_loss(&mut tape, &fwd, &labels, 3, 0.5).unwrap();
        assert!(tape.value(loss).item() < 1e-5);

        // β=0.5, L1=2, L2=4 → 3 (checked via the combination arithmetic)
        let mut tape = Tape::<f32>::new(Mode::Eval);
        let l1 = tape.constant(Tensor::scalar(2.0)).unwrap();
        let l2 = tape.constant(Tensor::scalar(4.0)).unwrap();
        let a = tape.scale(l1, 0.5).unwrap();
        let bnode = tape.scale(l2, 0.5).unwrap();
        let total = tape.add(a, bnode).unwrap();
        assert_eq!(tape.value(total).item(), 3.0);
    }

    #[test]
    fn all_normal_batch_reduces_to_detection_loss() {
        let mut tape = Tape::<f32>::new(Mode::Eval);
        let y_hat = tape
            .leaf(Tensor::from_vec(&[2], vec![0.3, 0.6]).unwrap(), true)
            .unwrap();
        let p = tape
            .leaf(
                Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.9, 0.1]).unwrap(),
                true,
            )
            .unwrap();
        let labels = vec![(false, None), (false, None)];
        let beta = 0.7;
        let fwd = Forward { y_hat, p };
        let loss = build_loss(&mut tape, &fwd, &labels, 2, beta).unwrap();
        let expected = beta as f32
            * -((1.0f32 - 0.3).ln() + (1.0f32 - 0.6).ln())
            / 2.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-6);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let v = RankedVerdict::from_probs(0.9, vec![0.2, 0.4, 0.2, 0.2]);
        assert_eq!(v.ranking, vec![1, 0, 2, 3]);
        assert_eq!(v.rank_of(1), Some(1));
        assert_eq!(v.rank_of(3), Some(4));
    }

    #[test]
    fn predict_matches_single_batch_forward() {
        let cfg = tiny_cfg(Variant::Full);
        let store = init_params(&cfg, 23).unwrap();
        let graph = chain_graph(cfg.m);
        let samples = batch(&cfg, 5, 29);
        let verdicts = predict(&store, &cfg, &graph, &samples, 2).unwrap();
        let (y, p) = forward_values(&cfg, &store, &graph, &samples);
        for (i, v) in verdicts.iter().enumerate() {
            assert_eq!(v.y_hat, y[i], "chunked eval must match whole-batch eval");
            assert_eq!(v.p, p[i * cfg.m..(i + 1) * cfg.m]);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        use crate::tensorcore::{grad_check, GradCheckOptions};
        let cfg = tiny_cfg(Variant::Full);
        let store = init_params(&cfg, 31).unwrap();
        let graph = chain_graph(cfg.m);
        let prog = LossProgram {
            samples: batch(&cfg, 3, 37),
            cfg,
            neighbor_mask: Arc::new(graph.neighbor_mask()),
            beta_loss: 0.5,
        };
        // small ε: the f64 oracle has headroom, and it shrinks the window
        // in which a ReLU kink sits between the two evaluation points
        let report = grad_check(
            &prog,
            &store,
            &GradCheckOptions {
                epsilon: 1e-5,
                max_coords_per_param: Some(4),
                seed: 5,
            },
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {} at {:?} ({} coords)",
            report.max_rel_err,
            report.worst,
            report.coords_checked
        );
    }
}
