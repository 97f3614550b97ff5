//! Dataset splitting, the Adam update and the training loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_forward, build_loss, init_params, BatchData, ModelConfig};
use crate::telemetry::{DependencyGraph, Sample, KPI_COUNT};
use crate::tensorcore::{Mode, ParameterStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta_loss: f64,
    pub seed: u64,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub split_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 256,
            epochs: 50,
            beta_loss: 0.5,
            seed: 7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            split_ratio: 0.6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0 < self.split_ratio && self.split_ratio < 1.0) {
            return Err(Error::config("split ratio must be in (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.beta_loss) {
            return Err(Error::config("beta_loss must be in [0,1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        Ok(())
    }

    /// Desk-scale override: the documented default batch of 256 shrinks to
    /// 64 when the dataset is smaller than ten such batches.
    pub fn effective_batch(&self, n_samples: usize) -> usize {
        if self.batch_size == 256 && n_samples < 2560 {
            64
        } else {
            self.batch_size
        }
    }
}

/// Class balance on both sides of the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub boundary: usize,
    pub train_total: usize,
    pub train_abnormal: usize,
    pub test_total: usize,
    pub test_abnormal: usize,
    pub train_per_culprit: Vec<usize>,
    pub test_per_culprit: Vec<usize>,
}

impl SplitReport {
    pub fn abnormal_ratio_train(&self) -> f64 {
        self.train_abnormal as f64 / self.train_total.max(1) as f64
    }
    pub fn abnormal_ratio_test(&self) -> f64 {
        self.test_abnormal as f64 / self.test_total.max(1) as f64
    }
}

/// Contiguous time-ordered split: the first `ratio` of windows train, the
/// rest test. Periods, not shuffled rows.
pub fn split_dataset(
    samples: &[Sample],
    ratio: f64,
    m: usize,
) -> Result<(&[Sample], &[Sample], SplitReport)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::config("split ratio must be in (0,1)"));
    }
    if samples.windows(2).any(|w| w[0].window_index > w[1].window_index) {
        return Err(Error::data("samples must be ordered by window index"));
    }
    let boundary = (ratio * samples.len() as f64).floor() as usize;
    if boundary == 0 || boundary == samples.len() {
        return Err(Error::data(format!(
            "split at {boundary} of {} leaves one side empty",
            samples.len()
        )));
    }
    let (train, test) = samples.split_at(boundary);
    let count = |side: &[Sample]| -> (usize, Vec<usize>) {
        let mut per = vec![0usize; m];
        let mut abn = 0;
        for s in side {
            if let Some(c) = s.label_culprit {
                per[c as usize] += 1;
                abn += 1;
            }
        }
        (abn, per)
    };
    let (train_abnormal, train_per_culprit) = count(train);
    let (test_abnormal, test_per_culprit) = count(test);
    Ok((
        train,
        test,
        SplitReport {
            boundary,
            train_total: train.len(),
            train_abnormal,
            test_total: test.len(),
            test_abnormal,
            train_per_culprit,
            test_per_culprit,
        },
    ))
}

/// First/second moment state carried across Adam steps.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub t: u64,
}

/// One Adam update with bias correction over every gradient entry.
/// Non-finite gradients abort before any parameter changes.
pub fn adam_step(
    store: &mut ParameterStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {name}")));
        }
        if !store.is_trainable(name) {
            return Err(Error::data(format!("gradient for non-trainable {name}")));
        }
    }
    state.t += 1;
    let t = state.t;
    let (b1, b2, eps, lr) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.lr);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (name, g) in grads {
        let mut tensor = store.get(name)?.clone();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((p, gi), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        store.set(name, tensor)?;
    }
    Ok(())
}

/// Per-channel z-score statistics over the train split (KPI channels and the
/// latency channel), with a floor on the deviations.
pub fn compute_norm_stats(train: &[Sample], m: usize, t: usize) -> NormStats {
    let mut kpi_sum = [0.0f64; KPI_COUNT];
    let mut kpi_sq = [0.0f64; KPI_COUNT];
    let mut lat_sum = 0.0f64;
    let mut lat_sq = 0.0f64;
    let n = (train.len() * m * t).max(1) as f64;
    for s in train {
        for svc in 0..m {
            for k in 0..KPI_COUNT {
                for slot in 0..t {
                    let v = s.kpi[(svc * KPI_COUNT + k) * t + slot] as f64;
                    kpi_sum[k] += v;
                    kpi_sq[k] += v * v;
                }
            }
            for slot in 0..t {
                let v = s.latency[svc * t + slot] as f64;
                lat_sum += v;
                lat_sq += v * v;
            }
        }
    }
    let mut kpi_mean = [0.0f32; KPI_COUNT];
    let mut kpi_std = [1.0f32; KPI_COUNT];
    for k in 0..KPI_COUNT {
        let mean = kpi_sum[k] / n;
        let var = (kpi_sq[k] / n - mean * mean).max(0.0);
        kpi_mean[k] = mean as f32;
        kpi_std[k] = var.sqrt().max(1e-6) as f32;
    }
    let lat_mean = lat_sum / n;
    let lat_var = (lat_sq / n - lat_mean * lat_mean).max(0.0);
    NormStats {
        kpi_mean,
        kpi_std,
        latency_mean: lat_mean as f32,
        latency_std: lat_var.sqrt().max(1e-6) as f32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub kpi_mean: [f32; KPI_COUNT],
    pub kpi_std: [f32; KPI_COUNT],
    pub latency_mean: f32,
    pub latency_std: f32,
}

impl NormStats {
    pub fn write_into(&self, store: &mut ParameterStore<f32>) -> Result<()> {
        store.insert(
            "norm.kpi_mean",
            Tensor::from_vec(&[KPI_COUNT], self.kpi_mean.to_vec())?,
            false,
        );
        store.insert(
            "norm.kpi_std",
            Tensor::from_vec(&[KPI_COUNT], self.kpi_std.to_vec())?,
            false,
        );
        store.insert(
            "norm.latency_mean",
            Tensor::from_vec(&[1], vec![self.latency_mean])?,
            false,
        );
        store.insert(
            "norm.latency_std",
            Tensor::from_vec(&[1], vec![self.latency_std])?,
            false,
        );
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub store: ParameterStore<f32>,
    /// Mean joint loss per epoch.
    pub history: Vec<f32>,
}

/// Seeded epoch loop over shuffled mini-batches minimizing the joint loss.
/// Batch norm runs in train mode and its refreshed running statistics are
/// committed after every step; a fixed seed reproduces the final parameters
/// bit for bit.
pub fn train_model(
    train: &[Sample],
    graph: &DependencyGraph,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    if !train.iter().any(|s| s.label_y) {
        return Err(Error::data("training split has no abnormal samples"));
    }

    let mut store = init_params(model_cfg, cfg.seed)?;
    compute_norm_stats(train, model_cfg.m, model_cfg.t).write_into(&mut store)?;
    let mask = Arc::new(graph.neighbor_mask());
    let batch = cfg.effective_batch(train.len());

    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(batch).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|i| &train[*i]).collect();
            let labels: Vec<(bool, Option<u32>)> =
                refs.iter().map(|s| (s.label_y, s.label_culprit)).collect();

            let mut tape = Tape::<f32>::new(Mode::Train);
            let data = BatchData::from_samples(&refs, model_cfg, &store)?;
            let fwd = build_forward(&mut tape, &store, model_cfg, &mask, &data)?;
            let loss = build_loss(&mut tape, &fwd, &labels, model_cfg.m, cfg.beta_loss)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!(
                    "loss diverged at batch {batch_idx}"
                )));
            }
            tape.backward(loss)
                .map_err(|e| Error::numeric(format!("batch {batch_idx}: {e}")))?;

            let mut grads = BTreeMap::new();
            for name in store.trainable_names() {
                let node = tape
                    .param_node(&name)
                    .ok_or_else(|| Error::data(format!("parameter {name} unused in graph")))?;
                let g = match tape.grad(node) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(store.get(&name)?.shape()),
                };
                grads.insert(name, g);
            }
            adam_step(&mut store, &grads, &mut state, cfg)?;
            for (name, tensor) in tape.stat_updates() {
                store.set(name, tensor.clone())?;
            }
            epoch_loss += loss_val as f64 * refs.len() as f64;
            seen += refs.len();
        }
        history.push((epoch_loss / seen as f64) as f32);
    }

    Ok(TrainOutput { store, history })
}
