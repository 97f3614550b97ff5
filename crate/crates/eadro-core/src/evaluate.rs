//! Detection and localization metrics plus the N-sigma baseline detector.
//!
//! Detection is scored with the usual confusion-matrix family; FOR and FDR
//! use FN/(FN+TN) and FP/(FP+TN) respectively (the conventional
//! FP/(FP+TP) discovery rate is also reported under a distinct name).
//! Localization is scored on ground-truth-abnormal samples with HR@k and
//! binary-relevance NDCG@k; a gated variant additionally requires the
//! model's own detector to have fired, counting missed detections as
//! localization misses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, ModelConfig, RankedVerdict};
use crate::telemetry::{DependencyGraph, Sample};
use crate::tensorcore::ParameterStore;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (predicted, truth) in pairs {
            match (predicted, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub for_rate: f64,
    pub fdr: f64,
    /// FP/(FP+TP), reported alongside the headline FDR definition.
    pub fdr_conventional: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: Vec<&'static str>,
}

/// Precision, recall, F1, false omission rate and false discovery rate from
/// raw counts. Any zero-denominator metric reports 0 and is flagged.
pub fn confusion_metrics(c: &ConfusionCounts) -> DetectionMetrics {
    let mut degenerate = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &'static str| -> f64 {
        if den == 0 {
            degenerate.push(name);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let pre = ratio(c.tp, c.tp + c.fp, "Pre");
    let rec = ratio(c.tp, c.tp + c.fn_, "Rec");
    let for_rate = ratio(c.fn_, c.fn_ + c.tn, "FOR");
    let fdr = ratio(c.fp, c.fp + c.tn, "FDR");
    let fdr_conventional = ratio(c.fp, c.fp + c.tp, "FDR_conv");
    let f1 = if pre + rec == 0.0 {
        degenerate.push("F1");
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    };
    DetectionMetrics {
        pre,
        rec,
        f1,
        for_rate,
        fdr,
        fdr_conventional,
        degenerate,
    }
}

/// One localization outcome: the predicted ranking and the true culprit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationCase {
    pub ranking: Vec<usize>,
    pub truth: usize,
}

fn check_k(k: usize, m: usize) -> Result<()> {
    if k < 1 || k > m {
        return Err(Error::config(format!("k={k} outside [1, M={m}]")));
    }
    Ok(())
}

/// Fraction of cases whose culprit appears in the top k of the ranking.
pub fn hr_at_k(cases: &[LocalizationCase], k: usize, m: usize) -> Result<f64> {
    check_k(k, m)?;
    if cases.is_empty() {
        return Ok(0.0);
    }
    let hits = cases
        .iter()
        .filter(|c| c.ranking.iter().take(k).any(|s| *s == c.truth))
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Binary-relevance NDCG: per case `1/log2(rank+1)` when the culprit ranks
/// within the top k (1-based), else 0; the ideal DCG is 1, so the mean is
/// already normalized.
pub fn ndcg_at_k(cases: &[LocalizationCase], k: usize, m: usize) -> Result<f64> {
    check_k(k, m)?;
    if cases.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = cases
        .iter()
        .map(|c| {
            match c.ranking.iter().position(|s| *s == c.truth) {
                Some(pos) if pos < k => 1.0 / ((pos + 2) as f64).log2(),
                _ => 0.0,
            }
        })
        .sum();
    Ok(sum / cases.len() as f64)
}

/// Threshold detector over fault-free history: alarms when a window's max
/// latency exceeds `μ + n·σ` of the historical per-window maxima.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NSigmaDetector {
    pub mu: f64,
    pub sigma: f64,
    pub n: f64,
}

impl NSigmaDetector {
    pub fn fit(history_max: &[f64], n: f64) -> Result<Self> {
        if history_max.is_empty() {
            return Err(Error::data("n-sigma needs non-empty fault-free history"));
        }
        let len = history_max.len() as f64;
        let mu = history_max.iter().sum::<f64>() / len;
        let var = history_max.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / len;
        Ok(NSigmaDetector {
            mu,
            sigma: var.sqrt(),
            n,
        })
    }

    pub fn alarms(&self, window_max: f64) -> bool {
        window_max > self.mu + self.n * self.sigma
    }
}

/// Max latency over all services and slots of a window.
pub fn window_max_latency(s: &Sample) -> f64 {
    s.latency.iter().fold(0.0f64, |a, v| a.max(*v as f64))
}

/// The report schema: exactly these ten fields, mirroring the table columns
/// the pipeline prints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "Rec")]
    pub rec: f64,
    #[serde(rename = "Pre")]
    pub pre: f64,
    #[serde(rename = "FOR")]
    pub for_rate: f64,
    #[serde(rename = "FDR")]
    pub fdr: f64,
    #[serde(rename = "HR@1")]
    pub hr1: f64,
    #[serde(rename = "HR@3")]
    pub hr3: f64,
    #[serde(rename = "HR@5")]
    pub hr5: f64,
    #[serde(rename = "NDCG@3")]
    pub ndcg3: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg5: f64,
}

/// Localization under the detector gate: an abnormal sample the detector
/// missed counts as a miss at every k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatedLocalization {
    pub hr1: f64,
    pub hr3: f64,
    pub hr5: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: MetricsRecord,
    pub gated: GatedLocalization,
    pub fdr_conventional: f64,
    pub degenerate: Vec<&'static str>,
    pub counts: ConfusionCounts,
    pub abnormal_evaluated: usize,
}

impl EvalReport {
    /// Human-readable table with one metric per row.
    pub fn render_table(&self) -> String {
        let m = &self.metrics;
        let g = &self.gated;
        let mut out = String::new();
        out.push_str("metric      ungated   gated\n");
        out.push_str(&format!("F1        {:9.4}\n", m.f1));
        out.push_str(&format!("Rec       {:9.4}\n", m.rec));
        out.push_str(&format!("Pre       {:9.4}\n", m.pre));
        out.push_str(&format!("FOR       {:9.4}\n", m.for_rate));
        out.push_str(&format!("FDR       {:9.4}   (conventional FP/(FP+TP): {:.4})\n", m.fdr, self.fdr_conventional));
        out.push_str(&format!("HR@1      {:9.4} {:7.4}\n", m.hr1, g.hr1));
        out.push_str(&format!("HR@3      {:9.4} {:7.4}\n", m.hr3, g.hr3));
        out.push_str(&format!("HR@5      {:9.4} {:7.4}\n", m.hr5, g.hr5));
        out.push_str(&format!("NDCG@3    {:9.4} {:7.4}\n", m.ndcg3, g.ndcg3));
        out.push_str(&format!("NDCG@5    {:9.4} {:7.4}\n", m.ndcg5, g.ndcg5));
        out.push_str(&format!(
            "counts    TP={} FP={} FN={} TN={}  abnormal evaluated: {}\n",
            self.counts.tp, self.counts.fp, self.counts.fn_, self.counts.tn, self.abnormal_evaluated
        ));
        if !self.degenerate.is_empty() {
            out.push_str(&format!("degenerate: {}\n", self.degenerate.join(", ")));
        }
        out
    }
}

/// Scores precomputed verdicts against labels. Detection uses the 0.5
/// threshold over all samples; localization uses ground-truth-abnormal
/// samples, ungated as the headline numbers and gated alongside.
pub fn evaluate_verdicts(
    verdicts: &[RankedVerdict],
    samples: &[Sample],
    m: usize,
) -> Result<EvalReport> {
    if verdicts.len() != samples.len() {
        return Err(Error::data(format!(
            "{} verdicts for {} samples",
            verdicts.len(),
            samples.len()
        )));
    }
    let counts = ConfusionCounts::from_pairs(
        verdicts
            .iter()
            .zip(samples)
            .map(|(v, s)| (v.is_anomalous(), s.label_y)),
    );
    let det = confusion_metrics(&counts);

    let mut cases = Vec::new();
    let mut gated_cases = Vec::new();
    for (v, s) in verdicts.iter().zip(samples) {
        if let Some(c) = s.label_culprit {
            let case = LocalizationCase {
                ranking: v.ranking.clone(),
                truth: c as usize,
            };
            if v.is_anomalous() {
                gated_cases.push(case.clone());
            } else {
                // missed detection: an empty ranking can never hit
                gated_cases.push(LocalizationCase {
                    ranking: Vec::new(),
                    truth: c as usize,
                });
            }
            cases.push(case);
        }
    }
    // rankings of length zero (gated misses) are handled by the contains/
    // position checks; validate the real ones
    for c in &cases {
        if c.ranking.len() != m {
            return Err(Error::data("verdict ranking does not cover the roster"));
        }
    }

    let hr = |cs: &[LocalizationCase], k: usize| hr_at_k(cs, k, m);
    let nd = |cs: &[LocalizationCase], k: usize| ndcg_at_k(cs, k, m);
    let metrics = MetricsRecord {
        f1: det.f1,
        rec: det.rec,
        pre: det.pre,
        for_rate: det.for_rate,
        fdr: det.fdr,
        hr1: hr(&cases, 1)?,
        hr3: hr(&cases, 3)?,
        hr5: hr(&cases, 5)?,
        ndcg3: nd(&cases, 3)?,
        ndcg5: nd(&cases, 5)?,
    };
    let gated = GatedLocalization {
        hr1: hr(&gated_cases, 1)?,
        hr3: hr(&gated_cases, 3)?,
        hr5: hr(&gated_cases, 5)?,
        ndcg3: nd(&gated_cases, 3)?,
        ndcg5: nd(&gated_cases, 5)?,
    };
    Ok(EvalReport {
        metrics,
        gated,
        fdr_conventional: det.fdr_conventional,
        degenerate: det.degenerate,
        counts,
        abnormal_evaluated: cases.len(),
    })
}

/// Runs the trained model over the test split and scores it.
pub fn evaluate_end_to_end(
    store: &ParameterStore<f32>,
    model_cfg: &ModelConfig,
    graph: &DependencyGraph,
    test: &[Sample],
    batch: usize,
) -> Result<EvalReport> {
    if graph.service_count() != model_cfg.m {
        return Err(Error::data(format!(
            "graph has {} services, model expects {}",
            graph.service_count(),
            model_cfg.m
        )));
    }
    let verdicts = predict(store, model_cfg, graph, test, batch)?;
    evaluate_verdicts(&verdicts, test, model_cfg.m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_worked_example() {
        let c = ConfusionCounts {
            tp: 8,
            fp: 2,
            fn_: 2,
            tn: 88,
        };
        let m = confusion_metrics(&c);
        assert!((m.pre - 0.8).abs() < 1e-12);
        assert!((m.rec - 0.8).abs() < 1e-12);
        assert!((m.f1 - 0.8).abs() < 1e-12);
        assert!((m.for_rate - 2.0 / 90.0).abs() < 1e-12);
        assert!((m.fdr - 2.0 / 90.0).abs() < 1e-12);
        assert!((m.fdr_conventional - 0.2).abs() < 1e-12);
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn all_correct_has_zero_error_rates() {
        let m = confusion_metrics(&ConfusionCounts {
            tp: 10,
            fp: 0,
            fn_: 0,
            tn: 90,
        });
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.for_rate, 0.0);
        assert_eq!(m.fdr, 0.0);
    }

    #[test]
    fn zero_denominators_flag_degenerate() {
        let m = confusion_metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 5,
            tn: 5,
        });
        assert_eq!(m.pre, 0.0);
        assert!(m.degenerate.contains(&"Pre"));
    }

    fn case(ranking: Vec<usize>, truth: usize) -> LocalizationCase {
        LocalizationCase { ranking, truth }
    }

    #[test]
    fn hr_examples() {
        let cases = vec![
            case(vec![0, 1, 2, 3], 0),
            case(vec![1, 0, 2, 3], 1),
            case(vec![2, 1, 0, 3], 0),
            case(vec![3, 2, 1, 0], 0),
        ];
        assert_eq!(hr_at_k(&cases, 1, 4).unwrap(), 0.5);
        assert_eq!(hr_at_k(&cases, 4, 4).unwrap(), 1.0, "k = M always hits");
        assert!(hr_at_k(&cases, 0, 4).is_err());
        assert!(hr_at_k(&cases, 5, 4).is_err());
    }

    #[test]
    fn ndcg_hand_cases() {
        let first = vec![case(vec![0, 1, 2, 3, 4], 0)];
        assert!((ndcg_at_k(&first, 3, 5).unwrap() - 1.0).abs() < 1e-12);
        let second = vec![case(vec![1, 0, 2, 3, 4], 0)];
        assert!((ndcg_at_k(&second, 3, 5).unwrap() - 1.0 / 3.0f64.log2()).abs() < 1e-9);
        assert!((ndcg_at_k(&second, 3, 5).unwrap() - 0.6309).abs() < 1e-4);
        let fourth = vec![case(vec![1, 2, 3, 0, 4], 0)];
        assert_eq!(ndcg_at_k(&fourth, 3, 5).unwrap(), 0.0, "outside top-k");
    }

    #[test]
    fn rank_metrics_match_brute_force_recounts() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let m = 8;
        for _ in 0..50 {
            let cases: Vec<LocalizationCase> = (0..30)
                .map(|_| {
                    let mut ranking: Vec<usize> = (0..m).collect();
                    for i in (1..m).rev() {
                        let j = rng.random_range(0..=i);
                        ranking.swap(i, j);
                    }
                    case(ranking, rng.random_range(0..m))
                })
                .collect();
            for k in 1..=m {
                // brute force by literal definition
                let mut hits = 0usize;
                let mut dcg = 0.0f64;
                for c in &cases {
                    let mut found = None;
                    for (pos, s) in c.ranking.iter().enumerate() {
                        if *s == c.truth {
                            found = Some(pos + 1);
                        }
                    }
                    let rank = found.unwrap();
                    if rank <= k {
                        hits += 1;
                        dcg += 1.0 / ((rank + 1) as f64).log2();
                    }
                }
                let hr_bf = hits as f64 / cases.len() as f64;
                let nd_bf = dcg / cases.len() as f64;
                assert_eq!(hr_at_k(&cases, k, m).unwrap(), hr_bf);
                assert!((ndcg_at_k(&cases, k, m).unwrap() - nd_bf).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_metrics_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let m = 6;
        let cases: Vec<LocalizationCase> = (0..40)
            .map(|_| {
                let mut ranking: Vec<usize> = (0..m).collect();
                for i in (1..m).rev() {
                    let j = rng.random_range(0..=i);
                    ranking.swap(i, j);
                }
                case(ranking, rng.random_range(0..m))
            })
            .collect();
        let mut prev_hr = 0.0;
        let mut prev_nd = 0.0;
        for k in 1..=m {
            let hr = hr_at_k(&cases, k, m).unwrap();
            let nd = ndcg_at_k(&cases, k, m).unwrap();
            assert!(hr >= prev_hr && nd >= prev_nd);
            assert!(nd <= 1.0 && hr <= 1.0);
            prev_hr = hr;
            prev_nd = nd;
        }
    }

    #[test]
    fn nsigma_examples() {
        let d = NSigmaDetector {
            mu: 100.0,
            sigma: 10.0,
            n: 3.0,
        };
        assert!(d.alarms(140.0), "140 > 130");
        assert!(!d.alarms(100.0), "mean never alarms");
        let never = NSigmaDetector {
            mu: 100.0,
            sigma: 10.0,
            n: 1e12,
        };
        assert!(!never.alarms(1e9), "huge n never alarms on finite data");
        assert!(NSigmaDetector::fit(&[], 3.0).is_err());
    }

    #[test]
    fn nsigma_invariant_under_positive_affine_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let history: Vec<f64> = (0..200).map(|_| rng.random_range(50.0..150.0)).collect();
        let d = NSigmaDetector::fit(&history, 3.0).unwrap();
        let (a, b) = (2.5f64, 40.0f64);
        let scaled: Vec<f64> = history.iter().map(|x| a * x + b).collect();
        let ds = NSigmaDetector::fit(&scaled, 3.0).unwrap();
        for probe in [80.0, 120.0, 160.0, 200.0, 500.0] {
            assert_eq!(d.alarms(probe), ds.alarms(a * probe + b), "probe {probe}");
        }
    }

    fn verdict(y: f32, p: Vec<f32>) -> RankedVerdict {
        RankedVerdict::from_probs(y, p)
    }

    fn labeled(idx: u32, abnormal: bool, culprit: u32, m: usize) -> Sample {
        Sample {
            window_index: idx,
            log_intensity: vec![0.0; m],
            kpi: vec![0.0; m * 7 * 2],
            latency: vec![0.0; m * 2],
            label_y: abnormal,
            label_culprit: abnormal.then_some(culprit),
        }
    }

    #[test]
    fn perfect_verdicts_score_one() {
        let m = 6;
        let samples = vec![
            labeled(0, true, 2, m),
            labeled(1, false, 0, m),
            labeled(2, true, 4, m),
        ];
        let verdicts = vec![
            verdict(0.99, {
                let mut p = vec![0.01; m];
                p[2] = 0.95;
                p
            }),
            verdict(0.01, vec![1.0 / m as f32; m]),
            verdict(0.93, {
                let mut p = vec![0.01; m];
                p[4] = 0.95;
                p
            }),
        ];
        let r = evaluate_verdicts(&verdicts, &samples, m).unwrap();
        assert_eq!(r.metrics.f1, 1.0);
        assert_eq!(r.metrics.hr1, 1.0);
        assert_eq!(r.metrics.ndcg5, 1.0);
        assert_eq!(r.gated.hr1, 1.0);
        assert_eq!(r.abnormal_evaluated, 2);
    }

    #[test]
    fn uniform_random_localizer_hits_at_chance() {
        let m = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let n = 4000;
        let samples: Vec<Sample> = (0..n)
            .map(|i| labeled(i as u32, true, rng.random_range(0..m as u32), m))
            .collect();
        let verdicts: Vec<RankedVerdict> = (0..n)
            .map(|_| {
                let p: Vec<f32> = (0..m).map(|_| rng.random_range(0.0f32..1.0)).collect();
                verdict(0.9, p)
            })
            .collect();
        let r = evaluate_verdicts(&verdicts, &samples, m).unwrap();
        assert!(
            (r.metrics.hr1 - 0.1).abs() < 0.03,
            "HR@1 should approach 1/M, got {}",
            r.metrics.hr1
        );
    }

    #[test]
    fn gated_metrics_penalize_missed_detections() {
        let m = 5;
        let samples = vec![labeled(0, true, 1, m), labeled(1, true, 2, m)];
        let hit = {
            let mut p = vec![0.01; m];
            p[1] = 0.9;
            p
        };
        let hit2 = {
            let mut p = vec![0.01; m];
            p[2] = 0.9;
            p
        };
        // first verdict localizes right but the detector missed it
        let verdicts = vec![verdict(0.2, hit), verdict(0.8, hit2)];
        let r = evaluate_verdicts(&verdicts, &samples, m).unwrap();
        assert_eq!(r.metrics.hr1, 1.0, "ungated ignores the gate");
        assert_eq!(r.gated.hr1, 0.5, "gated counts the miss");
    }

    #[test]
    fn record_schema_has_exactly_the_ten_fields() {
        let r = MetricsRecord {
            f1: 1.0,
            rec: 1.0,
            pre: 1.0,
            for_rate: 0.0,
            fdr: 0.0,
            hr1: 1.0,
            hr3: 1.0,
            hr5: 1.0,
            ndcg3: 1.0,
            ndcg5: 1.0,
        };
        // field order in the emitted record follows the struct declaration
        let json = serde_json::to_string(&r).unwrap();
        let mut keys = Vec::new();
        let mut rest = json.as_str();
        while let Some(start) = rest.find('"') {
            let tail = &rest[start + 1..];
            let end = tail.find('"').unwrap();
            keys.push(&tail[..end]);
            let after = &tail[end + 1..];
            // skip the value up to the next comma or the end
            rest = match after.find(',') {
                Some(c) => &after[c..],
                None => "",
            };
        }
        assert_eq!(
            keys,
            vec!["F1", "Rec", "Pre", "FOR", "FDR", "HR@1", "HR@3", "HR@5", "NDCG@3", "NDCG@5"]
        );
    }
}
