//! Depth metrics, branch selection and uncertainty summaries.

use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::config::BranchTag;
use crate::error::{ensure_shape, Error, Result};
use crate::model::{forward_branch, BranchNetwork};
use crate::types::{DepthMap, DepthRange, FrameSample, SparseDepthTarget};

/// The seven standard depth metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3";

    pub fn values(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.a1, self.a2, self.a3]
    }

    pub fn csv_fields(&self) -> String {
        self.values().map(|v| v.to_string()).join(",")
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Unweighted mean of per-sample records.
    pub fn mean(records: &[Metrics]) -> Result<Metrics> {
        if records.is_empty() {
            return Err(Error::Validation("no metric records to average".into()));
        }
        let n = records.len() as f64;
        let mut acc = [0.0; 7];
        for r in records {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let [abs_rel, sq_rel, rmse, rmse_log, a1, a2, a3] = acc.map(|a| a / n);
        Ok(Metrics {
            abs_rel,
            sq_rel,
            rmse,
            rmse_log,
            a1,
            a2,
            a3,
        })
    }
}

/// Reference depth for evaluation.
#[derive(Clone, Copy, Debug)]
pub enum GroundTruth<'a> {
    Dense(&'a DepthMap),
    Sparse(&'a SparseDepthTarget),
}

impl<'a> GroundTruth<'a> {
    /// Dense depth when the sample has it, otherwise the sparse target.
    pub fn of(sample: &'a FrameSample) -> Self {
        match &sample.dense_gt {
            Some(d) => Self::Dense(d),
            None => Self::Sparse(&sample.sparse_gt),
        }
    }

    fn pairs(&self, pred: &Array2<f64>) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::new();
        match self {
            Self::Dense(d) => {
                ensure_shape(pred.shape(), d.data().shape())?;
                Zip::from(pred).and(d.data()).for_each(|&p, &g| out.push((p, g)));
            }
            Self::Sparse(s) => {
                ensure_shape(pred.shape(), s.values().shape())?;
                Zip::from(pred).and(s.values()).and(s.valid()).for_each(|&p, &g, &ok| {
                    if ok {
                        out.push((p, g))
                    }
                });
            }
        }
        Ok(out)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics over the valid ground-truth pixels. With `median_scale` the
/// prediction is first multiplied by `median(gt) / median(pred)`; it is then
/// clamped to `clamp`.
pub fn compute_metrics(pred: &DepthMap, gt: GroundTruth<'_>, median_scale: bool, clamp: &DepthRange) -> Result<Metrics> {
    let pairs = gt.pairs(pred.data())?;
    if pairs.is_empty() {
        return Err(Error::NoSupervision);
    }
    let scale = if median_scale {
        median(pairs.iter().map(|p| p.1).collect()) / median(pairs.iter().map(|p| p.0).collect())
    } else {
        1.0
    };
    let n = pairs.len() as f64;
    let mut m = Metrics::default();
    for (p, g) in pairs {
        let p = clamp.clamp(p * scale);
        let diff = p - g;
        m.abs_rel += diff.abs() / g;
        m.sq_rel += diff * diff / g;
        m.rmse += diff * diff;
        m.rmse_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        m.a1 += f64::from(ratio < 1.25);
        m.a2 += f64::from(ratio < 1.25f64.powi(2));
        m.a3 += f64::from(ratio < 1.25f64.powi(3));
    }
    Ok(Metrics {
        abs_rel: m.abs_rel / n,
        sq_rel: m.sq_rel / n,
        rmse: (m.rmse / n).sqrt(),
        rmse_log: (m.rmse_log / n).sqrt(),
        a1: m.a1 / n,
        a2: m.a2 / n,
        a3: m.a3 / n,
    })
}

/// Mean per-sample metrics of one network's full-resolution predictions.
pub fn evaluate_network(net: &BranchNetwork, samples: &[FrameSample], median_scale: bool) -> Result<Metrics> {
    let range = net.config().range;
    let records = samples
        .iter()
        .map(|s| {
            let out = forward_branch(net, &s.target)?;
            compute_metrics(&out.depths[0], GroundTruth::of(s), median_scale, &range)
        })
        .collect::<Result<Vec<_>>>()?;
    Metrics::mean(&records)
}

/// Metrics of every available branch and the one chosen as final output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub branch: BranchTag,
    pub metrics: Metrics,
    pub per_branch: Vec<(BranchTag, Metrics)>,
}

/// Evaluates every network and picks `prefer` (falling back to the first
/// network when it is absent).
pub fn select_final_branch(
    networks: &[(BranchTag, &BranchNetwork)],
    samples: &[FrameSample],
    prefer: BranchTag,
    median_scale: bool,
) -> Result<Selection> {
    if networks.is_empty() {
        return Err(Error::Validation("no networks to evaluate".into()));
    }
    let per_branch = networks
        .iter()
        .map(|(tag, net)| Ok((*tag, evaluate_network(net, samples, median_scale)?)))
        .collect::<Result<Vec<_>>>()?;
    let (branch, metrics) = per_branch
        .iter()
        .find(|(t, _)| *t == prefer)
        .copied()
        .unwrap_or(per_branch[0]);
    Ok(Selection {
        branch,
        metrics,
        per_branch,
    })
}

/// Mean predicted `sigma` over pixels with and without sparse ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySplit {
    pub labelled: f64,
    pub unlabelled: f64,
}

impl UncertaintySplit {
    pub fn ratio(&self) -> f64 {
        self.unlabelled / self.labelled
    }
}

/// Pools full-resolution `sigma` over all samples, split by the sparse
/// validity mask.
pub fn uncertainty_split(net: &BranchNetwork, samples: &[FrameSample]) -> Result<UncertaintySplit> {
    let (mut sl, mut nl, mut su, mut nu) = (0.0, 0usize, 0.0, 0usize);
    for s in samples {
        let out = forward_branch(net, &s.target)?;
        let sigma = out.log_sigmas[0].sigma();
        Zip::from(&sigma).and(s.sparse_gt.valid()).for_each(|&v, &ok| {
            if ok {
                sl += v;
                nl += 1;
            } else {
                su += v;
                nu += 1;
            }
        });
    }
    if nl == 0 || nu == 0 {
        return Err(Error::Validation("uncertainty split needs labelled and unlabelled pixels".into()));
    }
    Ok(UncertaintySplit {
        labelled: sl / nl as f64,
        unlabelled: su / nu as f64,
    })
}

/// One evaluated (split, branch) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub branch: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("split,branch,{}\n", Metrics::CSV_HEADER);
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.split, r.branch, r.metrics.csv_fields()));
    }
    out
}

/// Writes `<stem>.csv` and its JSON mirror `<stem>.json`.
pub fn write_metrics(dir: &Path, stem: &str, rows: &[MetricRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, metrics_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(rows).map_err(|e| Error::decode(&json, e))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn range() -> DepthRange {
        DepthRange::default()
    }

    #[test]
    fn two_pixel_example() {
        let pred = DepthMap::new(array![[2.0, 4.0]]).unwrap();
        let gt = DepthMap::new(array![[1.0, 2.0]]).unwrap();
        let m = compute_metrics(&pred, GroundTruth::Dense(&gt), false, &range()).unwrap();
        assert_eq!(m.abs_rel, 1.0);
        assert_eq!(m.sq_rel, 1.5);
        assert_relative_eq!(m.rmse, 2.5f64.sqrt(), max_relative = 1e-15);
        // Both ratios are exactly 2, above 1.25^3 = 1.953125.
        assert_eq!((m.a1, m.a2, m.a3), (0.0, 0.0, 0.0));
        let within = compute_metrics(&DepthMap::new(array![[1.9, 3.8]]).unwrap(), GroundTruth::Dense(&gt), false, &range()).unwrap();
        assert_eq!((within.a1, within.a2, within.a3), (0.0, 0.0, 1.0));
    }

    #[test]
    fn perfect_and_median_scaled() {
        let gt = DepthMap::new(array![[1.0, 3.0], [7.0, 20.0]]).unwrap();
        let perfect = Metrics {
            a1: 1.0,
            a2: 1.0,
            a3: 1.0,
            ..Default::default()
        };
        assert_eq!(compute_metrics(&gt, GroundTruth::Dense(&gt), false, &range()).unwrap(), perfect);
        let double = DepthMap::new(gt.data() * 2.0).unwrap();
        let m = compute_metrics(&double, GroundTruth::Dense(&gt), true, &range()).unwrap();
        for (a, b) in m.values().iter().zip(perfect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_ignores_invalid_and_empty_errors() {
        let pred = DepthMap::new(array![[2.0, 50.0]]).unwrap();
        let gt = SparseDepthTarget::new(array![[2.0, 1.0]], array![[true, false]]).unwrap();
        let m = compute_metrics(&pred, GroundTruth::Sparse(&gt), false, &range()).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        let none = SparseDepthTarget::new(array![[2.0, 1.0]], array![[false, false]]).unwrap();
        assert!(compute_metrics(&pred, GroundTruth::Sparse(&none), false, &range()).is_err());
    }

    #[test]
    fn clamps_predictions() {
        let pred = DepthMap::new(array![[500.0]]).unwrap();
        let gt = DepthMap::new(array![[50.0]]).unwrap();
        let m = compute_metrics(&pred, GroundTruth::Dense(&gt), false, &range()).unwrap();
        assert_eq!(m.abs_rel, 1.0);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![MetricRow {
            split: "val".into(),
            branch: "supervised".into(),
            metrics: Metrics::default(),
        }];
        let text = metrics_csv(&rows);
        assert!(text.starts_with("split,branch,abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
