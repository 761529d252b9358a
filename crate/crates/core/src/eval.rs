//! Ranking metrics, the popularity baseline and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CUTOFFS: [usize; 3] = [1, 3, 5];

/// 1-based rank of `target`: one plus the number of strictly larger scores
/// plus the number of equal scores at smaller indices.
pub fn rank_of_target<T: PartialOrd + Copy>(scores: &[T], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Average precision at `k` with a single relevant item: `1/rank` inside the cutoff.
pub fn map_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub instances: usize,
    pub map1: f64,
    pub map3: f64,
    pub map5: f64,
    pub hr1: f64,
    pub hr3: f64,
    pub hr5: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "model,map1,map3,map5,hr1,hr3,hr5";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.model, self.map1, self.map3, self.map5, self.hr1, self.hr3, self.hr5
        )
    }

    pub fn map(&self) -> [f64; 3] {
        [self.map1, self.map3, self.map5]
    }

    pub fn hr(&self) -> [f64; 3] {
        [self.hr1, self.hr3, self.hr5]
    }
}

/// Accumulates per-instance ranks into dataset-level metrics.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    count: usize,
    map: [f64; 3],
    hr: [f64; 3],
}

impl MetricAccumulator {
    pub fn push_rank(&mut self, rank: usize) {
        self.count += 1;
        for (i, &k) in CUTOFFS.iter().enumerate() {
            self.map[i] += map_at_k(rank, k);
            self.hr[i] += hr_at_k(rank, k);
        }
    }

    pub fn finish(&self, model: &str) -> EvalReport {
        let n = self.count.max(1) as f64;
        EvalReport {
            model: model.to_string(),
            instances: self.count,
            map1: self.map[0] / n,
            map3: self.map[1] / n,
            map5: self.map[2] / n,
            hr1: self.hr[0] / n,
            hr3: self.hr[1] / n,
            hr5: self.hr[2] / n,
        }
    }
}

/// Scores every test instance and averages HR@k and mAP@k for k ∈ {1, 3, 5}.
pub fn evaluate_model<T, F>(name: &str, mut score: F, test_set: &[Instance]) -> Result<EvalReport>
where
    T: PartialOrd + Copy,
    F: FnMut(&Instance) -> Result<Vec<T>>,
{
    if test_set.is_empty() {
        return Err(Error::Config("evaluation needs a non-empty test set".into()));
    }
    let mut acc = MetricAccumulator::default();
    for inst in test_set {
        let scores = score(inst)?;
        acc.push_rank(rank_of_target(&scores, inst.target_control_id));
    }
    Ok(acc.finish(name))
}

/// Popularity baseline: a fixed score vector of training label counts.
#[derive(Clone, Debug, PartialEq)]
pub struct PopBaseline {
    counts: Vec<u64>,
}

impl PopBaseline {
    pub fn fit(train_set: &[Instance], num_controls: usize) -> Result<Self> {
        if train_set.is_empty() {
            return Err(Error::Config("popularity baseline needs training instances".into()));
        }
        let mut counts = vec![0u64; num_controls];
        for inst in train_set {
            *counts.get_mut(inst.target_control_id).ok_or(Error::IndexOutOfRange {
                kind: "control",
                index: inst.target_control_id,
                size: num_controls,
            })? += 1;
        }
        Ok(Self { counts })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn score(&self, _instance: &Instance) -> Result<Vec<f64>> {
        Ok(self.scores())
    }
}

pub fn pop_baseline(train_set: &[Instance], num_controls: usize) -> Result<PopBaseline> {
    PopBaseline::fit(train_set, num_controls)
}

/// Indices of the top `k` scores, descending, ties broken by ascending index.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}
