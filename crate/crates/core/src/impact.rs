//! Parameter importance: the Fisher-diagonal impact and two competing
//! metrics, plus the statistics used to compare them.
//!
//! Near a converged point the loss change caused by perturbing one weight by
//! `delta` is approximately `0.5 * H_ii * delta^2`, and the Hessian diagonal
//! is approximated by the Fisher diagonal `F_ii = E[g_i^2]`. Here the
//! expectation runs over calibration *sequences*: each sequence contributes
//! the squared gradient of its own mean next-token loss.

use std::collections::HashSet;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real};
use crate::error::{Error, Result};
use crate::lm::{TokenBatch, ToyLm};

/// Per-parameter importance of one weight matrix (row-major, same shape as
/// the weights). Used for all three metrics; `sample_count` is the number of
/// calibration sequences behind the values (zero for the weight metric).
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactMap {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub sample_count: usize,
}

/// Importance criterion used to pick cherry columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Impact,
    Weight,
    Activation,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Impact, Metric::Weight, Metric::Activation];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Impact => "impact",
            Metric::Weight => "weight",
            Metric::Activation => "activation",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impact" => Ok(Metric::Impact),
            "weight" => Ok(Metric::Weight),
            "activation" => Ok(Metric::Activation),
            other => Err(Error::config(format!(
                "unknown metric {other:?} (expected impact, weight or activation)"
            ))),
        }
    }
}

/// Running sums of squared gradients, one `f64` slot per parameter.
/// Samples are folded in the order they are added.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl FisherAccumulator {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            sums: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            count: 0,
        }
    }

    /// Adds one gradient sample (one slice per tracked tensor).
    pub fn add<T: Real>(&mut self, grads: &[&[T]]) -> Result<()> {
        if grads.len() != self.sums.len() {
            return Err(Error::config(format!("{} gradients for {} tensors", grads.len(), self.sums.len())));
        }
        for (s, g) in self.sums.iter_mut().zip(grads) {
            if s.len() != g.len() {
                return Err(Error::config(format!("gradient of {} elements, expected {}", g.len(), s.len())));
            }
            for (a, &v) in s.iter_mut().zip(g.iter()) {
                let v = v.f64();
                *a += v * v;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `E[g^2]` per parameter.
    pub fn finish(self) -> Result<Vec<Vec<f64>>> {
        if self.count == 0 {
            return Err(Error::data("no gradient samples"));
        }
        let n = self.count as f64;
        Ok(self.sums.into_iter().map(|s| s.into_iter().map(|v| v / n).collect()).collect())
    }
}

/// Fisher-diagonal impact of every quantizable matrix.
pub fn estimate_impact<T: Real>(model: &ToyLm<T>, batches: &[TokenBatch]) -> Result<Vec<ImpactMap>> {
    estimate_impact_scaled(model, batches, 1.0)
}

/// As [`estimate_impact`], with each sequence loss multiplied by
/// `loss_scale` (so every impact scales by `loss_scale^2`).
pub fn estimate_impact_scaled<T: Real>(model: &ToyLm<T>, batches: &[TokenBatch], loss_scale: f64) -> Result<Vec<ImpactMap>> {
    if batches.is_empty() {
        return Err(Error::data("impact estimation needs at least one calibration batch"));
    }
    let targets = model.quantizable();
    let sizes: Vec<usize> = targets.iter().map(|&i| model.params()[i].numel()).collect();
    let mut acc = FisherAccumulator::new(&sizes);
    for batch in batches {
        for seq in batch.split_sequences() {
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let f = model.forward(&mut g, &vars, &seq)?;
            let loss = if loss_scale == 1.0 {
                f.loss
            } else {
                g.scale(f.loss, T::of(loss_scale))?
            };
            g.backward(loss)?;
            let mut grads = Vec::with_capacity(targets.len());
            for &i in &targets {
                let gr = g.grad(vars[i]).unwrap_or(&[]);
                if let Some(bad) = gr.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        "estimate_impact",
                        format!("non-finite gradient in {} at {bad}", model.names()[i]),
                    ));
                }
                grads.push(gr);
            }
            if grads.iter().any(|g| g.is_empty()) {
                // frozen parameters produce no gradient: impact zero
                let zeros: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
                let filled: Vec<&[T]> = grads
                    .iter()
                    .zip(&zeros)
                    .map(|(g, z)| if g.is_empty() { z.as_slice() } else { *g })
                    .collect();
                acc.add(&filled)?;
            } else {
                acc.add(&grads)?;
            }
        }
    }
    let count = acc.count();
    let fisher = acc.finish()?;
    Ok(targets
        .iter()
        .zip(fisher)
        .map(|(&i, f)| {
            let shape = model.params()[i].shape();
            ImpactMap {
                name: model.names()[i].clone(),
                rows: shape[0],
                cols: shape[1],
                values: f.into_iter().map(|v| v as f32).collect(),
                sample_count: count,
            }
        })
        .collect())
}

/// Second-order loss change predicted for perturbing a weight with Fisher
/// value `fisher` by `delta`: `0.5 * F * delta^2`.
pub fn predicted_loss_delta(fisher: f64, delta: f64) -> f64 {
    0.5 * fisher * delta * delta
}

/// `|w|` elementwise.
pub fn weight_metric(w: &[f32]) -> Vec<f32> {
    w.iter().map(|v| v.abs()).collect()
}

/// Weight-magnitude maps of every quantizable matrix.
pub fn weight_maps<T: Real>(model: &ToyLm<T>) -> Vec<ImpactMap> {
    model
        .quantizable()
        .into_iter()
        .map(|i| {
            let p = &model.params()[i];
            ImpactMap {
                name: model.names()[i].clone(),
                rows: p.shape()[0],
                cols: p.shape()[1],
                values: p.data().iter().map(|v| v.f64().abs() as f32).collect(),
                sample_count: 0,
            }
        })
        .collect()
}

/// Mean absolute input activation per input channel of every quantizable
/// matrix, over all token positions of `batches`. Returned in the order of
/// [`ToyLm::quantizable`].
pub fn channel_activations<T: Real>(model: &ToyLm<T>, batches: &[TokenBatch]) -> Result<Vec<Vec<f64>>> {
    if batches.is_empty() {
        return Err(Error::data("activation statistics need at least one calibration batch"));
    }
    let targets = model.quantizable();
    let mut sums: Vec<Vec<f64>> = targets.iter().map(|&i| vec![0.0; model.params()[i].shape()[1]]).collect();
    let mut tokens = 0usize;
    for batch in batches {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let f = model.forward(&mut g, &vars, batch)?;
        for (slot, &i) in targets.iter().enumerate() {
            let x = f
                .linear_inputs
                .iter()
                .find(|(p, _)| *p == i)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::config(format!("no recorded input for {}", model.names()[i])))?;
            let cols = sums[slot].len();
            for row in g.value(x).chunks(cols) {
                for (s, &v) in sums[slot].iter_mut().zip(row) {
                    *s += v.f64().abs();
                }
            }
        }
        tokens += batch.tokens.len();
    }
    Ok(sums
        .into_iter()
        .map(|s| s.into_iter().map(|v| v / tokens as f64).collect())
        .collect())
}

/// `mean|x_j| * |w_ij|` for every quantizable matrix: input-channel salience
/// times weight magnitude.
pub fn activation_metric<T: Real>(model: &ToyLm<T>, batches: &[TokenBatch]) -> Result<Vec<ImpactMap>> {
    let acts = channel_activations(model, batches)?;
    let count: usize = batches.iter().map(|b| b.batch).sum();
    Ok(weight_maps(model)
        .into_iter()
        .zip(acts)
        .map(|(mut m, a)| {
            for row in m.values.chunks_mut(m.cols) {
                for (v, &x) in row.iter_mut().zip(&a) {
                    *v = (x * *v as f64) as f32;
                }
            }
            m.sample_count = count;
            m
        })
        .collect())
}

/// Maps for the requested metric over every quantizable matrix.
pub fn metric_maps<T: Real>(model: &ToyLm<T>, batches: &[TokenBatch], metric: Metric) -> Result<Vec<ImpactMap>> {
    match metric {
        Metric::Impact => estimate_impact(model, batches),
        Metric::Weight => Ok(weight_maps(model)),
        Metric::Activation => activation_metric(model, batches),
    }
}

/// Mean of the top 1% of values over the max of the remaining 99%.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Heterogeneity {
    /// `top_mean / bottom_max`; `+inf` when the bottom part is all zero but
    /// the top is not, and 1 for an all-zero input.
    pub score: f64,
    pub top_mean: f64,
    pub bottom_max: f64,
    /// `max(1, ceil(0.01 * n))`.
    pub top_count: usize,
}

pub fn heterogeneity_score(values: &[f32]) -> Result<Heterogeneity> {
    if values.len() < 2 {
        return Err(Error::data(format!("heterogeneity needs at least 2 values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("heterogeneity_score", "non-finite metric value"));
    }
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let top_count = ((v.len() as f64 * 0.01).ceil() as usize).max(1);
    let top_mean = v[..top_count].iter().map(|&x| x as f64).sum::<f64>() / top_count as f64;
    let bottom_max = v[top_count] as f64;
    let score = if bottom_max > 0.0 {
        top_mean / bottom_max
    } else if top_mean == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(Heterogeneity {
        score,
        top_mean,
        bottom_max,
        top_count,
    })
}

/// One row of the heterogeneity table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeterogeneityRecord {
    pub matrix: String,
    pub metric: Metric,
    pub score: f64,
    pub top_mean: f64,
    pub bottom_max: f64,
}

/// Down-sampled `(flat index, value)` pairs of one matrix's impact.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSet {
    pub matrix: String,
    pub samples: Vec<(usize, f32)>,
}

#[derive(Debug, Clone, Default)]
pub struct HeterogeneityReport {
    pub records: Vec<HeterogeneityRecord>,
    pub scatter: Vec<ScatterSet>,
}

impl HeterogeneityReport {
    /// Scores per metric for every matrix, plus impact scatter samples
    /// (at most `max_samples` per matrix, drawn with `seed`).
    pub fn build(maps: &[(Metric, Vec<ImpactMap>)], max_samples: usize, seed: u64) -> Result<Self> {
        let mut report = Self::default();
        for (metric, list) in maps {
            for m in list {
                let h = heterogeneity_score(&m.values)?;
                report.records.push(HeterogeneityRecord {
                    matrix: m.name.clone(),
                    metric: *metric,
                    score: h.score,
                    top_mean: h.top_mean,
                    bottom_max: h.bottom_max,
                });
                if *metric == Metric::Impact {
                    let idx = scatter_indices(m.values.len(), max_samples, seed);
                    report.scatter.push(ScatterSet {
                        matrix: m.name.clone(),
                        samples: idx.into_iter().map(|i| (i, m.values[i])).collect(),
                    });
                }
            }
        }
        Ok(report)
    }

    /// Median score of `metric` across matrices (mean of the middle pair for
    /// an even count); `None` if the metric is absent.
    pub fn median_score(&self, metric: Metric) -> Option<f64> {
        let mut s: Vec<f64> = self.records.iter().filter(|r| r.metric == metric).map(|r| r.score).collect();
        if s.is_empty() {
            return None;
        }
        s.sort_by(f64::total_cmp);
        let n = s.len();
        Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
    }
}

/// `min(n, k)` distinct indices from `0..n`, sorted, chosen uniformly at
/// random with `seed`.
pub fn scatter_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// `100 * |A ∩ B| / |A|` for two selections of equal size.
pub fn overlap_ratio<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    let sa: HashSet<&T> = a.iter().collect();
    let sb: HashSet<&T> = b.iter().collect();
    if sa.len() != a.len() || sb.len() != b.len() {
        return Err(Error::config("overlap_ratio: selections contain duplicates"));
    }
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "overlap_ratio: selections differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::data("overlap_ratio: empty selections"));
    }
    Ok(100.0 * sa.intersection(&sb).count() as f64 / a.len() as f64)
}
