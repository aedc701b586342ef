//! Base training and mixed-precision quantization-aware training.
//!
//! Both trainers share one loop. With a [`QuantPlan`] every quantizable
//! weight enters the forward pass as `C ∪ Quant(N)`: cherry columns at their
//! latent full-precision value and normal columns fake-quantized. The
//! substitution is a straight-through node, so cherry columns receive their
//! exact gradient and normal columns the STE gradient; both update the latent
//! weights through Adam.

use serde::{Deserialize, Serialize};

use crate::autograd::{cosine_lr, Adam, AdamConfig, Graph, Real};
use crate::cherry::{mixed_forward, select_k_columns, split_weights};
use crate::error::{Error, Result};
use crate::impact::ImpactMap;
use crate::lm::{batch_windows, make_windows, Checkpoint, ModelConfig, Payload, Section, Split, Storage, TokenBatch, ToyLm};
use crate::quant::{fake_quant_asymmetric_grouped, QuantConfig};

/// Optimization schedule shared by base training and QAT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    /// Final learning rate as a fraction of the peak.
    pub floor_frac: f64,
    pub adam: AdamConfig,
    /// Seed of the data order.
    pub seed: u64,
    /// Trailing fraction of corpus windows held out for evaluation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            seq_len: 64,
            peak_lr: 3e-3,
            warmup_frac: 0.05,
            floor_frac: 0.25,
            adam: AdamConfig::default(),
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        cosine_lr(0, self.steps, self.warmup_frac, self.floor_frac, self.peak_lr)?;
        Ok(())
    }

    pub fn train_windows(&self, ids: &[usize]) -> Result<Vec<Vec<usize>>> {
        make_windows(ids, self.seq_len, Split::Train { val_fraction: self.val_fraction })
    }

    pub fn val_batches(&self, ids: &[usize]) -> Result<Vec<TokenBatch>> {
        let w = make_windows(ids, self.seq_len, Split::Val { val_fraction: self.val_fraction })?;
        // evaluation order does not matter; keep corpus order
        w.chunks(self.batch_size).map(TokenBatch::from_windows).collect()
    }
}

/// Endless sequence of training batches: each epoch reshuffles the windows
/// with a seed derived from `(seed, epoch)`; a trailing partial batch is
/// dropped so every step sees `batch_size` sequences.
#[derive(Debug, Clone)]
pub struct BatchStream {
    windows: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<TokenBatch>,
    pos: usize,
}

impl BatchStream {
    pub fn new(windows: Vec<Vec<usize>>, batch_size: usize, seed: u64) -> Result<Self> {
        if windows.len() < batch_size {
            return Err(Error::data(format!(
                "{} training windows cannot fill a batch of {batch_size}",
                windows.len()
            )));
        }
        Ok(Self {
            windows,
            batch_size,
            seed,
            epoch: 0,
            queue: Vec::new(),
            pos: 0,
        })
    }

    pub fn next_batch(&mut self) -> Result<TokenBatch> {
        if self.pos == self.queue.len() {
            let epoch_seed = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut q = batch_windows(self.windows.clone(), self.batch_size, epoch_seed)?;
            q.retain(|b| b.batch == self.batch_size);
            self.queue = q;
            self.pos = 0;
            self.epoch += 1;
        }
        self.pos += 1;
        Ok(self.queue[self.pos - 1].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Per-step loss and learning rate.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Gradient rule for normal weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ste {
    /// Identity pass-through.
    #[default]
    Identity,
    /// Zero gradient for normal weights in the quantizer's clip zone.
    Clipped,
}

/// The upstream gradient, unchanged: the identity straight-through rule.
pub fn ste_fake_quant_backward(upstream: &[f32], latent: &[f32]) -> Result<Vec<f32>> {
    if upstream.len() != latent.len() {
        return Err(Error::config(format!(
            "STE: gradient of {} elements for {} weights",
            upstream.len(),
            latent.len()
        )));
    }
    Ok(upstream.to_vec())
}

/// Fixed per-matrix decisions of a QAT run.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPlan {
    /// Index into the model's parameter list.
    pub index: usize,
    pub name: String,
    pub cherry: Vec<u16>,
    /// Frozen per-column factors of the scale trick, already rounded to
    /// 16-bit floats.
    pub trick_scales: Option<Vec<f32>>,
    /// Exponent chosen by the scale search.
    pub trick_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    pub quant: QuantConfig,
    pub ste: Ste,
    /// `false` disables fake quantization entirely, which turns QAT into
    /// plain fine-tuning.
    pub fake_quant: bool,
    pub matrices: Vec<MatrixPlan>,
}

impl QuantPlan {
    /// Fixes cherry columns (from `maps`, one per quantizable matrix) and,
    /// with the scale trick, searches the per-column scales on `calib`.
    pub fn build(model: &ToyLm<f32>, maps: &[ImpactMap], calib: &[TokenBatch], quant: QuantConfig, ste: Ste) -> Result<Self> {
        quant.validate()?;
        let inputs = if quant.scale_trick {
            Some(collect_linear_inputs(model, calib)?)
        } else {
            None
        };
        let mut matrices = Vec::new();
        for (slot, i) in model.quantizable().into_iter().enumerate() {
            let name = model.names()[i].clone();
            let p = &model.params()[i];
            let (rows, cols) = (p.shape()[0], p.shape()[1]);
            let k = quant.cherry_count(cols);
            let cherry = if k == 0 {
                Vec::new()
            } else {
                let map = maps.iter().find(|m| m.name == name).ok_or_else(|| {
                    Error::config(format!(
                        "no importance map for {name}; run `analyze` first or choose a metric so they are computed"
                    ))
                })?;
                if (map.rows, map.cols) != (rows, cols) {
                    return Err(Error::config(format!(
                        "importance map for {name} is {}x{}, weight is {rows}x{cols}",
                        map.rows, map.cols
                    )));
                }
                select_k_columns(map, k)?
            };
            let (trick_scales, trick_alpha) = match &inputs {
                Some(x) => {
                    let r = search_scales(p.data(), rows, cols, &x[slot], &cherry, &quant)?;
                    (Some(r.scales), Some(r.alpha))
                }
                None => (None, None),
            };
            matrices.push(MatrixPlan {
                index: i,
                name,
                cherry,
                trick_scales,
                trick_alpha,
            });
        }
        Ok(Self {
            quant,
            ste,
            fake_quant: true,
            matrices,
        })
    }

    /// Plan that trains like QAT but never quantizes.
    pub fn disabled(model: &ToyLm<f32>, quant: QuantConfig) -> Self {
        Self {
            quant,
            ste: Ste::Identity,
            fake_quant: false,
            matrices: model
                .quantizable()
                .into_iter()
                .map(|i| MatrixPlan {
                    index: i,
                    name: model.names()[i].clone(),
                    cherry: Vec::new(),
                    trick_scales: None,
                    trick_alpha: None,
                })
                .collect(),
        }
    }

    /// Writes `model` as a mixed-precision checkpoint: every planned matrix
    /// as a [`MixedMatrix`](crate::cherry::MixedMatrix), everything else in
    /// 16 bits. Without fake quantization the checkpoint is full precision.
    pub fn export(&self, model: &ToyLm<f32>, manifest: serde_json::Value) -> Result<Checkpoint> {
        if !self.fake_quant {
            return Ok(Checkpoint::from_model(model, Storage::F32, manifest));
        }
        let mut ck = Checkpoint::from_model(model, Storage::F16, manifest);
        ck.quant = Some(self.quant);
        for mp in &self.matrices {
            let p = &model.params()[mp.index];
            let (rows, cols) = (p.shape()[0], p.shape()[1]);
            let m = split_weights(p.data(), rows, cols, &mp.cherry, &self.quant, mp.trick_scales.as_deref())?;
            ck.sections[mp.index] = Section {
                name: mp.name.clone(),
                shape: vec![rows, cols],
                payload: Payload::Mixed(m),
            };
        }
        Ok(ck)
    }

    /// Average storage bits per parameter over the planned matrices.
    pub fn avg_bits(&self, checkpoint: &Checkpoint) -> Option<f64> {
        let (mut bits, mut params) = (0u64, 0u64);
        for mp in &self.matrices {
            let m = checkpoint.mixed(&mp.name)?;
            bits += m.storage_bits();
            params += (m.rows * m.cols) as u64;
        }
        (params > 0).then(|| bits as f64 / params as f64)
    }
}

/// Inputs seen by every quantizable matrix over `batches`, as row-major
/// `[tokens, cols]` arrays in [`ToyLm::quantizable`] order.
pub fn collect_linear_inputs(model: &ToyLm<f32>, batches: &[TokenBatch]) -> Result<Vec<Vec<f32>>> {
    if batches.is_empty() {
        return Err(Error::data("scale search needs calibration batches"));
    }
    let targets = model.quantizable();
    let mut out = vec![Vec::new(); targets.len()];
    for b in batches {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let f = model.forward(&mut g, &vars, b)?;
        for (slot, &i) in targets.iter().enumerate() {
            let (_, v) = f
                .linear_inputs
                .iter()
                .find(|(p, _)| *p == i)
                .ok_or_else(|| Error::config(format!("no recorded input for {}", model.names()[i])))?;
            out[slot].extend_from_slice(g.value(*v));
        }
    }
    Ok(out)
}

/// Result of the per-column scale search.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSearch {
    pub alpha: f64,
    /// `s_j`, rounded to 16-bit floats, one per column.
    pub scales: Vec<f32>,
    /// Output error `‖W X − Q'(W) X‖²` of every grid point, in grid order.
    pub errors: Vec<f64>,
}

/// Grid point `g` of `n` on `[0, 1]`.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    if n <= 1 {
        vec![0.0]
    } else {
        (0..n).map(|g| g as f64 / (n - 1) as f64).collect()
    }
}

/// Candidate scales `s_j = mean|x_j|^alpha` (1 for dead channels), rounded
/// to 16-bit floats.
pub fn candidate_scales(act_mean: &[f64], alpha: f64) -> Vec<f32> {
    act_mean
        .iter()
        .map(|&a| {
            let s = if a > 0.0 { a.powf(alpha) } else { 1.0 };
            half::f16::from_f64(s).to_f32()
        })
        .collect()
}

/// `Q'(W) = Q(W s) / s` on the normal columns (grouped asymmetric min-max
/// quantization of the compacted normal submatrix); cherry columns untouched.
pub fn trick_quantize(w: &[f32], rows: usize, cols: usize, cherry: &[u16], scales: &[f32], quant: &QuantConfig) -> Result<Vec<f32>> {
    let normal: Vec<usize> = (0..cols).filter(|c| !cherry.contains(&(*c as u16))).collect();
    let nc = normal.len();
    let mut scaled = Vec::with_capacity(rows * nc);
    for r in 0..rows {
        scaled.extend(normal.iter().map(|&c| w[r * cols + c] * scales[c]));
    }
    let q = fake_quant_asymmetric_grouped(&scaled, rows, nc, quant.bits, quant.group_size)?;
    let mut out = w.to_vec();
    for r in 0..rows {
        for (j, &c) in normal.iter().enumerate() {
            out[r * cols + c] = q[r * nc + j] / scales[c];
        }
    }
    Ok(out)
}

/// Squared output error `Σ_t ‖(W − W') x_t‖²` for `x: [tokens, cols]`.
pub fn output_error(w: &[f32], wq: &[f32], rows: usize, cols: usize, x: &[f32]) -> f64 {
    let diff: Vec<f64> = w.iter().zip(wq).map(|(&a, &b)| a as f64 - b as f64).collect();
    let mut total = 0.0;
    for xt in x.chunks(cols) {
        for r in 0..rows {
            let d = &diff[r * cols..(r + 1) * cols];
            let y: f64 = d.iter().zip(xt).map(|(&a, &b)| a * b as f64).sum();
            total += y * y;
        }
    }
    total
}

/// Searches `alpha` on a uniform grid over `[0, 1]`, minimizing the layer
/// output error of `Q'(W)` on calibration inputs `x: [tokens, cols]`.
/// Ties keep the smaller exponent.
pub fn search_scales(w: &[f32], rows: usize, cols: usize, x: &[f32], cherry: &[u16], quant: &QuantConfig) -> Result<ScaleSearch> {
    if w.len() != rows * cols {
        return Err(Error::config(format!("{} weights for {rows}x{cols}", w.len())));
    }
    if x.is_empty() || x.len() % cols != 0 {
        return Err(Error::data(format!("calibration inputs of {} values for width {cols}", x.len())));
    }
    let tokens = x.len() / cols;
    let mut act = vec![0.0f64; cols];
    for xt in x.chunks(cols) {
        for (a, &v) in act.iter_mut().zip(xt) {
            *a += (v as f64).abs();
        }
    }
    for a in &mut act {
        *a /= tokens as f64;
    }
    let mut best: Option<(f64, f64, Vec<f32>)> = None;
    let mut errors = Vec::new();
    for alpha in alpha_grid(quant.scale_grid_points) {
        let s = candidate_scales(&act, alpha);
        let wq = trick_quantize(w, rows, cols, cherry, &s, quant)?;
        let e = output_error(w, &wq, rows, cols, x);
        if !e.is_finite() {
            return Err(Error::numeric("search_scales", format!("non-finite output error at alpha {alpha}")));
        }
        errors.push(e);
        if best.as_ref().is_none_or(|(be, _, _)| e < *be) {
            best = Some((e, alpha, s));
        }
    }
    let (_, alpha, scales) = best.expect("grid is never empty");
    Ok(ScaleSearch { alpha, scales, errors })
}

/// Settings of one QAT run beyond the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QatOptions {
    /// Abort when a step loss exceeds this multiple of the first step loss.
    pub divergence_factor: f64,
}

impl Default for QatOptions {
    fn default() -> Self {
        Self { divergence_factor: 10.0 }
    }
}

/// One optimization step. Returns the loss.
fn train_step(model: &mut ToyLm<f32>, adam: &mut Adam<f32>, batch: &TokenBatch, lr: f64, plan: Option<&QuantPlan>) -> Result<f64> {
    let mut g = Graph::new();
    let leaves = model.bind(&mut g);
    let mut vars = leaves.clone();
    if let Some(plan) = plan.filter(|p| p.fake_quant) {
        for mp in &plan.matrices {
            let p = &model.params()[mp.index];
            let (rows, cols) = (p.shape()[0], p.shape()[1]);
            let mf = mixed_forward(p.data(), rows, cols, &mp.cherry, &plan.quant, mp.trick_scales.as_deref())?;
            let mask = match plan.ste {
                Ste::Identity => None,
                Ste::Clipped => Some(mf.in_range),
            };
            vars[mp.index] = g.straight_through(leaves[mp.index], mf.values, mask)?;
        }
    }
    let f = model.forward(&mut g, &vars, batch)?;
    g.backward(f.loss)?;
    let loss = g.scalar(f.loss).f64();
    for (p, v) in model.params_mut().iter_mut().zip(&leaves) {
        if let Some(gr) = g.grad(*v) {
            p.set_grad(gr.to_vec())?;
        }
    }
    adam.step(model.params_mut(), lr)?;
    Ok(loss)
}

fn run(
    model: &mut ToyLm<f32>,
    stream: &mut BatchStream,
    cfg: &TrainConfig,
    plan: Option<&QuantPlan>,
    options: QatOptions,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut adam = Adam::new(model.params(), cfg.adam);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let lr = cosine_lr(step + 1, cfg.steps, cfg.warmup_frac, cfg.floor_frac, cfg.peak_lr)?;
        let batch = stream.next_batch()?;
        let loss = train_step(model, &mut adam, &batch, lr, plan)?;
        if !loss.is_finite() {
            return Err(Error::numeric("training", format!("loss became {loss} at step {step}")));
        }
        if let Some(first) = log.initial_loss() {
            if plan.is_some() && loss > options.divergence_factor * first {
                return Err(Error::numeric(
                    "cherryq_train",
                    format!(
                        "diverged at step {step}: loss {loss:.4} exceeds {}x the initial {first:.4}; lower peak_lr",
                        options.divergence_factor
                    ),
                ));
            }
        }
        let rec = StepRecord { step, loss, lr };
        on_step(&rec);
        log.steps.push(rec);
    }
    for p in model.params_mut() {
        p.zero_grad();
    }
    Ok(log)
}

/// Trains a fresh model on the training windows of `ids`.
pub fn train_base(config: ModelConfig, ids: &[usize], cfg: &TrainConfig, on_step: impl FnMut(&StepRecord)) -> Result<(ToyLm<f32>, TrainLog)> {
    let mut model = ToyLm::new(config)?;
    let mut stream = BatchStream::new(cfg.train_windows(ids)?, cfg.batch_size, cfg.seed)?;
    let log = run(&mut model, &mut stream, cfg, None, QatOptions::default(), on_step)?;
    Ok((model, log))
}

/// Outcome of [`cherryq_train`].
#[derive(Debug, Clone)]
pub struct QatOutcome {
    /// Latent (full-precision) weights after training.
    pub latent: ToyLm<f32>,
    pub log: TrainLog,
}

/// Mixed-precision QAT of `base` under a fixed `plan`. Export the result
/// with [`QuantPlan::export`].
pub fn cherryq_train(
    base: &ToyLm<f32>,
    plan: &QuantPlan,
    ids: &[usize],
    cfg: &TrainConfig,
    options: QatOptions,
    on_step: impl FnMut(&StepRecord),
) -> Result<QatOutcome> {
    if plan.matrices.len() != base.quantizable().len() {
        return Err(Error::config("quantization plan does not cover every quantizable matrix"));
    }
    let mut latent = base.clone();
    let mut stream = BatchStream::new(cfg.train_windows(ids)?, cfg.batch_size, cfg.seed)?;
    let log = run(&mut latent, &mut stream, cfg, Some(plan), options, on_step)?;
    Ok(QatOutcome { latent, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_ste() {
        assert_eq!(ste_fake_quant_backward(&[1.0; 3], &[0.2, -4.0, 9.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(ste_fake_quant_backward(&[0.0; 2], &[1.0, 2.0]).unwrap(), vec![0.0; 2]);
        assert!(ste_fake_quant_backward(&[0.0; 2], &[1.0]).is_err());
    }

    #[test]
    fn alpha_zero_is_plain_asymmetric() {
        let act = [0.5, 2.0, 0.0];
        assert_eq!(candidate_scales(&act, 0.0), vec![1.0, 1.0, 1.0]);
        assert_eq!(candidate_scales(&act, 1.0), vec![0.5, 2.0, 1.0]);
        let w = [0.3f32, -0.2, 0.9, 0.1, 0.4, -0.7];
        let q = QuantConfig::new(2, 3);
        let direct = fake_quant_asymmetric_grouped(&w, 2, 3, 2, 3).unwrap();
        assert_eq!(trick_quantize(&w, 2, 3, &[], &[1.0; 3], &q).unwrap(), direct);
        assert_eq!(alpha_grid(5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn representable_weights_pick_alpha_zero() {
        // each row already sits on its own 2-bit min-max grid
        let w = [0.0f32, 1.0, 2.0, 3.0, -3.0, -1.0, 1.0, 3.0];
        let x: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin() * (1.0 + i as f32 % 3.0)).collect();
        let r = search_scales(&w, 2, 4, &x, &[], &QuantConfig::new(2, 4)).unwrap();
        assert_eq!(r.errors[0], 0.0);
        assert_eq!(r.alpha, 0.0);
    }

    #[test]
    fn stream_cycles_deterministically() {
        let windows: Vec<Vec<usize>> = (0..5).map(|i| vec![i, i + 1]).collect();
        let mut a = BatchStream::new(windows.clone(), 2, 3).unwrap();
        let mut b = BatchStream::new(windows.clone(), 2, 3).unwrap();
        for _ in 0..7 {
            let (x, y) = (a.next_batch().unwrap(), b.next_batch().unwrap());
            assert_eq!(x, y);
            assert_eq!(x.batch, 2);
        }
        assert!(BatchStream::new(windows, 6, 0).is_err());
    }
}
