use std::collections::BTreeMap;
use std::path::Path;

use cherryq::cherry::select_k_columns;
use cherryq::impact::{
    activation_metric, estimate_impact, metric_maps, overlap_ratio, weight_maps, HeterogeneityReport, ImpactMap, Metric,
};
use cherryq::lm::{batch_windows, make_batches, perplexity, Checkpoint, Corpus, Split, Storage, TokenBatch, ToyLm};
use cherryq::qat::{cherryq_train, train_base, QatOptions, QuantPlan, StepRecord, TrainConfig};
use cherryq::quant::{avg_bits, QuantConfig};
use cherryq::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{write_json, InputRef, RunManifest};

type Result<T> = std::result::Result<T, Error>;

pub const BASE_CHECKPOINT: &str = "base.chrq";
pub const QUANT_CHECKPOINT: &str = "cherryq.chrq";
pub const STEP0_CHECKPOINT: &str = "step0.chrq";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_corpus(path: &Path, role: &str, manifest: &mut RunManifest) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    manifest.input(InputRef::of_bytes(role, path, &bytes));
    Corpus::from_bytes(bytes).map_err(|_| Error::data(format!("corpus {} is empty", path.display())))
}

fn load_checkpoint(path: &Path, role: &str, manifest: &mut RunManifest) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    manifest.input(InputRef::of_file(role, path)?);
    Ok(ck)
}

fn progress(label: &'static str, total: u64) -> impl FnMut(&StepRecord) {
    let every = (total / 10).max(1);
    move |r: &StepRecord| {
        if (r.step + 1) % every == 0 || r.step + 1 == total {
            eprintln!("{label}: step {}/{total} loss {:.4} lr {:.2e}", r.step + 1, r.loss, r.lr);
        }
    }
}

#[derive(Serialize)]
struct LogReport<'a> {
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    steps: &'a [StepRecord],
}

// ---------------------------------------------------------------- train-base

pub fn cmd_train_base(cfg: &RunConfig, out: &Path, storage: Storage) -> Result<()> {
    let mut manifest = RunManifest::new("train-base", cfg, cfg.train.seed);
    let corpus = read_corpus(&cfg.corpus_path(), "corpus", &mut manifest)?;
    create_dir(out)?;

    let (model, log) = train_base(cfg.model.clone(), &corpus.ids(), &cfg.train, progress("train-base", cfg.train.steps))?;

    let ck_path = out.join(BASE_CHECKPOINT);
    Checkpoint::from_model(&model, storage, manifest.embedded()).save(&ck_path)?;
    let log_path = out.join("train_log.json");
    write_json(
        &log_path,
        &LogReport {
            initial_loss: log.initial_loss(),
            final_loss: log.final_loss(),
            steps: &log.steps,
        },
    )?;
    manifest.artifact(&ck_path);
    manifest.artifact(&log_path);
    manifest.finish(out)?;
    println!("{}", ck_path.display());
    Ok(())
}

// ------------------------------------------------------------------ analyze

/// `count` disjoint random sets of `per_split` training windows each.
pub fn calibration_splits(ids: &[usize], train: &TrainConfig, count: usize, per_split: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    let windows = train.train_windows(ids)?;
    if windows.len() < count * per_split {
        return Err(Error::data(format!(
            "corpus too small: {count} splits of {per_split} windows need {} training windows, have {}",
            count * per_split,
            windows.len()
        )));
    }
    let mut chunks = batch_windows(windows, per_split, seed)?;
    chunks.truncate(count);
    Ok(chunks)
}

/// Element-wise mean of maps computed on equally sized splits.
fn mean_maps(per_split: &[Vec<ImpactMap>]) -> Vec<ImpactMap> {
    let n = per_split.len() as f64;
    let mut out = per_split[0].clone();
    for (j, m) in out.iter_mut().enumerate() {
        m.sample_count = per_split.iter().map(|s| s[j].sample_count).sum();
        for (i, v) in m.values.iter_mut().enumerate() {
            let s: f64 = per_split.iter().map(|s| s[j].values[i] as f64).sum();
            *v = (s / n) as f32;
        }
    }
    out
}

/// Cherry columns of every matrix as `(matrix, column)` ids.
fn cherry_ids(maps: &[ImpactMap], quant: &QuantConfig) -> Result<Vec<(String, u16)>> {
    let mut ids = Vec::new();
    for m in maps {
        let k = quant.cherry_count(m.cols);
        for c in select_k_columns(m, k)? {
            ids.push((m.name.clone(), c));
        }
    }
    Ok(ids)
}

/// Expected overlap (%) of two independent uniform selections with the
/// same per-matrix counts.
fn random_baseline(shapes: &[(usize, usize)]) -> f64 {
    let (mut expected, mut total) = (0.0, 0.0);
    for &(k, cols) in shapes {
        expected += (k * k) as f64 / cols as f64;
        total += k as f64;
    }
    100.0 * expected / total
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapPair {
    pub a: String,
    pub b: String,
    pub overlap_percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapReport {
    pub metric: Metric,
    pub cherry_fraction: f64,
    pub selected_columns: usize,
    pub windows_per_split: usize,
    pub random_baseline_percent: f64,
    pub within: Vec<OverlapPair>,
    pub across: Vec<OverlapPair>,
    pub mean_within_percent: f64,
    pub mean_across_percent: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredMaps {
    pub metric: Metric,
    pub maps: Vec<StoredMap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredMap {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub sample_count: usize,
    pub values: Vec<f32>,
}

impl StoredMaps {
    fn new(metric: Metric, maps: &[ImpactMap]) -> Self {
        Self {
            metric,
            maps: maps
                .iter()
                .map(|m| StoredMap {
                    name: m.name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                    sample_count: m.sample_count,
                    values: m.values.clone(),
                })
                .collect(),
        }
    }

    fn into_maps(self) -> Vec<ImpactMap> {
        self.maps
            .into_iter()
            .map(|m| ImpactMap {
                name: m.name,
                rows: m.rows,
                cols: m.cols,
                values: m.values,
                sample_count: m.sample_count,
            })
            .collect()
    }
}

#[derive(Serialize)]
struct AnalyzeSummary {
    matrices: usize,
    median_score: BTreeMap<String, Option<f64>>,
    min_score: BTreeMap<String, Option<f64>>,
    calibration_sequences: usize,
}

pub fn cmd_analyze(cfg: &RunConfig, checkpoint: &Path, corpus_b: Option<&Path>, out: &Path, save_maps: bool) -> Result<()> {
    let a = &cfg.analyze;
    let mut manifest = RunManifest::new("analyze", cfg, a.seed);
    let ck = load_checkpoint(checkpoint, "checkpoint", &mut manifest)?;
    let model = ck.to_model()?;
    let corpus = read_corpus(&cfg.corpus_path(), "corpus", &mut manifest)?;
    let splits_a = calibration_splits(&corpus.ids(), &cfg.train, a.splits, a.windows_per_split, a.seed)?;
    let splits_b = match corpus_b {
        Some(p) => {
            let c = read_corpus(p, "corpus_b", &mut manifest)?;
            Some(calibration_splits(&c.ids(), &cfg.train, a.splits, a.windows_per_split, a.seed)?)
        }
        None => None,
    };
    let quant = cfg.quant;
    if quant.cherry_fraction == 0.0 {
        return Err(Error::config("analyze needs quant.cherry_fraction > 0 for overlap"));
    }
    create_dir(&out.join("scatter"))?;

    // impacts per split, for overlap; their mean for the scores
    let mut per_split = Vec::new();
    for (i, b) in splits_a.iter().enumerate() {
        eprintln!("analyze: impact of split A{i}");
        per_split.push(estimate_impact(&model, std::slice::from_ref(b))?);
    }
    let impact = mean_maps(&per_split);
    let activation = activation_metric(&model, &splits_a)?;
    let report = HeterogeneityReport::build(
        &[(Metric::Impact, impact.clone()), (Metric::Weight, weight_maps(&model)), (Metric::Activation, activation)],
        a.scatter_samples,
        a.seed,
    )?;

    let het_path = out.join("heterogeneity.csv");
    let mut w = csv::Writer::from_path(&het_path).map_err(|e| csv_error(&het_path, e))?;
    w.write_record(["matrix", "metric", "score", "top_mean", "bottom_max"])
        .map_err(|e| csv_error(&het_path, e))?;
    for r in &report.records {
        w.write_record([
            r.matrix.clone(),
            r.metric.to_string(),
            fmt_real(r.score),
            fmt_real(r.top_mean),
            fmt_real(r.bottom_max),
        ])
        .map_err(|e| csv_error(&het_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&het_path, e))?;
    manifest.artifact(&het_path);

    for s in &report.scatter {
        let cols = impact.iter().find(|m| m.name == s.matrix).map(|m| m.cols).unwrap_or(1);
        let path = out.join("scatter").join(format!("{}.csv", s.matrix));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["index", "row", "col", "impact"]).map_err(|e| csv_error(&path, e))?;
        for &(i, v) in &s.samples {
            w.write_record([i.to_string(), (i / cols).to_string(), (i % cols).to_string(), fmt_real(v as f64)])
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        manifest.artifact(&path);
    }

    let sel_a = per_split.iter().map(|m| cherry_ids(m, &quant)).collect::<Result<Vec<_>>>()?;
    let mut within = Vec::new();
    for i in 0..sel_a.len() {
        for j in i + 1..sel_a.len() {
            within.push(OverlapPair {
                a: format!("A{i}"),
                b: format!("A{j}"),
                overlap_percent: overlap_ratio(&sel_a[i], &sel_a[j])?,
            });
        }
    }
    let mut across = Vec::new();
    if let Some(splits_b) = &splits_b {
        for (j, b) in splits_b.iter().enumerate() {
            eprintln!("analyze: impact of split B{j}");
            let sel_b = cherry_ids(&estimate_impact(&model, std::slice::from_ref(b))?, &quant)?;
            for (i, sa) in sel_a.iter().enumerate() {
                across.push(OverlapPair {
                    a: format!("A{i}"),
                    b: format!("B{j}"),
                    overlap_percent: overlap_ratio(sa, &sel_b)?,
                });
            }
        }
    }
    let shapes: Vec<(usize, usize)> = impact.iter().map(|m| (quant.cherry_count(m.cols), m.cols)).collect();
    let mean = |p: &[OverlapPair]| (!p.is_empty()).then(|| p.iter().map(|x| x.overlap_percent).sum::<f64>() / p.len() as f64);
    let overlap = OverlapReport {
        metric: Metric::Impact,
        cherry_fraction: quant.cherry_fraction,
        selected_columns: sel_a[0].len(),
        windows_per_split: a.windows_per_split,
        random_baseline_percent: random_baseline(&shapes),
        mean_within_percent: mean(&within).unwrap_or(0.0),
        mean_across_percent: mean(&across),
        within,
        across,
    };
    let overlap_path = out.join("overlap.json");
    write_json(&overlap_path, &overlap)?;
    manifest.artifact(&overlap_path);

    let finite = |x: f64| x.is_finite().then_some(x);
    let summary = AnalyzeSummary {
        matrices: impact.len(),
        median_score: Metric::ALL
            .iter()
            .map(|m| (m.to_string(), report.median_score(*m).and_then(finite)))
            .collect(),
        min_score: Metric::ALL
            .iter()
            .map(|m| {
                let min = report.records.iter().filter(|r| r.metric == *m).map(|r| r.score).reduce(f64::min);
                (m.to_string(), min.and_then(finite))
            })
            .collect(),
        calibration_sequences: splits_a.iter().map(|b| b.batch).sum(),
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    manifest.artifact(&summary_path);

    if save_maps {
        let path = out.join("impact_maps.json");
        write_json(&path, &StoredMaps::new(Metric::Impact, &impact))?;
        manifest.artifact(&path);
    }
    manifest.finish(out)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

/// Reals for CSV: shortest round-trip form, `inf` spelled out.
fn fmt_real(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    }
}

// ------------------------------------------------------------------ cherryq

#[derive(Serialize)]
struct MatrixPlanReport<'a> {
    matrix: &'a str,
    cherry_columns: &'a [u16],
    trick_alpha: Option<f64>,
}

#[derive(Serialize)]
struct CherryqLog<'a> {
    metric: Metric,
    fake_quant: bool,
    quant: QuantConfig,
    avg_bits: Option<f64>,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    plan: Vec<MatrixPlanReport<'a>>,
    steps: &'a [StepRecord],
}

/// Calibration windows for importance and the scale search: a seeded
/// random subset of the training windows.
pub fn calibration_batch(ids: &[usize], cfg: &RunConfig) -> Result<TokenBatch> {
    let c = &cfg.cherryq;
    let mut split = calibration_splits(ids, &cfg.qat, 1, c.calib_windows, c.calib_seed)?;
    Ok(split.remove(0))
}

pub fn cmd_cherryq(cfg: &RunConfig, base: &Path, impacts: Option<&Path>, out: &Path, step0: bool) -> Result<()> {
    let c = &cfg.cherryq;
    let mut manifest = RunManifest::new("cherryq", cfg, cfg.qat.seed);
    let ck = load_checkpoint(base, "base", &mut manifest)?;
    if ck.quant.is_some() {
        return Err(Error::config(format!("{} is already quantized; start from a base checkpoint", base.display())));
    }
    let model = ck.to_model()?;
    let corpus = read_corpus(&cfg.corpus_path(), "corpus", &mut manifest)?;
    let ids = corpus.ids();
    let calib = [calibration_batch(&ids, cfg)?];
    create_dir(out)?;

    let plan = if !c.fake_quant {
        QuantPlan::disabled(&model, cfg.quant)
    } else {
        let maps = if cfg.quant.cherry_fraction == 0.0 {
            Vec::new()
        } else if let Some(path) = impacts {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let stored: StoredMaps =
                serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            if stored.metric != c.metric {
                return Err(Error::config(format!(
                    "{} holds {} maps but cherryq.metric is {}",
                    path.display(),
                    stored.metric,
                    c.metric
                )));
            }
            manifest.input(InputRef::of_file("impacts", path)?);
            stored.into_maps()
        } else {
            eprintln!("cherryq: computing {} maps", c.metric);
            metric_maps(&model, &calib, c.metric)?
        };
        QuantPlan::build(&model, &maps, &calib, cfg.quant, c.ste)?
    };

    let export = |m: &ToyLm<f32>, manifest: serde_json::Value| -> Result<Checkpoint> {
        if plan.fake_quant {
            plan.export(m, manifest)
        } else {
            Ok(Checkpoint::from_model(m, Storage::F16, manifest))
        }
    };
    if step0 && plan.fake_quant {
        let path = out.join(STEP0_CHECKPOINT);
        export(&model, manifest.embedded())?.save(&path)?;
        manifest.artifact(&path);
    }

    let options = QatOptions {
        divergence_factor: c.divergence_factor,
    };
    let outcome = cherryq_train(&model, &plan, &ids, &cfg.qat, options, progress("cherryq", cfg.qat.steps))?;
    let quantized = export(&outcome.latent, manifest.embedded())?;
    let ck_path = out.join(QUANT_CHECKPOINT);
    quantized.save(&ck_path)?;
    manifest.artifact(&ck_path);

    let avg = plan.fake_quant.then(|| plan.avg_bits(&quantized)).flatten();
    let log = CherryqLog {
        metric: c.metric,
        fake_quant: plan.fake_quant,
        quant: cfg.quant,
        avg_bits: avg,
        initial_loss: outcome.log.initial_loss(),
        final_loss: outcome.log.final_loss(),
        plan: plan
            .matrices
            .iter()
            .map(|m| MatrixPlanReport {
                matrix: &m.name,
                cherry_columns: &m.cherry,
                trick_alpha: m.trick_alpha,
            })
            .collect(),
        steps: &outcome.log.steps,
    };
    let log_path = out.join("cherryq_log.json");
    write_json(&log_path, &log)?;
    manifest.artifact(&log_path);
    manifest.finish(out)?;
    match avg {
        Some(b) => println!("{} avg_bits {b:.4}", ck_path.display()),
        None => println!("{}", ck_path.display()),
    }
    Ok(())
}

// --------------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    /// Held-out trailing windows.
    Val,
    /// Every window of the corpus.
    All,
}

#[derive(Serialize)]
struct EvalConfig {
    checkpoint: String,
    checkpoint_sha256: String,
    corpus: String,
    corpus_sha256: String,
    split: &'static str,
    seq_len: usize,
    val_fraction: f64,
    model: cherryq::lm::ModelConfig,
    quant: Option<QuantConfig>,
}

#[derive(Serialize)]
pub struct EvalReport {
    perplexity: f64,
    mean_nll: f64,
    tokens: usize,
    config: EvalConfig,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: EvalSplit) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ck_ref = InputRef::of_file("checkpoint", checkpoint)?;
    let model = ck.to_model()?;
    let corpus_path = cfg.corpus_path();
    let corpus = cherryq::lm::ingest(&corpus_path)?;
    let ids = corpus.ids();
    let t = &cfg.train;
    let batches = match split {
        EvalSplit::Val => t.val_batches(&ids)?,
        EvalSplit::All => make_batches(&ids, t.seq_len, t.batch_size, Split::All, 0)?,
    };
    let p = perplexity(&model, &batches)?;
    let report = EvalReport {
        perplexity: p.perplexity,
        mean_nll: p.mean_nll,
        tokens: p.tokens,
        config: EvalConfig {
            checkpoint: checkpoint.display().to_string(),
            checkpoint_sha256: ck_ref.sha256,
            corpus: corpus_path.display().to_string(),
            corpus_sha256: corpus.sha256.clone(),
            split: match split {
                EvalSplit::Val => "val",
                EvalSplit::All => "all",
            },
            seq_len: t.seq_len,
            val_fraction: t.val_fraction,
            model: ck.model.clone(),
            quant: ck.quant,
        },
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

// ------------------------------------------------------------------ avgbits

pub fn cmd_avgbits(cfg: &RunConfig, rows: usize, cols: usize) -> Result<()> {
    let b = avg_bits(&cfg.quant, rows, cols)?;
    println!("{b:.4}");
    Ok(())
}

// ------------------------------------------------------------------ overlap

#[derive(Serialize)]
struct MatrixOverlap {
    matrix: String,
    cherry_columns: usize,
    overlap_percent: f64,
}

#[derive(Serialize)]
struct CheckpointOverlap {
    a: String,
    b: String,
    selected_columns: usize,
    overlap_percent: f64,
    random_baseline_percent: f64,
    matrices: Vec<MatrixOverlap>,
}

/// Cherry-set overlap of two quantized checkpoints of the same model shape.
pub fn cmd_overlap(a: &Path, b: &Path) -> Result<()> {
    let (ca, cb) = (Checkpoint::load(a)?, Checkpoint::load(b)?);
    if ca.model != cb.model {
        return Err(Error::ConfigMismatch {
            expected: format!("{:?}", ca.model),
            found: format!("{:?}", cb.model),
        });
    }
    let (mut all_a, mut all_b, mut matrices, mut shapes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &ca.sections {
        let Some(ma) = ca.mixed(&s.name) else { continue };
        let mb = cb
            .mixed(&s.name)
            .ok_or_else(|| Error::data(format!("{}: `{}` is not quantized", b.display(), s.name)))?;
        if ma.cherry_indices.is_empty() {
            continue;
        }
        matrices.push(MatrixOverlap {
            matrix: s.name.clone(),
            cherry_columns: ma.cherry_indices.len(),
            overlap_percent: overlap_ratio(&ma.cherry_indices, &mb.cherry_indices)?,
        });
        shapes.push((ma.cherry_indices.len(), ma.cols));
        all_a.extend(ma.cherry_indices.iter().map(|&c| (s.name.clone(), c)));
        all_b.extend(mb.cherry_indices.iter().map(|&c| (s.name.clone(), c)));
    }
    if all_a.is_empty() {
        return Err(Error::data(format!("{} has no cherry columns", a.display())));
    }
    let report = CheckpointOverlap {
        a: a.display().to_string(),
        b: b.display().to_string(),
        selected_columns: all_a.len(),
        overlap_percent: overlap_ratio(&all_a, &all_b)?,
        random_baseline_percent: random_baseline(&shapes),
        matrices,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
