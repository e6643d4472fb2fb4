//! Adam, the multi-seed training protocol with best-validation checkpointing,
//! and the experiment sweeps.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitData};
use crate::error::{arg_err, Result};
use crate::layers::Mode;
use crate::model::{build, ArchitectureSpec, Network};
use crate::rng::Rng;
use crate::segmentation::{orient_regions, segment, OrientMode, SegmentationPlan};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { alpha: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |b: f64| b > 0.0 && b < 1.0;
        if !(self.alpha > 0.0) || !open(self.beta1) || !open(self.beta2) || !(self.epsilon > 0.0) {
            return Err(arg_err!("invalid Adam settings {:?}", self));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(params: &[&Tensor<T>]) -> Self {
        Moments {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    moments: &mut Moments<T>,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(arg_err!("Adam steps are counted from 1"));
    }
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(arg_err!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), moments.m.len()));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let (alpha, eps) = (T::of(cfg.alpha), T::of(cfg.epsilon));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut moments.m).zip(&mut moments.v) {
        g.expect_shape(p.shape())?;
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= alpha * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub spec: ArchitectureSpec,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub train_subset_size: Option<usize>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub orient: OrientMode,
    /// Seed of the training-subset draw.
    pub data_seed: u64,
    /// Worker threads: seeds run in parallel when above 1.
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(spec: ArchitectureSpec) -> Self {
        TrainConfig {
            spec,
            adam: AdamConfig::default(),
            epochs: 700,
            batch_size: 4,
            seeds: (0..5).collect(),
            train_subset_size: None,
            patience: None,
            orient: OrientMode::Native,
            data_seed: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.spec.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.seeds.is_empty() {
            return Err(arg_err!("epochs, batch size and seed list must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: String,
    pub k: usize,
    pub seed: u64,
    pub train_size: usize,
    pub val_mse: f64,
    pub val_mae: f64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub minutes: f64,
    /// 1-based epoch of the restored checkpoint.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub final_val_mse: f64,
    pub val_history: Vec<f64>,
    pub train_loss_history: Vec<f64>,
}

pub const RUN_CSV_HEADER: &str = "spec,k,seed,val_mse,test_mse,test_mae,minutes,best_epoch";

impl RunResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.spec, self.k, self.seed, self.val_mse, self.test_mse, self.test_mae, self.minutes, self.best_epoch
        )
    }

    /// Best validation MSE seen after each epoch.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.val_history
            .iter()
            .scan(f64::INFINITY, |best, &v| {
                *best = best.min(v);
                Some(*best)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub spec: String,
    pub k: usize,
    pub runs: usize,
    pub val_mse: Stat,
    pub test_mse: Stat,
    pub test_mae: Stat,
    pub minutes: Stat,
}

impl Summary {
    pub fn of(runs: &[RunResult]) -> Summary {
        let col = |f: fn(&RunResult) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        Summary {
            spec: runs[0].spec.clone(),
            k: runs[0].k,
            runs: runs.len(),
            val_mse: col(|r| r.val_mse),
            test_mse: col(|r| r.test_mse),
            test_mae: col(|r| r.test_mae),
            minutes: col(|r| r.minutes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub summary: Summary,
    pub runs: Vec<RunResult>,
    /// Weight file bytes of each seed's restored checkpoint.
    #[serde(skip)]
    pub weights: Vec<Vec<u8>>,
}

/// Network inputs for one split.
struct Prepared {
    inputs: Tensor<f32>,
    targets: Vec<f32>,
}

impl Prepared {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let per = self.inputs.len() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let targets = indices.iter().map(|&i| self.targets[i]).collect();
        Ok((Tensor::new(&shape, data)?, Tensor::new(&[indices.len(), 1], targets)?))
    }
}

fn prepare(split: &SplitData, plan: &SegmentationPlan) -> Result<Prepared> {
    Ok(Prepared { inputs: segment(&split.volumes, plan)?.data, targets: split.labels.clone() })
}

/// Segmentation plan for `spec`, oriented against the mean training volume.
pub fn input_plan(spec: &ArchitectureSpec, orient: OrientMode, train: &SplitData) -> Result<SegmentationPlan> {
    let plan = spec.plan()?;
    if orient == OrientMode::Native {
        return Ok(plan);
    }
    let n = train.len();
    let per = train.volumes.len() / n;
    let mut mean = vec![0.0f32; per];
    for sample in train.volumes.data().chunks_exact(per) {
        for (m, &v) in mean.iter_mut().zip(sample) {
            *m += v / n as f32;
        }
    }
    orient_regions(&plan, orient, &Tensor::new(&spec.volume_shape, mean)?, 0.0)
}

/// Mean squared and absolute error of eval-mode predictions.
pub fn evaluate(net: &mut Network<f32>, inputs: &Tensor<f32>, targets: &[f32], batch_size: usize) -> Result<(f64, f64)> {
    let p = Prepared { inputs: inputs.clone(), targets: targets.to_vec() };
    evaluate_prepared(net, &p, batch_size)
}

fn evaluate_prepared(net: &mut Network<f32>, data: &Prepared, batch_size: usize) -> Result<(f64, f64)> {
    let (mut se, mut ae) = (0.0f64, 0.0f64);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.batch(chunk)?;
        let pred = net.forward(&x, Mode::Eval)?;
        for (&p, &t) in pred.data().iter().zip(y.data()) {
            let d = p as f64 - t as f64;
            se += d * d;
            ae += d.abs();
        }
    }
    Ok((se / data.len() as f64, ae / data.len() as f64))
}

fn check_splits(ds: &Dataset) -> Result<()> {
    for (name, s) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        if s.is_empty() {
            return Err(arg_err!("{} split is empty", name));
        }
    }
    Ok(())
}

/// Seeded uniform subsample without replacement, in ascending index order.
pub fn subsample_indices(available: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    let mut idx = Rng::with_stream(seed, size as u64).sample_indices(available, size)?;
    idx.sort_unstable();
    Ok(idx)
}

/// Train every seed of `cfg` and evaluate each restored checkpoint on the
/// test split once.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainReport> {
    cfg.validate()?;
    check_splits(ds)?;
    if ds.volume_shape() != cfg.spec.volume_shape {
        return Err(arg_err!("dataset volumes are {:?}, spec expects {:?}", ds.volume_shape(), cfg.spec.volume_shape));
    }
    let train_split = match cfg.train_subset_size {
        Some(n) if n == ds.train.len() => ds.train.clone(),
        Some(n) => {
            if n > ds.train.len() {
                return Err(arg_err!("training subset of {} exceeds the {} available", n, ds.train.len()));
            }
            ds.train.select(&subsample_indices(ds.train.len(), n, cfg.data_seed)?)?
        }
        None => ds.train.clone(),
    };
    let plan = input_plan(&cfg.spec, cfg.orient, &train_split)?;
    let train_p = prepare(&train_split, &plan)?;
    let val_p = prepare(&ds.val, &plan)?;
    let test_p = prepare(&ds.test, &plan)?;

    let run = |seed: u64, threads: usize| run_seed(cfg, seed, threads, &train_p, &val_p, &test_p);
    let done: Vec<(RunResult, Vec<u8>)> = if cfg.threads > 1 && cfg.seeds.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| arg_err!("thread pool: {}", e))?;
        pool.install(|| cfg.seeds.par_iter().map(|&s| run(s, 1)).collect::<Result<_>>())?
    } else {
        cfg.seeds.iter().map(|&s| run(s, cfg.threads)).collect::<Result<_>>()?
    };
    let (runs, weights): (Vec<RunResult>, Vec<Vec<u8>>) = done.into_iter().unzip();
    Ok(TrainReport { config: cfg.clone(), summary: Summary::of(&runs), runs, weights })
}

fn run_seed(
    cfg: &TrainConfig,
    seed: u64,
    threads: usize,
    train: &Prepared,
    val: &Prepared,
    test: &Prepared,
) -> Result<(RunResult, Vec<u8>)> {
    let start = Instant::now();
    let mut net: Network<f32> = build(&cfg.spec, seed)?;
    net.set_threads(threads);
    let mut moments = Moments::zeros_like(&net.trainable());
    let mut step = 0u64;
    let mut best = (f64::INFINITY, f64::INFINITY, 0usize, net.snapshot());
    let mut val_history = Vec::with_capacity(cfg.epochs);
    let mut train_loss_history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        Rng::with_stream(seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let (loss, grads) = net.loss_and_grads(&x, &y)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            step += 1;
            adam_step(&mut net.trainable_mut(), &grads, &mut moments, step, &cfg.adam)?;
        }
        train_loss_history.push(loss_sum / train.len() as f64);
        let (val_mse, val_mae) = evaluate_prepared(&mut net, val, cfg.batch_size)?;
        val_history.push(val_mse);
        if val_mse < best.0 {
            best = (val_mse, val_mae, epoch + 1, net.snapshot());
        }
        if let Some(p) = cfg.patience {
            if epoch + 1 - best.2 >= p {
                break;
            }
        }
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let final_val_mse = *val_history.last().expect("at least one epoch");
    let epochs_run = val_history.len();
    if best.2 > 0 {
        net.restore(&best.3)?;
    }
    let (test_mse, test_mae) = evaluate_prepared(&mut net, test, cfg.batch_size)?;
    let result = RunResult {
        spec: cfg.spec.label(),
        k: cfg.spec.k,
        seed,
        train_size: train.len(),
        val_mse: best.0,
        val_mae: best.1,
        test_mse,
        test_mae,
        minutes,
        best_epoch: best.2,
        epochs_run,
        final_val_mse,
        val_history,
        train_loss_history,
    };
    Ok((result, net.weights_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepKRow {
    pub k: usize,
    pub summary: Summary,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepKReport {
    pub rows: Vec<SweepKRow>,
    /// Rate with the lowest mean best-validation MSE.
    pub selected_k: usize,
}

pub fn sweep_k(cfg: &TrainConfig, ds: &Dataset, ks: &[usize]) -> Result<SweepKReport> {
    if ks.is_empty() {
        return Err(arg_err!("no segmentation rates given"));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let c = TrainConfig { spec: cfg.spec.clone().with_k(k), ..cfg.clone() };
        let report = train(&c, ds)?;
        rows.push(SweepKRow { k, summary: report.summary, runs: report.runs });
    }
    let selected_k = rows
        .iter()
        .min_by(|a, b| a.summary.val_mse.mean.total_cmp(&b.summary.val_mse.mean))
        .expect("non-empty")
        .k;
    Ok(SweepKReport { rows, selected_k })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenRow {
    pub hidden_units: usize,
    pub fc_weights: usize,
    pub summary: Summary,
    pub runs: Vec<RunResult>,
}

pub fn sweep_hidden_units(cfg: &TrainConfig, ds: &Dataset, grid: &[usize]) -> Result<Vec<HiddenRow>> {
    if grid.is_empty() {
        return Err(arg_err!("empty hidden-unit grid"));
    }
    grid.iter()
        .map(|&h| {
            let spec = cfg.spec.clone().with_hidden_units(h);
            let fc_weights = spec.count_params()?.fc_weights;
            let report = train(&TrainConfig { spec, ..cfg.clone() }, ds)?;
            Ok(HiddenRow { hidden_units: h, fc_weights, summary: report.summary, runs: report.runs })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    /// One summary per spec, in the order given.
    pub summaries: Vec<Summary>,
    pub runs: Vec<RunResult>,
    /// `|mean test MSE of spec 0 - spec 1|` when exactly two specs are compared.
    pub test_mse_gap: Option<f64>,
}

/// `None` in `sizes` stands for the full training split.
pub fn sweep_train_size(cfgs: &[TrainConfig], ds: &Dataset, sizes: &[Option<usize>]) -> Result<Vec<SizeRow>> {
    if cfgs.is_empty() || sizes.is_empty() {
        return Err(arg_err!("need at least one spec and one size"));
    }
    let full = ds.train.len();
    if let Some(n) = sizes.iter().flatten().find(|&&n| n > full || n == 0) {
        return Err(arg_err!("training size {} outside 1..={}", n, full));
    }
    sizes
        .iter()
        .map(|&size| {
            let n = size.unwrap_or(full);
            let mut summaries = Vec::new();
            let mut runs = Vec::new();
            for cfg in cfgs {
                let c = TrainConfig { train_subset_size: Some(n), ..cfg.clone() };
                let report = train(&c, ds)?;
                summaries.push(report.summary);
                runs.extend(report.runs);
            }
            let test_mse_gap =
                if summaries.len() == 2 { Some((summaries[0].test_mse.mean - summaries[1].test_mse.mean).abs()) } else { None };
            Ok(SizeRow { size: n, summaries, runs, test_mse_gap })
        })
        .collect()
}

pub fn write_runs_csv<'a>(path: &Path, runs: impl IntoIterator<Item = &'a RunResult>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", RUN_CSV_HEADER)?;
    for r in runs {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}
