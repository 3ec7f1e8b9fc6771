//! Losses, the training loop, evaluation and forward-time benchmarking.

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Split, TrajectoryDataset};
use crate::egnn::{EgnnModel, GraphBatch, MCEGNNConfig, MCEGNNModel};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, global_grad_norm, AdamConfig, AdamState, LrSchedule, Module, Trace};
use crate::rng::{stream_rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Models that map a graph batch to per-node positions.
pub trait GraphModel: Module {
    fn config(&self) -> &MCEGNNConfig;
    /// Position readout, `[n, 3]`.
    fn forward_positions(&self, trace: &mut Trace, batch: &GraphBatch) -> Result<Var>;
}

impl GraphModel for MCEGNNModel {
    fn config(&self) -> &MCEGNNConfig {
        &self.config
    }

    fn forward_positions(&self, trace: &mut Trace, batch: &GraphBatch) -> Result<Var> {
        self.forward(trace, batch)?
            .coords
            .ok_or_else(|| Error::Config("model has a scalar readout, not positions".into()))
    }
}

impl GraphModel for EgnnModel {
    fn config(&self) -> &MCEGNNConfig {
        &self.config
    }

    fn forward_positions(&self, trace: &mut Trace, batch: &GraphBatch) -> Result<Var> {
        if self.readout.is_some() {
            return Err(Error::Config("model has a scalar readout, not positions".into()));
        }
        self.forward(trace, batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    NormalizedMse,
}

/// Guard added to squared displacements in the normalized loss.
pub const NORMALIZED_MSE_EPS: f64 = 1e-8;

/// Mean over all entries of `(pred - target)^2`.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let count = tape.value(pred).len();
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 1.0 / count.max(1) as f64)
}

/// Mean over bodies of `|pred_i - target_i|^2 / (|target_i - initial_i|^2 + eps)`.
pub fn normalized_mse_loss(tape: &mut Tape, pred: Var, target: Var, initial: &Tensor, eps: f64) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || tape.shape(target) != shape.as_slice() || initial.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "normalized_mse_loss",
            lhs: shape,
            rhs: tape.shape(target).to_vec(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let n = shape[0];
    let width = shape[1];
    let weights: Rc<[f64]> = tape
        .value(target)
        .data()
        .chunks_exact(width)
        .zip(initial.data().chunks_exact(width))
        .map(|(t, i)| {
            let d2: f64 = t.iter().zip(i).map(|(a, b)| (a - b) * (a - b)).sum();
            1.0 / (d2 + eps)
        })
        .collect();
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let per_body = tape.sum(sq, 1)?;
    let weighted = tape.scale_rows(per_body, weights)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, 1.0 / n.max(1) as f64)
}

fn loss_on(tape: &mut Tape, kind: LossKind, pred: Var, target: &Tensor, initial: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = tape.constant(target.clone());
    match kind {
        LossKind::Mse => mse_loss(tape, pred, t),
        LossKind::NormalizedMse => normalized_mse_loss(tape, pred, t, initial, NORMALIZED_MSE_EPS),
    }
}

/// Units the loss is averaged over for a batch of samples.
fn loss_weight(kind: LossKind, samples: &[&Sample]) -> f64 {
    let bodies: usize = samples.iter().map(|s| s.n_bodies()).sum();
    match kind {
        LossKind::Mse => (bodies * 3) as f64,
        LossKind::NormalizedMse => bodies as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub loss: LossKind,
    /// Batch size used for validation and test evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 100,
            lr: 5e-4,
            schedule: LrSchedule::Constant,
            patience: 50,
            clip_norm: None,
            seed: 0,
            loss: LossKind::Mse,
            eval_batch_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm_pre: f64,
    /// Mean global gradient norm after clipping.
    pub grad_norm_post: f64,
    /// Wall-clock time; kept out of the serialized report so that reruns
    /// produce identical files.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_metric: Option<f64>,
    pub stopped_early: bool,
}

impl RunReport {
    /// Per-epoch losses as CSV.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,grad_norm_pre,grad_norm_post\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.lr, e.train_loss, e.val_loss, e.grad_norm_pre, e.grad_norm_post
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.6}\n", e.epoch, e.seconds));
        }
        out
    }
}

/// Samples of one split, pre-converted to graphs.
pub struct PreparedSplit<'a> {
    samples: Vec<&'a Sample>,
    graphs: Vec<GraphBatch>,
}

impl<'a> PreparedSplit<'a> {
    pub fn new(dataset: &'a TrajectoryDataset, split: Split) -> Result<Self> {
        let samples: Vec<&Sample> = dataset.split(split).collect();
        let graphs = samples.iter().map(|s| s.to_graph()).collect::<Result<_>>()?;
        Ok(PreparedSplit { samples, graphs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Batched graph, stacked targets and stacked initial positions.
    fn batch(&self, idx: &[usize]) -> Result<(GraphBatch, Tensor, Tensor, Vec<&'a Sample>)> {
        let graphs: Vec<GraphBatch> = idx.iter().map(|&i| self.graphs[i].clone()).collect();
        let g = GraphBatch::concat(&graphs)?;
        let n = g.n_nodes();
        let mut target = Vec::with_capacity(n * 3);
        let mut initial = Vec::with_capacity(n * 3);
        let mut picked = Vec::with_capacity(idx.len());
        for &i in idx {
            target.extend_from_slice(self.samples[i].target.data());
            initial.extend_from_slice(self.samples[i].positions.data());
            picked.push(self.samples[i]);
        }
        Ok((g, Tensor::new(&[n, 3], target)?, Tensor::new(&[n, 3], initial)?, picked))
    }
}

/// Mean loss over a split, without recording gradients. Independent of
/// `batch_size` up to summation order.
pub fn evaluate<M: GraphModel>(model: &M, split: &PreparedSplit, loss: LossKind, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation split"));
    }
    let order: Vec<usize> = (0..split.len()).collect();
    let (mut total, mut weight) = (0.0, 0.0);
    for chunk in order.chunks(batch_size.max(1)) {
        let (g, target, initial, picked) = split.batch(chunk)?;
        let mut trace = Trace::inference();
        let pred = model.forward_positions(&mut trace, &g)?;
        let l = loss_on(&mut trace.tape, loss, pred, &target, &initial)?;
        let w = loss_weight(loss, &picked);
        total += trace.tape.value(l).data()[0] * w;
        weight += w;
    }
    Ok(total / weight)
}

/// One optimizer step on a batch; returns `(loss, pre-clip norm, post-clip norm)`.
pub fn train_step<M: GraphModel>(
    model: &mut M,
    adam: &mut AdamState,
    batch: &GraphBatch,
    target: &Tensor,
    initial: &Tensor,
    loss: LossKind,
    clip_norm: Option<f64>,
) -> Result<(f64, f64, f64)> {
    let mut trace = Trace::training();
    let pred = model.forward_positions(&mut trace, batch)?;
    let l = loss_on(&mut trace.tape, loss, pred, target, initial)?;
    let value = trace.tape.value(l).data()[0];
    trace.backward_into(l, model.params_mut())?;
    let mut params = model.params_mut();
    let (pre, post) = match clip_norm {
        Some(c) => {
            let pre = clip_global_norm(&mut params, c);
            (pre, global_grad_norm(&params))
        }
        None => {
            let n = global_grad_norm(&params);
            (n, n)
        }
    };
    adam.step(&mut params)?;
    Ok((value, pre, post))
}

fn snapshot<M: Module>(model: &M) -> Vec<Tensor> {
    model.params().iter().map(|p| p.value.clone()).collect()
}

fn restore<M: Module>(model: &mut M, values: &[Tensor]) {
    for (p, v) in model.params_mut().into_iter().zip(values) {
        p.value = v.clone();
    }
}

/// Trains on the train split with early stopping on the val split. The model
/// is left holding the best-validation parameters.
pub fn fit<M: GraphModel>(model: &mut M, dataset: &TrajectoryDataset, cfg: &TrainConfig) -> Result<RunReport> {
    fit_with(model, dataset, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<M: GraphModel>(
    model: &mut M,
    dataset: &TrajectoryDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunReport> {
    cfg.validate()?;
    let train = PreparedSplit::new(dataset, Split::Train)?;
    let val = PreparedSplit::new(dataset, Split::Val)?;
    let test = PreparedSplit::new(dataset, Split::Test)?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let mut adam = AdamState::new(&model.params(), AdamConfig::with_lr(cfg.lr));
    let mut rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize);
    let mut best_params = snapshot(model);
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        adam.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut total, mut weight) = (0.0, 0.0);
        let (mut pre_sum, mut post_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (g, target, initial, picked) = train.batch(chunk)?;
            let (l, pre, post) = train_step(model, &mut adam, &g, &target, &initial, cfg.loss, cfg.clip_norm)?;
            let w = loss_weight(cfg.loss, &picked);
            total += l * w;
            weight += w;
            pre_sum += pre;
            post_sum += post;
            steps += 1;
        }
        let val_loss = evaluate(model, &val, cfg.loss, cfg.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / weight,
            val_loss,
            grad_norm_pre: pre_sum / steps as f64,
            grad_norm_post: post_sum / steps as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        epochs.push(record);
        if !val_loss.is_finite() {
            break;
        }
        if val_loss < best.0 {
            best = (val_loss, epoch);
            best_params = snapshot(model);
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    restore(model, &best_params);
    let test_metric = if test.is_empty() {
        None
    } else {
        Some(evaluate(model, &test, cfg.loss, cfg.eval_batch_size)?)
    };
    Ok(RunReport {
        seed: cfg.seed,
        param_count: model.param_count(),
        epochs,
        best_epoch: best.1,
        best_val_loss: best.0,
        test_metric,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub forward_seconds_mean: f64,
    pub forward_seconds_std: f64,
    pub params: usize,
}

pub const BENCH_WARMUP: usize = 3;

/// Times inference forwards: three warmups, then `repeats` timed runs.
/// The reported mean is the median of five group means; the spread is the
/// standard deviation of the individual runs.
pub fn bench_forward(model: &MCEGNNModel, batch: &GraphBatch, repeats: usize) -> Result<BenchRow> {
    let mut rows = bench_models(&[model], batch, repeats)?;
    Ok(rows.remove(0))
}

/// Benchmarks one freshly initialized model per channel count.
pub fn bench_table(base: &MCEGNNConfig, channels: &[usize], batch: &GraphBatch, repeats: usize) -> Result<Vec<BenchRow>> {
    let models = channels
        .iter()
        .map(|&m| {
            MCEGNNModel::new(MCEGNNConfig {
                channels: m,
                ..base.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    bench_models(&models.iter().collect::<Vec<_>>(), batch, repeats)
}

/// All models are warmed up first and then timed round-robin, so drift in
/// machine state affects every row alike.
fn bench_models(models: &[&MCEGNNModel], batch: &GraphBatch, repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats < 10 {
        return Err(Error::InvalidArgument("benchmark needs at least 10 repeats".into()));
    }
    for model in models {
        for _ in 0..BENCH_WARMUP {
            model.predict(batch)?;
        }
    }
    let mut times = vec![Vec::with_capacity(repeats); models.len()];
    for _ in 0..repeats {
        for (model, t) in models.iter().zip(times.iter_mut()) {
            let started = Instant::now();
            let out = model.predict(batch)?;
            t.push(started.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
    }
    Ok(models.iter().zip(&times).map(|(m, t)| summarize(m, t)).collect())
}

fn summarize(model: &MCEGNNModel, times: &[f64]) -> BenchRow {
    let groups = times.len().min(5);
    let size = times.len() / groups;
    let mut means: Vec<f64> = times
        .chunks(size)
        .take(groups)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let avg = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - avg).powi(2)).sum::<f64>() / (times.len() - 1) as f64;
    BenchRow {
        m: model.config.channels,
        forward_seconds_mean: means[means.len() / 2],
        forward_seconds_std: var.sqrt(),
        params: model.param_count(),
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("m,forward_seconds_mean,forward_seconds_std,params\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{}\n",
            r.m, r.forward_seconds_mean, r.forward_seconds_std, r.params
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(tape: &mut Tape, a: &[f64], b: &[f64]) -> (Var, Var) {
        let n = a.len() / 3;
        let x = tape.param(Tensor::new(&[n, 3], a.to_vec()).unwrap());
        let y = tape.constant(Tensor::new(&[n, 3], b.to_vec()).unwrap());
        (x, y)
    }

    #[test]
    fn mse_zero_and_unit() {
        let mut tape = Tape::new();
        let (p, t) = consts(&mut tape, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let l = mse_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let (p, t) = consts(&mut tape, &[1.0; 6], &[0.0; 6]);
        let l = mse_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0]);
    }

    #[test]
    fn mse_shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[2, 3]));
        let t = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(mse_loss(&mut tape, p, t).is_err());
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut tape = Tape::new();
        let pred = [0.5, -1.0, 2.0, 0.0, 0.25, 1.0];
        let target = [0.0, 1.0, 1.0, -1.0, 0.0, 0.0];
        let (p, t) = consts(&mut tape, &pred, &target);
        let l = mse_loss(&mut tape, p, t).unwrap();
        let g = tape.backward(l).unwrap().wrt(p);
        for k in 0..6 {
            let expected = 2.0 * (pred[k] - target[k]) / 6.0;
            assert!((g.data()[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_mse_cases() {
        let initial = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        let mut tape = Tape::new();
        // body 0 moved by (1,0,0) but was predicted at its start; body 1 is exact
        let (p, t) = consts(&mut tape, &[0.0, 0.0, 0.0, 5.0, 5.0, 5.0], &[1.0, 0.0, 0.0, 5.0, 5.0, 5.0]);
        let l = normalized_mse_loss(&mut tape, p, t, &initial, 1e-8).unwrap();
        let expected = (1.0 / (1.0 + 1e-8)) / 2.0;
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-15);

        let mut tape = Tape::new();
        let (p, t) = consts(&mut tape, &[0.1, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        let init = Tensor::zeros(&[1, 3]);
        let l = normalized_mse_loss(&mut tape, p, t, &init, 1e-8).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite());
        assert!((v - 0.01 / 1e-8).abs() / v < 1e-12);

        let mut tape = Tape::new();
        let (p, t) = consts(&mut tape, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let l = normalized_mse_loss(&mut tape, p, t, &init, 1e-8).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }

    fn normalized_value(pred: &[f64], target: &[f64], initial: &[f64]) -> f64 {
        let n = pred.len() / 3;
        let mut tape = Tape::new();
        let (p, t) = consts(&mut tape, pred, target);
        let init = Tensor::new(&[n, 3], initial.to_vec()).unwrap();
        let l = normalized_mse_loss(&mut tape, p, t, &init, NORMALIZED_MSE_EPS).unwrap();
        tape.value(l).data()[0]
    }

    proptest::proptest! {
        #[test]
        fn normalized_mse_ignores_rigid_motions(
            pts in proptest::collection::vec(-2.0f64..2.0, 27),
            shift in proptest::array::uniform3(-5.0f64..5.0),
            seed in 0u64..1000,
        ) {
            let r = crate::equicheck::random_orthogonal(3, seed, crate::equicheck::DetSign::Either).unwrap();
            let r = r.data();
            let moved = |xs: &[f64]| -> Vec<f64> {
                xs.chunks_exact(3)
                    .flat_map(|x| (0..3).map(move |i| (0..3).map(|j| r[i * 3 + j] * x[j]).sum::<f64>() + shift[i]))
                    .collect()
            };
            let (pred, target, initial) = (&pts[..9], &pts[9..18], &pts[18..]);
            let a = normalized_value(pred, target, initial);
            let b = normalized_value(&moved(pred), &moved(target), &moved(initial));
            proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} {b}");
        }
    }

    fn tiny_dataset(train: usize) -> TrajectoryDataset {
        use crate::data::{make_system_split_dataset, simulate_charged, ChargedConfig, FeatureKind, SplitFractions};
        let sim = ChargedConfig {
            n_steps: 200,
            record_every: 20,
            ..Default::default()
        };
        let total = train + 2;
        let trajs: Vec<_> = (0..total as u64).map(|i| simulate_charged(&sim, 4, i).unwrap()).collect();
        let t = total as f64;
        let frac = SplitFractions::new(train as f64 / t, 1.0 / t, 1.0 / t).unwrap();
        make_system_split_dataset(&trajs, 0, 10, FeatureKind::Charge, frac).unwrap()
    }

    fn tiny_model(seed: u64) -> MCEGNNModel {
        MCEGNNModel::new(MCEGNNConfig {
            n_layers: 2,
            hidden: 16,
            message: 16,
            channels: 2,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 3,
            lr,
            patience: epochs,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let ds = tiny_dataset(6);
        let mut model = tiny_model(1);
        let before = model.clone();
        let report = fit(&mut model, &ds, &cfg(4, 0.0)).unwrap();
        assert_eq!(model, before);
        let first = report.epochs[0].train_loss;
        for e in &report.epochs {
            assert!((e.train_loss - first).abs() <= 1e-12 * first.abs());
        }
    }

    #[test]
    fn memorizes_a_handful_of_samples() {
        let ds = tiny_dataset(5);
        let mut model = tiny_model(2);
        let c = TrainConfig {
            batch_size: 5,
            ..cfg(500, 3e-3)
        };
        let report = fit(&mut model, &ds, &c).unwrap();
        let first = report.epochs[0].train_loss;
        let last = report.epochs.last().unwrap().train_loss;
        assert!(last < 0.01 * first, "{first} -> {last}");
    }

    #[test]
    fn reruns_are_bit_identical() {
        let ds = tiny_dataset(6);
        let run = || {
            let mut model = tiny_model(3);
            fit(&mut model, &ds, &cfg(5, 1e-3)).unwrap()
        };
        let (a, b) = (run(), run());
        let bits = |r: &RunReport| -> Vec<u64> {
            r.epochs
                .iter()
                .flat_map(|e| [e.train_loss.to_bits(), e.val_loss.to_bits()])
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.test_metric.map(f64::to_bits), b.test_metric.map(f64::to_bits));
    }

    #[test]
    fn evaluation_ignores_batch_size_and_matches_best_epoch() {
        let ds = tiny_dataset(6);
        let mut model = tiny_model(4);
        let report = fit(&mut model, &ds, &cfg(6, 1e-3)).unwrap();
        let best = report.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_loss, best);
        let val = PreparedSplit::new(&ds, Split::Val).unwrap();
        let again = evaluate(&model, &val, LossKind::Mse, 100).unwrap();
        assert_eq!(again, report.best_val_loss);
        let train = PreparedSplit::new(&ds, Split::Train).unwrap();
        let whole = evaluate(&model, &train, LossKind::Mse, 100).unwrap();
        let ones = evaluate(&model, &train, LossKind::Mse, 1).unwrap();
        assert!((whole - ones).abs() <= 1e-12 * whole);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let ds = tiny_dataset(4);
        let mut model = tiny_model(5);
        let c = TrainConfig {
            patience: 1,
            ..cfg(200, 0.0)
        };
        let report = fit(&mut model, &ds, &c).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs.len(), 2);
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn clipping_is_logged() {
        let ds = tiny_dataset(4);
        let mut model = tiny_model(6);
        let c = TrainConfig {
            clip_norm: Some(1e-3),
            ..cfg(3, 1e-3)
        };
        let report = fit(&mut model, &ds, &c).unwrap();
        for e in &report.epochs {
            assert!(e.grad_norm_pre >= e.grad_norm_post);
            assert!(e.grad_norm_post <= 1e-3 + 1e-12);
        }
    }

    #[test]
    fn empty_splits_are_errors() {
        let mut ds = tiny_dataset(3);
        ds.samples.retain(|s| s.split != Split::Val);
        let mut model = tiny_model(7);
        assert!(matches!(fit(&mut model, &ds, &cfg(1, 1e-3)), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn bench_reports_param_count() {
        let model = tiny_model(8);
        let batch = crate::equicheck::random_batch(&model.config, 2, 5, 0).unwrap();
        let row = bench_forward(&model, &batch, 10).unwrap();
        assert_eq!(row.params, model.param_count());
        assert_eq!(row.m, 2);
        assert!(row.forward_seconds_mean > 0.0);
        assert!(bench_forward(&model, &batch, 9).is_err());
        let csv = bench_csv(&[row]);
        assert_eq!(csv.lines().count(), 2);
    }
}
