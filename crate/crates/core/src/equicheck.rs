//! Executable symmetry, gradient and parity properties.
//!
//! Rotations and reflections act on every spatial channel and on the
//! velocities; translations act on the position channel only; permutations
//! relabel nodes, with edges and attributes following their endpoints.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::egnn::{permute_rows, EgnnModel, Fault, GraphBatch, MCEGNNConfig, MCEGNNModel, Readout};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Module, Trace};
use crate::rng::{stream_rng, substream_rng, Stream};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::train::{mse_loss, train_step, LossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetSign {
    Positive,
    Negative,
    Either,
}

/// Haar-distributed orthogonal matrix, row-major `[dim, dim]`.
pub fn random_orthogonal(dim: usize, seed: u64, det: DetSign) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Check);
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..dim {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    let want = match det {
        DetSign::Positive => Some(1.0),
        DetSign::Negative => Some(-1.0),
        DetSign::Either => None,
    };
    if let Some(sign) = want {
        if q.determinant() * sign < 0.0 {
            q.column_mut(dim - 1).neg_mut();
        }
    }
    let data = (0..dim * dim).map(|k| q[(k / dim, k % dim)]).collect();
    Tensor::new(&[dim, dim], data)
}

/// A group element applied to a batch and to the model's output.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupElement {
    /// Row-major 3x3 orthogonal matrix.
    pub orthogonal: Option<[f64; 9]>,
    pub translation: Option<[f64; 3]>,
    /// Node `i` moves to `perm[i]`.
    pub permutation: Option<Vec<usize>>,
}

impl GroupElement {
    pub fn identity() -> Self {
        GroupElement {
            orthogonal: None,
            translation: None,
            permutation: None,
        }
    }

    fn rotate_rows(&self, t: &Tensor) -> Tensor {
        let Some(r) = self.orthogonal else {
            return t.clone();
        };
        // rows are [3, m] blocks, or plain 3-vectors when m == 1
        let block = t.len() / t.shape()[0].max(1);
        let m = block / 3;
        let mut out = t.clone();
        for (src, dst) in t.data().chunks_exact(block).zip(out.data_mut().chunks_exact_mut(block)) {
            for a in 0..3 {
                for c in 0..m {
                    dst[a * m + c] = (0..3).map(|b| r[a * 3 + b] * src[b * m + c]).sum();
                }
            }
        }
        out
    }

    fn translate_positions(&self, t: &Tensor) -> Tensor {
        let Some(s) = self.translation else {
            return t.clone();
        };
        let block = t.len() / t.shape()[0].max(1);
        let m = block / 3;
        let mut out = t.clone();
        for row in out.data_mut().chunks_exact_mut(block) {
            for a in 0..3 {
                row[a * m] += s[a];
            }
        }
        out
    }

    fn permute(&self, t: Tensor) -> Result<Tensor> {
        match &self.permutation {
            Some(p) => permute_rows(&t, p),
            None => Ok(t),
        }
    }

    pub fn apply_batch(&self, batch: &GraphBatch) -> Result<GraphBatch> {
        let coords = self.translate_positions(&self.rotate_rows(&batch.coords));
        let vel = batch.velocities.as_ref().map(|v| self.rotate_rows(v));
        let moved = batch.with_geometry(coords, vel)?;
        match &self.permutation {
            Some(p) => moved.permuted(p),
            None => Ok(moved),
        }
    }

    /// Expected output transform for each readout behaviour.
    pub fn apply_output(&self, out: &Tensor, kind: OutputKind) -> Result<Tensor> {
        match kind {
            OutputKind::Invariant => Ok(out.clone()),
            OutputKind::Positions { translates } => {
                let mut y = self.rotate_rows(out);
                if translates {
                    y = self.translate_positions(&y);
                }
                self.permute(y)
            }
        }
    }
}

/// How a model output should respond to the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// Node-wise vectors `[n, 3]`; translated only when `translates`.
    Positions { translates: bool },
    /// Graph-level scalars.
    Invariant,
}

impl OutputKind {
    pub fn of(config: &MCEGNNConfig) -> Self {
        match config.readout {
            Readout::Positions => OutputKind::Positions {
                translates: config.residual_positions,
            },
            Readout::InvariantScalar => OutputKind::Invariant,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Rotation,
    Reflection,
    Translation,
    Permutation,
    RotationTranslation,
    /// Reflection, translation and permutation together.
    Composite,
}

impl Symmetry {
    pub const ALL: [Symmetry; 6] = [
        Symmetry::Rotation,
        Symmetry::Reflection,
        Symmetry::Translation,
        Symmetry::Permutation,
        Symmetry::RotationTranslation,
        Symmetry::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Symmetry::Rotation => "rotation",
            Symmetry::Reflection => "reflection",
            Symmetry::Translation => "translation",
            Symmetry::Permutation => "permutation",
            Symmetry::RotationTranslation => "rotation_translation",
            Symmetry::Composite => "composite",
        }
    }

    /// Random element of this kind for `n` nodes.
    pub fn sample(self, n: usize, seed: u64) -> Result<GroupElement> {
        let mut rng = stream_rng(seed, Stream::Check);
        let ortho = |det| -> Result<[f64; 9]> {
            let r = random_orthogonal(3, seed, det)?;
            Ok(r.data().try_into().expect("3x3"))
        };
        let mut shift = || -> [f64; 3] { [0, 1, 2].map(|_| rng.sample::<f64, _>(StandardNormal)) };
        let mut el = GroupElement::identity();
        match self {
            Symmetry::Rotation => el.orthogonal = Some(ortho(DetSign::Positive)?),
            Symmetry::Reflection => el.orthogonal = Some(ortho(DetSign::Negative)?),
            Symmetry::Translation => el.translation = Some(shift()),
            Symmetry::Permutation => {}
            Symmetry::RotationTranslation => {
                el.orthogonal = Some(ortho(DetSign::Positive)?);
                el.translation = Some(shift());
            }
            Symmetry::Composite => {
                el.orthogonal = Some(ortho(DetSign::Negative)?);
                el.translation = Some(shift());
            }
        }
        if matches!(self, Symmetry::Permutation | Symmetry::Composite) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut prng = substream_rng(seed, Stream::Check, 1);
            perm.shuffle(&mut prng);
            el.permutation = Some(perm);
        }
        Ok(el)
    }
}

/// One measured property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub property: String,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seeds: Vec<u64>,
}

impl PropertyRecord {
    pub fn new(property: impl Into<String>, trials: usize, max_deviation: f64, tolerance: f64, seeds: Vec<u64>) -> Self {
        PropertyRecord {
            property: property.into(),
            trials,
            max_deviation,
            tolerance,
            // NaN deviations fail
            pass: max_deviation <= tolerance,
            seeds,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub records: Vec<PropertyRecord>,
    /// Seeded faults; each should fail its property.
    pub mutations: Vec<PropertyRecord>,
}

impl EquivarianceReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass) && self.mutations.iter().all(|r| !r.pass)
    }

    pub fn failures(&self) -> Vec<&PropertyRecord> {
        self.records
            .iter()
            .filter(|r| !r.pass)
            .chain(self.mutations.iter().filter(|r| r.pass))
            .collect()
    }
}

/// Deviation between `f(g·x)` and `g·f(x)` for one element.
pub fn element_deviation(
    f: &dyn Fn(&GraphBatch) -> Result<Tensor>,
    kind: OutputKind,
    batch: &GraphBatch,
    el: &GroupElement,
) -> Result<f64> {
    let base = f(batch)?;
    let expected = el.apply_output(&base, kind)?;
    let got = f(&el.apply_batch(batch)?)?;
    Ok(got.max_abs_diff(&expected))
}

/// Max deviation over `trials` random elements of one symmetry.
pub fn check_equivariance(
    f: &dyn Fn(&GraphBatch) -> Result<Tensor>,
    kind: OutputKind,
    batch: &GraphBatch,
    symmetry: Symmetry,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<PropertyRecord> {
    let mut worst = 0.0f64;
    let mut seeds = Vec::with_capacity(trials);
    for t in 0..trials {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
        let el = symmetry.sample(batch.n_nodes(), s)?;
        let d = element_deviation(f, kind, batch, &el)?;
        worst = if d.is_nan() { f64::NAN } else { worst.max(d) };
        seeds.push(s);
    }
    Ok(PropertyRecord::new(symmetry.name(), trials, worst, tol, seeds))
}

/// [`check_equivariance`] on a model's own readout.
pub fn check_model(
    model: &MCEGNNModel,
    batch: &GraphBatch,
    symmetry: Symmetry,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<PropertyRecord> {
    let f = |b: &GraphBatch| model.predict(b);
    check_equivariance(&f, OutputKind::of(&model.config), batch, symmetry, trials, tol, seed)
}

/// Finite-difference probe summary. A probe passes when its absolute error
/// is below `abs_floor` or its relative error is below the tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub probes: usize,
    pub h: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failed_probes: usize,
    /// Probes above the relative tolerance that pass on the absolute floor.
    pub floor_passes: usize,
    pub pass: bool,
    pub seed: u64,
}

impl GradientRecord {
    pub fn to_property(&self) -> PropertyRecord {
        let mut r = PropertyRecord::new("gradients", self.probes, self.max_rel_error, self.tolerance, vec![self.seed]);
        r.pass = self.pass;
        r
    }
}

pub const GRAD_ABS_FLOOR: f64 = 1e-8;

/// Compares tape gradients of `loss` with central differences on up to
/// `probes` randomly chosen scalar parameters.
pub fn check_gradients<M: Module>(
    model: &mut M,
    loss: &dyn Fn(&M, &mut Trace) -> Result<Var>,
    probes: usize,
    h: f64,
    tol_rel: f64,
    seed: u64,
) -> Result<GradientRecord> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut trace = Trace::training();
    let out = loss(model, &mut trace)?;
    trace.backward_into(out, model.params_mut())?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = stream_rng(seed, Stream::Check);
    let mut picks: Vec<usize> = (0..total).collect();
    picks.shuffle(&mut rng);
    picks.truncate(probes.min(total));
    picks.sort_unstable();

    let analytic: Vec<f64> = {
        let params = model.params();
        picks
            .iter()
            .map(|&flat| {
                let (k, off) = locate(&sizes, flat);
                params[k].grad.as_ref().map_or(0.0, |g| g.data()[off])
            })
            .collect()
    };
    model.zero_grad();

    let eval = |model: &M| -> Result<f64> {
        let mut t = Trace::inference();
        let v = loss(model, &mut t)?;
        Ok(t.tape.value(v).data()[0])
    };
    let (mut max_rel, mut max_abs, mut failed, mut floor_passes) = (0.0f64, 0.0f64, 0usize, 0usize);
    for (&flat, &a) in picks.iter().zip(&analytic) {
        let (k, off) = locate(&sizes, flat);
        let orig = model.params_mut()[k].value.data()[off];
        model.params_mut()[k].value.data_mut()[off] = orig + h;
        let up = eval(model)?;
        model.params_mut()[k].value.data_mut()[off] = orig - h;
        let down = eval(model)?;
        model.params_mut()[k].value.data_mut()[off] = orig;
        let numeric = (up - down) / (2.0 * h);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
        if !(rel <= tol_rel) {
            if abs > GRAD_ABS_FLOOR {
                failed += 1;
            } else {
                floor_passes += 1;
            }
        }
    }
    Ok(GradientRecord {
        probes: picks.len(),
        h,
        tolerance: tol_rel,
        abs_floor: GRAD_ABS_FLOOR,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        failed_probes: failed,
        floor_passes,
        pass: failed == 0,
        seed,
    })
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (k, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (k, flat);
        }
        flat -= s;
    }
    unreachable!("flat index within total parameter count")
}

/// MSE between the positions readout and a fixed target.
pub fn position_loss(model: &MCEGNNModel, trace: &mut Trace, batch: &GraphBatch, target: &Tensor) -> Result<Var> {
    let out = model.forward(trace, batch)?;
    let pred = out
        .coords
        .ok_or_else(|| Error::Config("gradient check needs a positions readout".into()))?;
    let t = trace.tape.constant(target.clone());
    mse_loss(&mut trace.tape, pred, t)
}

/// Both models must expose the same parameter names in the same order;
/// shapes may differ, which is what makes a multi-channel model
/// distinguishable from the reference.
pub fn check_parity(mc: &MCEGNNModel, reference: &EgnnModel, batches: &[GraphBatch], tol: f64) -> Result<PropertyRecord> {
    let a: Vec<String> = mc.named_params().into_iter().map(|(n, _)| n).collect();
    let b: Vec<String> = reference.named_params().into_iter().map(|(n, _)| n).collect();
    if a != b {
        return Err(Error::Layout(format!(
            "parameter names differ ({} vs {} entries)",
            a.len(),
            b.len()
        )));
    }
    let mut worst = 0.0f64;
    for batch in batches {
        let x = mc.predict(batch)?;
        let y = reference.predict(batch)?;
        worst = worst.max(x.max_abs_diff(&y));
    }
    Ok(PropertyRecord::new("parity", batches.len(), worst, tol, vec![mc.config.seed]))
}

/// A batch of fully connected graphs with unit-scale random geometry and
/// inputs matching `config`.
pub fn random_batch(config: &MCEGNNConfig, n_graphs: usize, nodes: usize, seed: u64) -> Result<GraphBatch> {
    let mut graphs = Vec::with_capacity(n_graphs);
    for g in 0..n_graphs {
        let mut rng = substream_rng(seed, Stream::Check, g as u64 + 7);
        let pos = Tensor::randn_with(&[nodes, 3], &mut rng);
        let vel = Tensor::randn_with(&[nodes, 3], &mut rng);
        let feats = Tensor::randn_with(&[nodes, config.node_in], &mut rng);
        let attrs = Tensor::randn_with(&[nodes * nodes, config.edge_in.max(1)], &mut rng);
        let w = config.edge_in;
        let attr_fn = move |i: usize, j: usize| attrs.data()[(i * nodes + j) * w.max(1)..][..w].to_vec();
        let f: Option<&dyn Fn(usize, usize) -> Vec<f64>> = if w > 0 { Some(&attr_fn) } else { None };
        graphs.push(GraphBatch::fully_connected(
            &pos,
            feats,
            config.velocity_mode.then_some(vel),
            f,
        )?);
    }
    GraphBatch::concat(&graphs)
}

/// Settings for [`run_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub channels: Vec<usize>,
    pub velocity_modes: Vec<bool>,
    pub residual_modes: Vec<bool>,
    pub trials: usize,
    pub tolerance: f64,
    /// Optimizer steps applied before re-checking ("trained" models).
    pub train_steps: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            channels: vec![1, 2, 3, 5],
            velocity_modes: vec![false, true],
            residual_modes: vec![true, false],
            trials: 20,
            tolerance: 1e-9,
            train_steps: 20,
            seed: 0,
        }
    }
}

/// Adam steps towards random targets so that parameters leave their
/// initialization.
pub fn perturb_by_training(model: &mut MCEGNNModel, batch: &GraphBatch, steps: usize, seed: u64) -> Result<()> {
    let target = Tensor::randn_with(&[batch.n_nodes(), 3], &mut stream_rng(seed, Stream::Check));
    let initial = batch.positions().reshape(&[batch.n_nodes(), 3])?;
    let mut adam = AdamState::new(&model.params(), AdamConfig::with_lr(1e-3));
    for _ in 0..steps {
        train_step(model, &mut adam, batch, &target, &initial, LossKind::Mse, None)?;
    }
    Ok(())
}

/// Every symmetry for every configuration in `opts`, on fresh and trained
/// models, plus the absolute-coordinate mutation.
pub fn run_suite(base: &MCEGNNConfig, opts: &SuiteOptions) -> Result<EquivarianceReport> {
    let mut report = EquivarianceReport::default();
    for &m in &opts.channels {
        for &vel in &opts.velocity_modes {
            for &res in &opts.residual_modes {
                let config = MCEGNNConfig {
                    channels: m,
                    velocity_mode: vel,
                    residual_positions: res,
                    ..base.clone()
                };
                let batch = random_batch(&config, 2, 5, opts.seed)?;
                let mut model = MCEGNNModel::new(config)?;
                let tag = format!("m{m}.vel_{vel}.residual_{res}");
                for stage in ["fresh", "trained"] {
                    if stage == "trained" {
                        perturb_by_training(&mut model, &batch, opts.train_steps, opts.seed)?;
                    }
                    for sym in Symmetry::ALL {
                        let mut r = check_model(&model, &batch, sym, opts.trials, opts.tolerance, opts.seed)?;
                        r.property = format!("{tag}.{stage}.{}", sym.name());
                        report.records.push(r);
                    }
                }
            }
        }
    }
    let config = MCEGNNConfig {
        channels: opts.channels.iter().copied().max().unwrap_or(2),
        velocity_mode: opts.velocity_modes.contains(&true),
        ..base.clone()
    };
    let batch = random_batch(&config, 2, 5, opts.seed)?;
    let faulty = MCEGNNModel::with_fault(config, Fault::AbsoluteCoordinateLeak)?;
    for sym in [Symmetry::Rotation, Symmetry::Translation] {
        let mut r = check_model(&faulty, &batch, sym, opts.trials, opts.tolerance, opts.seed)?;
        r.property = format!("mutation.absolute_coordinate_leak.{}", sym.name());
        report.mutations.push(r);
    }
    Ok(report)
}

/// Symmetry checks on one given model (for example a loaded checkpoint),
/// on a random batch matching its config.
pub fn check_model_all(model: &MCEGNNModel, trials: usize, tol: f64, seed: u64) -> Result<Vec<PropertyRecord>> {
    let batch = random_batch(&model.config, 2, 5, seed)?;
    Symmetry::ALL
        .into_iter()
        .map(|sym| check_model(model, &batch, sym, trials, tol, seed))
        .collect()
}

/// Gradient probes on a two-layer, three-channel velocity-mode model.
pub fn gradient_suite(base: &MCEGNNConfig, probes: usize, seed: u64) -> Result<GradientRecord> {
    let config = MCEGNNConfig {
        n_layers: 2,
        channels: 3,
        velocity_mode: true,
        readout: Readout::Positions,
        coord_gain: 1.0,
        seed,
        ..base.clone()
    };
    let batch = random_batch(&config, 2, 5, seed)?;
    let target = Tensor::randn_with(&[batch.n_nodes(), 3], &mut substream_rng(seed, Stream::Check, 99));
    let mut model = MCEGNNModel::new(config)?;
    let loss = |m: &MCEGNNModel, t: &mut Trace| position_loss(m, t, &batch, &target);
    check_gradients(&mut model, &loss, probes, 1e-5, 1e-4, seed)
}

/// Parity of a one-channel model with the reference on `n_batches` random
/// batches.
pub fn parity_suite(base: &MCEGNNConfig, n_batches: usize, tol: f64, seed: u64) -> Result<PropertyRecord> {
    let config = MCEGNNConfig {
        channels: 1,
        seed,
        ..base.clone()
    };
    let mc = MCEGNNModel::new(config.clone())?;
    let reference = EgnnModel::new(config.clone())?;
    let batches = (0..n_batches as u64)
        .map(|k| random_batch(&config, 2, 5, seed.wrapping_add(k)))
        .collect::<Result<Vec<_>>>()?;
    check_parity(&mc, &reference, &batches, tol)
}

/// Symmetries, gradients and single-channel parity together.
pub fn full_suite(base: &MCEGNNConfig, opts: &SuiteOptions) -> Result<EquivarianceReport> {
    let mut report = run_suite(base, opts)?;
    report.records.push(gradient_suite(base, 200, opts.seed)?.to_property());
    let mut parity = parity_suite(base, 10, 1e-12, opts.seed)?;
    parity.property = "parity.single_channel".into();
    report.records.push(parity);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(m: usize, vel: bool) -> MCEGNNConfig {
        MCEGNNConfig {
            n_layers: 3,
            hidden: 16,
            message: 16,
            channels: m,
            velocity_mode: vel,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn orthogonal_properties() {
        for (seed, det) in [(1, DetSign::Positive), (2, DetSign::Negative), (3, DetSign::Either)] {
            let r = random_orthogonal(3, seed, det).unwrap();
            let q = DMatrix::from_row_slice(3, 3, r.data());
            let rtr = q.transpose() * &q;
            assert!((rtr - DMatrix::identity(3, 3)).abs().max() < 1e-12);
            let d = q.determinant();
            match det {
                DetSign::Positive => assert!((d - 1.0).abs() < 1e-12),
                DetSign::Negative => assert!((d + 1.0).abs() < 1e-12),
                DetSign::Either => assert!((d.abs() - 1.0).abs() < 1e-12),
            }
            assert_eq!(r, random_orthogonal(3, seed, det).unwrap());
        }
        assert!(random_orthogonal(0, 1, DetSign::Either).is_err());
        assert_eq!(random_orthogonal(1, 4, DetSign::Negative).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn identity_element_is_exact() {
        let config = small(2, true);
        let model = MCEGNNModel::new(config.clone()).unwrap();
        let batch = random_batch(&config, 1, 4, 1).unwrap();
        let f = |b: &GraphBatch| model.predict(b);
        let d = element_deviation(&f, OutputKind::of(&config), &batch, &GroupElement::identity()).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn fresh_model_passes_rotation_and_mutation_fails() {
        let config = small(3, false);
        let batch = random_batch(&config, 2, 4, 2).unwrap();
        let model = MCEGNNModel::new(config.clone()).unwrap();
        for sym in Symmetry::ALL {
            let r = check_model(&model, &batch, sym, 5, 1e-9, 1).unwrap();
            assert!(r.pass, "{r:?}");
        }
        let faulty = MCEGNNModel::with_fault(config, Fault::AbsoluteCoordinateLeak).unwrap();
        let r = check_model(&faulty, &batch, Symmetry::Rotation, 5, 1e-9, 1).unwrap();
        assert!(!r.pass);
        assert!(r.max_deviation > 1e-6);
    }

    #[test]
    fn invariant_readout_is_invariant() {
        let config = MCEGNNConfig {
            readout: Readout::InvariantScalar,
            ..small(2, true)
        };
        let batch = random_batch(&config, 3, 4, 3).unwrap();
        let model = MCEGNNModel::new(config).unwrap();
        for sym in Symmetry::ALL {
            assert!(check_model(&model, &batch, sym, 4, 1e-9, 2).unwrap().pass);
        }
    }

    #[test]
    fn record_pass_flag_follows_tolerance() {
        assert!(PropertyRecord::new("x", 1, 1e-10, 1e-9, vec![]).pass);
        assert!(!PropertyRecord::new("x", 1, 1e-8, 1e-9, vec![]).pass);
        assert!(!PropertyRecord::new("x", 1, f64::NAN, 1e-9, vec![]).pass);
    }

    #[test]
    fn gradients_of_linear_model_are_exact() {
        // a single linear layer with a linear loss
        struct Lin(crate::nn::Linear);
        impl Module for Lin {
            fn named_params(&self) -> Vec<(String, &crate::nn::Param)> {
                vec![("w".into(), &self.0.weight), ("b".into(), self.0.bias.as_ref().unwrap())]
            }
            fn params_mut(&mut self) -> Vec<&mut crate::nn::Param> {
                vec![&mut self.0.weight, self.0.bias.as_mut().unwrap()]
            }
        }
        let mut rng = stream_rng(1, Stream::Init);
        let mut lin = Lin(crate::nn::Linear::new(3, 2, true, 1.0, &mut rng));
        let x = Tensor::randn(&[4, 3], 9);
        let loss = |m: &Lin, t: &mut Trace| -> Result<Var> {
            let xv = t.tape.constant(x.clone());
            let y = m.0.forward(t, xv)?;
            t.tape.sum_all(y)
        };
        let r = check_gradients(&mut lin, &loss, 200, 1e-5, 1e-4, 3).unwrap();
        assert_eq!(r.probes, 8);
        assert!(r.max_abs_error < 1e-9, "{r:?}");
        assert!(r.pass);
    }

    #[test]
    fn zero_loss_point_has_vanishing_gradients() {
        let config = small(2, true);
        let batch = random_batch(&config, 1, 4, 4).unwrap();
        let mut model = MCEGNNModel::new(config).unwrap();
        let target = model.predict(&batch).unwrap();
        let loss = |m: &MCEGNNModel, t: &mut Trace| position_loss(m, t, &batch, &target);
        let r = check_gradients(&mut model, &loss, 50, 1e-5, 1e-4, 1).unwrap();
        assert!(r.max_abs_error < 1e-8, "{r:?}");
    }

    #[test]
    fn parity_rejects_mismatched_layouts() {
        let a = MCEGNNModel::new(small(1, true)).unwrap();
        let b = EgnnModel::new(small(1, false)).unwrap();
        assert!(matches!(check_parity(&a, &b, &[], 1e-12), Err(Error::Layout(_))));
    }
}
