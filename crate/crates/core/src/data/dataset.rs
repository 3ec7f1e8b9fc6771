use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{load_container, save_container, Container};
use super::sim::Trajectory;
use crate::egnn::{complete_edges, GraphBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Node feature `q_i`, edge attribute `q_i q_j`.
    Charge,
    /// Node feature `ln m_i`, no edge attributes.
    LogMass,
}

impl FeatureKind {
    pub fn node_width(self) -> usize {
        1
    }

    pub fn edge_width(self) -> usize {
        match self {
            FeatureKind::Charge => 1,
            FeatureKind::LogMass => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn code(self) -> f64 {
        match self {
            Split::Train => 0.0,
            Split::Val => 1.0,
            Split::Test => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }

    /// Cut points `[0, a, b, total]` dividing `total` items.
    fn boundaries(&self, total: usize) -> [usize; 4] {
        let a = (self.train * total as f64).round() as usize;
        let b = ((self.train + self.val) * total as f64).round() as usize;
        [0, a.min(total), b.min(total), total]
    }
}

/// One (input state, future positions) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[n, 3]`
    pub positions: Tensor,
    /// `[n, 3]`
    pub velocities: Tensor,
    /// `[n, 3]` positions `horizon` frames later.
    pub target: Tensor,
    /// `[n, f]`
    pub features: Tensor,
    /// `[n (n - 1), d_e]` over the sorted complete edge list.
    pub edge_attr: Option<Tensor>,
    pub split: Split,
    pub trajectory: usize,
    pub start_frame: usize,
}

impl Sample {
    pub fn n_bodies(&self) -> usize {
        self.positions.shape()[0]
    }

    /// Fully connected graph of this sample.
    pub fn to_graph(&self) -> Result<GraphBatch> {
        let n = self.n_bodies();
        GraphBatch::new(
            self.positions.clone().reshape(&[n, 3, 1])?,
            self.features.clone(),
            Some(self.velocities.clone()),
            complete_edges(n),
            self.edge_attr.clone(),
            vec![0; n],
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub samples: Vec<Sample>,
    /// Horizon in recorded frames.
    pub horizon: usize,
    pub features: FeatureKind,
    pub n_bodies: usize,
}

fn node_features(traj: &Trajectory, kind: FeatureKind) -> Result<Tensor> {
    let n = traj.n_bodies();
    let values = match kind {
        FeatureKind::Charge => traj
            .charges
            .clone()
            .ok_or_else(|| Error::InvalidArgument("charge features need a charged trajectory".into()))?,
        FeatureKind::LogMass => {
            if traj.masses.iter().any(|m| !(*m > 0.0)) {
                return Err(Error::InvalidArgument("log-mass features need positive masses".into()));
            }
            traj.masses.iter().map(|m| m.ln()).collect()
        }
    };
    Tensor::new(&[n, 1], values)
}

fn edge_attributes(traj: &Trajectory, kind: FeatureKind) -> Result<Option<Tensor>> {
    match kind {
        FeatureKind::LogMass => Ok(None),
        FeatureKind::Charge => {
            let q = traj
                .charges
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("charge features need a charged trajectory".into()))?;
            let edges = complete_edges(q.len());
            let data = edges.iter().map(|&(i, j)| q[i] * q[j]).collect();
            Ok(Some(Tensor::new(&[edges.len(), 1], data)?))
        }
    }
}

fn sample_at(
    traj: &Trajectory,
    index: usize,
    start: usize,
    horizon: usize,
    split: Split,
    features: &Tensor,
    edge_attr: &Option<Tensor>,
) -> Sample {
    Sample {
        positions: traj.positions_at(start),
        velocities: traj.velocities_at(start),
        target: traj.positions_at(start + horizon),
        features: features.clone(),
        edge_attr: edge_attr.clone(),
        split,
        trajectory: index,
        start_frame: start,
    }
}

fn check_horizon(traj: &Trajectory, horizon: usize) -> Result<()> {
    if horizon >= traj.frames() {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} must be shorter than the trajectory ({} frames)",
            traj.frames()
        )));
    }
    Ok(())
}

/// Samples one trajectory on a stride grid and splits it into contiguous
/// time blocks. A sample belongs to a block only if its whole window
/// `[s, s + horizon]` lies inside it, so no target leaks across splits.
pub fn make_dataset(
    traj: &Trajectory,
    horizon: usize,
    stride: usize,
    features: FeatureKind,
    splits: SplitFractions,
) -> Result<TrajectoryDataset> {
    make_time_split_dataset(std::slice::from_ref(traj), horizon, stride, features, splits)
}

/// [`make_dataset`] applied to several trajectories of the same layout.
pub fn make_time_split_dataset(
    trajs: &[Trajectory],
    horizon: usize,
    stride: usize,
    features: FeatureKind,
    splits: SplitFractions,
) -> Result<TrajectoryDataset> {
    splits.validate()?;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let n_bodies = check_layout(trajs)?;
    let mut samples = Vec::new();
    for (index, traj) in trajs.iter().enumerate() {
        check_horizon(traj, horizon)?;
        let feats = node_features(traj, features)?;
        let attr = edge_attributes(traj, features)?;
        let cuts = splits.boundaries(traj.frames());
        for (k, split) in Split::ALL.into_iter().enumerate() {
            let (lo, hi) = (cuts[k], cuts[k + 1]);
            let mut s = lo;
            while s + horizon < hi {
                samples.push(sample_at(traj, index, s, horizon, split, &feats, &attr));
                s += stride;
            }
        }
    }
    Ok(TrajectoryDataset {
        samples,
        horizon,
        features,
        n_bodies,
    })
}

/// One sample per trajectory starting at `start_frame`; whole trajectories
/// are assigned to splits in order.
pub fn make_system_split_dataset(
    trajs: &[Trajectory],
    start_frame: usize,
    horizon: usize,
    features: FeatureKind,
    splits: SplitFractions,
) -> Result<TrajectoryDataset> {
    make_system_windows_dataset(trajs, &[start_frame], horizon, features, splits)
}

/// One sample per trajectory and start frame; whole trajectories are
/// assigned to splits in order, so systems never straddle splits.
pub fn make_system_windows_dataset(
    trajs: &[Trajectory],
    starts: &[usize],
    horizon: usize,
    features: FeatureKind,
    splits: SplitFractions,
) -> Result<TrajectoryDataset> {
    splits.validate()?;
    if starts.is_empty() {
        return Err(Error::InvalidArgument("at least one start frame is needed".into()));
    }
    let n_bodies = check_layout(trajs)?;
    let cuts = splits.boundaries(trajs.len());
    let mut samples = Vec::with_capacity(trajs.len() * starts.len());
    for (index, traj) in trajs.iter().enumerate() {
        let split = Split::ALL[(0..3).find(|&k| index < cuts[k + 1]).unwrap_or(2)];
        let feats = node_features(traj, features)?;
        let attr = edge_attributes(traj, features)?;
        for &start in starts {
            if start + horizon >= traj.frames() {
                return Err(Error::InvalidArgument(format!(
                    "start {start} + horizon {horizon} must be shorter than the trajectory ({} frames)",
                    traj.frames()
                )));
            }
            samples.push(sample_at(traj, index, start, horizon, split, &feats, &attr));
        }
    }
    Ok(TrajectoryDataset {
        samples,
        horizon,
        features,
        n_bodies,
    })
}

fn check_layout(trajs: &[Trajectory]) -> Result<usize> {
    let n = trajs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trajectories".into()))?
        .n_bodies();
    if trajs.iter().any(|t| t.n_bodies() != n) {
        return Err(Error::InvalidArgument("trajectories have different body counts".into()));
    }
    Ok(n)
}

fn stack(parts: impl Iterator<Item = Tensor>, count: usize, inner: &[usize]) -> Result<Tensor> {
    let mut data = Vec::new();
    for t in parts {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![count];
    shape.extend_from_slice(inner);
    Tensor::new(&shape, data)
}

fn unstack(t: &Tensor, k: usize) -> Result<Tensor> {
    let inner = &t.shape()[1..];
    let block: usize = inner.iter().product();
    Tensor::new(inner, t.data()[k * block..(k + 1) * block].to_vec())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    kind: String,
    horizon: usize,
    features: FeatureKind,
    n_bodies: usize,
    n_samples: usize,
}

impl TrajectoryDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_container(&self) -> Result<Container> {
        let s = self.samples.len();
        let n = self.n_bodies;
        let f = self.features.node_width();
        let mut c = Container::new();
        c.push("positions", stack(self.samples.iter().map(|x| x.positions.clone()), s, &[n, 3])?)?;
        c.push("velocities", stack(self.samples.iter().map(|x| x.velocities.clone()), s, &[n, 3])?)?;
        c.push("targets", stack(self.samples.iter().map(|x| x.target.clone()), s, &[n, 3])?)?;
        c.push("features", stack(self.samples.iter().map(|x| x.features.clone()), s, &[n, f])?)?;
        let de = self.features.edge_width();
        if de > 0 {
            let e = n * (n - 1);
            let attrs = self
                .samples
                .iter()
                .map(|x| x.edge_attr.clone().unwrap_or_else(|| Tensor::zeros(&[e, de])));
            c.push("edge_attr", stack(attrs, s, &[e, de])?)?;
        }
        let col = |f: &dyn Fn(&Sample) -> f64| Tensor::new(&[s], self.samples.iter().map(f).collect());
        c.push("split", col(&|x| x.split.code())?)?;
        c.push("trajectory", col(&|x| x.trajectory as f64)?)?;
        c.push("start_frame", col(&|x| x.start_frame as f64)?)?;
        c.metadata = serde_json::to_value(DatasetMeta {
            kind: "trajectory_dataset".into(),
            horizon: self.horizon,
            features: self.features,
            n_bodies: n,
            n_samples: s,
        })?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_value(c.metadata.clone())?;
        if meta.kind != "trajectory_dataset" {
            return Err(Error::InvalidArgument(format!("container holds `{}`, not a dataset", meta.kind)));
        }
        let positions = c.get("positions")?;
        let velocities = c.get("velocities")?;
        let targets = c.get("targets")?;
        let features = c.get("features")?;
        let edge_attr = if meta.features.edge_width() > 0 {
            Some(c.get("edge_attr")?)
        } else {
            None
        };
        let split = c.get("split")?;
        let traj = c.get("trajectory")?;
        let start = c.get("start_frame")?;
        let s = meta.n_samples;
        for t in [positions, velocities, targets, features, split, traj, start] {
            if t.shape()[0] != s {
                return Err(Error::InvalidArgument("dataset arrays disagree on sample count".into()));
            }
        }
        let mut samples = Vec::with_capacity(s);
        for k in 0..s {
            samples.push(Sample {
                positions: unstack(positions, k)?,
                velocities: unstack(velocities, k)?,
                target: unstack(targets, k)?,
                features: unstack(features, k)?,
                edge_attr: edge_attr.map(|a| unstack(a, k)).transpose()?,
                split: Split::from_code(split.data()[k])?,
                trajectory: traj.data()[k] as usize,
                start_frame: start.data()[k] as usize,
            });
        }
        Ok(TrajectoryDataset {
            samples,
            horizon: meta.horizon,
            features: meta.features,
            n_bodies: meta.n_bodies,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_container(path, &self.to_container()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&load_container(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sim::{simulate_charged, ChargedConfig};

    fn traj(steps: usize) -> Trajectory {
        let cfg = ChargedConfig {
            n_steps: steps,
            ..ChargedConfig::default()
        };
        simulate_charged(&cfg, 3, 0).unwrap()
    }

    fn fractions() -> SplitFractions {
        SplitFractions::new(0.6, 0.2, 0.2).unwrap()
    }

    #[test]
    fn zero_horizon_targets_equal_inputs() {
        let d = make_dataset(&traj(50), 0, 5, FeatureKind::Charge, fractions()).unwrap();
        assert!(!d.samples.is_empty());
        for s in &d.samples {
            assert_eq!(s.positions, s.target);
        }
    }

    #[test]
    fn targets_are_horizon_frames_ahead() {
        let t = traj(100);
        let d = make_dataset(&t, 7, 3, FeatureKind::Charge, fractions()).unwrap();
        for s in &d.samples {
            assert_eq!(s.target, t.positions_at(s.start_frame + 7));
        }
    }

    #[test]
    fn split_windows_do_not_overlap() {
        let d = make_dataset(&traj(200), 10, 1, FeatureKind::Charge, fractions()).unwrap();
        let range = |sp: Split| {
            let v: Vec<_> = d.split(sp).map(|s| (s.start_frame, s.start_frame + d.horizon)).collect();
            (v.iter().map(|r| r.0).min().unwrap(), v.iter().map(|r| r.1).max().unwrap())
        };
        let (tr, va, te) = (range(Split::Train), range(Split::Val), range(Split::Test));
        assert!(tr.1 < va.0 && va.1 < te.0);
    }

    #[test]
    fn charged_edge_attributes_are_products() {
        let mut t = traj(10);
        t.charges = Some(vec![1.0, -1.0, 1.0, 1.0, -1.0]);
        let d = make_dataset(&t, 1, 1, FeatureKind::Charge, fractions()).unwrap();
        let g = d.samples[0].to_graph().unwrap();
        assert_eq!(g.edges().len(), 20);
        let a = g.edge_attr.as_ref().unwrap();
        let pos = g.edges().iter().position(|&e| e == (0, 1)).unwrap();
        assert_eq!(a.data()[pos], -1.0);
        let pos = g.edges().iter().position(|&e| e == (0, 2)).unwrap();
        assert_eq!(a.data()[pos], 1.0);
    }

    #[test]
    fn horizon_out_of_range() {
        let t = traj(10);
        assert!(make_dataset(&t, 11, 1, FeatureKind::Charge, fractions()).is_err());
        assert!(make_dataset(&t, 10, 1, FeatureKind::Charge, fractions()).is_ok());
    }

    #[test]
    fn bad_fractions() {
        assert!(SplitFractions::new(0.5, 0.2, 0.2).is_err());
        assert!(SplitFractions::new(1.2, -0.2, 0.0).is_err());
    }

    #[test]
    fn system_split_assigns_whole_trajectories() {
        let cfg = ChargedConfig {
            n_steps: 20,
            ..ChargedConfig::default()
        };
        let trajs: Vec<_> = (0..10).map(|i| simulate_charged(&cfg, 1, i).unwrap()).collect();
        let d = make_system_split_dataset(&trajs, 0, 20, FeatureKind::Charge, fractions()).unwrap();
        assert_eq!((d.count(Split::Train), d.count(Split::Val), d.count(Split::Test)), (6, 2, 2));
        assert!(make_system_split_dataset(&trajs, 0, 21, FeatureKind::Charge, fractions()).is_err());
    }

    #[test]
    fn container_round_trip() {
        let d = make_dataset(&traj(60), 4, 4, FeatureKind::Charge, fractions()).unwrap();
        let back = TrajectoryDataset::from_container(&d.to_container().unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
