use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::graph::GraphBatch;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, MlpOptions, Module, Param, Trace};
use crate::rng::{stream_rng, Stream};
use crate::tape::Var;
use crate::tensor::Tensor;

/// How the neighbour sum in the vector update is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordAggregation {
    /// `C = 1 / |N(i)|`
    Mean,
    /// `C = 1`
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Channel 0 of the final vector features, one 3-vector per node.
    Positions,
    /// Per-graph sum of node features followed by an MLP.
    InvariantScalar,
}

/// Architecture description. Every field is explicit when serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MCEGNNConfig {
    pub n_layers: usize,
    /// Width of the invariant node features `h`.
    pub hidden: usize,
    /// Width of the edge messages.
    pub message: usize,
    /// Vector channels carried between interior layers.
    pub channels: usize,
    /// Width of the raw node features.
    pub node_in: usize,
    /// Width of the edge attributes (0 for none).
    pub edge_in: usize,
    pub velocity_mode: bool,
    pub residual_positions: bool,
    pub aggregation: CoordAggregation,
    pub readout: Readout,
    /// Glorot gain of the last layer of every mixing MLP.
    pub coord_gain: f64,
    pub seed: u64,
}

impl Default for MCEGNNConfig {
    fn default() -> Self {
        MCEGNNConfig {
            n_layers: 4,
            hidden: 64,
            message: 64,
            channels: 1,
            node_in: 1,
            edge_in: 1,
            velocity_mode: true,
            residual_positions: true,
            aggregation: CoordAggregation::Mean,
            readout: Readout::Positions,
            coord_gain: 1e-3,
            seed: 0,
        }
    }
}

impl MCEGNNConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("message", self.message),
            ("channels", self.channels),
            ("node_in", self.node_in),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.coord_gain.is_finite() && self.coord_gain >= 0.0) {
            return Err(Error::Config("coord_gain must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `(m_in, m_out)` per layer: `1 -> m -> ... -> m -> 1`.
    pub fn channel_schedule(&self) -> Vec<(usize, usize)> {
        let (l, m) = (self.n_layers, self.channels);
        (0..l)
            .map(|k| {
                let m_in = if k == 0 { 1 } else { m };
                let m_out = if k + 1 == l { 1 } else { m };
                (m_in, m_out)
            })
            .collect()
    }
}

/// Seeded faults for checking that the property harness can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Concatenates the absolute position of the receiving node into the
    /// edge-MLP input.
    AbsoluteCoordinateLeak,
}

/// One message-passing layer mapping `m_in` to `m_out` vector channels.
#[derive(Clone, Debug, PartialEq)]
pub struct McLayer {
    pub m_in: usize,
    pub m_out: usize,
    pub edge_in: usize,
    /// phi_e: `[2 d_h + m_in + d_e] -> d -> d`, SiLU after both layers.
    pub edge_mlp: Mlp,
    /// phi_h: `[d_h + d] -> d_h -> d_h`.
    pub node_mlp: Mlp,
    /// Phi_x: `d -> d -> m_in * m_out`, linear output, no final bias.
    pub coord_mlp: Mlp,
    /// phi_v: `d_h -> d_h -> m_out`, present in velocity mode.
    pub vel_mlp: Option<Mlp>,
}

/// Per-batch index data and constants shared by every layer.
pub struct BatchCtx {
    pub n: usize,
    /// Receiving node `i` of every edge.
    pub dst: Rc<[usize]>,
    /// Sending node `j` of every edge.
    pub src: Rc<[usize]>,
    /// `C` per receiving node.
    pub coord_scale: Rc<[f64]>,
    pub edge_attr: Option<Var>,
    pub velocities: Option<Var>,
}

impl BatchCtx {
    pub fn new(
        trace: &mut Trace,
        batch: &GraphBatch,
        aggregation: CoordAggregation,
    ) -> Self {
        let (dst, src) = batch.index_arrays();
        let coord_scale: Rc<[f64]> = match aggregation {
            CoordAggregation::Sum => vec![1.0; batch.n_nodes()].into(),
            CoordAggregation::Mean => batch
                .in_degrees()
                .into_iter()
                .map(|d| if d == 0 { 1.0 } else { 1.0 / d as f64 })
                .collect(),
        };
        BatchCtx {
            n: batch.n_nodes(),
            dst,
            src,
            coord_scale,
            edge_attr: batch.edge_attr.clone().map(|a| trace.tape.constant(a)),
            velocities: batch.velocities.clone().map(|v| trace.tape.constant(v)),
        }
    }
}

/// Vector and scalar node state between layers.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    /// `[n, 3, m]`
    pub coords: Var,
    /// `[n, d_h]`
    pub h: Var,
}

pub(crate) fn mlp_layers(
    config: &MCEGNNConfig,
    m_in: usize,
    m_out: usize,
    extra_edge_in: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Mlp, Mlp, Mlp, Option<Mlp>)> {
    let (dh, d, de) = (config.hidden, config.message, config.edge_in);
    let silu_out = MlpOptions {
        final_activation: true,
        ..MlpOptions::default()
    };
    let edge_mlp = Mlp::with_options(&[2 * dh + m_in + de + extra_edge_in, d, d], silu_out, rng)?;
    let node_mlp = Mlp::with_options(&[dh + d, dh, dh], MlpOptions::default(), rng)?;
    let coord_opts = MlpOptions {
        final_activation: false,
        final_bias: false,
        final_gain: config.coord_gain,
    };
    let coord_mlp = Mlp::with_options(&[d, d, m_in * m_out], coord_opts, rng)?;
    let vel_mlp = if config.velocity_mode {
        Some(Mlp::with_options(&[dh, dh, m_out], MlpOptions { final_gain: config.coord_gain, ..MlpOptions::default() }, rng)?)
    } else {
        None
    };
    Ok((edge_mlp, node_mlp, coord_mlp, vel_mlp))
}

impl McLayer {
    /// `X_i - X_j` for every edge, `[n_edges, 3, m_in]`.
    pub fn edge_differences(trace: &mut Trace, coords: Var, ctx: &BatchCtx) -> Result<Var> {
        let xi = trace.tape.gather(coords, ctx.dst.clone())?;
        let xj = trace.tape.gather(coords, ctx.src.clone())?;
        trace.tape.sub(xi, xj)
    }

    /// `phi_e(h_i, h_j, ||X_ij||_c^2, a_ij)`
    pub fn edge_message(
        &self,
        trace: &mut Trace,
        h: Var,
        diffs: Var,
        ctx: &BatchCtx,
        leak: Option<Var>,
    ) -> Result<Var> {
        let c = ctx;
        let hi = trace.tape.gather(h, c.dst.clone())?;
        let hj = trace.tape.gather(h, c.src.clone())?;
        let sq = trace.tape.channel_sqnorms(diffs)?;
        let mut parts = vec![hi, hj, sq];
        if self.edge_in > 0 {
            let a = c.edge_attr.ok_or_else(|| {
                Error::Batch(format!("model expects {} edge attributes, batch has none", self.edge_in))
            })?;
            parts.push(a);
        }
        if let Some(l) = leak {
            parts.push(l);
        }
        let input = trace.tape.concat(&parts, 1)?;
        self.edge_mlp.forward(trace, input)
    }

    /// `C * sum_j X_ij Phi_x(m_ij)`, `[n, 3, m_out]`.
    pub fn mixed_update(&self, trace: &mut Trace, diffs: Var, messages: Var, ctx: &BatchCtx) -> Result<Var> {
        let c = ctx;
        let n_edges = c.dst.len();
        let mix = self.coord_mlp.forward(trace, messages)?;
        let mix = trace.tape.reshape(mix, &[n_edges, self.m_in, self.m_out])?;
        let per_edge = trace.tape.batched_matmul(diffs, mix)?;
        let summed = trace.tape.scatter_add(per_edge, c.dst.clone(), c.n)?;
        trace.tape.scale_rows(summed, c.coord_scale.clone())
    }

    /// Carries `X_i` into the output channel layout.
    pub fn residual(&self, trace: &mut Trace, coords: Var) -> Result<Var> {
        match (self.m_in, self.m_out) {
            (a, b) if a == b => Ok(coords),
            (1, b) => {
                let copies = vec![coords; b];
                trace.tape.concat(&copies, 2)
            }
            (_, 1) => trace.tape.slice(coords, 2, 0..1),
            (a, b) => Err(Error::Config(format!("no residual rule for {a} -> {b} channels"))),
        }
    }

    /// Position update: residual (when enabled) plus the mixed neighbour sum.
    pub fn coord_update(
        &self,
        trace: &mut Trace,
        coords: Var,
        diffs: Var,
        messages: Var,
        ctx: &BatchCtx,
        residual: bool,
    ) -> Result<Var> {
        let update = self.mixed_update(trace, diffs, messages, ctx)?;
        if residual {
            let base = self.residual(trace, coords)?;
            trace.tape.add(base, update)
        } else {
            Ok(update)
        }
    }

    /// Velocity-variant update. Returns `(V, X_new)` with
    /// `V_i = v0_i phi_v(h_i) + C sum_j X_ij Phi_x(m_ij)`.
    #[allow(clippy::too_many_arguments)]
    pub fn velocity_update(
        &self,
        trace: &mut Trace,
        coords: Var,
        h: Var,
        diffs: Var,
        messages: Var,
        ctx: &BatchCtx,
        residual: bool,
    ) -> Result<(Var, Var)> {
        let v0 = ctx
            .velocities
            .ok_or_else(|| Error::Batch("velocity mode needs initial velocities".into()))?;
        let vel_mlp = self
            .vel_mlp
            .as_ref()
            .ok_or_else(|| Error::Config("layer was built without a velocity MLP".into()))?;
        let weight = vel_mlp.forward(trace, h)?;
        let carried = trace.tape.outer(v0, weight)?;
        let update = self.mixed_update(trace, diffs, messages, ctx)?;
        let velocity = trace.tape.add(carried, update)?;
        let new_coords = if residual {
            let base = self.residual(trace, coords)?;
            trace.tape.add(base, velocity)?
        } else {
            velocity
        };
        Ok((velocity, new_coords))
    }

    /// `h_i + phi_h(h_i, sum_j m_ij)`
    pub fn node_update(&self, trace: &mut Trace, h: Var, messages: Var, ctx: &BatchCtx) -> Result<Var> {
        let agg = trace.tape.scatter_add(messages, ctx.dst.clone(), ctx.n)?;
        let input = trace.tape.concat(&[h, agg], 1)?;
        let delta = self.node_mlp.forward(trace, input)?;
        trace.tape.add(h, delta)
    }
}

/// Values produced by one full forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[n, 3]` predicted positions (positions readout).
    pub coords: Option<Var>,
    /// `[n_graphs]` invariant predictions (scalar readout).
    pub scalar: Option<Var>,
    /// State after every layer, input state first.
    pub states: Vec<LayerState>,
    /// `V` of every layer in velocity mode.
    pub velocities: Vec<Var>,
}

/// Multi-channel EGNN.
#[derive(Clone, Debug, PartialEq)]
pub struct MCEGNNModel {
    pub config: MCEGNNConfig,
    /// Raw features to `h`.
    pub embedding: Linear,
    pub layers: Vec<McLayer>,
    /// Present for [`Readout::InvariantScalar`].
    pub readout: Option<Mlp>,
    fault: Option<Fault>,
}

impl MCEGNNModel {
    pub fn new(config: MCEGNNConfig) -> Result<Self> {
        Self::build(config, None)
    }

    #[doc(hidden)]
    pub fn with_fault(config: MCEGNNConfig, fault: Fault) -> Result<Self> {
        Self::build(config, Some(fault))
    }

    fn build(config: MCEGNNConfig, fault: Option<Fault>) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Init);
        let embedding = Linear::new(config.node_in, config.hidden, true, 1.0, &mut rng);
        let extra = if fault.is_some() { 3 } else { 0 };
        let mut layers = Vec::with_capacity(config.n_layers);
        for (m_in, m_out) in config.channel_schedule() {
            let (edge_mlp, node_mlp, coord_mlp, vel_mlp) = mlp_layers(&config, m_in, m_out, extra, &mut rng)?;
            layers.push(McLayer {
                m_in,
                m_out,
                edge_in: config.edge_in,
                edge_mlp,
                node_mlp,
                coord_mlp,
                vel_mlp,
            });
        }
        let readout = match config.readout {
            Readout::Positions => None,
            Readout::InvariantScalar => Some(Mlp::with_options(
                &[config.hidden, config.hidden, 1],
                MlpOptions::default(),
                &mut rng,
            )?),
        };
        Ok(MCEGNNModel {
            config,
            embedding,
            layers,
            readout,
            fault,
        })
    }

    pub(crate) fn check_batch(config: &MCEGNNConfig, batch: &GraphBatch) -> Result<()> {
        if batch.channels() != 1 {
            return Err(Error::Batch(format!(
                "inputs carry one vector per node, batch has {} channels",
                batch.channels()
            )));
        }
        if batch.features.shape()[1] != config.node_in {
            return Err(Error::Batch(format!(
                "model expects {} node features, batch has {}",
                config.node_in,
                batch.features.shape()[1]
            )));
        }
        let attr_w = batch.edge_attr.as_ref().map_or(0, |a| a.shape()[1]);
        if config.edge_in > 0 && batch.edge_attr.is_none() {
            return Err(Error::Batch(format!(
                "model expects {} edge attributes, batch has none",
                config.edge_in
            )));
        }
        if config.edge_in > 0 && attr_w != config.edge_in {
            return Err(Error::Batch(format!(
                "model expects {} edge attributes, batch has {attr_w}",
                config.edge_in
            )));
        }
        if config.velocity_mode && batch.velocities.is_none() {
            return Err(Error::Batch("velocity mode needs initial velocities".into()));
        }
        Ok(())
    }

    pub fn forward(&self, trace: &mut Trace, batch: &GraphBatch) -> Result<ModelOutput> {
        Self::check_batch(&self.config, batch)?;
        let ctx = BatchCtx::new(trace, batch, self.config.aggregation);
        let feats = trace.tape.constant(batch.features.clone());
        let h0 = self.embedding.forward(trace, feats)?;
        let x0 = trace.tape.constant(batch.coords.clone());
        let mut state = LayerState { coords: x0, h: h0 };
        let mut states = vec![state];
        let mut velocities = Vec::new();
        let leak = match self.fault {
            Some(Fault::AbsoluteCoordinateLeak) => {
                let n = batch.n_nodes();
                let pos = trace.tape.constant(batch.positions().reshape(&[n, 3])?);
                Some(trace.tape.gather(pos, ctx.dst.clone())?)
            }
            None => None,
        };
        for layer in &self.layers {
            let diffs = McLayer::edge_differences(trace, state.coords, &ctx)?;
            let messages = layer.edge_message(trace, state.h, diffs, &ctx, leak)?;
            let coords = if self.config.velocity_mode {
                let (v, x) = layer.velocity_update(
                    trace,
                    state.coords,
                    state.h,
                    diffs,
                    messages,
                    &ctx,
                    self.config.residual_positions,
                )?;
                velocities.push(v);
                x
            } else {
                layer.coord_update(
                    trace,
                    state.coords,
                    diffs,
                    messages,
                    &ctx,
                    self.config.residual_positions,
                )?
            };
            let h = layer.node_update(trace, state.h, messages, &ctx)?;
            state = LayerState { coords, h };
            states.push(state);
        }
        let n = batch.n_nodes();
        let (coords, scalar) = match &self.readout {
            None => (Some(trace.tape.reshape(state.coords, &[n, 3])?), None),
            Some(head) => {
                let membership: Rc<[usize]> = batch.graph_of().into();
                let pooled = trace.tape.scatter_add(state.h, membership, batch.n_graphs())?;
                let out = head.forward(trace, pooled)?;
                (None, Some(trace.tape.reshape(out, &[batch.n_graphs()])?))
            }
        };
        Ok(ModelOutput {
            coords,
            scalar,
            states,
            velocities,
        })
    }

    /// Inference-only forward returning the readout value.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Tensor> {
        let mut trace = Trace::inference();
        let out = self.forward(&mut trace, batch)?;
        let v = out.coords.or(out.scalar).expect("one readout is always produced");
        Ok(trace.tape.value(v).clone())
    }
}

pub(crate) fn named_layer_params<'a>(
    out: &mut Vec<(String, &'a Param)>,
    prefix: &str,
    edge: &'a Mlp,
    node: &'a Mlp,
    coord: &'a Mlp,
    vel: Option<&'a Mlp>,
) {
    out.extend(edge.named_params_with(&format!("{prefix}.edge")));
    out.extend(node.named_params_with(&format!("{prefix}.node")));
    out.extend(coord.named_params_with(&format!("{prefix}.coord")));
    if let Some(v) = vel {
        out.extend(v.named_params_with(&format!("{prefix}.vel")));
    }
}

pub(crate) fn linear_params_mut(l: &mut Linear) -> Vec<&mut Param> {
    let mut out = vec![&mut l.weight];
    if let Some(b) = &mut l.bias {
        out.push(b);
    }
    out
}

impl Module for MCEGNNModel {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![("embedding.weight".to_string(), &self.embedding.weight)];
        if let Some(b) = &self.embedding.bias {
            out.push(("embedding.bias".to_string(), b));
        }
        for (k, l) in self.layers.iter().enumerate() {
            named_layer_params(
                &mut out,
                &format!("layers.{k}"),
                &l.edge_mlp,
                &l.node_mlp,
                &l.coord_mlp,
                l.vel_mlp.as_ref(),
            );
        }
        if let Some(r) = &self.readout {
            out.extend(r.named_params_with("readout"));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = linear_params_mut(&mut self.embedding);
        for l in &mut self.layers {
            out.extend(l.edge_mlp.params_mut());
            out.extend(l.node_mlp.params_mut());
            out.extend(l.coord_mlp.params_mut());
            if let Some(v) = &mut l.vel_mlp {
                out.extend(v.params_mut());
            }
        }
        if let Some(r) = &mut self.readout {
            out.extend(r.params_mut());
        }
        out
    }
}
