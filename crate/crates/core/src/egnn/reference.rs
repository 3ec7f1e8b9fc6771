//! Plain single-vector EGNN, written against `[n, 3]` coordinates.
//!
//! It shares the parameter layout and construction order of
//! [`MCEGNNModel`](super::MCEGNNModel), so a one-channel multi-channel model
//! built from the same config holds identical weights. It is used as an
//! independent check of the multi-channel code path.

use std::rc::Rc;

use super::graph::GraphBatch;
use super::model::{linear_params_mut, mlp_layers, named_layer_params, CoordAggregation, MCEGNNConfig, MCEGNNModel, Readout};
use crate::error::Result;
use crate::nn::{Linear, Mlp, MlpOptions, Module, Param, Trace};
use crate::rng::{stream_rng, Stream};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EgnnLayer {
    pub edge_mlp: Mlp,
    pub node_mlp: Mlp,
    pub coord_mlp: Mlp,
    pub vel_mlp: Option<Mlp>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgnnModel {
    pub config: MCEGNNConfig,
    pub embedding: Linear,
    pub layers: Vec<EgnnLayer>,
    pub readout: Option<Mlp>,
}

impl EgnnModel {
    /// Builds the model; `config.channels` is ignored.
    pub fn new(mut config: MCEGNNConfig) -> Result<Self> {
        config.channels = 1;
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Init);
        let embedding = Linear::new(config.node_in, config.hidden, true, 1.0, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let (edge_mlp, node_mlp, coord_mlp, vel_mlp) = mlp_layers(&config, 1, 1, 0, &mut rng)?;
            layers.push(EgnnLayer {
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
        Ok(EgnnModel {
            config,
            embedding,
            layers,
            readout,
        })
    }

    /// Returns `[n, 3]` positions or `[n_graphs]` scalars depending on the readout.
    pub fn forward(&self, trace: &mut Trace, batch: &GraphBatch) -> Result<Var> {
        MCEGNNModel::check_batch(&self.config, batch)?;
        let n = batch.n_nodes();
        let (dst, src) = batch.index_arrays();
        let scale: Rc<[f64]> = match self.config.aggregation {
            CoordAggregation::Sum => vec![1.0; n].into(),
            CoordAggregation::Mean => batch
                .in_degrees()
                .into_iter()
                .map(|d| if d == 0 { 1.0 } else { 1.0 / d as f64 })
                .collect(),
        };
        let tape = &mut trace.tape;
        let mut x = tape.constant(batch.positions());
        let attr = match (self.config.edge_in, &batch.edge_attr) {
            (0, _) => None,
            (_, a) => a.clone().map(|a| tape.constant(a)),
        };
        let v0 = batch.velocities.clone().map(|v| tape.constant(v));
        let feats = tape.constant(batch.features.clone());
        let mut h = self.embedding.forward(trace, feats)?;

        for layer in &self.layers {
            let tape = &mut trace.tape;
            let xi = tape.gather(x, dst.clone())?;
            let xj = tape.gather(x, src.clone())?;
            let diff = tape.sub(xi, xj)?;
            let sq = tape.mul(diff, diff)?;
            let sq = tape.sum(sq, 1)?;
            let sq = tape.reshape(sq, &[dst.len(), 1])?;
            let hi = tape.gather(h, dst.clone())?;
            let hj = tape.gather(h, src.clone())?;
            let mut parts = vec![hi, hj, sq];
            parts.extend(attr);
            let input = tape.concat(&parts, 1)?;
            let m = layer.edge_mlp.forward(trace, input)?;

            let w = layer.coord_mlp.forward(trace, m)?;
            let tape = &mut trace.tape;
            let trans = tape.mul_rows(diff, w)?;
            let agg = tape.scatter_add(trans, dst.clone(), n)?;
            let mut update = tape.scale_rows(agg, scale.clone())?;
            if let (Some(vel), Some(v0)) = (&layer.vel_mlp, v0) {
                let s = vel.forward(trace, h)?;
                let carried = trace.tape.mul_rows(v0, s)?;
                update = trace.tape.add(carried, update)?;
            }
            let tape = &mut trace.tape;
            let x_new = if self.config.residual_positions {
                tape.add(x, update)?
            } else {
                update
            };

            let agg_m = tape.scatter_add(m, dst.clone(), n)?;
            let input = tape.concat(&[h, agg_m], 1)?;
            let dh = layer.node_mlp.forward(trace, input)?;
            h = trace.tape.add(h, dh)?;
            x = x_new;
        }
        match &self.readout {
            None => Ok(x),
            Some(head) => {
                let membership: Rc<[usize]> = batch.graph_of().into();
                let pooled = trace.tape.scatter_add(h, membership, batch.n_graphs())?;
                let out = head.forward(trace, pooled)?;
                trace.tape.reshape(out, &[batch.n_graphs()])
            }
        }
    }

    pub fn predict(&self, batch: &GraphBatch) -> Result<Tensor> {
        let mut trace = Trace::inference();
        let out = self.forward(&mut trace, batch)?;
        Ok(trace.tape.value(out).clone())
    }
}

impl Module for EgnnModel {
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
