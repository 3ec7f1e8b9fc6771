use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of disjoint geometric graphs.
///
/// Edge `(i, j)` means `j` is a neighbour of `i`: the message `m_ij` is
/// aggregated into node `i` and the edge difference is `X_i - X_j`. Edges are
/// kept sorted by `(i, j)` so every aggregation adds terms in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    /// `[n, 3, m]`; channel 0 is the physical position.
    pub coords: Tensor,
    /// `[n, f]` raw invariant node features.
    pub features: Tensor,
    /// `[n, 3]` initial velocities.
    pub velocities: Option<Tensor>,
    edges: Vec<(usize, usize)>,
    /// `[n_edges, d_e]`, rows aligned with [`GraphBatch::edges`].
    pub edge_attr: Option<Tensor>,
    graph_of: Vec<usize>,
    n_graphs: usize,
}

impl GraphBatch {
    /// Validates and canonicalizes a batch. `graph_of[i]` names the graph of
    /// node `i`; graphs are numbered from zero.
    pub fn new(
        coords: Tensor,
        features: Tensor,
        velocities: Option<Tensor>,
        edges: Vec<(usize, usize)>,
        edge_attr: Option<Tensor>,
        graph_of: Vec<usize>,
    ) -> Result<Self> {
        let cs = coords.shape();
        if cs.len() != 3 || cs[1] != 3 || cs[2] == 0 {
            return Err(Error::Batch(format!("coords must be [n, 3, m>=1], got {cs:?}")));
        }
        let n = cs[0];
        if features.shape().len() != 2 || features.shape()[0] != n {
            return Err(Error::Batch(format!(
                "features must be [{n}, f], got {:?}",
                features.shape()
            )));
        }
        if let Some(v) = &velocities {
            if v.shape() != [n, 3] {
                return Err(Error::Batch(format!("velocities must be [{n}, 3], got {:?}", v.shape())));
            }
        }
        if graph_of.len() != n {
            return Err(Error::Batch(format!(
                "graph membership has {} entries for {n} nodes",
                graph_of.len()
            )));
        }
        let n_graphs = graph_of.iter().max().map_or(0, |g| g + 1);
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(Error::Batch(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(Error::Batch(format!("self edge on node {i}")));
            }
            if graph_of[i] != graph_of[j] {
                return Err(Error::Batch(format!("edge ({i}, {j}) crosses graphs")));
            }
        }
        if let Some(a) = &edge_attr {
            if a.shape().len() != 2 || a.shape()[0] != edges.len() {
                return Err(Error::Batch(format!(
                    "edge attributes must be [{}, d_e], got {:?}",
                    edges.len(),
                    a.shape()
                )));
            }
        }
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_by_key(|&e| edges[e]);
        let sorted_edges: Vec<_> = order.iter().map(|&e| edges[e]).collect();
        let edge_attr = match edge_attr {
            Some(a) => {
                let w = a.shape()[1];
                let mut data = Vec::with_capacity(a.len());
                for &e in &order {
                    data.extend_from_slice(&a.data()[e * w..(e + 1) * w]);
                }
                Some(Tensor::new(&[edges.len(), w], data)?)
            }
            None => None,
        };
        Ok(GraphBatch {
            coords,
            features,
            velocities,
            edges: sorted_edges,
            edge_attr,
            graph_of,
            n_graphs,
        })
    }

    /// A single fully connected graph from positions `[n, 3]`.
    pub fn fully_connected(
        positions: &Tensor,
        features: Tensor,
        velocities: Option<Tensor>,
        edge_attr: Option<&dyn Fn(usize, usize) -> Vec<f64>>,
    ) -> Result<Self> {
        let n = positions.shape()[0];
        let edges = complete_edges(n);
        let attr = match edge_attr {
            Some(f) => {
                let rows: Vec<Vec<f64>> = edges.iter().map(|&(i, j)| f(i, j)).collect();
                let w = rows.first().map_or(0, |r| r.len());
                Some(Tensor::new(&[edges.len(), w], rows.concat())?)
            }
            None => None,
        };
        let coords = positions.clone().reshape(&[n, 3, 1])?;
        Self::new(coords, features, velocities, edges, attr, vec![0; n])
    }

    /// Disjoint union; node and graph indices of later batches are shifted.
    pub fn concat(batches: &[GraphBatch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Batch("cannot concatenate zero batches".into()))?;
        let m = first.channels();
        let f = first.features.shape()[1];
        let has_vel = first.velocities.is_some();
        let attr_w = first.edge_attr.as_ref().map(|a| a.shape()[1]);
        let mut coords = Vec::new();
        let mut feats = Vec::new();
        let mut vels = Vec::new();
        let mut edges = Vec::new();
        let mut attrs = Vec::new();
        let mut graph_of = Vec::new();
        let (mut node_off, mut graph_off) = (0, 0);
        for b in batches {
            if b.channels() != m
                || b.features.shape()[1] != f
                || b.velocities.is_some() != has_vel
                || b.edge_attr.as_ref().map(|a| a.shape()[1]) != attr_w
            {
                return Err(Error::Batch("batches to concatenate have different layouts".into()));
            }
            coords.extend_from_slice(b.coords.data());
            feats.extend_from_slice(b.features.data());
            if let Some(v) = &b.velocities {
                vels.extend_from_slice(v.data());
            }
            if let Some(a) = &b.edge_attr {
                attrs.extend_from_slice(a.data());
            }
            edges.extend(b.edges.iter().map(|&(i, j)| (i + node_off, j + node_off)));
            graph_of.extend(b.graph_of.iter().map(|g| g + graph_off));
            node_off += b.n_nodes();
            graph_off += b.n_graphs;
        }
        let n = node_off;
        let n_edges = edges.len();
        Self::new(
            Tensor::new(&[n, 3, m], coords)?,
            Tensor::new(&[n, f], feats)?,
            has_vel.then(|| Tensor::new(&[n, 3], vels)).transpose()?,
            edges,
            attr_w.map(|w| Tensor::new(&[n_edges, w], attrs)).transpose()?,
            graph_of,
        )
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.coords.shape()[2]
    }

    pub fn n_graphs(&self) -> usize {
        self.n_graphs
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn graph_of(&self) -> &[usize] {
        &self.graph_of
    }

    /// Position channel as `[n, 3]`.
    pub fn positions(&self) -> Tensor {
        let n = self.n_nodes();
        let m = self.channels();
        let data = self.coords.data().chunks_exact(m).map(|c| c[0]).collect();
        Tensor::new(&[n, 3], data).expect("position shape")
    }

    pub(crate) fn index_arrays(&self) -> (Rc<[usize]>, Rc<[usize]>) {
        let dst: Rc<[usize]> = self.edges.iter().map(|e| e.0).collect();
        let src: Rc<[usize]> = self.edges.iter().map(|e| e.1).collect();
        (dst, src)
    }

    pub(crate) fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes()];
        for &(i, _) in &self.edges {
            deg[i] += 1;
        }
        deg
    }

    /// Relabels nodes: node `i` becomes node `perm[i]`. Edges and attributes
    /// follow their endpoints.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        if perm.len() != n {
            return Err(Error::InvalidArgument("permutation length mismatch".into()));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
        }
        let coords = permute_rows(&self.coords, perm)?;
        let features = permute_rows(&self.features, perm)?;
        let velocities = self
            .velocities
            .as_ref()
            .map(|v| permute_rows(v, perm))
            .transpose()?;
        let mut graph_of = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            graph_of[p] = self.graph_of[i];
        }
        let edges = self.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        Self::new(coords, features, velocities, edges, self.edge_attr.clone(), graph_of)
    }

    /// Same graph with new coordinates and velocities.
    pub fn with_geometry(&self, coords: Tensor, velocities: Option<Tensor>) -> Result<Self> {
        let mut out = self.clone();
        if coords.shape() != self.coords.shape() {
            return Err(Error::Batch("replacement coords change shape".into()));
        }
        if velocities.as_ref().map(|v| v.shape().to_vec()) != self.velocities.as_ref().map(|v| v.shape().to_vec()) {
            return Err(Error::Batch("replacement velocities change shape".into()));
        }
        out.coords = coords;
        out.velocities = velocities;
        Ok(out)
    }
}

/// Every ordered pair `(i, j)` with `i != j`, sorted.
pub fn complete_edges(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Moves leading-axis row `i` to position `perm[i]`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let block = t.len() / n.max(1);
    let mut out = vec![0.0; t.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p * block..(p + 1) * block].copy_from_slice(&t.data()[i * block..(i + 1) * block]);
    }
    Tensor::new(t.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GraphBatch {
        let pos = Tensor::randn(&[3, 3], 1);
        GraphBatch::fully_connected(&pos, Tensor::ones(&[3, 1]), None, None).unwrap()
    }

    #[test]
    fn complete_graph_edge_count() {
        for n in 1..7 {
            assert_eq!(complete_edges(n).len(), n * (n - 1));
        }
    }

    #[test]
    fn rejects_out_of_range_and_crossing_edges() {
        let coords = Tensor::zeros(&[2, 3, 1]);
        let feats = Tensor::zeros(&[2, 1]);
        assert!(GraphBatch::new(coords.clone(), feats.clone(), None, vec![(0, 2)], None, vec![0, 0]).is_err());
        assert!(GraphBatch::new(coords.clone(), feats.clone(), None, vec![(0, 1)], None, vec![0, 1]).is_err());
        assert!(GraphBatch::new(coords, feats, None, vec![(0, 0)], None, vec![0, 0]).is_err());
    }

    #[test]
    fn edges_are_sorted_with_attributes() {
        let coords = Tensor::zeros(&[3, 3, 1]);
        let feats = Tensor::zeros(&[3, 1]);
        let attr = Tensor::new(&[3, 1], vec![21.0, 1.0, 10.0]).unwrap();
        let b = GraphBatch::new(coords, feats, None, vec![(2, 1), (0, 1), (1, 0)], Some(attr), vec![0; 3]).unwrap();
        assert_eq!(b.edges(), &[(0, 1), (1, 0), (2, 1)]);
        assert_eq!(b.edge_attr.unwrap().data(), &[1.0, 10.0, 21.0]);
    }

    #[test]
    fn concat_shifts_indices() {
        let b = GraphBatch::concat(&[tiny(), tiny()]).unwrap();
        assert_eq!(b.n_nodes(), 6);
        assert_eq!(b.n_graphs(), 2);
        assert_eq!(b.edges().len(), 12);
        assert!(b.edges().iter().all(|&(i, j)| (i < 3) == (j < 3)));
    }

    #[test]
    fn permutation_round_trip() {
        let b = tiny();
        let p = b.permuted(&[2, 0, 1]).unwrap();
        let back = p.permuted(&[1, 2, 0]).unwrap();
        assert_eq!(back, b);
    }
}
