//! Gated message passing over the periodic radius graph.
//!
//! For an edge `i → j` with feature `v_ij`, `z_ij = [h_i ‖ h_j ‖ v_ij]`,
//! `β_ij = sigmoid(BN(MLP_g(z_ij)))` and the message is `β_ij ⊙ MLP_m(z_ij)`.
//! Messages are reduced at `i` and `h_i' = relu(h_i + BN(agg_i))`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::PeriodicGraph;
use crate::nn::{BatchNorm, Ctx, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

/// Edge endpoints for a (possibly batched) graph.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub num_nodes: usize,
}

impl EdgeIndex {
    pub fn new(src: Vec<usize>, dst: Vec<usize>, num_nodes: usize) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::shape(
                "EdgeIndex::new",
                format!("{} sources, {} destinations", src.len(), dst.len()),
            ));
        }
        if let Some(&bad) = src.iter().chain(&dst).find(|&&i| i >= num_nodes) {
            return Err(Error::Index {
                op: "EdgeIndex::new",
                index: bad,
                bound: num_nodes,
            });
        }
        Ok(Self {
            src: src.into(),
            dst: dst.into(),
            num_nodes,
        })
    }

    pub fn from_graph(g: &PeriodicGraph) -> Self {
        Self {
            src: g.edges.iter().map(|e| e.src).collect(),
            dst: g.edges.iter().map(|e| e.dst).collect(),
            num_nodes: g.num_nodes,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

/// A 2-layer MLP on `[h_src ‖ h_dst ‖ v]`. The first layer is stored as three
/// `d × d` blocks so the node parts can be projected once per node and then
/// gathered, which is the same map as applying it to the concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeMlp {
    pub w_src: Linear,
    pub w_dst: Linear,
    pub w_edge: Linear,
    pub out: Linear,
}

impl EdgeMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // Bounds match a single 3d-input layer.
        let s = (1.0 / 3.0f64).sqrt();
        Ok(Self {
            w_src: Linear::with_scale(store, &format!("{name}.0.src"), d, d, true, s, rng)?,
            w_dst: Linear::with_scale(store, &format!("{name}.0.dst"), d, d, false, s, rng)?,
            w_edge: Linear::with_scale(store, &format!("{name}.0.edge"), d, d, false, s, rng)?,
            out: Linear::new(store, &format!("{name}.1"), d, d, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        edges: &EdgeIndex,
        v: Var,
    ) -> Result<Var> {
        let ps = self.w_src.forward(tape, store, h)?;
        let pd = self.w_dst.forward(tape, store, h)?;
        let pe = self.w_edge.forward(tape, store, v)?;
        let ps = tape.gather_rows(ps, edges.src.clone())?;
        let pd = tape.gather_rows(pd, edges.dst.clone())?;
        let z = tape.add(ps, pd)?;
        let z = tape.add(z, pe)?;
        let z = tape.silu(z);
        self.out.forward(tape, store, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalLayer {
    pub mlp_msg: EdgeMlp,
    pub mlp_gate: EdgeMlp,
    pub bn_gate: BatchNorm,
    pub bn_msg: BatchNorm,
    pub aggregation: Aggregation,
    pub width: usize,
}

impl LocalLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp_msg: EdgeMlp::new(store, &format!("{name}.mlp_msg"), width, rng)?,
            mlp_gate: EdgeMlp::new(store, &format!("{name}.mlp_gate"), width, rng)?,
            bn_gate: BatchNorm::new(store, &format!("{name}.bn_gate"), width)?,
            bn_msg: BatchNorm::new(store, &format!("{name}.bn_msg"), width)?,
            aggregation,
            width,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        edges: &EdgeIndex,
        v: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let (n, d) = tape.shape(h);
        let (e, dv) = tape.shape(v);
        if d != self.width || dv != self.width || n != edges.num_nodes || e != edges.num_edges() {
            return Err(Error::shape(
                "local_layer",
                format!(
                    "h {:?}, v {:?}, {} nodes / {} edges, width {}",
                    (n, d),
                    (e, dv),
                    edges.num_nodes,
                    edges.num_edges(),
                    self.width
                ),
            ));
        }
        let msg = self.mlp_msg.forward(tape, store, h, edges, v)?;
        let agg = if e == 0 {
            tape.constant(crate::autodiff::Tensor::zeros((n, d)))
        } else {
            let gate = self.mlp_gate.forward(tape, store, h, edges, v)?;
            let gate = self.bn_gate.forward(tape, store, gate, ctx)?;
            let beta = tape.sigmoid(gate);
            let msg = tape.mul(beta, msg)?;
            match self.aggregation {
                Aggregation::Sum => tape.segment_sum(msg, edges.src.clone(), n)?,
                Aggregation::Mean => tape.segment_mean(msg, edges.src.clone(), n)?,
            }
        };
        let agg = self.bn_msg.forward(tape, store, agg, ctx)?;
        let out = tape.add(h, agg)?;
        Ok(tape.relu(out))
    }
}
