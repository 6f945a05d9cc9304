//! Heterogeneous-attention encoder.
//!
//! Node rows are laid out as `[depot, pickups.., deliveries..]` for every
//! instance of a batch, giving tensors of shape `[B, 2n+1, d_h]`. Besides the
//! usual all-to-all attention, each layer runs role-specific attentions whose
//! outputs are only added to the rows of the querying role: pickup-issued
//! attentions write pickup rows, delivery-issued ones write delivery rows,
//! and the depot only receives the all-to-all term.

use std::collections::HashMap;

use pdpha_nn::{ParamId, Tape, Tensor, Var};

use crate::error::{PdpError, Result};
use crate::instances::Instance;
use crate::model::{AttentionKind, PolicyModel};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Encoder output for a batch of same-size instances, on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    /// `[B, 2n+1, d_h]`
    pub nodes: Var,
    /// `[B, d_h]`, mean of the node rows.
    pub graph: Var,
    pub batch: usize,
    pub n: usize,
}

impl EncodedBatch {
    /// Restricts the batch to instance `b`.
    pub fn select(&self, tape: &mut Tape, b: usize) -> Result<EncodedBatch> {
        Ok(EncodedBatch {
            nodes: tape.slice(self.nodes, 0, b, 1)?,
            graph: tape.slice(self.graph, 0, b, 1)?,
            batch: 1,
            n: self.n,
        })
    }
}

/// Encoder output for one instance, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// `[2n+1, d_h]`
    pub nodes: Tensor,
    /// `[d_h]`
    pub graph: Tensor,
}

impl Embeddings {
    pub fn n(&self) -> usize {
        (self.nodes.shape()[0] - 1) / 2
    }

    /// Places the embeddings on `tape` as a batch of one.
    pub fn to_batch(&self, tape: &mut Tape) -> Result<EncodedBatch> {
        let (rows, d) = (self.nodes.shape()[0], self.nodes.shape()[1]);
        Ok(EncodedBatch {
            nodes: tape.constant(self.nodes.clone().reshaped(vec![1, rows, d])?)?,
            graph: tape.constant(self.graph.clone().reshaped(vec![1, d])?)?,
            batch: 1,
            n: self.n(),
        })
    }
}

/// Common pair count of a non-empty batch.
pub(crate) fn batch_pairs(instances: &[Instance]) -> Result<usize> {
    let first = instances
        .first()
        .ok_or_else(|| PdpError::InvalidConfig("empty instance batch".into()))?;
    let n = first.n();
    if let Some(other) = instances.iter().find(|i| i.n() != n) {
        return Err(PdpError::InvalidConfig(format!(
            "instances in one batch must share n ({n} vs {})",
            other.n()
        )));
    }
    Ok(n)
}

/// Linear projection of the raw coordinates to `[B, 2n+1, d_h]`.
///
/// Pickup `i` sees its own coordinates concatenated with those of delivery
/// `i + n`; deliveries and the depot each have their own 2-input map.
pub fn embed_inputs(tape: &mut Tape, model: &PolicyModel, instances: &[Instance]) -> Result<Var> {
    let n = batch_pairs(instances)?;
    let b = instances.len();
    let mut depot = Vec::with_capacity(b * 2);
    let mut pickup = Vec::with_capacity(b * n * 4);
    let mut delivery = Vec::with_capacity(b * n * 2);
    for inst in instances {
        let d = inst.depot();
        depot.extend([d.x, d.y]);
        for (p, q) in inst.pickups().iter().zip(inst.deliveries()) {
            pickup.extend([p.x, p.y, q.x, q.y]);
            delivery.extend([q.x, q.y]);
        }
    }
    let store = model.params();
    let linear = |tape: &mut Tape, input: Tensor, (w, bias): (ParamId, ParamId)| -> Result<Var> {
        let x = tape.constant(input)?;
        let w = tape.param(store, w);
        let bias = tape.param(store, bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, bias)?)
    };
    let e = &model.embed;
    let depot = linear(tape, Tensor::new(vec![b, 1, 2], depot)?, e.depot)?;
    let pickup = linear(tape, Tensor::new(vec![b, n, 4], pickup)?, e.pickup)?;
    let delivery = linear(tape, Tensor::new(vec![b, n, 2], delivery)?, e.delivery)?;
    Ok(tape.concat(&[depot, pickup, delivery], 1)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Rows {
    All,
    Pickups,
    Deliveries,
}

/// Per-layer projection cache so that shared key/value maps are applied once.
struct Projector<'a> {
    model: &'a PolicyModel,
    h: Var,
    n: usize,
    row_views: HashMap<Rows, Var>,
    cache: HashMap<(ParamId, Rows), Var>,
}

impl<'a> Projector<'a> {
    fn new(model: &'a PolicyModel, h: Var, n: usize) -> Self {
        Self {
            model,
            h,
            n,
            row_views: HashMap::new(),
            cache: HashMap::new(),
        }
    }

    fn rows(&mut self, tape: &mut Tape, rows: Rows) -> Result<Var> {
        if let Some(&v) = self.row_views.get(&rows) {
            return Ok(v);
        }
        let v = match rows {
            Rows::All => self.h,
            Rows::Pickups => tape.slice(self.h, 1, 1, self.n)?,
            Rows::Deliveries => tape.slice(self.h, 1, 1 + self.n, self.n)?,
        };
        self.row_views.insert(rows, v);
        Ok(v)
    }

    /// `h[rows] · W`, reusing a full projection by the same map if present.
    fn project(&mut self, tape: &mut Tape, id: ParamId, rows: Rows) -> Result<Var> {
        if let Some(&v) = self.cache.get(&(id, rows)) {
            return Ok(v);
        }
        let v = if let (Some(&full), false) = (self.cache.get(&(id, Rows::All)), rows == Rows::All) {
            match rows {
                Rows::Pickups => tape.slice(full, 1, 1, self.n)?,
                _ => tape.slice(full, 1, 1 + self.n, self.n)?,
            }
        } else {
            let x = self.rows(tape, rows)?;
            let w = tape.param(self.model.params(), id);
            tape.matmul(x, w)?
        };
        self.cache.insert((id, rows), v);
        Ok(v)
    }
}

/// Query, key and target row sets of an attention kind.
fn kind_rows(kind: AttentionKind) -> (Rows, Rows) {
    use AttentionKind::*;
    match kind {
        Original => (Rows::All, Rows::All),
        PickupToPartner | PickupToDeliveries => (Rows::Pickups, Rows::Deliveries),
        PickupToPickups => (Rows::Pickups, Rows::Pickups),
        DeliveryToPartner | DeliveryToPickups => (Rows::Deliveries, Rows::Pickups),
        DeliveryToDeliveries => (Rows::Deliveries, Rows::Deliveries),
    }
}

fn is_pair_gate(kind: AttentionKind) -> bool {
    matches!(kind, AttentionKind::PickupToPartner | AttentionKind::DeliveryToPartner)
}

fn sum_into(tape: &mut Tape, acc: &mut Option<Var>, v: Var) -> Result<()> {
    *acc = Some(match *acc {
        Some(a) => tape.add(a, v)?,
        None => v,
    });
    Ok(())
}

/// Multi-head output of encoder layer `layer` for input `h [B, 2n+1, d_h]`,
/// before the skip connection and normalization.
pub fn multi_head(tape: &mut Tape, model: &PolicyModel, layer: usize, h: Var, n: usize) -> Result<Var> {
    let cfg = model.config().encoder;
    let lp = &model.layers[layer];
    let (heads, dk) = (cfg.heads, cfg.d_k());
    let scale = 1.0 / (dk as f64).sqrt();
    let batch = tape.value(h).shape()[0];
    let kinds = cfg.attention_mode.kinds();

    let mut proj = Projector::new(model, h, n);
    let mut qkv = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let missing = || PdpError::InvalidConfig(format!("layer {layer} lacks maps for {kind:?}"));
        let (q_rows, kv_rows) = kind_rows(kind);
        let q = proj.project(tape, lp.query(kind).ok_or_else(missing)?, q_rows)?;
        let k = proj.project(tape, lp.key(kind).ok_or_else(missing)?, kv_rows)?;
        let v = proj.project(tape, lp.value(kind).ok_or_else(missing)?, kv_rows)?;
        qkv.push((kind, q, k, v));
    }

    let depot_zeros = tape.constant(Tensor::zeros(&[batch, 1, dk]))?;
    let mut head_outputs = Vec::with_capacity(heads);
    for m in 0..heads {
        let mut all_rows = None;
        let mut pickup_rows = None;
        let mut delivery_rows = None;
        for &(kind, q, k, v) in &qkv {
            let q = tape.slice(q, 2, m * dk, dk)?;
            let k = tape.slice(k, 2, m * dk, dk)?;
            let v = tape.slice(v, 2, m * dk, dk)?;
            let out = if is_pair_gate(kind) {
                // Row i of q and row i of k belong to the same pair; the gate
                // is a softmax over the feature axis applied to the value.
                let qk = tape.mul(q, k)?;
                let qk = tape.scale(qk, scale)?;
                let gate = tape.softmax(qk)?;
                tape.mul(gate, v)?
            } else {
                let scores = tape.batch_matmul(q, k, true)?;
                let scores = tape.scale(scores, scale)?;
                let weights = tape.softmax(scores)?;
                tape.batch_matmul(weights, v, false)?
            };
            let target = if kind == AttentionKind::Original {
                &mut all_rows
            } else if kind.is_pickup_role() {
                &mut pickup_rows
            } else {
                &mut delivery_rows
            };
            sum_into(tape, target, out)?;
        }
        let all_rows = all_rows.expect("original attention is always active");
        let mut role_zeros = || tape.constant(Tensor::zeros(&[batch, n, dk]));
        let pickup_rows = match pickup_rows {
            Some(v) => v,
            None => role_zeros()?,
        };
        let delivery_rows = match delivery_rows {
            Some(v) => v,
            None => role_zeros()?,
        };
        let role_terms = tape.concat(&[depot_zeros, pickup_rows, delivery_rows], 1)?;
        head_outputs.push(tape.add(all_rows, role_terms)?);
    }
    let heads = tape.concat(&head_outputs, 2)?;
    let w_o = tape.param(model.params(), lp.w_o);
    Ok(tape.matmul(heads, w_o)?)
}

/// One encoder layer: attention and feed-forward sublayers, each with a
/// skip connection followed by batch normalization.
pub fn attention_layer(tape: &mut Tape, model: &PolicyModel, layer: usize, h: Var, n: usize) -> Result<Var> {
    let store = model.params();
    let lp = &model.layers[layer];
    let mh = multi_head(tape, model, layer, h, n)?;
    let skip = tape.add(h, mh)?;
    let (g1, b1) = (tape.param(store, lp.bn1.0), tape.param(store, lp.bn1.1));
    let h1 = tape.batch_norm(skip, g1, b1, BN_EPS)?;

    let (w1, c1) = (tape.param(store, lp.ff1.0), tape.param(store, lp.ff1.1));
    let (w2, c2) = (tape.param(store, lp.ff2.0), tape.param(store, lp.ff2.1));
    let hidden = tape.matmul(h1, w1)?;
    let hidden = tape.add_bias(hidden, c1)?;
    let hidden = tape.relu(hidden)?;
    let ff = tape.matmul(hidden, w2)?;
    let ff = tape.add_bias(ff, c2)?;
    let skip = tape.add(h1, ff)?;
    let (g2, b2) = (tape.param(store, lp.bn2.0), tape.param(store, lp.bn2.1));
    Ok(tape.batch_norm(skip, g2, b2, BN_EPS)?)
}

/// Encodes a batch of instances sharing `n`. Normalization statistics are
/// taken over every node row of the batch.
pub fn encode(tape: &mut Tape, model: &PolicyModel, instances: &[Instance]) -> Result<EncodedBatch> {
    let n = batch_pairs(instances)?;
    let mut h = embed_inputs(tape, model, instances)?;
    for layer in 0..model.config().encoder.layers {
        h = attention_layer(tape, model, layer, h, n)?;
    }
    let graph = tape.mean(h, 1)?;
    Ok(EncodedBatch {
        nodes: h,
        graph,
        batch: instances.len(),
        n,
    })
}

/// Encodes a single instance (as a batch of one).
pub fn embeddings(model: &PolicyModel, inst: &Instance) -> Result<Embeddings> {
    let mut tape = Tape::inference();
    let enc = encode(&mut tape, model, std::slice::from_ref(inst))?;
    let nodes = tape.value(enc.nodes).clone();
    let (rows, d) = (nodes.shape()[1], nodes.shape()[2]);
    Ok(Embeddings {
        nodes: nodes.reshaped(vec![rows, d])?,
        graph: tape.value(enc.graph).clone().reshaped(vec![d])?,
    })
}
