//! Autoregressive decoder with masked pointer attention.
//!
//! A decode call runs `B × S` lanes in lock step: `S` routes for each of the
//! `B` encoded instances. Every step builds the context from the graph
//! embedding and the last visited node, refines it with a masked multi-head
//! glimpse over the nodes, and scores each node with a clipped compatibility.
//! Masking is applied after the clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdpha_nn::{Tape, Tensor, Var};

use crate::encoder::{embeddings, encode, EncodedBatch, Embeddings};
use crate::env::{route_time, State};
use crate::error::{PdpError, Result};
use crate::instances::Instance;
use crate::model::PolicyModel;

/// Logit given to blocked nodes.
pub const MASK_LOGIT: f64 = -1e18;

/// Lanes decoded together when best-of-N sampling a single instance.
pub const MAX_SAMPLE_LANES: usize = 2048;

/// Chooses the next node of each lane from its action probabilities.
pub trait ActionSelector {
    fn select(&mut self, lane: usize, step: usize, probs: &[f64]) -> usize;
}

/// Highest probability; ties go to the lowest index.
#[derive(Clone, Copy, Debug, Default)]
pub struct Greedy;

impl ActionSelector for Greedy {
    fn select(&mut self, _lane: usize, _step: usize, probs: &[f64]) -> usize {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Samples every lane from one shared generator, lane by lane.
#[derive(Debug)]
pub struct Sampler<'r, R: Rng> {
    rng: &'r mut R,
}

impl<'r, R: Rng> Sampler<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { rng }
    }
}

impl<R: Rng> ActionSelector for Sampler<'_, R> {
    fn select(&mut self, _lane: usize, _step: usize, probs: &[f64]) -> usize {
        sample_index(probs, self.rng.random())
    }
}

/// Independent ChaCha8 stream per lane, so that lane `k` draws the same
/// numbers whatever the number of lanes decoded alongside it.
#[derive(Clone, Debug)]
pub struct LaneSampler {
    rngs: Vec<ChaCha8Rng>,
}

impl LaneSampler {
    /// Streams `first..first + lanes` of `seed`; lane `i` of a decode call
    /// uses stream `first + i`.
    pub fn new(seed: u64, first: usize, lanes: usize) -> Self {
        let rngs = (first..first + lanes)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(s as u64);
                rng
            })
            .collect();
        Self { rngs }
    }
}

impl ActionSelector for LaneSampler {
    fn select(&mut self, lane: usize, _step: usize, probs: &[f64]) -> usize {
        sample_index(probs, self.rngs[lane].random())
    }
}

/// Replays fixed routes, one per lane.
#[derive(Clone, Copy, Debug)]
pub struct Forced<'a> {
    routes: &'a [Vec<usize>],
}

impl<'a> Forced<'a> {
    pub fn new(routes: &'a [Vec<usize>]) -> Self {
        Self { routes }
    }
}

impl ActionSelector for Forced<'_> {
    fn select(&mut self, lane: usize, step: usize, _probs: &[f64]) -> usize {
        self.routes[lane][step]
    }
}

/// Inverse-CDF draw; never returns a zero-probability index.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

/// A completed route with its log-likelihood under the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub perm: Vec<usize>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    pub objective: f64,
}

pub struct DecodeOutput {
    /// Lane-major: lane `b * S + s` is sample `s` of instance `b`.
    pub rollouts: Vec<Rollout>,
    /// `[B * S]` route log-likelihoods, only on a recording tape.
    pub log_probs: Option<Var>,
}

/// Per-batch decoder tensors that do not depend on the step.
struct Context {
    batch: usize,
    samples: usize,
    nodes_n: usize,
    /// Node rows of every instance followed by the start placeholder.
    table: Var,
    graph_lanes: Var,
    glimpse_k: Vec<Var>,
    glimpse_v: Vec<Var>,
    final_k: Var,
}

impl Context {
    fn new(tape: &mut Tape, model: &PolicyModel, enc: &EncodedBatch, samples: usize) -> Result<Self> {
        let cfg = model.config().encoder;
        let (d, dk) = (cfg.d_h, cfg.d_k());
        let store = model.params();
        let p = &model.decoder;
        let nodes_n = 2 * enc.n + 1;
        let w_gk = tape.param(store, p.glimpse_k);
        let w_gv = tape.param(store, p.glimpse_v);
        let w_k = tape.param(store, p.w_k);
        let gk = tape.matmul(enc.nodes, w_gk)?;
        let gv = tape.matmul(enc.nodes, w_gv)?;
        let final_k = tape.matmul(enc.nodes, w_k)?;
        let mut glimpse_k = Vec::with_capacity(cfg.heads);
        let mut glimpse_v = Vec::with_capacity(cfg.heads);
        for m in 0..cfg.heads {
            glimpse_k.push(tape.slice(gk, 2, m * dk, dk)?);
            glimpse_v.push(tape.slice(gv, 2, m * dk, dk)?);
        }
        let flat = tape.reshape(enc.nodes, vec![enc.batch * nodes_n, d])?;
        let placeholder = tape.param(store, p.placeholder);
        let placeholder = tape.reshape(placeholder, vec![1, d])?;
        let table = tape.concat(&[flat, placeholder], 0)?;
        let lane_rows: Vec<usize> = (0..enc.batch).flat_map(|b| std::iter::repeat_n(b, samples)).collect();
        let graph_lanes = tape.gather_rows(enc.graph, lane_rows)?;
        Ok(Self {
            batch: enc.batch,
            samples,
            nodes_n,
            table,
            graph_lanes,
            glimpse_k,
            glimpse_v,
            final_k,
        })
    }

    fn lanes(&self) -> usize {
        self.batch * self.samples
    }

    fn placeholder_row(&self) -> usize {
        self.batch * self.nodes_n
    }

    /// Clipped logits `[B, S, N]` before masking, and masked log-probabilities
    /// `[B * S, N]`. `last_rows` indexes `table`; `blocked` is lane-major.
    fn step(&self, tape: &mut Tape, model: &PolicyModel, last_rows: Vec<usize>, blocked: Vec<bool>) -> Result<(Var, Var)> {
        let cfg = model.config();
        let (d, dk, heads) = (cfg.encoder.d_h, cfg.encoder.d_k(), cfg.encoder.heads);
        let scale = 1.0 / (dk as f64).sqrt();
        let store = model.params();
        let p = &model.decoder;
        let (b, s, nodes) = (self.batch, self.samples, self.nodes_n);

        let last = tape.gather_rows(self.table, last_rows)?;
        let context = tape.concat(&[self.graph_lanes, last], 1)?;
        let w_gq = tape.param(store, p.glimpse_q);
        let q = tape.matmul(context, w_gq)?;
        let q = tape.reshape(q, vec![b, s, d])?;
        let mut head_out = Vec::with_capacity(heads);
        for m in 0..heads {
            let qm = tape.slice(q, 2, m * dk, dk)?;
            let u = tape.batch_matmul(qm, self.glimpse_k[m], true)?;
            let u = tape.scale(u, scale)?;
            let u = tape.mask_fill(u, blocked.clone(), MASK_LOGIT)?;
            let a = tape.softmax(u)?;
            head_out.push(tape.batch_matmul(a, self.glimpse_v[m], false)?);
        }
        let glimpse = tape.concat(&head_out, 2)?;
        let w_go = tape.param(store, p.glimpse_o);
        let glimpse = tape.matmul(glimpse, w_go)?;
        let w_q = tape.param(store, p.w_q);
        let q = tape.matmul(glimpse, w_q)?;
        let score = tape.batch_matmul(q, self.final_k, true)?;
        let score = tape.scale(score, scale)?;
        let score = tape.tanh(score)?;
        let clipped = tape.scale(score, cfg.decoder.clip)?;
        let masked = tape.mask_fill(clipped, blocked, MASK_LOGIT)?;
        let log_probs = tape.log_softmax(masked)?;
        let log_probs = tape.reshape(log_probs, vec![b * s, nodes])?;
        Ok((clipped, log_probs))
    }
}

/// Decodes `samples` routes per encoded instance. On a recording tape the
/// summed log-likelihood of each route is returned as a differentiable var.
pub fn decode(
    tape: &mut Tape,
    model: &PolicyModel,
    instances: &[Instance],
    enc: &EncodedBatch,
    samples: usize,
    selector: &mut dyn ActionSelector,
) -> Result<DecodeOutput> {
    if instances.len() != enc.batch || instances.iter().any(|i| i.n() != enc.n) {
        return Err(PdpError::InvalidConfig("instances do not match the encoded batch".into()));
    }
    if samples == 0 {
        return Err(PdpError::InvalidConfig("at least one sample per instance is required".into()));
    }
    let ctx = Context::new(tape, model, enc, samples)?;
    let lanes = ctx.lanes();
    let nodes = ctx.nodes_n;
    let mut states: Vec<State> = (0..lanes).map(|l| State::initial(&instances[l / samples])).collect();
    let mut step_lp = vec![Vec::with_capacity(2 * enc.n); lanes];
    let mut total: Option<Var> = None;
    let mark = tape.len();
    let mut probs = vec![0.0; nodes];
    for t in 0..2 * enc.n {
        let mut blocked = vec![true; lanes * nodes];
        let mut last_rows = Vec::with_capacity(lanes);
        for (l, state) in states.iter().enumerate() {
            state.write_blocked(&mut blocked[l * nodes..(l + 1) * nodes]);
            last_rows.push(if t == 0 {
                ctx.placeholder_row()
            } else {
                (l / samples) * nodes + state.last()
            });
        }
        let (_, log_probs) = ctx.step(tape, model, last_rows, blocked)?;
        let mut actions = Vec::with_capacity(lanes);
        {
            let values = tape.value(log_probs);
            for (l, state) in states.iter_mut().enumerate() {
                let row = values.row(l);
                for (p, &lp) in probs.iter_mut().zip(row) {
                    *p = lp.exp();
                }
                let a = selector.select(l, t, &probs);
                state.advance(a)?;
                step_lp[l].push(row[a]);
                actions.push(a);
            }
        }
        if tape.is_recording() {
            let picked = tape.pick(log_probs, actions)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, picked)?,
                None => picked,
            });
        } else {
            tape.truncate(mark);
        }
    }
    let rollouts = states
        .into_iter()
        .zip(step_lp)
        .map(|(state, step_log_probs)| Rollout {
            objective: route_time(state.instance(), state.prefix()),
            perm: state.prefix().to_vec(),
            log_prob: step_log_probs.iter().sum(),
            step_log_probs,
        })
        .collect();
    Ok(DecodeOutput { rollouts, log_probs: total })
}

fn single_step(emb: &Embeddings, model: &PolicyModel, state: &State) -> Result<(Vec<f64>, Vec<f64>)> {
    if state.is_complete() {
        return Err(PdpError::RouteComplete);
    }
    if state.instance().n() != emb.n() {
        return Err(PdpError::InvalidConfig("state and embeddings disagree on n".into()));
    }
    let mut tape = Tape::inference();
    let enc = emb.to_batch(&mut tape)?;
    let ctx = Context::new(&mut tape, model, &enc, 1)?;
    let mut blocked = vec![true; ctx.nodes_n];
    state.write_blocked(&mut blocked);
    let last = if state.step_count() == 0 { ctx.placeholder_row() } else { state.last() };
    let (clipped, log_probs) = ctx.step(&mut tape, model, vec![last], blocked)?;
    let clipped = tape.value(clipped).data().to_vec();
    let probs = tape.value(log_probs).data().iter().map(|lp| lp.exp()).collect();
    Ok((clipped, probs))
}

/// Next-node distribution in `state`; blocked nodes get probability zero.
pub fn step_probabilities(model: &PolicyModel, emb: &Embeddings, state: &State) -> Result<Vec<f64>> {
    Ok(single_step(emb, model, state)?.1)
}

/// Clipped compatibilities of every node in `state`, before masking.
pub fn step_logits(model: &PolicyModel, emb: &Embeddings, state: &State) -> Result<Vec<f64>> {
    Ok(single_step(emb, model, state)?.0)
}

fn rollout_one(model: &PolicyModel, inst: &Instance, emb: &Embeddings, selector: &mut dyn ActionSelector) -> Result<Rollout> {
    if inst.n() != emb.n() {
        return Err(PdpError::InvalidConfig("instance and embeddings disagree on n".into()));
    }
    let mut tape = Tape::inference();
    let enc = emb.to_batch(&mut tape)?;
    let out = decode(&mut tape, model, std::slice::from_ref(inst), &enc, 1, selector)?;
    Ok(out.rollouts.into_iter().next().expect("one lane"))
}

/// Route built by always taking the most likely node.
pub fn rollout_greedy(model: &PolicyModel, inst: &Instance, emb: &Embeddings) -> Result<Rollout> {
    rollout_one(model, inst, emb, &mut Greedy)
}

/// Route sampled from the policy.
pub fn rollout_sample<R: Rng>(model: &PolicyModel, inst: &Instance, emb: &Embeddings, rng: &mut R) -> Result<Rollout> {
    rollout_one(model, inst, emb, &mut Sampler::new(rng))
}

/// Best of `samples` sampled routes (ties keep the earliest sample). Sample
/// `k` comes from stream `k` of `seed`, so the sample sets are nested in
/// `samples`, and a single sample matches [`rollout_sample`] driven by
/// `ChaCha8Rng::seed_from_u64(seed)`.
pub fn solve_sampling(model: &PolicyModel, inst: &Instance, samples: usize, seed: u64) -> Result<Rollout> {
    let emb = embeddings(model, inst)?;
    best_of_samples(model, inst, &emb, samples, seed)
}

/// Best of `samples` routes for `inst` from precomputed embeddings; see
/// [`solve_sampling`].
pub fn best_of_samples(model: &PolicyModel, inst: &Instance, emb: &Embeddings, samples: usize, seed: u64) -> Result<Rollout> {
    if samples == 0 {
        return Err(PdpError::InvalidConfig("at least one sample is required".into()));
    }
    let mut best: Option<Rollout> = None;
    let mut first = 0;
    while first < samples {
        let lanes = MAX_SAMPLE_LANES.min(samples - first);
        let mut tape = Tape::inference();
        let enc = emb.to_batch(&mut tape)?;
        let mut sampler = LaneSampler::new(seed, first, lanes);
        let out = decode(&mut tape, model, std::slice::from_ref(inst), &enc, lanes, &mut sampler)?;
        for r in out.rollouts {
            if best.as_ref().is_none_or(|b| r.objective < b.objective) {
                best = Some(r);
            }
        }
        first += lanes;
    }
    Ok(best.expect("samples > 0"))
}

/// Greedy routes for many instances, encoded `batch_size` at a time so that
/// normalization statistics come from batches like those seen in training.
pub fn greedy_routes(model: &PolicyModel, instances: &[Instance], batch_size: usize) -> Result<Vec<Rollout>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        out.extend(greedy_chunk(model, chunk)?);
    }
    Ok(out)
}

/// Greedy routes for one encoder batch.
pub fn greedy_chunk(model: &PolicyModel, chunk: &[Instance]) -> Result<Vec<Rollout>> {
    let mut tape = Tape::inference();
    let enc = encode(&mut tape, model, chunk)?;
    Ok(decode(&mut tape, model, chunk, &enc, 1, &mut Greedy)?.rollouts)
}

/// Node embeddings of every instance of one encoder batch.
pub fn encode_chunk(model: &PolicyModel, chunk: &[Instance]) -> Result<Vec<Embeddings>> {
    let mut tape = Tape::inference();
    let enc = encode(&mut tape, model, chunk)?;
    let nodes = tape.value(enc.nodes);
    let graph = tape.value(enc.graph);
    let (rows, d) = (nodes.shape()[1], nodes.shape()[2]);
    (0..chunk.len())
        .map(|b| {
            Ok(Embeddings {
                nodes: Tensor::new(vec![rows, d], nodes.data()[b * rows * d..(b + 1) * rows * d].to_vec())?,
                graph: Tensor::new(vec![d], graph.row(b).to_vec())?,
            })
        })
        .collect()
}

/// Best-of-`samples` routes for many instances; instance `k` uses
/// `seeds[k]`. Embeddings come from `batch_size`-sized encoder batches.
pub fn sampling_routes(model: &PolicyModel, instances: &[Instance], batch_size: usize, samples: usize, seeds: &[u64]) -> Result<Vec<Rollout>> {
    if seeds.len() != instances.len() {
        return Err(PdpError::InvalidConfig("one seed per instance is required".into()));
    }
    let mut out = Vec::with_capacity(instances.len());
    let bs = batch_size.max(1);
    for (chunk, chunk_seeds) in instances.chunks(bs).zip(seeds.chunks(bs)) {
        let embs = encode_chunk(model, chunk)?;
        for ((inst, emb), &seed) in chunk.iter().zip(&embs).zip(chunk_seeds) {
            out.push(best_of_samples(model, inst, emb, samples, seed)?);
        }
    }
    Ok(out)
}
