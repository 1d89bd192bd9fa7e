//! One processor block: directional message passing over sampled edges
//! followed by query-projected global attention, wrapped in a pre-norm
//! residual structure with multi-head support.

use crate::encoder::{BoundMlp, Mlp};
use crate::error::{err, Result};
use crate::mesh::DirectedEdgeSet;
use crate::real::{r, Real};
use crate::rng::Rng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;
use alloc::sync::Arc;
use alloc::string::String;
use alloc::vec::Vec;

pub const LN_EPS: f64 = 1e-5;

/// Edge index shared across blocks of one forward pass.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub senders: Arc<Vec<u32>>,
    pub receivers: Arc<Vec<u32>>,
    pub n_nodes: usize,
}

impl GraphIndex {
    pub fn from_edges(edges: &DirectedEdgeSet, n_nodes: usize) -> GraphIndex {
        GraphIndex {
            senders: Arc::new(edges.senders().to_vec()),
            receivers: Arc::new(edges.receivers().to_vec()),
            n_nodes,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.senders.len()
    }
}

/// Learnable state of one block.
///
/// Widths: the edge update sees (e, v_i, v_j) where node rows carry the
/// positional encoding, so its input is 3C + 2s for s encoding columns per
/// node; the node update sees (v_k, m_k), input 2C + s. The latent width C
/// must be even (the edge feature splits into directional halves) and
/// divisible by the head count.
#[derive(Clone, Debug)]
pub struct BlockParams<R> {
    pub edge_mlp: Mlp<R>,
    pub node_mlp: Mlp<R>,
    pub ffn: Mlp<R>,
    pub ln_gain: Tensor<R>,
    pub ln_bias: Tensor<R>,
    /// [M, C] learnable queries, standard-normal at initialization.
    pub queries: Tensor<R>,
    pub heads: usize,
}

impl<R: Real> BlockParams<R> {
    pub fn init(
        latent: usize,
        n_queries: usize,
        heads: usize,
        spe_cols: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Result<BlockParams<R>> {
        if latent % 2 != 0 {
            return Err(err!(Config, "latent width {latent} must be even"));
        }
        if heads == 0 || latent % heads != 0 {
            return Err(err!(Config, "latent {latent} not divisible by {heads} heads"));
        }
        if n_queries < 1 {
            return Err(err!(Config, "need at least one query"));
        }
        let c = latent;
        let edge_in = 3 * c + 2 * spe_cols;
        let node_in = 2 * c + spe_cols;
        Ok(BlockParams {
            edge_mlp: Mlp::init(&[edge_in, c, c, c], act, 1.0, rng),
            node_mlp: Mlp::init(&[node_in, c, c, c], act, 1.0, rng),
            ffn: Mlp::init(&[c, 2 * c, c], act, 1.0, rng),
            ln_gain: Tensor::filled(1, c, R::one()),
            ln_bias: Tensor::zeros(1, c),
            queries: Tensor::from_fn(n_queries, c, |_, _| r::<R>(rng.normal())),
            heads,
        })
    }

    pub fn latent(&self) -> usize {
        self.ln_gain.cols()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.rows()
    }

    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> BoundBlock {
        BoundBlock {
            edge_mlp: self.edge_mlp.bind(tape, trainable),
            node_mlp: self.node_mlp.bind(tape, trainable),
            ffn: self.ffn.bind(tape, trainable),
            ln_gain: tape.leaf(self.ln_gain.clone(), trainable),
            ln_bias: tape.leaf(self.ln_bias.clone(), trainable),
            queries: tape.leaf(self.queries.clone(), trainable),
            heads: self.heads,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<R>)) {
        self.edge_mlp.visit(&alloc::format!("{prefix}.edge"), f);
        self.node_mlp.visit(&alloc::format!("{prefix}.node"), f);
        self.ffn.visit(&alloc::format!("{prefix}.ffn"), f);
        f(alloc::format!("{prefix}.ln_gain"), &self.ln_gain);
        f(alloc::format!("{prefix}.ln_bias"), &self.ln_bias);
        f(alloc::format!("{prefix}.queries"), &self.queries);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<R>)) {
        self.edge_mlp.visit_mut(&alloc::format!("{prefix}.edge"), f);
        self.node_mlp.visit_mut(&alloc::format!("{prefix}.node"), f);
        self.ffn.visit_mut(&alloc::format!("{prefix}.ffn"), f);
        f(alloc::format!("{prefix}.ln_gain"), &mut self.ln_gain);
        f(alloc::format!("{prefix}.ln_bias"), &mut self.ln_bias);
        f(alloc::format!("{prefix}.queries"), &mut self.queries);
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub edge_mlp: BoundMlp,
    pub node_mlp: BoundMlp,
    pub ffn: BoundMlp,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub queries: Var,
    pub heads: usize,
}

/// Directional message passing.
///
/// Edge update: e <- e + MLP(e, v_i, v_j). The updated edge feature splits
/// into an outgoing half (aggregated at the sender) and an incoming half
/// (aggregated at the receiver); means over empty neighborhoods are zero.
/// Node update: v <- v + MLP(v, [out_agg, in_agg]), applied to the latent
/// part only (the positional columns pass through unchanged outside).
///
/// `v_aug` is [N, C+s] (latent plus positional columns), `e` is [N_e, C].
/// Returns (V' [N,C], E' [N_e,C]).
pub fn message_pass<R: Real>(
    tape: &mut Tape<R>,
    bound: &BoundBlock,
    v_aug: Var,
    e: Var,
    index: &GraphIndex,
    latent: usize,
) -> Result<(Var, Var)> {
    if latent % 2 != 0 {
        return Err(err!(Config, "latent width {latent} must be even"));
    }
    let n = index.n_nodes;
    let vs = tape.gather_rows(v_aug, index.senders.clone())?;
    let vr = tape.gather_rows(v_aug, index.receivers.clone())?;
    let vv = tape.concat_cols(vs, vr)?;
    let evv = tape.concat_cols(e, vv)?;
    let de = bound.edge_mlp.forward(tape, evv)?;
    let e_new = tape.add(e, de)?;

    let (half_out, half_in) = tape.split_half(e_new)?;
    let agg_out = tape.segment_mean(half_out, index.senders.clone(), n)?;
    let agg_in = tape.segment_mean(half_in, index.receivers.clone(), n)?;
    let message = tape.concat_cols(agg_out, agg_in)?;

    let vm = tape.concat_cols(v_aug, message)?;
    let dv = bound.node_mlp.forward(tape, vm)?;
    let v_latent = tape.slice_cols(v_aug, 0, latent)?;
    let v_new = tape.add(v_latent, dv)?;
    Ok((v_new, e_new))
}

/// Three-stage query-projected attention.
///
/// W1 projects the N node tokens onto M learnable queries, W2 refines inside
/// the query subspace, W3 reprojects onto the nodes. Returns the output and
/// the stage-one attention map (softmax(Q W0^T / sqrt(C)), shape [M, N]).
///
/// `w1_gain` is a test hook: scaling W1 by zero forces W2 and with it the
/// whole branch output to zero, which is how the attention path is ablated.
pub fn projection_attention_gated<R: Real>(
    tape: &mut Tape<R>,
    w0: Var,
    queries: Var,
    scale: R,
    w1_gain: Option<R>,
) -> Result<(Var, Var)> {
    let logits1 = tape.matmul_nt(queries, w0)?;
    let logits1 = tape.scale(logits1, scale);
    let map = tape.softmax_rows(logits1)?;
    let mut w1 = tape.matmul(map, w0)?;
    if let Some(gain) = w1_gain {
        w1 = tape.scale(w1, gain);
    }

    let logits2 = tape.matmul_nt(w1, w1)?;
    let logits2 = tape.scale(logits2, scale);
    let a2 = tape.softmax_rows(logits2)?;
    let w2 = tape.matmul(a2, w1)?;

    let logits3 = tape.matmul_nt(w0, w2)?;
    let logits3 = tape.scale(logits3, scale);
    let a3 = tape.softmax_rows(logits3)?;
    let w3 = tape.matmul(a3, w2)?;
    Ok((w3, map))
}

pub fn projection_attention<R: Real>(
    tape: &mut Tape<R>,
    w0: Var,
    queries: Var,
    scale: R,
) -> Result<(Var, Var)> {
    projection_attention_gated(tape, w0, queries, scale, None)
}

/// Column-sliced multi-head wrapper: each head runs projection attention on
/// its C/H-wide slice of both the tokens and the queries, with temperature
/// sqrt(C/H). One head reduces exactly to `projection_attention`.
pub fn multi_head_attention<R: Real>(
    tape: &mut Tape<R>,
    w0: Var,
    queries: Var,
    heads: usize,
    w1_gain: Option<R>,
) -> Result<(Var, Vec<Var>)> {
    let c = tape.value(w0).cols();
    if heads == 0 || c % heads != 0 {
        return Err(err!(Config, "width {c} not divisible by {heads} heads"));
    }
    let hw = c / heads;
    let scale = R::one() / r::<R>(hw as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let w0_h = tape.slice_cols(w0, h * hw, (h + 1) * hw)?;
        let q_h = tape.slice_cols(queries, h * hw, (h + 1) * hw)?;
        let (o, m) = projection_attention_gated(tape, w0_h, q_h, scale, w1_gain)?;
        outs.push(o);
        maps.push(m);
    }
    let mut out = outs[0];
    for &o in &outs[1..] {
        out = tape.concat_cols(out, o)?;
    }
    Ok((out, maps))
}

pub struct BlockOutput {
    pub v: Var,
    pub e: Var,
    /// Stage-one attention map per head, each [M, N].
    pub attention: Vec<Var>,
}

/// Full block: message passing, attention with residual, pre-norm FFN.
/// V1 = W0 + W3; V_out = V1 + FFN(LN(V1)).
pub fn gto_block<R: Real>(
    tape: &mut Tape<R>,
    bound: &BoundBlock,
    v_aug: Var,
    e: Var,
    index: &GraphIndex,
    latent: usize,
    w1_gain: Option<R>,
) -> Result<BlockOutput> {
    let (w0, e_out) = message_pass(tape, bound, v_aug, e, index, latent)?;
    let (w3, attention) = multi_head_attention(tape, w0, bound.queries, bound.heads, w1_gain)?;
    let v1 = tape.add(w0, w3)?;
    let normed = tape.layer_norm(v1, bound.ln_gain, bound.ln_bias, r::<R>(LN_EPS))?;
    let ffn_out = bound.ffn.forward(tape, normed)?;
    let v_out = tape.add(v1, ffn_out)?;
    Ok(BlockOutput {
        v: v_out,
        e: e_out,
        attention,
    })
}
